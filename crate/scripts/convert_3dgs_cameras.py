#!/usr/bin/env python3
"""Convert the cameras.json written by 3D Gaussian Splatting training into
the record format read by gsseg.

3DGS stores, per image, the camera center ("position") and the
camera-to-world rotation ("rotation", row-major 3x3). gsseg wants the
world-to-camera matrix, so R_wc = R^T and t_wc = -R^T * position. The
principal point is assumed to be the image center, as in 3DGS.

Usage: convert_3dgs_cameras.py IN.json OUT.json [--scale S]
--scale divides width, height and focal lengths (e.g. 4 for images_4).
"""
import argparse
import json


def convert(record, scale):
    r = record["rotation"]
    c = record["position"]
    rt = [[r[j][i] for j in range(3)] for i in range(3)]
    t = [-sum(rt[i][k] * c[k] for k in range(3)) for i in range(3)]
    width = round(record["width"] / scale)
    height = round(record["height"] / scale)
    return {
        "id": record["id"],
        "width": width,
        "height": height,
        "fx": record["fx"] / scale,
        "fy": record["fy"] / scale,
        "cx": width / 2.0,
        "cy": height / 2.0,
        "world_to_camera": rt[0] + [t[0]] + rt[1] + [t[1]] + rt[2] + [t[2]] + [0.0, 0.0, 0.0, 1.0],
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("input")
    parser.add_argument("output")
    parser.add_argument("--scale", type=float, default=1.0)
    args = parser.parse_args()
    with open(args.input) as f:
        records = json.load(f)
    out = [convert(r, args.scale) for r in records]
    with open(args.output, "w") as f:
        json.dump(out, f, indent=2)
    names = {r["id"]: r.get("img_name", "") for r in records}
    print(f"wrote {len(out)} cameras; masks must be named <id>.png or <id:04>.png")
    for i in sorted(names)[:3]:
        print(f"  id {i} <- {names[i]}")


if __name__ == "__main__":
    main()
