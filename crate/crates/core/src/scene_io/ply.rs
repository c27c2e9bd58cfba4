use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{default_class_names, logit, sigmoid, Gaussian, Scene, QUATERNION_NORM_TOLERANCE};
use crate::error::{Error, Result};

const CLASS_COMMENT: &str = "class_name";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => f64::from(b[0] as i8),
            ScalarType::U8 => f64::from(b[0]),
            ScalarType::I16 => f64::from(LittleEndian::read_i16(b)),
            ScalarType::U16 => f64::from(LittleEndian::read_u16(b)),
            ScalarType::I32 => f64::from(LittleEndian::read_i32(b)),
            ScalarType::U32 => f64::from(LittleEndian::read_u32(b)),
            ScalarType::F32 => f64::from(LittleEndian::read_f32(b)),
            ScalarType::F64 => LittleEndian::read_f64(b),
        }
    }
}

#[derive(Debug)]
struct Property {
    name: String,
    ty: ScalarType,
    offset: usize,
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
    stride: usize,
}

#[derive(Debug)]
struct Header {
    elements: Vec<Element>,
    class_names: Vec<(usize, String)>,
    body_offset: usize,
}

impl Header {
    fn vertex(&self) -> Result<(usize, &Element)> {
        let mut offset = 0;
        for e in &self.elements {
            if e.name == "vertex" {
                return Ok((offset, e));
            }
            offset += e.count * e.stride;
        }
        Err(Error::MalformedHeader("no vertex element".into()))
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let malformed = |msg: &str| Error::MalformedHeader(msg.to_string());
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| malformed("missing end_header"))?;
    let mut body_offset = end + END.len();
    match bytes.get(body_offset) {
        Some(b'\n') => body_offset += 1,
        Some(b'\r') if bytes.get(body_offset + 1) == Some(&b'\n') => body_offset += 2,
        _ => return Err(malformed("end_header must be followed by a newline")),
    }
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| malformed("header is not UTF-8"))?;

    let mut lines = text.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(malformed("missing 'ply' magic"));
    }
    let mut format_seen = false;
    let mut elements: Vec<Element> = Vec::new();
    let mut class_names = Vec::new();
    for line in lines {
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            None => continue,
            Some("format") => match (tokens.next(), tokens.next()) {
                (Some("binary_little_endian"), Some("1.0")) => format_seen = true,
                (Some(other), _) => {
                    return Err(Error::MalformedHeader(format!(
                        "unsupported format '{other}', expected binary_little_endian 1.0"
                    )))
                }
                _ => return Err(malformed("incomplete format line")),
            },
            Some("comment") | Some("obj_info") => {
                if tokens.next() == Some(CLASS_COMMENT) {
                    let index = tokens
                        .next()
                        .and_then(|t| t.parse::<usize>().ok())
                        .ok_or_else(|| malformed("class_name comment without index"))?;
                    let name = tokens.collect::<Vec<_>>().join(" ");
                    class_names.push((index, name));
                }
            }
            Some("element") => {
                let name = tokens.next().ok_or_else(|| malformed("element without name"))?;
                let count = tokens
                    .next()
                    .and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| malformed("element without a valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    stride: 0,
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before any element"))?;
                let ty = tokens.next().ok_or_else(|| malformed("property without type"))?;
                if ty == "list" {
                    return Err(Error::MalformedHeader(format!(
                        "list properties are not supported (element '{}')",
                        element.name
                    )));
                }
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| Error::MalformedHeader(format!("unknown property type '{ty}'")))?;
                let name = tokens.next().ok_or_else(|| malformed("property without name"))?;
                element.properties.push(Property {
                    name: name.to_string(),
                    ty,
                    offset: element.stride,
                });
                element.stride += ty.size();
            }
            Some(other) => return Err(Error::MalformedHeader(format!("unexpected header keyword '{other}'"))),
        }
    }
    if !format_seen {
        return Err(malformed("missing format line"));
    }
    Ok(Header {
        elements,
        class_names,
        body_offset,
    })
}

/// Collects `prefix0, prefix1, ...` property positions; they must be contiguous from 0.
fn indexed_properties(element: &Element, prefix: &str) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = element
        .properties
        .iter()
        .enumerate()
        .filter_map(|(pos, p)| {
            p.name
                .strip_prefix(prefix)
                .and_then(|rest| rest.parse::<usize>().ok())
                .map(|i| (i, pos))
        })
        .collect();
    found.sort_unstable();
    for (expected, &(i, _)) in found.iter().enumerate() {
        if i != expected {
            return Err(Error::MalformedHeader(format!(
                "properties {prefix}* are not numbered contiguously from 0"
            )));
        }
    }
    Ok(found.into_iter().map(|(_, pos)| pos).collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Number of `obj_code_*` properties stored in a scene file (0 for a plain
/// pre-trained checkpoint).
pub fn probe_code_count(path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let header = parse_header(&bytes)?;
    let (_, vertex) = header.vertex()?;
    Ok(indexed_properties(vertex, "obj_code_")?.len())
}

/// Loads a Gaussian scene with `classes` semantic classes.
///
/// Opacity and scale are activated (sigmoid, exp) and quaternions normalized.
/// When the file carries no object codes every code starts at zero, i.e. a
/// uniform class distribution.
pub fn load_scene(path: impl AsRef<Path>, classes: usize) -> Result<Scene> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    parse_scene(&bytes, classes)
}

fn parse_scene(bytes: &[u8], classes: usize) -> Result<Scene> {
    let header = parse_header(bytes)?;
    let (skip, vertex) = header.vertex()?;

    let position = |name: &str| -> Result<usize> {
        vertex
            .properties
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::MalformedHeader(format!("missing vertex property '{name}'")))
    };
    let lookup = |names: &[&str]| -> Result<Vec<usize>> { names.iter().map(|n| position(n)).collect() };
    let mean_at = lookup(&["x", "y", "z"])?;
    let dc_at = lookup(&["f_dc_0", "f_dc_1", "f_dc_2"])?;
    let opacity_at = position("opacity")?;
    let scale_at = lookup(&["scale_0", "scale_1", "scale_2"])?;
    let rot_at = lookup(&["rot_0", "rot_1", "rot_2", "rot_3"])?;
    let rest_at = indexed_properties(vertex, "f_rest_")?;
    let code_at = indexed_properties(vertex, "obj_code_")?;

    if !code_at.is_empty() && code_at.len() != classes {
        return Err(Error::ClassCountMismatch {
            expected: classes,
            found: code_at.len(),
        });
    }

    let start = header.body_offset + skip;
    let expected = vertex.count * vertex.stride;
    let available = bytes.len().saturating_sub(start);
    if available < expected {
        return Err(Error::PropertyCountMismatch {
            expected,
            found: available,
        });
    }
    let body = &bytes[start..start + expected];

    let mut gaussians = Vec::with_capacity(vertex.count);
    for (index, row) in body.chunks_exact(vertex.stride.max(1)).take(vertex.count).enumerate() {
        let value = |pos: usize| {
            let p = &vertex.properties[pos];
            p.ty.read(&row[p.offset..p.offset + p.ty.size()])
        };
        let vec3 = |at: &[usize]| Vector3::new(value(at[0]), value(at[1]), value(at[2]));

        let q = Quaternion::new(value(rot_at[0]), value(rot_at[1]), value(rot_at[2]), value(rot_at[3]));
        let norm = q.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::InvalidGaussian {
                index,
                reason: "degenerate rotation quaternion".into(),
            });
        }
        let object_code = if code_at.is_empty() {
            vec![0.0; classes]
        } else {
            code_at.iter().map(|&p| value(p)).collect()
        };
        gaussians.push(Gaussian {
            mean: vec3(&mean_at),
            scale: vec3(&scale_at).map(f64::exp),
            rotation: UnitQuaternion::from_quaternion(q),
            opacity: sigmoid(value(opacity_at)),
            color_dc: vec3(&dc_at),
            sh_rest: rest_at.iter().map(|&p| value(p)).collect(),
            object_code,
        });
        debug_assert!((gaussians[index].rotation.norm() - 1.0).abs() <= QUATERNION_NORM_TOLERANCE);
    }

    let mut class_names = default_class_names(classes);
    let mut named: Vec<_> = header.class_names.into_iter().filter(|(i, _)| *i < classes).collect();
    named.sort_by_key(|(i, _)| *i);
    for (i, name) in named {
        class_names[i] = name;
    }
    Scene::new(gaussians, class_names)
}

/// Writes the scene in the standard layout followed by `obj_code_0..K-1`.
///
/// Class names ride along as `comment class_name <i> <name>` header lines.
pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_scene(scene, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_scene(scene: &Scene, out: &mut impl Write) -> std::io::Result<()> {
    let rest = scene.gaussians.first().map_or(0, |g| g.sh_rest.len());
    if scene.gaussians.iter().any(|g| g.sh_rest.len() != rest) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "gaussians carry differing numbers of f_rest coefficients",
        ));
    }

    writeln!(out, "ply")?;
    writeln!(out, "format binary_little_endian 1.0")?;
    for (i, name) in scene.class_names().iter().enumerate() {
        writeln!(out, "comment {CLASS_COMMENT} {i} {name}")?;
    }
    writeln!(out, "element vertex {}", scene.len())?;
    for name in ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"] {
        writeln!(out, "property float {name}")?;
    }
    for i in 0..rest {
        writeln!(out, "property float f_rest_{i}")?;
    }
    writeln!(out, "property float opacity")?;
    for name in ["scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"] {
        writeln!(out, "property float {name}")?;
    }
    for i in 0..scene.classes() {
        writeln!(out, "property float obj_code_{i}")?;
    }
    writeln!(out, "end_header")?;

    for g in &scene.gaussians {
        let q = g.rotation.quaternion();
        let values = g
            .mean
            .iter()
            .copied()
            .chain([0.0; 3])
            .chain(g.color_dc.iter().copied())
            .chain(g.sh_rest.iter().copied())
            .chain([logit(g.opacity)])
            .chain(g.scale.iter().map(|s| s.ln()))
            .chain([q.w, q.i, q.j, q.k])
            .chain(g.object_code.iter().copied());
        for v in values {
            out.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}
