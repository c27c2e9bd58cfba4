//! Labeled synthetic fixtures and brute-force reference implementations.
//!
//! The references here deliberately avoid the fast paths they check: the
//! render oracle walks the full depth-sorted splat list at every pixel with
//! no tiling, bounding boxes or early termination, and the KNN oracle sorts
//! every candidate.

use nalgebra::{Matrix2, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{project, ProjectionConfig, FOOTPRINT_SIGMAS};
use crate::rasterizer::{render_semantic, ClassMatrix, RasterConfig, SemanticImage, SH_C0};
use crate::scene_io::{default_class_names, Camera, Gaussian, LabelMap, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub center: [f64; 3],
    pub radius: f64,
    pub count: usize,
    pub class_id: u32,
    /// Linear RGB in [0, 1].
    #[serde(default = "default_color")]
    pub color: [f64; 3],
}

fn default_color() -> [f64; 3] {
    [0.7, 0.7, 0.7]
}

/// Cameras evenly spaced on a horizontal circle (world +z is up), all looking
/// at `look_at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub look_at: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Class count; defaults to the largest blob class id plus one.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    pub blobs: Vec<BlobSpec>,
    pub camera_ring: CameraRing,
    pub image_size: [u32; 2],
    #[serde(default = "default_fov")]
    pub fov_y_degrees: f64,
    pub seed: u64,
}

fn default_fov() -> f64 {
    50.0
}

impl SynthSpec {
    /// Two 500-Gaussian blobs of classes 1 and 2 stacked along +z, eight
    /// ring cameras at 128x128.
    pub fn two_blob(seed: u64) -> Self {
        SynthSpec {
            classes: Some(3),
            class_names: Some(vec!["background".into(), "lower".into(), "upper".into()]),
            blobs: vec![
                BlobSpec {
                    center: [0.0, 0.0, -2.0],
                    radius: 1.0,
                    count: 500,
                    class_id: 1,
                    color: [0.9, 0.2, 0.2],
                },
                BlobSpec {
                    center: [0.0, 0.0, 2.0],
                    radius: 1.0,
                    count: 500,
                    class_id: 2,
                    color: [0.2, 0.3, 0.9],
                },
            ],
            camera_ring: CameraRing {
                count: 8,
                radius: 10.0,
                height: 1.0,
                look_at: [0.0, 0.0, 0.0],
            },
            image_size: [128, 128],
            fov_y_degrees: 50.0,
            seed,
        }
    }

    /// Three blobs of classes 1, 2, 3 stacked along +z.
    pub fn three_blob(seed: u64) -> Self {
        let blob = |z: f64, class_id: u32, color: [f64; 3]| BlobSpec {
            center: [0.0, 0.0, z],
            radius: 0.8,
            count: 300,
            class_id,
            color,
        };
        SynthSpec {
            classes: Some(4),
            class_names: Some(vec![
                "background".into(),
                "bottom".into(),
                "middle".into(),
                "top".into(),
            ]),
            blobs: vec![
                blob(-3.0, 1, [0.9, 0.2, 0.2]),
                blob(0.0, 2, [0.2, 0.9, 0.2]),
                blob(3.0, 3, [0.2, 0.3, 0.9]),
            ],
            camera_ring: CameraRing {
                count: 8,
                radius: 13.0,
                height: 1.0,
                look_at: [0.0, 0.0, 0.0],
            },
            image_size: [96, 96],
            fov_y_degrees: 50.0,
            seed,
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes
            .unwrap_or_else(|| self.blobs.iter().map(|b| b.class_id as usize + 1).max().unwrap_or(2))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let k = self.class_count();
        if k < 2 {
            return bad("a fixture needs at least two classes".into());
        }
        if let Some(names) = &self.class_names {
            if names.len() != k {
                return bad(format!("{} class names for {k} classes", names.len()));
            }
        }
        for (i, b) in self.blobs.iter().enumerate() {
            if b.class_id as usize >= k {
                return bad(format!("blob {i} has class {} but only {k} classes exist", b.class_id));
            }
            if b.count == 0 || !(b.radius > 0.0) {
                return bad(format!("blob {i} needs a positive count and radius"));
            }
        }
        if self.camera_ring.count == 0 {
            return bad("the camera ring has no cameras".into());
        }
        if !(self.camera_ring.radius > 0.0) {
            return bad("camera ring radius must be positive".into());
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.fov_y_degrees > 0.0 && self.fov_y_degrees < 180.0) {
            return bad("field of view must lie in (0, 180) degrees".into());
        }
        Ok(())
    }

    /// Camera on the ring's circle at an arbitrary angle and height.
    pub fn ring_camera(&self, angle: f64, height: f64) -> Result<Camera> {
        let target = Vector3::from(self.camera_ring.look_at);
        let eye = target
            + Vector3::new(
                self.camera_ring.radius * angle.cos(),
                self.camera_ring.radius * angle.sin(),
                height,
            );
        Camera::look_at(
            eye,
            target,
            Vector3::z(),
            self.image_size[0],
            self.image_size[1],
            self.fov_y_degrees,
        )
    }

    pub fn ring_cameras(&self) -> Result<Vec<Camera>> {
        let n = self.camera_ring.count;
        (0..n)
            .map(|i| self.ring_camera(std::f64::consts::TAU * i as f64 / n as f64, self.camera_ring.height))
            .collect()
    }

    /// Novel poses: midway between neighboring ring cameras and raised by
    /// 15% of the ring radius, so none coincides with a training view.
    pub fn held_out_cameras(&self, count: usize) -> Result<Vec<Camera>> {
        let n = self.camera_ring.count as f64;
        let height = self.camera_ring.height + 0.15 * self.camera_ring.radius;
        (0..count)
            .map(|i| {
                let angle = std::f64::consts::TAU * (i as f64 * n / count.max(1) as f64 + 0.5) / n;
                self.ring_camera(angle, height)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthView {
    pub id: u32,
    pub camera: Camera,
    pub labels: LabelMap,
}

#[derive(Debug, Clone)]
pub struct SynthFixture {
    /// Scene with uniform (zero) object codes.
    pub scene: Scene,
    /// Planted class of every Gaussian.
    pub planted: Vec<u32>,
    pub views: Vec<SynthView>,
}

fn uniform_in_ball(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let p = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if p.norm_squared() <= 1.0 {
            return p;
        }
    }
}

/// Copy of `scene` whose codes are the exact one-hot vectors of `labels`.
pub fn one_hot_scene(scene: &Scene, labels: &[u32]) -> Scene {
    let mut planted = scene.clone();
    for (g, &l) in planted.gaussians.iter_mut().zip(labels) {
        g.object_code.iter_mut().for_each(|c| *c = 0.0);
        g.object_code[l as usize] = 1.0;
    }
    planted
}

/// Ground-truth label map: blend the one-hot planted codes and take the
/// per-pixel argmax.
pub fn planted_label_map(scene: &Scene, planted: &[u32], camera: &Camera) -> LabelMap {
    let labeled = one_hot_scene(scene, planted);
    let list = project(&labeled, camera, &ProjectionConfig::default());
    let (image, _) = render_semantic(&labeled, &list, false, &RasterConfig::default());
    image.argmax_labels()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthFixture> {
    spec.validate()?;
    let k = spec.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gaussians = Vec::new();
    let mut planted = Vec::new();
    for blob in &spec.blobs {
        let sigma = blob.radius / (blob.count as f64).cbrt();
        let dc = Vector3::from(blob.color).map(|c| (c - 0.5) / SH_C0);
        let center = Vector3::from(blob.center);
        for _ in 0..blob.count {
            let mut g = Gaussian::new(
                center + blob.radius * uniform_in_ball(&mut rng),
                Vector3::repeat(sigma),
                0.9,
                k,
            );
            g.color_dc = dc;
            gaussians.push(g);
            planted.push(blob.class_id);
        }
    }
    let names = spec.class_names.clone().unwrap_or_else(|| default_class_names(k));
    let scene = Scene::new(gaussians, names)?;
    let views = spec
        .ring_cameras()?
        .into_iter()
        .enumerate()
        .map(|(i, camera)| SynthView {
            id: i as u32,
            labels: planted_label_map(&scene, &planted, &camera),
            camera,
        })
        .collect();
    Ok(SynthFixture { scene, planted, views })
}

/// Random scene around the origin with anisotropic, arbitrarily rotated
/// Gaussians, opacities spanning (0, 1] and normally spread object codes.
pub fn random_scene(seed: u64, count: usize, classes: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..count)
        .map(|_| {
            let opacity = if rng.gen_bool(0.15) {
                1.0
            } else {
                rng.gen_range(0.05..1.0)
            };
            let mut g = Gaussian::new(
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                Vector3::new(
                    rng.gen_range(0.03..0.3),
                    rng.gen_range(0.03..0.3),
                    rng.gen_range(0.03..0.3),
                ),
                opacity,
                classes,
            );
            g.rotation = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            g.color_dc = Vector3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            );
            for c in g.object_code.iter_mut() {
                *c = rng.gen_range(-3.0..3.0);
            }
            g
        })
        .collect();
    Scene::new(gaussians, default_class_names(classes)).expect("random scene is valid")
}

/// Camera at a random position on a sphere of radius 4 looking at the origin.
pub fn random_camera(seed: u64, width: u32, height: u32) -> Camera {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    loop {
        let dir = uniform_in_ball(&mut rng);
        let horizontal = (dir.x * dir.x + dir.y * dir.y).sqrt();
        if dir.norm() < 0.2 || horizontal < 0.1 * dir.norm() {
            continue;
        }
        let eye = 4.0 * dir.normalize();
        return Camera::look_at(
            eye,
            Vector3::zeros(),
            Vector3::z(),
            width,
            height,
            rng.gen_range(40.0..70.0),
        )
        .expect("direction is not vertical");
    }
}

/// Direct evaluation of the semantic blend over the full depth-sorted splat
/// list at every pixel. Only the `alpha_max` clamp is shared with the
/// rasterizer.
pub fn oracle_render(scene: &Scene, camera: &Camera, normalize_codes: bool) -> SemanticImage {
    oracle_render_with(
        scene,
        camera,
        normalize_codes,
        &ProjectionConfig::default(),
        crate::rasterizer::ALPHA_MAX,
    )
}

pub fn oracle_render_with(
    scene: &Scene,
    camera: &Camera,
    normalize_codes: bool,
    projection: &ProjectionConfig,
    alpha_max: f64,
) -> SemanticImage {
    let k = scene.classes();
    let values = |g: &Gaussian| -> Vec<f64> {
        if normalize_codes {
            let max = g.object_code.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = g.object_code.iter().map(|o| (o - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        } else {
            g.object_code.clone()
        }
    };
    let mut background = vec![0.0; k];
    background[0] = 1.0;
    let pixels = oracle_blend(scene, camera, projection, alpha_max, k, &background, values);
    let n = camera.pixel_count();
    let mut out = ClassMatrix::zeros(k, n);
    for (p, px) in pixels.iter().enumerate() {
        for (c, &v) in px.iter().enumerate() {
            out.set(c, p, v);
        }
    }
    SemanticImage {
        width: camera.width,
        height: camera.height,
        normalized: normalize_codes,
        values: out,
    }
}

/// Brute-force color render over a black background.
pub fn oracle_render_color(scene: &Scene, camera: &Camera) -> Vec<[f64; 3]> {
    oracle_blend(
        scene,
        camera,
        &ProjectionConfig::default(),
        crate::rasterizer::ALPHA_MAX,
        3,
        &[0.0; 3],
        |g| g.color_dc.iter().map(|c| (0.5 + SH_C0 * c).max(0.0)).collect(),
    )
    .into_iter()
    .map(|p| [p[0], p[1], p[2]])
    .collect()
}

fn oracle_blend(
    scene: &Scene,
    camera: &Camera,
    projection: &ProjectionConfig,
    alpha_max: f64,
    channels: usize,
    background: &[f64],
    values: impl Fn(&Gaussian) -> Vec<f64>,
) -> Vec<Vec<f64>> {
    let list = project(scene, camera, projection);
    // (center, inverse covariance, opacity, blended values)
    type Prepared = (Vector2<f64>, Matrix2<f64>, f64, Vec<f64>);
    let prepared: Vec<Prepared> = list
        .splats
        .iter()
        .map(|s| {
            let inverse = s.cov2d.try_inverse().expect("projected covariance is invertible");
            (
                s.center_px,
                inverse,
                s.opacity,
                values(&scene.gaussians[s.gaussian_index]),
            )
        })
        .collect();
    let cutoff = FOOTPRINT_SIGMAS * FOOTPRINT_SIGMAS;
    let mut out = Vec::with_capacity(camera.pixel_count());
    for y in 0..camera.height {
        for x in 0..camera.width {
            let p = Vector2::new(f64::from(x) + 0.5, f64::from(y) + 0.5);
            let mut acc = vec![0.0; channels];
            let mut transmittance = 1.0;
            for (center, inverse, opacity, v) in &prepared {
                let d = p - center;
                let m = (d.transpose() * inverse * d)[(0, 0)];
                if m > cutoff {
                    continue;
                }
                let alpha = (opacity * (-0.5 * m).exp()).min(alpha_max);
                for (a, vc) in acc.iter_mut().zip(v) {
                    *a += vc * alpha * transmittance;
                }
                transmittance *= 1.0 - alpha;
            }
            for (a, b) in acc.iter_mut().zip(background) {
                *a += transmittance * b;
            }
            out.push(acc);
        }
    }
    out
}

fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Exact k nearest neighbors of `points[query]` among the other points by
/// exhaustive sort; equal distances resolve to the lower index.
pub fn oracle_knn(points: &[[f64; 3]], query: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != query)
        .map(|(i, p)| (squared_distance(&points[query], p), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Mean Euclidean distance from every point to its `k` nearest other points.
pub fn oracle_mean_neighbor_distances(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    (0..points.len())
        .map(|q| {
            let mut d: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != q)
                .map(|(_, p)| squared_distance(&points[q], p).sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            d.iter().take(k).sum::<f64>() / k as f64
        })
        .collect()
}

/// Central difference `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knn_oracle_collinear() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert_eq!(oracle_knn(&pts, 0, 2), vec![1, 2]);
    }

    #[test]
    fn knn_oracle_coincident_ties() {
        let pts = [[1.0, 1.0, 1.0]; 6];
        assert_eq!(oracle_knn(&pts, 2, 3), vec![0, 1, 3]);
    }

    #[test]
    fn empty_scene_oracle_is_background() {
        let scene = Scene::empty(3).unwrap();
        let img = oracle_render(&scene, &random_camera(1, 8, 8), true);
        for p in 0..64 {
            assert_eq!(
                (img.values.get(0, p), img.values.get(1, p), img.values.get(2, p)),
                (1.0, 0.0, 0.0)
            );
        }
    }

    #[test]
    fn single_splat_weight_is_alpha() {
        let mut scene = random_scene(4, 1, 2);
        scene.gaussians[0].object_code = vec![0.0, 1.0];
        scene.gaussians[0].mean = Vector3::zeros();
        let camera = random_camera(2, 24, 24);
        let img = oracle_render(&scene, &camera, false);
        let list = project(&scene, &camera, &ProjectionConfig::default());
        let s = &list.splats[0];
        for y in 0..24 {
            for x in 0..24 {
                let alpha = crate::rasterizer::alpha_at(s, &crate::rasterizer::pixel_center(x, y), 0.99);
                assert!((img.get(1, x, y) - alpha).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = SynthSpec::two_blob(7);
        spec.image_size = [32, 32];
        spec.blobs.iter_mut().for_each(|b| b.count = 40);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.planted, b.planted);
        for (va, vb) in a.views.iter().zip(&b.views) {
            assert_eq!(va.labels, vb.labels);
            assert_eq!(va.camera, vb.camera);
        }
        assert!(a
            .scene
            .gaussians
            .iter()
            .all(|g| g.object_code.iter().all(|&c| c == 0.0)));
    }

    #[test]
    fn zero_cameras_rejected() {
        let mut spec = SynthSpec::two_blob(1);
        spec.camera_ring.count = 0;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn single_blob_is_surrounded_by_background() {
        let spec = SynthSpec {
            classes: Some(2),
            class_names: None,
            blobs: vec![BlobSpec {
                center: [0.0; 3],
                radius: 1.0,
                count: 200,
                class_id: 1,
                color: [1.0, 0.0, 0.0],
            }],
            camera_ring: CameraRing {
                count: 1,
                radius: 6.0,
                height: 0.5,
                look_at: [0.0; 3],
            },
            image_size: [48, 48],
            fov_y_degrees: 50.0,
            seed: 3,
        };
        let fixture = generate(&spec).unwrap();
        let labels = &fixture.views[0].labels;
        assert_eq!(labels.get(24, 24), 1);
        for i in 0..48 {
            for (x, y) in [(i, 0), (i, 47), (0, i), (47, i)] {
                assert_eq!(labels.get(x, y), 0);
            }
        }
    }
}
