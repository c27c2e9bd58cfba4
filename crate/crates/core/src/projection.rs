//! Screen-space projection of 3D Gaussians (EWA linearization) and global depth sort.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, UnitQuaternion, Vector2, Vector3};

use crate::scene_io::{Camera, Gaussian, Scene};

/// Extent of a footprint in standard deviations; contributions beyond it are zero.
pub const FOOTPRINT_SIGMAS: f64 = 3.0;
pub const DEFAULT_NEAR: f64 = 0.01;
/// Added to the diagonal of every projected covariance, in px².
pub const DEFAULT_COV_REG: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub near: f64,
    pub cov_reg: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            near: DEFAULT_NEAR,
            cov_reg: DEFAULT_COV_REG,
        }
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersects(&self, other: &PixelRect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }
}

/// One Gaussian's footprint in a particular view.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub gaussian_index: usize,
    pub center_px: Vector2<f64>,
    /// Regularized screen-space covariance, px².
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub opacity: f64,
    /// Pixels whose centers may fall inside the 3σ ellipse.
    pub bbox: PixelRect,
}

impl Splat2D {
    /// Squared Mahalanobis distance of a continuous pixel position from the center.
    pub fn mahalanobis_sq(&self, p: &Vector2<f64>) -> f64 {
        let d = p - self.center_px;
        let c = &self.conic;
        c[(0, 0)] * d.x * d.x + 2.0 * c[(0, 1)] * d.x * d.y + c[(1, 1)] * d.y * d.y
    }
}

/// Splats of one view, sorted front to back; equal depths keep ascending
/// Gaussian index.
#[derive(Debug, Clone)]
pub struct SplatList {
    pub splats: Vec<Splat2D>,
    pub camera: Camera,
}

impl SplatList {
    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }
}

/// Σ = R S Sᵀ Rᵀ.
pub fn build_cov3d(scale: &Vector3<f64>, rotation: &UnitQuaternion<f64>) -> Matrix3<f64> {
    let m = rotation.to_rotation_matrix().into_inner() * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

pub fn project(scene: &Scene, camera: &Camera, cfg: &ProjectionConfig) -> SplatList {
    let rotation = camera.rotation();
    let translation = camera.translation();
    let mut splats: Vec<Splat2D> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_one(g, i, camera, &rotation, &translation, cfg))
        .collect();
    splats.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.gaussian_index.cmp(&b.gaussian_index))
    });
    SplatList {
        splats,
        camera: camera.clone(),
    }
}

fn project_one(
    g: &Gaussian,
    index: usize,
    camera: &Camera,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    cfg: &ProjectionConfig,
) -> Option<Splat2D> {
    let t = rotation * g.mean + translation;
    if !(t.z > cfg.near) {
        return None;
    }
    let inv_z = 1.0 / t.z;
    let center = Vector2::new(camera.fx * t.x * inv_z + camera.cx, camera.fy * t.y * inv_z + camera.cy);

    let jacobian = Matrix2x3::new(
        camera.fx * inv_z,
        0.0,
        -camera.fx * t.x * inv_z * inv_z,
        0.0,
        camera.fy * inv_z,
        -camera.fy * t.y * inv_z * inv_z,
    );
    let jw = jacobian * rotation;
    let full = jw * build_cov3d(&g.scale, &g.rotation) * jw.transpose();
    let a = full[(0, 0)] + cfg.cov_reg;
    let c = full[(1, 1)] + cfg.cov_reg;
    let b = 0.5 * (full[(0, 1)] + full[(1, 0)]);
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let cov2d = Matrix2::new(a, b, b, c);
    let conic = Matrix2::new(c / det, -b / det, -b / det, a / det);

    let bbox = footprint_rect(&center, a.sqrt(), c.sqrt(), camera.width, camera.height)?;
    Some(Splat2D {
        gaussian_index: index,
        center_px: center,
        cov2d,
        conic,
        depth: t.z,
        opacity: g.opacity,
        bbox,
    })
}

/// Pixels whose sample point `(x + 0.5, y + 0.5)` lies within the axis-aligned
/// hull of the 3σ ellipse, clipped to the image. `None` when empty.
fn footprint_rect(center: &Vector2<f64>, sx: f64, sy: f64, width: u32, height: u32) -> Option<PixelRect> {
    let range = |c: f64, sigma: f64, limit: u32| -> Option<(u32, u32)> {
        let r = FOOTPRINT_SIGMAS * sigma;
        // Slack keeps boundary pixels inside the rect despite rounding; the
        // exact ellipse test is applied per pixel anyway.
        let slack = 1e-9 * (1.0 + r);
        let lo = (c - r - 0.5 - slack).ceil().max(0.0);
        let hi = ((c + r - 0.5 + slack).floor() + 1.0).min(f64::from(limit));
        if !(lo < hi) {
            return None;
        }
        Some((lo as u32, hi as u32))
    };
    let (x0, x1) = range(center.x, sx, width)?;
    let (y0, y1) = range(center.y, sy, height)?;
    Some(PixelRect { x0, y0, x1, y1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(f: f64) -> Camera {
        Camera::new(f, f, 32.0, 24.0, 64, 48, Matrix4::identity()).unwrap()
    }

    fn scene_of(gaussians: Vec<Gaussian>) -> Scene {
        Scene::new(gaussians, crate::scene_io::default_class_names(2)).unwrap()
    }

    #[test]
    fn cov3d_closed_forms() {
        let id = UnitQuaternion::identity();
        assert_eq!(build_cov3d(&Vector3::new(1.0, 1.0, 1.0), &id), Matrix3::identity());
        assert_eq!(
            build_cov3d(&Vector3::new(2.0, 1.0, 1.0), &id),
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))
        );
    }

    #[test]
    fn cov3d_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let scale = Vector3::from_fn(|_, _| rng.gen_range(0.05..3.0));
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            let cov = build_cov3d(&scale, &q);
            assert!((cov - cov.transpose()).amax() < 1e-12);
            let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
            let mut expected: Vec<f64> = scale.iter().map(|s| s * s).collect();
            eig.sort_by(f64::total_cmp);
            expected.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gaussian_at_camera_origin_is_culled() {
        let g = Gaussian::new(Vector3::zeros(), Vector3::repeat(0.1), 0.9, 2);
        assert!(project(&scene_of(vec![g]), &axis_camera(50.0), &ProjectionConfig::default()).is_empty());
    }

    #[test]
    fn on_axis_footprint() {
        let (f, s, d) = (80.0, 0.05, 4.0);
        let g = Gaussian::new(Vector3::new(0.0, 0.0, d), Vector3::repeat(s), 0.9, 2);
        let cfg = ProjectionConfig {
            near: DEFAULT_NEAR,
            cov_reg: 0.0,
        };
        let list = project(&scene_of(vec![g]), &axis_camera(f), &cfg);
        let splat = &list.splats[0];
        assert_eq!(splat.center_px, Vector2::new(32.0, 24.0));
        let expected = (f * s / d).powi(2);
        assert!((splat.cov2d[(0, 0)] - expected).abs() < 1e-12);
        assert!((splat.cov2d[(1, 1)] - expected).abs() < 1e-12);
        assert!(splat.cov2d[(0, 1)].abs() < 1e-15);
        assert_eq!(splat.depth, d);
        // Regularization adds exactly cov_reg on the diagonal.
        let reg = project(&list_scene(d, s), &axis_camera(f), &ProjectionConfig::default());
        assert!((reg.splats[0].cov2d[(0, 0)] - expected - DEFAULT_COV_REG).abs() < 1e-12);
    }

    fn list_scene(d: f64, s: f64) -> Scene {
        scene_of(vec![Gaussian::new(
            Vector3::new(0.0, 0.0, d),
            Vector3::repeat(s),
            0.9,
            2,
        )])
    }

    #[test]
    fn equal_depth_ties_by_index() {
        let a = Gaussian::new(Vector3::new(0.1, 0.0, 3.0), Vector3::repeat(0.1), 0.9, 2);
        let b = Gaussian::new(Vector3::new(-0.1, 0.0, 3.0), Vector3::repeat(0.1), 0.9, 2);
        let c = Gaussian::new(Vector3::new(0.0, 0.1, 2.0), Vector3::repeat(0.1), 0.9, 2);
        let list = project(
            &scene_of(vec![a, b, c]),
            &axis_camera(50.0),
            &ProjectionConfig::default(),
        );
        let order: Vec<usize> = list.splats.iter().map(|s| s.gaussian_index).collect();
        assert_eq!(order, vec![2, 0, 1]);
    }

    #[test]
    fn far_offscreen_is_culled() {
        let g = Gaussian::new(Vector3::new(50.0, 0.0, 2.0), Vector3::repeat(0.01), 0.9, 2);
        assert!(project(&scene_of(vec![g]), &axis_camera(50.0), &ProjectionConfig::default()).is_empty());
    }

    #[test]
    fn bbox_covers_ellipse_and_stays_in_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = axis_camera(60.0);
        for _ in 0..300 {
            let g = Gaussian {
                rotation: UnitQuaternion::from_euler_angles(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ),
                ..Gaussian::new(
                    Vector3::new(
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(1.0..5.0),
                    ),
                    Vector3::from_fn(|_, _| rng.gen_range(0.01..0.4)),
                    0.5,
                    2,
                )
            };
            let list = project(&scene_of(vec![g]), &cam, &ProjectionConfig::default());
            let Some(s) = list.splats.first() else { continue };
            assert!(s.bbox.x1 <= cam.width && s.bbox.y1 <= cam.height && !s.bbox.is_empty());
            assert!((s.cov2d - s.cov2d.transpose()).amax() <= 1e-12);
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let p = Vector2::new(f64::from(x) + 0.5, f64::from(y) + 0.5);
                    if s.mahalanobis_sq(&p) <= FOOTPRINT_SIGMAS * FOOTPRINT_SIGMAS {
                        assert!(s.bbox.contains(x, y));
                    }
                }
            }
        }
    }
}
