//! Scene, camera and label-map types together with their on-disk formats.
//!
//! Scenes are read from and written to the binary little-endian PLY layout
//! used by pre-trained Gaussian splatting checkpoints, extended with
//! `obj_code_*` float properties. Cameras live in a single JSON array and
//! ground-truth masks are single-channel PNG files holding class ids.

mod cameras;
mod labels;
mod ply;

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

pub use cameras::{load_cameras, save_cameras, CameraRecord};
pub use labels::{load_label_map, save_label_map};
pub use ply::{load_scene, probe_code_count, save_scene};

/// Tolerance on the norm of a loaded rotation quaternion.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;
/// Tolerance on orthonormality of a camera rotation block.
pub const ROTATION_TOLERANCE: f64 = 1e-5;

/// One scene primitive with activated parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    /// Per-axis standard deviation, strictly positive.
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Opacity after the sigmoid, in `[0, 1]`.
    pub opacity: f64,
    /// Degree-0 spherical harmonics coefficients.
    pub color_dc: Vector3<f64>,
    /// Higher-order spherical harmonics, carried through untouched.
    pub sh_rest: Vec<f64>,
    /// Unconstrained class logits, one per class.
    pub object_code: Vec<f64>,
}

impl Gaussian {
    /// A Gaussian with identity rotation, zero color and a uniform
    /// (all-zero) object code of length `classes`.
    pub fn new(mean: Vector3<f64>, scale: Vector3<f64>, opacity: f64, classes: usize) -> Self {
        Gaussian {
            mean,
            scale,
            rotation: UnitQuaternion::identity(),
            opacity,
            color_dc: Vector3::zeros(),
            sh_rest: Vec::new(),
            object_code: vec![0.0; classes],
        }
    }

    fn check(&self, index: usize, classes: usize) -> Result<()> {
        let fail = |reason: String| Err(Error::InvalidGaussian { index, reason });
        if !self.mean.iter().all(|v| v.is_finite()) {
            return fail("non-finite mean".into());
        }
        if !self.scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return fail(format!("scale must be positive, got {:?}", self.scale.as_slice()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return fail(format!("opacity {} outside [0, 1]", self.opacity));
        }
        if (self.rotation.quaternion().norm() - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return fail("rotation quaternion is not unit".into());
        }
        if self.object_code.len() != classes {
            return fail(format!(
                "object code has {} entries, scene has {} classes",
                self.object_code.len(),
                classes
            ));
        }
        if !self.object_code.iter().all(|v| v.is_finite()) {
            return fail("non-finite object code".into());
        }
        Ok(())
    }
}

/// Ordered collection of Gaussians sharing one class table.
///
/// Class 0 is always the background class.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian>,
    class_names: Vec<String>,
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian>, class_names: Vec<String>) -> Result<Self> {
        let scene = Scene { gaussians, class_names };
        scene.validate()?;
        Ok(scene)
    }

    /// Empty scene with default class names (`background`, `class_1`, ...).
    pub fn empty(classes: usize) -> Result<Self> {
        Scene::new(Vec::new(), default_class_names(classes))
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.gaussians.iter().map(|g| [g.mean.x, g.mean.y, g.mean.z]).collect()
    }

    /// Sub-scene holding the given Gaussians in the given order.
    pub fn subset(&self, indices: &[usize]) -> Scene {
        Scene {
            gaussians: indices.iter().map(|&i| self.gaussians[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let classes = self.classes();
        if classes < 2 {
            return Err(Error::InvalidScene(format!(
                "need at least 2 classes (background plus one object), got {classes}"
            )));
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            g.check(i, classes)?;
        }
        Ok(())
    }
}

pub fn default_class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|i| {
            if i == 0 {
                "background".to_string()
            } else {
                format!("class_{i}")
            }
        })
        .collect()
}

/// Pinhole camera with a world-to-camera rigid transform.
///
/// Camera space follows the OpenCV convention: x right, y down, z forward.
/// Pixel `(x, y)` covers `[x, x + 1) x [y, y + 1)` and is sampled at its center.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub world_to_camera: Matrix4<f64>,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        let camera = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera,
        };
        camera
            .validate()
            .map_err(|reason| Error::InvalidCamera { id: 0, reason })?;
        Ok(camera)
    }

    /// Camera at `eye` looking at `target`, with `up` fixing the roll and a
    /// vertical field of view given in degrees.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: u32,
        height: u32,
        fov_y_degrees: f64,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidCamera {
                id: 0,
                reason: "viewing direction is parallel to the up vector".into(),
            });
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        let focal = 0.5 * f64::from(height) / (0.5 * fov_y_degrees.to_radians()).tan();
        Camera::new(
            focal,
            focal,
            0.5 * f64::from(width),
            0.5 * f64::from(height),
            width,
            height,
            w2c,
        )
    }

    pub(crate) fn validate(&self) -> std::result::Result<(), String> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(format!("focal lengths must be positive ({}, {})", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return Err("image dimensions must be positive".into());
        }
        if !(self.cx > 0.0 && self.cx < f64::from(self.width)) {
            return Err(format!("cx = {} outside (0, {})", self.cx, self.width));
        }
        if !(self.cy > 0.0 && self.cy < f64::from(self.height)) {
            return Err(format!("cy = {} outside (0, {})", self.cy, self.height));
        }
        if !self.world_to_camera.iter().all(|v| v.is_finite()) {
            return Err("non-finite pose".into());
        }
        let r = self.rotation();
        let gram = r.transpose() * r - Matrix3::identity();
        if gram.amax() > ROTATION_TOLERANCE || (r.determinant() - 1.0).abs() > ROTATION_TOLERANCE {
            return Err("rotation block is not orthonormal with det +1".into());
        }
        let bottom = self.world_to_camera.row(3);
        if (bottom - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).amax() > ROTATION_TOLERANCE {
            return Err("last row of world_to_camera must be (0, 0, 0, 1)".into());
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn world_to_camera_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Continuous pixel coordinates of a world point, `None` behind the camera.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        let c = self.world_to_camera_point(p);
        (c.z > 0.0).then(|| Vector2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }
}

/// Dense H x W grid of class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: u32, height: u32, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for a {width}x{height} map",
                labels.len()
            )));
        }
        Ok(LabelMap { width, height, labels })
    }

    pub fn filled(width: u32, height: u32, label: u32) -> Self {
        LabelMap {
            width,
            height,
            labels: vec![label; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u32 {
        self.labels[y as usize * self.width as usize + x as usize]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn max_label(&self) -> Option<u32> {
        self.labels.iter().copied().max()
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l as usize >= classes) {
            Some(i) => Err(Error::DimensionMismatch(format!(
                "label {} at pixel {i} is not below the class count {classes}",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn matches_camera(&self, camera: &Camera) -> bool {
        self.width == camera.width && self.height == camera.height
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
