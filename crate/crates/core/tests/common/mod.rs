#![allow(dead_code)]

use gsseg::projection::{project, ProjectionConfig, SplatList};
use gsseg::rasterizer::{backward_codes, render_semantic, ClassMatrix, RasterConfig};
use gsseg::scene_io::{Camera, Scene};
use gsseg::synthetic::{central_difference, random_camera, random_scene};
use gsseg::trainer::{ce_loss, make_one_hot};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LOG_EPS: f64 = 1e-8;

/// CE loss of the normalized-code render against `one_hot`.
pub fn view_loss(scene: &Scene, list: &SplatList, one_hot: &ClassMatrix) -> f64 {
    let (image, _) = render_semantic(scene, list, true, &RasterConfig::default());
    ce_loss(one_hot, &image.values, LOG_EPS).unwrap().0
}

pub struct GradientInstance {
    pub scene: Scene,
    pub camera: Camera,
    pub one_hot: ClassMatrix,
}

/// Random scene and camera supervised by the argmax of its own render, so
/// every pixel's target class carries at least 1/K of the blended mass.
pub fn gradient_instance(seed: u64, count: usize, classes: usize, size: u32) -> GradientInstance {
    let scene = random_scene(seed, count, classes);
    let camera = random_camera(seed, size, size);
    let list = project(&scene, &camera, &ProjectionConfig::default());
    let (image, _) = render_semantic(&scene, &list, true, &RasterConfig::default());
    let one_hot = make_one_hot(&image.argmax_labels(), classes).unwrap();
    GradientInstance { scene, camera, one_hot }
}

/// (gaussian, class, analytic, finite difference) for `entries` code
/// entries of Gaussians that received blend weight.
pub fn gradient_samples(inst: &GradientInstance, entries: usize, h: f64, seed: u64) -> Vec<(usize, usize, f64, f64)> {
    let list = project(&inst.scene, &inst.camera, &ProjectionConfig::default());
    let (image, record) = render_semantic(&inst.scene, &list, true, &RasterConfig::default());
    let (_, pixel_grad) = ce_loss(&inst.one_hot, &image.values, LOG_EPS).unwrap();
    let grad = backward_codes(&record, &pixel_grad, &inst.scene, true).unwrap();
    let weights = record.weight_per_gaussian(inst.scene.len());
    let visible: Vec<usize> = (0..inst.scene.len()).filter(|&i| weights[i] >= 1e-3).collect();
    assert!(!visible.is_empty(), "no visible gaussian");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = inst.scene.classes();
    (0..entries)
        .map(|_| {
            let i = visible[rng.gen_range(0..visible.len())];
            let c = rng.gen_range(0..k);
            let base = inst.scene.gaussians[i].object_code[c];
            let mut probe = inst.scene.clone();
            let fd = central_difference(
                |v| {
                    probe.gaussians[i].object_code[c] = v;
                    view_loss(&probe, &list, &inst.one_hot)
                },
                base,
                h,
            );
            (i, c, grad.of(i)[c], fd)
        })
        .collect()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
