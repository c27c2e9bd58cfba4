//! Object-code optimization against posed ground-truth label maps.
//!
//! Per view, the loss is the class-averaged cross-entropy
//! `(1/K) Σ_i -(1/N) Σ_n M_iⁿ log M̄_iⁿ` between the one-hot ground truth `M`
//! and the rendered map `M̄`; the objective is the mean over all views. Scene
//! geometry stays frozen, only object codes are updated.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{project, ProjectionConfig, SplatList};
use crate::rasterizer::{backward_codes, render_semantic, ClassMatrix, CodeGradient, RasterConfig};
use crate::scene_io::{Camera, LabelMap, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Views per optimizer step, taken cyclically in view order.
    pub batch: usize,
    pub normalize_codes: bool,
    pub log_eps: f64,
    pub projection: ProjectionConfig,
    pub raster: RasterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 300,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch: 1,
            normalize_codes: true,
            log_eps: 1e-8,
            projection: ProjectionConfig::default(),
            raster: RasterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, view_count: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch == 0 || self.batch > view_count {
            return bad(format!("batch must lie in 1..={view_count}, got {}", self.batch));
        }
        if !(self.log_eps > 0.0) {
            return bad("log_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam moments must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}

/// One supervised view.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub id: u32,
    pub camera: Camera,
    pub label_map: LabelMap,
    /// K x (H·W) one-hot encoding of `label_map`.
    pub one_hot: ClassMatrix,
}

impl TrainView {
    pub fn new(id: u32, camera: Camera, label_map: LabelMap, classes: usize) -> Result<Self> {
        if !label_map.matches_camera(&camera) {
            return Err(Error::DimensionMismatch(format!(
                "view {id}: label map is {}x{} but the camera is {}x{}",
                label_map.width, label_map.height, camera.width, camera.height
            )));
        }
        let one_hot = make_one_hot(&label_map, classes)?;
        Ok(TrainView {
            id,
            camera,
            label_map,
            one_hot,
        })
    }
}

/// `M[i][n] = 1` iff pixel `n` carries label `i`.
pub fn make_one_hot(label_map: &LabelMap, classes: usize) -> Result<ClassMatrix> {
    label_map.check_classes(classes)?;
    let n = label_map.len();
    let mut m = ClassMatrix::zeros(classes, n);
    for (pixel, &label) in label_map.labels.iter().enumerate() {
        m.set(label as usize, pixel, 1.0);
    }
    Ok(m)
}

/// Class-averaged cross-entropy of one view and its gradient with respect to
/// the rendered map. Rendered values below `log_eps` are clamped inside the
/// log and receive zero gradient.
pub fn ce_loss(one_hot: &ClassMatrix, rendered: &ClassMatrix, log_eps: f64) -> Result<(f64, ClassMatrix)> {
    if !one_hot.same_shape(rendered) {
        return Err(Error::DimensionMismatch(format!(
            "one-hot is {}x{}, rendered map is {}x{}",
            one_hot.classes(),
            one_hot.columns(),
            rendered.classes(),
            rendered.columns()
        )));
    }
    let (k, n) = (one_hot.classes(), one_hot.columns());
    let scale = 1.0 / (k as f64 * n as f64);
    let mut grad = ClassMatrix::zeros(k, n);
    let mut loss = 0.0;
    for ((g, &m), &r) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(one_hot.as_slice())
        .zip(rendered.as_slice())
    {
        if m == 0.0 {
            continue;
        }
        // f64::max would swallow a NaN render.
        let clamped = if r.is_nan() { r } else { r.max(log_eps) };
        loss -= m * clamped.ln();
        if r >= log_eps {
            *g = -m * scale / clamped;
        }
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainProgress {
    pub iteration: usize,
    pub iterations: usize,
    /// Mean loss over the views of this step.
    pub loss: f64,
    pub views: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewLoss {
    pub id: u32,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch: usize,
    pub normalize_codes: bool,
    /// Full objective over every view before the first step.
    pub initial_loss: f64,
    /// Mini-batch loss of each step, evaluated before that step's update.
    pub losses: Vec<f64>,
    /// Full objective over every view after the last step.
    pub final_loss: f64,
    pub final_view_losses: Vec<ViewLoss>,
    pub wall_clock_seconds: f64,
}

fn check_views(scene: &Scene, views: &[TrainView]) -> Result<()> {
    if views.is_empty() {
        return Err(Error::InvalidConfig("training needs at least one view".into()));
    }
    let k = scene.classes();
    for v in views {
        if v.one_hot.classes() != k || v.one_hot.columns() != v.camera.pixel_count() {
            return Err(Error::DimensionMismatch(format!(
                "view {} has a {}x{} one-hot matrix, expected {}x{}",
                v.id,
                v.one_hot.classes(),
                v.one_hot.columns(),
                k,
                v.camera.pixel_count()
            )));
        }
    }
    Ok(())
}

fn project_views(scene: &Scene, views: &[TrainView], cfg: &ProjectionConfig) -> Vec<SplatList> {
    views.par_iter().map(|v| project(scene, &v.camera, cfg)).collect()
}

/// Full objective: mean over views of the per-view loss.
pub fn objective(scene: &Scene, views: &[TrainView], cfg: &TrainConfig) -> Result<(f64, Vec<ViewLoss>)> {
    check_views(scene, views)?;
    let splats = project_views(scene, views, &cfg.projection);
    objective_with(scene, views, &splats, cfg)
}

fn objective_with(
    scene: &Scene,
    views: &[TrainView],
    splats: &[SplatList],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<ViewLoss>)> {
    let mut per_view = Vec::with_capacity(views.len());
    for (view, list) in views.iter().zip(splats) {
        let (image, _) = render_semantic(scene, list, cfg.normalize_codes, &cfg.raster);
        let (loss, _) = ce_loss(&view.one_hot, &image.values, cfg.log_eps)?;
        per_view.push(ViewLoss { id: view.id, loss });
    }
    let total = per_view.iter().map(|v| v.loss).sum::<f64>() / views.len() as f64;
    Ok((total, per_view))
}

struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

/// Optimizes every object code in place. Geometry is never touched.
pub fn train(
    scene: &mut Scene,
    views: &[TrainView],
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&TrainProgress),
) -> Result<TrainReport> {
    let started = Instant::now();
    check_views(scene, views)?;
    cfg.validate(views.len())?;

    let k = scene.classes();
    let splats = project_views(scene, views, &cfg.projection);
    let (initial_loss, initial_views) = objective_with(scene, views, &splats, cfg)?;
    if !initial_loss.is_finite() {
        let view = initial_views.iter().find(|v| !v.loss.is_finite()).map_or(0, |v| v.id);
        return Err(Error::NonFiniteLoss {
            iteration: 0,
            view,
            value: initial_loss,
        });
    }

    let mut adam = Adam {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        m: vec![0.0; scene.len() * k],
        v: vec![0.0; scene.len() * k],
        step: 0,
    };
    let mut losses = Vec::with_capacity(cfg.iterations);
    let inv_batch = 1.0 / cfg.batch as f64;

    for iteration in 0..cfg.iterations {
        let mut grad = CodeGradient::zeros(scene.len(), k);
        let mut step_loss = 0.0;
        let mut step_views = Vec::with_capacity(cfg.batch);
        for j in 0..cfg.batch {
            let index = (iteration * cfg.batch + j) % views.len();
            let view = &views[index];
            let (image, record) = render_semantic(scene, &splats[index], cfg.normalize_codes, &cfg.raster);
            let (loss, pixel_grad) = ce_loss(&view.one_hot, &image.values, cfg.log_eps)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    view: view.id,
                    value: loss,
                });
            }
            let view_grad = backward_codes(&record, &pixel_grad, scene, cfg.normalize_codes)?;
            grad.add_scaled(&view_grad, inv_batch);
            step_loss += loss * inv_batch;
            step_views.push(view.id);
        }

        match cfg.optimizer {
            OptimizerKind::Sgd => apply_sgd(scene, &grad, cfg.learning_rate),
            OptimizerKind::Adam => apply_adam(scene, &grad, cfg.learning_rate, &mut adam),
        }
        losses.push(step_loss);
        progress(&TrainProgress {
            iteration,
            iterations: cfg.iterations,
            loss: step_loss,
            views: step_views,
        });
    }

    let (final_loss, final_view_losses) = if cfg.iterations == 0 {
        (initial_loss, initial_views)
    } else {
        objective_with(scene, views, &splats, cfg)?
    };
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: cfg.iterations,
            view: final_view_losses
                .iter()
                .find(|v| !v.loss.is_finite())
                .map_or(0, |v| v.id),
            value: final_loss,
        });
    }

    Ok(TrainReport {
        iterations: cfg.iterations,
        optimizer: cfg.optimizer,
        learning_rate: cfg.learning_rate,
        batch: cfg.batch,
        normalize_codes: cfg.normalize_codes,
        initial_loss,
        losses,
        final_loss,
        final_view_losses,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

fn apply_sgd(scene: &mut Scene, grad: &CodeGradient, lr: f64) {
    for (i, g) in scene.gaussians.iter_mut().enumerate() {
        for (o, d) in g.object_code.iter_mut().zip(grad.of(i)) {
            *o -= lr * d;
        }
    }
}

fn apply_adam(scene: &mut Scene, grad: &CodeGradient, lr: f64, state: &mut Adam) {
    state.step += 1;
    let bias1 = 1.0 - state.beta1.powi(state.step);
    let bias2 = 1.0 - state.beta2.powi(state.step);
    let k = grad.classes();
    for (i, g) in scene.gaussians.iter_mut().enumerate() {
        let base = i * k;
        for (c, (o, &d)) in g.object_code.iter_mut().zip(grad.of(i)).enumerate() {
            let m = &mut state.m[base + c];
            let v = &mut state.v[base + c];
            *m = state.beta1 * *m + (1.0 - state.beta1) * d;
            *v = state.beta2 * *v + (1.0 - state.beta2) * d * d;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *o -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
}
