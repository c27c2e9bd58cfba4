//! Post-training refinement of learned object codes.
//!
//! Two passes follow training: Gaussians whose top class probability stays
//! below `beta` take the mean code of their `k` nearest neighbors, and each
//! segmented class drops members whose mean distance to their class
//! neighbors exceeds `mu + filter_std_mult * sigma`.

mod kdtree;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasterizer::softmax;
use crate::scene_io::Scene;

pub use kdtree::KdTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Gaussians with `max(softmax(o)) < beta` are re-estimated from neighbors.
    pub beta: f64,
    /// Neighbors averaged per ambiguous Gaussian.
    pub k: usize,
    /// Neighbors used for the mean distance in outlier filtering.
    pub filter_k: usize,
    pub filter_std_mult: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            beta: 0.65,
            k: 50,
            filter_k: 50,
            filter_std_mult: 1.0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta must lie in (0, 1), got {}",
                self.beta
            )));
        }
        if self.k == 0 || self.filter_k == 0 {
            return Err(Error::InvalidConfig("k and filter_k must be at least 1".into()));
        }
        if !(self.filter_std_mult >= 0.0) {
            return Err(Error::InvalidConfig("filter_std_mult must be non-negative".into()));
        }
        Ok(())
    }
}

/// Hard class assignment of every Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub class_of: Vec<u32>,
    /// Largest softmax probability of each Gaussian's code.
    pub confidence: Vec<f64>,
}

impl Segmentation {
    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn members(&self, class_id: u32) -> Vec<usize> {
        self.class_of
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == class_id)
            .map(|(i, _)| i)
            .collect()
    }
}

fn max_probability(code: &[f64]) -> f64 {
    softmax(code).into_iter().fold(0.0, f64::max)
}

/// Indices (ascending) of Gaussians whose top class probability is below `beta`.
pub fn select_ambiguous(scene: &Scene, beta: f64) -> Vec<usize> {
    scene
        .gaussians
        .iter()
        .enumerate()
        .filter(|(_, g)| max_probability(&g.object_code) < beta)
        .map(|(i, _)| i)
        .collect()
}

/// Replaces the code of every ambiguous Gaussian with the mean code of its
/// `k` nearest other Gaussians. Selection and neighbor codes both come from
/// the input scene, so updates never cascade.
pub fn knn_refine(scene: &Scene, cfg: &RefineConfig) -> Result<Scene> {
    cfg.validate()?;
    if cfg.k >= scene.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {} needs more than {} gaussians",
            cfg.k,
            scene.len()
        )));
    }
    let ambiguous = select_ambiguous(scene, cfg.beta);
    let mut refined = scene.clone();
    if ambiguous.is_empty() {
        return Ok(refined);
    }
    let tree = KdTree::build(scene.centers());
    let k = scene.classes();
    let updates: Vec<Vec<f64>> = ambiguous
        .par_iter()
        .map(|&i| {
            let mut mean = vec![0.0; k];
            for (j, _) in tree.nearest(&tree.points()[i], cfg.k, Some(i)) {
                for (m, c) in mean.iter_mut().zip(&scene.gaussians[j].object_code) {
                    *m += c;
                }
            }
            mean.iter_mut().for_each(|m| *m /= cfg.k as f64);
            mean
        })
        .collect();
    for (&i, code) in ambiguous.iter().zip(updates) {
        refined.gaussians[i].object_code = code;
    }
    Ok(refined)
}

/// Argmax class (lowest index on ties) and top probability of every code.
pub fn segment(scene: &Scene) -> Segmentation {
    let (class_of, confidence) = scene
        .gaussians
        .iter()
        .map(|g| {
            let mut best = 0;
            for (c, &v) in g.object_code.iter().enumerate().skip(1) {
                if v > g.object_code[best] {
                    best = c;
                }
            }
            (best as u32, max_probability(&g.object_code))
        })
        .unzip();
    Segmentation { class_of, confidence }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub class_id: u32,
    /// Members of the class that survive, ascending.
    pub kept: Vec<usize>,
    /// Members rejected as outliers, ascending.
    pub removed: Vec<usize>,
    /// Mean neighbor distance of each member, aligned with `members`.
    pub members: Vec<usize>,
    pub mean_distances: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    /// Input segmentation with removed members reassigned to background.
    pub segmentation: Segmentation,
    /// Set when the class had too few members to filter; nothing is removed.
    pub too_small: bool,
}

/// Statistical outlier removal within one class.
///
/// For each member, `D` is the mean Euclidean distance to its `filter_k`
/// nearest members of the same class. With `mu` and the population standard
/// deviation `sigma` of all `D`, members with `D > mu + filter_std_mult * sigma`
/// are moved to class 0 in the returned segmentation; codes are untouched.
pub fn statistical_filter(
    scene: &Scene,
    seg: &Segmentation,
    class_id: u32,
    cfg: &RefineConfig,
) -> Result<FilterOutcome> {
    cfg.validate()?;
    if seg.len() != scene.len() {
        return Err(Error::DimensionMismatch(format!(
            "segmentation covers {} gaussians, scene has {}",
            seg.len(),
            scene.len()
        )));
    }
    let members = seg.members(class_id);
    if members.len() < cfg.filter_k + 1 {
        log::warn!(
            "class {class_id} has {} members, statistical filtering needs at least {}",
            members.len(),
            cfg.filter_k + 1
        );
        return Ok(FilterOutcome {
            class_id,
            kept: members.clone(),
            removed: Vec::new(),
            members,
            mean_distances: Vec::new(),
            mu: f64::NAN,
            sigma: f64::NAN,
            segmentation: seg.clone(),
            too_small: true,
        });
    }

    let points: Vec<[f64; 3]> = members
        .iter()
        .map(|&i| {
            let m = &scene.gaussians[i].mean;
            [m.x, m.y, m.z]
        })
        .collect();
    let tree = KdTree::build(points);
    let mean_distances: Vec<f64> = (0..members.len())
        .into_par_iter()
        .map(|q| {
            let neighbors = tree.nearest(&tree.points()[q], cfg.filter_k, Some(q));
            neighbors.iter().map(|(_, d2)| d2.sqrt()).sum::<f64>() / cfg.filter_k as f64
        })
        .collect();

    let n = mean_distances.len() as f64;
    let mu = mean_distances.iter().sum::<f64>() / n;
    let sigma = (mean_distances.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n).sqrt();
    let threshold = mu + cfg.filter_std_mult * sigma;

    let mut kept = Vec::new();
    let mut removed = Vec::new();
    let mut segmentation = seg.clone();
    for (&i, &d) in members.iter().zip(&mean_distances) {
        if d > threshold {
            removed.push(i);
            segmentation.class_of[i] = 0;
        } else {
            kept.push(i);
        }
    }
    Ok(FilterOutcome {
        class_id,
        kept,
        removed,
        members,
        mean_distances,
        mu,
        sigma,
        segmentation,
        too_small: false,
    })
}

/// Runs `statistical_filter` for every non-background class and merges the
/// reassignments. Classes are filtered independently against `seg`.
pub fn filter_all_classes(
    scene: &Scene,
    seg: &Segmentation,
    cfg: &RefineConfig,
) -> Result<(Segmentation, Vec<FilterOutcome>)> {
    let mut merged = seg.clone();
    let mut outcomes = Vec::new();
    for class_id in 1..scene.classes() as u32 {
        let outcome = statistical_filter(scene, seg, class_id, cfg)?;
        for &i in &outcome.removed {
            merged.class_of[i] = 0;
        }
        outcomes.push(outcome);
    }
    Ok((merged, outcomes))
}

/// Sub-scene of all Gaussians whose class is in `class_ids`, in scene order.
pub fn extract_objects(scene: &Scene, seg: &Segmentation, class_ids: &[u32]) -> Result<Scene> {
    if seg.len() != scene.len() {
        return Err(Error::DimensionMismatch(format!(
            "segmentation covers {} gaussians, scene has {}",
            seg.len(),
            scene.len()
        )));
    }
    if let Some(&bad) = class_ids.iter().find(|&&c| c as usize >= scene.classes()) {
        return Err(Error::InvalidConfig(format!(
            "unknown class id {bad}; the scene has {} classes",
            scene.classes()
        )));
    }
    let indices: Vec<usize> = seg
        .class_of
        .iter()
        .enumerate()
        .filter(|(_, c)| class_ids.contains(c))
        .map(|(i, _)| i)
        .collect();
    Ok(scene.subset(&indices))
}
