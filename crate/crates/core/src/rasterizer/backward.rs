use rayon::prelude::*;

use super::{softmax_into, BlendRecord, ClassMatrix, TileBlend};
use crate::error::{Error, Result};
use crate::scene_io::Scene;

/// Gradient of a scalar loss with respect to every object code, one row of
/// `classes` values per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeGradient {
    classes: usize,
    data: Vec<f64>,
}

impl CodeGradient {
    pub fn zeros(gaussians: usize, classes: usize) -> Self {
        CodeGradient {
            classes,
            data: vec![0.0; gaussians * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn gaussians(&self) -> usize {
        self.data.len() / self.classes.max(1)
    }

    pub fn of(&self, gaussian: usize) -> &[f64] {
        &self.data[gaussian * self.classes..(gaussian + 1) * self.classes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn add_scaled(&mut self, other: &CodeGradient, factor: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }
}

/// Adjoint of `render_semantic` with respect to the object codes.
///
/// `grad_pixels` holds ∂L/∂ô as a K x N matrix. Raw codes receive
/// `Σ_p w_i(p) · grad(p)`; normalized codes additionally go through the
/// softmax Jacobian of their own Gaussian. Partial sums are formed per tile
/// and reduced in tile order, so the result does not depend on the number
/// of threads.
pub fn backward_codes(
    record: &BlendRecord,
    grad_pixels: &ClassMatrix,
    scene: &Scene,
    normalize_codes: bool,
) -> Result<CodeGradient> {
    let k = scene.classes();
    let n = (record.width * record.height) as usize;
    if grad_pixels.classes() != k || grad_pixels.columns() != n || record.classes != k {
        return Err(Error::DimensionMismatch(format!(
            "pixel gradient is {}x{}, record expects {}x{} and the scene has {} classes",
            grad_pixels.classes(),
            grad_pixels.columns(),
            record.classes,
            n,
            k
        )));
    }
    if record.normalized != normalize_codes {
        return Err(Error::InvalidConfig(
            "blend record was rendered with a different code normalization".into(),
        ));
    }
    let count = scene.len();
    if let Some(bad) = record
        .tiles
        .iter()
        .flat_map(|t| t.gaussians.iter())
        .find(|&&g| g as usize >= count)
    {
        return Err(Error::DimensionMismatch(format!(
            "record references gaussian {bad} but the scene has {count}"
        )));
    }

    let partials: Vec<Vec<f64>> = record
        .tiles
        .par_iter()
        .map(|tile| tile_partial(tile, grad_pixels, record.width as usize, k))
        .collect();

    let mut out = CodeGradient::zeros(count, k);
    let mut touched = vec![false; count];
    for (tile, partial) in record.tiles.iter().zip(&partials) {
        for (slot, &g) in tile.gaussians.iter().enumerate() {
            let g = g as usize;
            touched[g] = true;
            for (dst, src) in out.data[g * k..(g + 1) * k]
                .iter_mut()
                .zip(&partial[slot * k..(slot + 1) * k])
            {
                *dst += src;
            }
        }
    }

    if normalize_codes {
        out.data
            .par_chunks_mut(k)
            .zip(scene.gaussians.par_iter())
            .zip(touched.par_iter())
            .for_each_init(
                || vec![0.0; k],
                |probs, ((grad, gaussian), &touched)| {
                    if !touched {
                        return;
                    }
                    softmax_into(&gaussian.object_code, probs);
                    let dot: f64 = probs.iter().zip(grad.iter()).map(|(p, g)| p * g).sum();
                    for (g, p) in grad.iter_mut().zip(probs.iter()) {
                        *g = p * (*g - dot);
                    }
                },
            );
    }
    Ok(out)
}

fn tile_partial(tile: &TileBlend, grad: &ClassMatrix, width: usize, k: usize) -> Vec<f64> {
    let mut acc = vec![0.0; tile.gaussians.len() * k];
    let n = grad.columns();
    let g = grad.as_slice();
    let tw = (tile.rect.x1 - tile.rect.x0) as usize;
    for (p, range) in tile.offsets.windows(2).enumerate() {
        let entries = &tile.entries[range[0] as usize..range[1] as usize];
        if entries.is_empty() {
            continue;
        }
        let x = tile.rect.x0 as usize + p % tw;
        let y = tile.rect.y0 as usize + p / tw;
        let column = y * width + x;
        for &(slot, w) in entries {
            let row = &mut acc[slot as usize * k..(slot as usize + 1) * k];
            for (c, a) in row.iter_mut().enumerate() {
                *a += w * g[c * n + column];
            }
        }
    }
    acc
}
