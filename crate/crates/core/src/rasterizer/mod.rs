//! Tile-binned front-to-back alpha blending of colors and object codes, and
//! the adjoint of the semantic blend with respect to every object code.
//!
//! A splat contributes `α = min(opacity · exp(-½ dᵀ Σ⁻¹ d), α_max)` at pixel
//! centers inside its 3σ ellipse and nothing outside it. Pixel weights are
//! `w_i = α_i ∏_{j<i} (1 - α_j)` in depth order; the transmittance left after
//! the last splat is routed to the background channel. Blending stops as soon
//! as the running transmittance falls below `min_transmittance`.

mod backward;

use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{PixelRect, Splat2D, SplatList, FOOTPRINT_SIGMAS};
use crate::scene_io::{LabelMap, Scene};

pub use backward::{backward_codes, CodeGradient};

pub const ALPHA_MAX: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const TILE_SIZE: u32 = 16;
/// Degree-0 spherical harmonics basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub alpha_max: f64,
    pub min_transmittance: f64,
    pub tile_size: u32,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            alpha_max: ALPHA_MAX,
            min_transmittance: MIN_TRANSMITTANCE,
            tile_size: TILE_SIZE,
        }
    }
}

/// Opacity of a splat at a continuous pixel position.
pub fn alpha_at(splat: &Splat2D, pixel: &Vector2<f64>, alpha_max: f64) -> f64 {
    let m = splat.mahalanobis_sq(pixel);
    if m > FOOTPRINT_SIGMAS * FOOTPRINT_SIGMAS {
        return 0.0;
    }
    (splat.opacity * (-0.5 * m).exp()).min(alpha_max)
}

#[inline]
pub(crate) fn pixel_center(x: u32, y: u32) -> Vector2<f64> {
    Vector2::new(f64::from(x) + 0.5, f64::from(y) + 0.5)
}

/// Dense K x N matrix stored row by row (one row per class, one column per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMatrix {
    classes: usize,
    columns: usize,
    data: Vec<f64>,
}

impl ClassMatrix {
    pub fn zeros(classes: usize, columns: usize) -> Self {
        ClassMatrix {
            classes,
            columns,
            data: vec![0.0; classes * columns],
        }
    }

    pub fn from_vec(classes: usize, columns: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * columns {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {classes}x{columns} matrix",
                data.len()
            )));
        }
        Ok(ClassMatrix { classes, columns, data })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn get(&self, class: usize, column: usize) -> f64 {
        self.data[class * self.columns + column]
    }

    pub fn set(&mut self, class: usize, column: usize, value: f64) {
        self.data[class * self.columns + column] = value;
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.data[class * self.columns..(class + 1) * self.columns]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &ClassMatrix) -> bool {
        self.classes == other.classes && self.columns == other.columns
    }
}

/// Rendered per-pixel class vectors, channel-major (K x H x W).
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticImage {
    pub width: u32,
    pub height: u32,
    /// Whether per-Gaussian codes went through a softmax before blending.
    pub normalized: bool,
    pub values: ClassMatrix,
}

impl SemanticImage {
    pub fn classes(&self) -> usize {
        self.values.classes()
    }

    pub fn get(&self, class: usize, x: u32, y: u32) -> f64 {
        self.values.get(class, (y * self.width + x) as usize)
    }

    pub fn pixel(&self, x: u32, y: u32) -> Vec<f64> {
        (0..self.classes()).map(|c| self.get(c, x, y)).collect()
    }

    /// Per-pixel argmax, ties resolved toward the lower class id.
    pub fn argmax_labels(&self) -> LabelMap {
        let n = self.values.columns();
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..self.classes() {
                    if self.values.get(c, p) > self.values.get(best, p) {
                        best = c;
                    }
                }
                best as u32
            })
            .collect();
        LabelMap {
            width: self.width,
            height: self.height,
            labels,
        }
    }

    /// Writes one binary PGM per class with values clamped to [0, 1] and
    /// scaled to 0..=255. Returns the written paths.
    pub fn write_probability_pgms(&self, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
        let mut paths = Vec::with_capacity(self.classes());
        for c in 0..self.classes() {
            let path = dir.join(format!("{stem}_class{c}.pgm"));
            let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
            bytes.extend(
                self.values
                    .row(c)
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
            );
            std::fs::File::create(&path)
                .and_then(|mut f| f.write_all(&bytes))
                .map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Linear RGB image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .pixels
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        image::RgbImage::from_raw(self.width, self.height, raw).expect("dimensions match")
    }
}

/// Blend weights of one tile, replayed by the backward pass.
#[derive(Debug, Clone)]
struct TileBlend {
    rect: PixelRect,
    /// Gaussian index of every splat binned to this tile, front to back.
    gaussians: Vec<u32>,
    /// `entries[offsets[p]..offsets[p + 1]]` belong to local pixel `p`.
    offsets: Vec<u32>,
    /// (local slot, weight).
    entries: Vec<(u32, f64)>,
    transmittance: Vec<f64>,
    truncated: Vec<bool>,
}

/// Blend weights and residual transmittance for every pixel of one render.
#[derive(Debug, Clone)]
pub struct BlendRecord {
    pub width: u32,
    pub height: u32,
    pub classes: usize,
    pub normalized: bool,
    tile_size: u32,
    tiles: Vec<TileBlend>,
}

/// Weights of a single pixel in front-to-back order.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelBlend {
    pub weights: Vec<(usize, f64)>,
    pub transmittance: f64,
    pub truncated: bool,
}

impl BlendRecord {
    fn locate(&self, x: u32, y: u32) -> (&TileBlend, usize) {
        let tiles_x = self.width.div_ceil(self.tile_size);
        let tile = &self.tiles[((y / self.tile_size) * tiles_x + x / self.tile_size) as usize];
        let local = (y - tile.rect.y0) * (tile.rect.x1 - tile.rect.x0) + (x - tile.rect.x0);
        (tile, local as usize)
    }

    pub fn pixel(&self, x: u32, y: u32) -> PixelBlend {
        let (tile, p) = self.locate(x, y);
        let range = tile.offsets[p] as usize..tile.offsets[p + 1] as usize;
        PixelBlend {
            weights: tile.entries[range]
                .iter()
                .map(|&(slot, w)| (tile.gaussians[slot as usize] as usize, w))
                .collect(),
            transmittance: tile.transmittance[p],
            truncated: tile.truncated[p],
        }
    }

    /// Total blend weight each Gaussian received over the whole image.
    pub fn weight_per_gaussian(&self, gaussian_count: usize) -> Vec<f64> {
        let mut total = vec![0.0; gaussian_count];
        for tile in &self.tiles {
            for &(slot, w) in &tile.entries {
                total[tile.gaussians[slot as usize] as usize] += w;
            }
        }
        total
    }

    pub fn truncated_pixels(&self) -> usize {
        self.tiles
            .iter()
            .map(|t| t.truncated.iter().filter(|&&b| b).count())
            .sum()
    }
}

struct TileGrid {
    rects: Vec<PixelRect>,
    /// Positions into the splat list, front to back.
    bins: Vec<Vec<u32>>,
}

fn bin_splats(splats: &SplatList, tile_size: u32) -> TileGrid {
    let (w, h) = (splats.camera.width, splats.camera.height);
    let tiles_x = w.div_ceil(tile_size);
    let tiles_y = h.div_ceil(tile_size);
    let mut rects = Vec::with_capacity((tiles_x * tiles_y) as usize);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            rects.push(PixelRect {
                x0: tx * tile_size,
                y0: ty * tile_size,
                x1: ((tx + 1) * tile_size).min(w),
                y1: ((ty + 1) * tile_size).min(h),
            });
        }
    }
    let mut bins = vec![Vec::new(); rects.len()];
    for (pos, s) in splats.splats.iter().enumerate() {
        let b = &s.bbox;
        for ty in b.y0 / tile_size..=(b.y1 - 1) / tile_size {
            for tx in b.x0 / tile_size..=(b.x1 - 1) / tile_size {
                bins[(ty * tiles_x + tx) as usize].push(pos as u32);
            }
        }
    }
    TileGrid { rects, bins }
}

struct TileOutput {
    /// Pixel-major, `channels` values per pixel.
    values: Vec<f64>,
    blend: Option<TileBlend>,
}

/// Blends per-splat value vectors (`values[pos * channels..]` for splat list
/// position `pos`) over every pixel.
fn blend_all(
    splats: &SplatList,
    values: &[f64],
    channels: usize,
    background: &[f64],
    cfg: &RasterConfig,
    keep_record: bool,
) -> (Vec<f64>, Option<Vec<TileBlend>>) {
    let grid = bin_splats(splats, cfg.tile_size.max(1));
    let outputs: Vec<TileOutput> = grid
        .rects
        .par_iter()
        .zip(grid.bins.par_iter())
        .map(|(rect, bin)| {
            blend_tile(
                rect,
                bin,
                &splats.splats,
                values,
                channels,
                background,
                cfg,
                keep_record,
            )
        })
        .collect();

    let (w, h) = (splats.camera.width as usize, splats.camera.height as usize);
    let mut image = vec![0.0; w * h * channels];
    for (rect, out) in grid.rects.iter().zip(&outputs) {
        let tw = (rect.x1 - rect.x0) as usize;
        for y in rect.y0..rect.y1 {
            let local_row = (y - rect.y0) as usize * tw;
            let global = (y as usize * w + rect.x0 as usize) * channels;
            image[global..global + tw * channels]
                .copy_from_slice(&out.values[local_row * channels..(local_row + tw) * channels]);
        }
    }
    let record = keep_record.then(|| {
        outputs
            .into_iter()
            .map(|o| o.blend.expect("record requested"))
            .collect()
    });
    (image, record)
}

#[allow(clippy::too_many_arguments)]
fn blend_tile(
    rect: &PixelRect,
    bin: &[u32],
    splats: &[Splat2D],
    values: &[f64],
    channels: usize,
    background: &[f64],
    cfg: &RasterConfig,
    keep_record: bool,
) -> TileOutput {
    let pixel_count = ((rect.x1 - rect.x0) * (rect.y1 - rect.y0)) as usize;
    let mut out = vec![0.0; pixel_count * channels];
    let mut offsets = Vec::with_capacity(if keep_record { pixel_count + 1 } else { 0 });
    let mut entries = Vec::new();
    let mut transmittances = Vec::with_capacity(pixel_count);
    let mut truncated = Vec::with_capacity(pixel_count);

    let mut p = 0;
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            if keep_record {
                offsets.push(entries.len() as u32);
            }
            let center = pixel_center(x, y);
            let acc = &mut out[p * channels..(p + 1) * channels];
            let mut t = 1.0;
            let mut stopped = false;
            for (slot, &pos) in bin.iter().enumerate() {
                let splat = &splats[pos as usize];
                if !splat.bbox.contains(x, y) {
                    continue;
                }
                let alpha = alpha_at(splat, &center, cfg.alpha_max);
                if alpha <= 0.0 {
                    continue;
                }
                let w = alpha * t;
                let v = &values[pos as usize * channels..(pos as usize + 1) * channels];
                for (a, &vc) in acc.iter_mut().zip(v) {
                    *a += w * vc;
                }
                if keep_record {
                    entries.push((slot as u32, w));
                }
                t *= 1.0 - alpha;
                if t < cfg.min_transmittance {
                    stopped = true;
                    break;
                }
            }
            for (a, &b) in acc.iter_mut().zip(background) {
                *a += t * b;
            }
            transmittances.push(t);
            truncated.push(stopped);
            p += 1;
        }
    }

    let blend = keep_record.then(|| {
        offsets.push(entries.len() as u32);
        TileBlend {
            rect: *rect,
            gaussians: bin
                .iter()
                .map(|&pos| splats[pos as usize].gaussian_index as u32)
                .collect(),
            offsets,
            entries,
            transmittance: transmittances,
            truncated,
        }
    });
    TileOutput { values: out, blend }
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// Per-splat code vectors in splat-list order.
fn code_table(scene: &Scene, splats: &SplatList, normalize_codes: bool) -> Vec<f64> {
    let k = scene.classes();
    let mut table = vec![0.0; splats.len() * k];
    for (row, s) in table.chunks_exact_mut(k).zip(&splats.splats) {
        let code = &scene.gaussians[s.gaussian_index].object_code;
        if normalize_codes {
            softmax_into(code, row);
        } else {
            row.copy_from_slice(code);
        }
    }
    table
}

/// Renders the blended object-code map and keeps the blend weights for the
/// backward pass. Uncovered transmittance goes to class 0.
pub fn render_semantic(
    scene: &Scene,
    splats: &SplatList,
    normalize_codes: bool,
    cfg: &RasterConfig,
) -> (SemanticImage, BlendRecord) {
    let k = scene.classes();
    let table = code_table(scene, splats, normalize_codes);
    let mut background = vec![0.0; k];
    background[0] = 1.0;
    let (pixel_major, tiles) = blend_all(splats, &table, k, &background, cfg, true);

    let (w, h) = (splats.camera.width, splats.camera.height);
    let n = (w * h) as usize;
    let mut values = ClassMatrix::zeros(k, n);
    for (p, px) in pixel_major.chunks_exact(k).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            values.data[c * n + p] = v;
        }
    }
    let image = SemanticImage {
        width: w,
        height: h,
        normalized: normalize_codes,
        values,
    };
    let record = BlendRecord {
        width: w,
        height: h,
        classes: k,
        normalized: normalize_codes,
        tile_size: cfg.tile_size.max(1),
        tiles: tiles.expect("record requested"),
    };
    (image, record)
}

/// Base color of a Gaussian from its degree-0 coefficients.
pub fn base_color(g: &crate::scene_io::Gaussian) -> [f64; 3] {
    g.color_dc.map(|c| (0.5 + SH_C0 * c).max(0.0)).into()
}

/// Renders view-independent color over a black background.
pub fn render_color(scene: &Scene, splats: &SplatList, cfg: &RasterConfig) -> ColorImage {
    let table: Vec<f64> = splats
        .splats
        .iter()
        .flat_map(|s| base_color(&scene.gaussians[s.gaussian_index]))
        .collect();
    let (pixel_major, _) = blend_all(splats, &table, 3, &[0.0; 3], cfg, false);
    ColorImage {
        width: splats.camera.width,
        height: splats.camera.height,
        pixels: pixel_major.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    }
}
