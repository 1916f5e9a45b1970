//! Procedural source domain: colored shapes on textured backgrounds.
//!
//! Class `k` fixes a shape (`k mod 5`) and a hue family (`k / 5`). Position,
//! size, tint, background level, gradient and texture vary per sample.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageDims, LabeledSet};
use crate::error::{Error, Result};

const SHAPES: usize = 5;

/// Rendering knobs for the source generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStyle {
    /// Max offset of the shape center, as a fraction of the image side.
    pub jitter: f64,
    /// Shape radius range as a fraction of the image side.
    pub radius: (f64, f64),
    /// Background gray level range.
    pub background: (f64, f64),
    /// Max slope of the linear background gradient across the image.
    pub gradient: f64,
    /// Per-pixel texture amplitude.
    pub texture: f64,
    /// Per-channel color perturbation of the shape.
    pub tint: f64,
}

impl Default for SourceStyle {
    fn default() -> Self {
        Self {
            jitter: 0.08,
            radius: (0.2, 0.3),
            background: (0.3, 0.6),
            gradient: 0.2,
            texture: 0.04,
            tint: 0.08,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Base color of a hue family; families are spread around the color wheel.
fn family_color(family: usize, families: usize) -> [f64; 3] {
    let hue = if families <= 2 {
        [0.02, 0.6][family % 2]
    } else {
        family as f64 / families as f64
    };
    hsv_to_rgb(hue, 0.75, 0.9)
}

/// Signed "inside" measure: positive inside the shape, in pixels.
fn shape_depth(shape: usize, dx: f64, dy: f64, r: f64) -> f64 {
    match shape {
        // disk
        0 => r - (dx * dx + dy * dy).sqrt(),
        // square
        1 => 0.85 * r - dx.abs().max(dy.abs()),
        // upward triangle: apex at -0.8r, base at +0.6r
        2 => {
            let half = 0.9 * r * (dy + 0.8 * r) / (1.4 * r);
            (0.6 * r - dy).min(half - dx.abs())
        }
        // plus sign
        3 => {
            let arm = 0.33 * r;
            let along = r - dx.abs().max(dy.abs());
            along.min((arm - dx.abs()).max(arm - dy.abs()))
        }
        // ring
        _ => {
            let d = (dx * dx + dy * dy).sqrt();
            0.3 * r - (d - 0.7 * r).abs()
        }
    }
}

fn render(
    class: usize,
    classes: usize,
    dims: ImageDims,
    style: &SourceStyle,
    rng: &mut ChaCha8Rng,
    out: &mut [f64],
) {
    let (h, w) = (dims.height as f64, dims.width as f64);
    let side = h.min(w);
    let families = classes.div_ceil(SHAPES);
    let shape = class % SHAPES;
    let base = family_color(class / SHAPES, families);

    let level = rng.random_range(style.background.0..=style.background.1);
    let bg_tint: Vec<f64> = (0..3).map(|_| rng.random_range(-0.03..=0.03)).collect();
    let gx = rng.random_range(-style.gradient..=style.gradient);
    let gy = rng.random_range(-style.gradient..=style.gradient);
    let cx = 0.5 * w + rng.random_range(-style.jitter..=style.jitter) * side;
    let cy = 0.5 * h + rng.random_range(-style.jitter..=style.jitter) * side;
    let r = rng.random_range(style.radius.0..=style.radius.1) * side;
    let color: Vec<f64> = base
        .iter()
        .map(|c| (c + rng.random_range(-style.tint..=style.tint)).clamp(0.0, 1.0))
        .collect();

    for row in 0..dims.height {
        for col in 0..dims.width {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let bg = level + gx * (x / w - 0.5) + gy * (y / h - 0.5);
            // one-pixel soft edge
            let cover = (shape_depth(shape, x - cx, y - cy, r) + 0.5).clamp(0.0, 1.0);
            for ch in 0..dims.channels {
                let tint = bg_tint[ch % 3];
                let tex = rng.random_range(-style.texture..=style.texture);
                let back = bg + tint + tex;
                let v = cover * color[ch % 3] + (1.0 - cover) * back;
                out[dims.index(row, col, ch)] = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// Balanced labeled set of `n` images over `k` classes with the default style.
pub fn gen_source(k: usize, n: usize, dims: ImageDims, seed: u64) -> Result<LabeledSet> {
    SourceStyle::default().generate(k, n, dims, seed)
}

impl SourceStyle {
    /// Balanced labeled set; `n` is truncated to a multiple of `k`.
    pub fn generate(&self, k: usize, n: usize, dims: ImageDims, seed: u64) -> Result<LabeledSet> {
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {k}")));
        }
        let per_class = n / k;
        if per_class == 0 {
            return Err(Error::Config(format!("{n} samples cannot cover {k} classes")));
        }
        if per_class * k != n {
            log::warn!(
                "{n} samples is not a multiple of {k} classes; truncating to {}",
                per_class * k
            );
        }
        let total = per_class * k;
        let mut labels: Vec<usize> = (0..total).map(|i| i % k).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        labels.shuffle(&mut rng);
        let mut images = Array2::zeros((total, dims.len()));
        for (i, &y) in labels.iter().enumerate() {
            let row = images.row_mut(i).into_slice().expect("contiguous row");
            render(y, k, dims, self, &mut rng, row);
        }
        Ok(LabeledSet {
            dims,
            classes: k,
            images,
            labels,
        })
    }
}
