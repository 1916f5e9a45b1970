//! Synthetic distribution shifts modeled on common corruption benchmarks.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ImageDims;
use crate::autodiff::DenseArray;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Contrast,
    GaussianBlur,
    Brightness,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Contrast,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Strength at severities 1 through 5.
    fn levels(&self) -> [f64; 5] {
        match self {
            // noise standard deviation
            CorruptionKind::GaussianNoise => [0.1, 0.18, 0.26, 0.35, 0.45],
            // remaining contrast factor
            CorruptionKind::Contrast => [0.75, 0.6, 0.5, 0.4, 0.3],
            // blur sigma in pixels per 32 pixels of image side
            CorruptionKind::GaussianBlur => [1.0, 1.5, 2.0, 2.5, 3.0],
            // additive brightness shift
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            // downsampling factor
            CorruptionKind::Pixelate => [0.6, 0.45, 0.35, 0.25, 0.2],
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind {s:?}")))
    }
}

/// Kind, severity (0 means none, 5 is strongest) and noise seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if severity > 5 {
            return Err(Error::Config(format!("severity {severity} outside 0..=5")));
        }
        Ok(Self {
            kind,
            severity,
            seed,
        })
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.kind, self.severity, self.seed)
    }
}

/// Parses `kind:severity:seed`.
impl FromStr for CorruptionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let [kind, sev, seed] = parts.as_slice() else {
            return Err(Error::Config(format!(
                "corruption spec {s:?} is not kind:severity:seed"
            )));
        };
        let severity = sev
            .parse()
            .map_err(|_| Error::Config(format!("bad severity {sev:?}")))?;
        let seed = seed
            .parse()
            .map_err(|_| Error::Config(format!("bad seed {seed:?}")))?;
        Self::new(kind.parse()?, severity, seed)
    }
}

/// Applies `spec` to every row; output is clamped to `[0, 1]`.
pub fn corrupt(images: &DenseArray, dims: ImageDims, spec: &CorruptionSpec) -> Result<DenseArray> {
    if images.ncols() != dims.len() {
        return Err(Error::DimensionMismatch {
            expected: dims.len(),
            got: images.ncols(),
        });
    }
    if spec.severity > 5 {
        return Err(Error::Config(format!("severity {} outside 0..=5", spec.severity)));
    }
    if spec.severity == 0 {
        return Ok(images.clone());
    }
    let level = spec.kind.levels()[spec.severity as usize - 1];
    let mut out = images.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            for v in out.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += level * z;
            }
        }
        CorruptionKind::Contrast => {
            for mut row in out.rows_mut() {
                let mean = row.mean().unwrap_or(0.0);
                row.mapv_inplace(|v| (v - mean) * level + mean);
            }
        }
        CorruptionKind::GaussianBlur => {
            let sigma = level * dims.height.min(dims.width) as f64 / 32.0;
            let kernel = gaussian_kernel(sigma);
            for mut row in out.rows_mut() {
                let src = row.to_vec();
                let blurred = blur(&src, dims, &kernel);
                row.iter_mut().zip(blurred).for_each(|(d, s)| *d = s);
            }
        }
        CorruptionKind::Brightness => {
            out.mapv_inplace(|v| v + level);
        }
        CorruptionKind::Pixelate => {
            for mut row in out.rows_mut() {
                let src = row.to_vec();
                let px = pixelate(&src, dims, level);
                row.iter_mut().zip(px).for_each(|(d, s)| *d = s);
            }
        }
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

/// Root-mean-square pixel change, the distortion metric used to order
/// severities.
pub fn distortion(clean: &DenseArray, shifted: &DenseArray) -> f64 {
    let n = clean.len().max(1) as f64;
    ((clean - shifted).mapv(|d| d * d).sum() / n).sqrt()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur with clamped borders.
fn blur(src: &[f64], dims: ImageDims, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let (h, w, c) = (dims.height as i64, dims.width as i64, dims.channels);
    let mut tmp = vec![0.0; src.len()];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let cc = (col + t as i64 - radius).clamp(0, w - 1);
                    acc += kv * src[dims.index(row as usize, cc as usize, ch)];
                }
                tmp[dims.index(row as usize, col as usize, ch)] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    let rr = (row + t as i64 - radius).clamp(0, h - 1);
                    acc += kv * tmp[dims.index(rr as usize, col as usize, ch)];
                }
                out[dims.index(row as usize, col as usize, ch)] = acc;
            }
        }
    }
    out
}

/// Box-downsample to `factor` of the size, then nearest-neighbor upsample.
fn pixelate(src: &[f64], dims: ImageDims, factor: f64) -> Vec<f64> {
    let sh = ((dims.height as f64 * factor).round() as usize).max(1);
    let sw = ((dims.width as f64 * factor).round() as usize).max(1);
    let cell = |i: usize, n: usize, s: usize| i * s / n;
    let mut small = Array2::<f64>::zeros((sh * sw, dims.channels));
    let mut count = vec![0usize; sh * sw];
    for row in 0..dims.height {
        for col in 0..dims.width {
            let k = cell(row, dims.height, sh) * sw + cell(col, dims.width, sw);
            count[k] += 1;
            for ch in 0..dims.channels {
                small[[k, ch]] += src[dims.index(row, col, ch)];
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for row in 0..dims.height {
        for col in 0..dims.width {
            let k = cell(row, dims.height, sh) * sw + cell(col, dims.width, sw);
            for ch in 0..dims.channels {
                out[dims.index(row, col, ch)] = small[[k, ch]] / count[k] as f64;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_source;

    fn sample() -> (DenseArray, ImageDims) {
        let dims = ImageDims::new(16, 16, 3).unwrap();
        (gen_source(5, 20, dims, 4).unwrap().images, dims)
    }

    #[test]
    fn severity_zero_is_identity() {
        let (x, dims) = sample();
        for kind in CorruptionKind::ALL {
            let spec = CorruptionSpec::new(kind, 0, 1).unwrap();
            assert_eq!(corrupt(&x, dims, &spec).unwrap(), x);
        }
    }

    #[test]
    fn contrast_fixes_constant_images() {
        let dims = ImageDims::new(8, 8, 3).unwrap();
        let x = Array2::from_elem((2, dims.len()), 0.37);
        let spec = CorruptionSpec::new(CorruptionKind::Contrast, 5, 0).unwrap();
        let y = corrupt(&x, dims, &spec).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_clamped_and_monotone() {
        let (x, dims) = sample();
        for kind in CorruptionKind::ALL {
            let mut last = 0.0;
            for sev in 1..=5 {
                let spec = CorruptionSpec::new(kind, sev, 9).unwrap();
                let y = corrupt(&x, dims, &spec).unwrap();
                assert_eq!(y, corrupt(&x, dims, &spec).unwrap());
                assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
                let d = distortion(&x, &y);
                assert!(d > last, "{kind} severity {sev}: {d} <= {last}");
                last = d;
            }
        }
    }

    #[test]
    fn spec_parsing() {
        let s: CorruptionSpec = "contrast:5:42".parse().unwrap();
        assert_eq!(s, CorruptionSpec::new(CorruptionKind::Contrast, 5, 42).unwrap());
        assert_eq!(s.to_string(), "contrast:5:42");
        assert!("fog:5:1".parse::<CorruptionSpec>().is_err());
        assert!("contrast:6:1".parse::<CorruptionSpec>().is_err());
        assert!("contrast:5".parse::<CorruptionSpec>().is_err());
    }
}
