//! Additive frame-shaped visual prompt.
//!
//! The prompt only has parameters on a border of width `f`; interior pixels
//! are never touched. Images are stored flattened in `(row, column, channel)`
//! order and the parameters follow the same raster order over frame pixels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::DenseArray;
use crate::checkpoint::{Checkpoint, Tensor};
use crate::data::ImageDims;
use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 0.02;

/// Number of frame parameters: `C (H W - (H - 2f)(W - 2f))`.
pub fn frame_param_count(dims: ImageDims, f: usize) -> usize {
    let inner = dims.height.saturating_sub(2 * f) * dims.width.saturating_sub(2 * f);
    dims.channels * (dims.height * dims.width - inner)
}

fn in_frame(dims: ImageDims, f: usize, row: usize, col: usize) -> bool {
    row < f || col < f || row + f >= dims.height || col + f >= dims.width
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePrompt {
    dims: ImageDims,
    frame_width: usize,
    params: Vec<f64>,
    /// Flat image index of every parameter.
    support: Vec<usize>,
}

impl FramePrompt {
    pub fn zeros(dims: ImageDims, frame_width: usize) -> Result<Self> {
        if frame_width == 0 || 2 * frame_width > dims.height.min(dims.width) {
            return Err(Error::Config(format!(
                "frame width {frame_width} invalid for {}x{} images",
                dims.height, dims.width
            )));
        }
        let mut support = Vec::with_capacity(frame_param_count(dims, frame_width));
        for row in 0..dims.height {
            for col in 0..dims.width {
                if in_frame(dims, frame_width, row, col) {
                    for ch in 0..dims.channels {
                        support.push(dims.index(row, col, ch));
                    }
                }
            }
        }
        Ok(Self {
            dims,
            frame_width,
            params: vec![0.0; support.len()],
            support,
        })
    }

    /// Parameters drawn i.i.d. from `N(0, sigma^2)`.
    pub fn init_gaussian(dims: ImageDims, frame_width: usize, sigma: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims, frame_width)?;
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::Config(format!("prompt sigma {sigma} invalid")));
        }
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("valid sigma");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in &mut p.params {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn frame_width(&self) -> usize {
        self.frame_width
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: values.len(),
            });
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    /// Flat image indices covered by the frame.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Full-image layout of the prompt (zeros in the interior).
    pub fn embed(&self) -> Vec<f64> {
        embed_values(self.dims, &self.support, &self.params)
    }

    fn check_batch(&self, images: &DenseArray) -> Result<()> {
        if images.ncols() != self.dims.len() {
            return Err(Error::DimensionMismatch {
                expected: self.dims.len(),
                got: images.ncols(),
            });
        }
        Ok(())
    }

    /// `x' = x + delta` for every image; values are not clamped.
    pub fn apply(&self, images: &DenseArray) -> Result<DenseArray> {
        self.check_batch(images)?;
        let mut out = images.clone();
        for mut row in out.rows_mut() {
            for (&idx, &v) in self.support.iter().zip(&self.params) {
                row[idx] += v;
            }
        }
        Ok(out)
    }

    /// Chain rule onto the frame: sums image gradients over the batch at
    /// every frame position and drops the interior.
    pub fn scatter_grad(&self, image_grad: &DenseArray) -> Result<Vec<f64>> {
        self.check_batch(image_grad)?;
        let mut g = vec![0.0; self.support.len()];
        for row in image_grad.rows() {
            for (gi, &idx) in g.iter_mut().zip(&self.support) {
                *gi += row[idx];
            }
        }
        Ok(g)
    }

    pub fn to_checkpoint(&self, seed: Option<u64>) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("prompt", seed)
            .with_meta("dims", self.dims)?
            .with_meta("frame_width", self.frame_width)?;
        ck.push(Tensor::from_vec("delta", self.params.clone()));
        Ok(ck.seal())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("prompt")?;
        let dims: ImageDims = ck.meta_value("dims")?;
        let f: usize = ck.meta_value("frame_width")?;
        let mut p = Self::zeros(dims, f)?;
        p.set_params(&ck.tensor("delta")?.data)?;
        Ok(p)
    }
}

pub(crate) fn embed_values(dims: ImageDims, support: &[usize], params: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; dims.len()];
    for (&idx, &v) in support.iter().zip(params) {
        full[idx] = v;
    }
    full
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn dims(h: usize, w: usize, c: usize) -> ImageDims {
        ImageDims::new(h, w, c).unwrap()
    }

    fn random_images(n: usize, d: ImageDims, seed: u64) -> DenseArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d.len()), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn parameter_counts() {
        let p = FramePrompt::init_gaussian(dims(224, 224, 3), 16, 0.02, 0).unwrap();
        assert_eq!(p.len(), 39_936);
        let p = FramePrompt::init_gaussian(dims(32, 32, 3), 4, 0.02, 0).unwrap();
        assert_eq!(p.len(), 1_344);
        assert!(FramePrompt::zeros(dims(8, 8, 1), 5).is_err());
        assert!(FramePrompt::zeros(dims(8, 8, 1), 0).is_err());
        assert_eq!(FramePrompt::zeros(dims(8, 6, 1), 3).unwrap().len(), 48);
    }

    #[test]
    fn zero_sigma_is_identity() {
        let d = dims(8, 8, 3);
        let p = FramePrompt::init_gaussian(d, 2, 0.0, 9).unwrap();
        assert!(p.params().iter().all(|&v| v == 0.0));
        let x = random_images(3, d, 1);
        assert_eq!(p.apply(&x).unwrap(), x);
    }

    #[test]
    fn init_is_seeded() {
        let d = dims(8, 8, 3);
        let a = FramePrompt::init_gaussian(d, 2, 0.02, 4).unwrap();
        let b = FramePrompt::init_gaussian(d, 2, 0.02, 4).unwrap();
        let c = FramePrompt::init_gaussian(d, 2, 0.02, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn constant_frame_on_zero_image() {
        let d = dims(6, 6, 2);
        let mut p = FramePrompt::zeros(d, 1).unwrap();
        p.params_mut().fill(0.1);
        let out = p.apply(&Array2::zeros((2, d.len()))).unwrap();
        for row in out.rows() {
            for r in 0..6 {
                for c in 0..6 {
                    for ch in 0..2 {
                        let v = row[d.index(r, c, ch)];
                        let frame = r == 0 || c == 0 || r == 5 || c == 5;
                        assert_eq!(v, if frame { 0.1 } else { 0.0 });
                    }
                }
            }
        }
    }

    #[test]
    fn apply_then_subtract_recovers_input() {
        let d = dims(10, 10, 3);
        let p = FramePrompt::init_gaussian(d, 3, 0.5, 2).unwrap();
        let x = random_images(4, d, 3);
        let back = p.apply(&x).unwrap() - &Array2::from_shape_vec((1, d.len()), p.embed()).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // interior bit-identical
        let y = p.apply(&x).unwrap();
        for idx in 0..d.len() {
            if !p.support().contains(&idx) {
                assert_eq!(y.column(idx), x.column(idx));
            }
        }
    }

    #[test]
    fn scatter_examples() {
        let d = dims(6, 6, 1);
        let p = FramePrompt::zeros(d, 2).unwrap();
        let g = p.scatter_grad(&Array2::ones((2, d.len()))).unwrap();
        assert!(g.iter().all(|&v| v == 2.0));
        let mut interior = Array2::zeros((2, d.len()));
        interior[[0, d.index(2, 3, 0)]] = 5.0;
        interior[[1, d.index(3, 2, 0)]] = -1.0;
        assert!(p.scatter_grad(&interior).unwrap().iter().all(|&v| v == 0.0));
        assert!(p.scatter_grad(&Array2::zeros((1, 5))).is_err());
        assert!(p.apply(&Array2::zeros((1, 5))).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = FramePrompt::init_gaussian(dims(8, 8, 3), 2, 0.1, 1).unwrap();
        let ck = Checkpoint::from_json(&p.to_checkpoint(Some(1)).unwrap().to_json().unwrap()).unwrap();
        assert_eq!(FramePrompt::from_checkpoint(&ck).unwrap(), p);
    }

    proptest! {
        #[test]
        fn count_matches_mask_enumeration(h in 2usize..20, w in 2usize..20, c in 1usize..4, f in 1usize..10) {
            prop_assume!(2 * f <= h.min(w));
            let d = dims(h, w, c);
            let mut masked = 0;
            for r in 0..h { for col in 0..w { if in_frame(d, f, r, col) { masked += c; } } }
            prop_assert_eq!(frame_param_count(d, f), masked);
            prop_assert_eq!(FramePrompt::zeros(d, f).unwrap().len(), masked);
        }

        #[test]
        fn apply_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, s1 in any::<u64>(), s2 in any::<u64>()) {
            let d = dims(6, 7, 2);
            let p1 = FramePrompt::init_gaussian(d, 2, 1.0, s1).unwrap();
            let p2 = FramePrompt::init_gaussian(d, 2, 1.0, s2).unwrap();
            let mut mix = FramePrompt::zeros(d, 2).unwrap();
            let combo: Vec<f64> = p1.params().iter().zip(p2.params()).map(|(x, y)| a * x + b * y).collect();
            mix.set_params(&combo).unwrap();
            let x = random_images(2, d, s1 ^ s2);
            let lhs = mix.apply(&x).unwrap() - &x;
            let rhs = (p1.apply(&x).unwrap() - &x) * a + (p2.apply(&x).unwrap() - &x) * b;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-9);
            }
        }

        #[test]
        fn scatter_is_a_projection(seed in any::<u64>()) {
            let d = dims(7, 7, 2);
            let p = FramePrompt::zeros(d, 2).unwrap();
            let g = random_images(3, d, seed);
            let once = p.scatter_grad(&g).unwrap();
            let layout = Array2::from_shape_vec((1, d.len()), embed_values(d, p.support(), &once)).unwrap();
            let twice = p.scatter_grad(&layout).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
