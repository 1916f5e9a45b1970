//! Images, labeled sets, procedural source data, corruptions and streams.
//!
//! Labels never travel with an [`ImageBatch`]; evaluation joins predictions
//! to a [`LabelBook`] by sample id.

mod corrupt;
mod source;
mod stream;

use std::collections::HashMap;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::autodiff::DenseArray;
use crate::checkpoint::{Checkpoint, Tensor};
use crate::error::{Error, Result};

pub use corrupt::{corrupt, distortion, CorruptionKind, CorruptionSpec};
pub use source::{gen_source, SourceStyle};
pub use stream::{make_continual_stream, make_stream, OnlineStream, Segment, StreamMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageDims {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Config(format!(
                "image dims {height}x{width}x{channels} must be positive"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    /// Flattened length `H W C`.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of `(row, col, channel)`.
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }
}

impl Default for ImageDims {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
        }
    }
}

/// A batch of flattened images as seen by adaptation code. No labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub ids: Vec<u64>,
    pub images: DenseArray,
    pub dims: ImageDims,
}

impl ImageBatch {
    pub fn new(ids: Vec<u64>, images: DenseArray, dims: ImageDims) -> Result<Self> {
        if images.ncols() != dims.len() {
            return Err(Error::DimensionMismatch {
                expected: dims.len(),
                got: images.ncols(),
            });
        }
        if ids.len() != images.nrows() {
            return Err(Error::Shape(format!(
                "{} ids for {} images",
                ids.len(),
                images.nrows()
            )));
        }
        Ok(Self { ids, images, dims })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Images with their labels, for training and offline evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub dims: ImageDims,
    pub classes: usize,
    pub images: DenseArray,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            dims: self.dims,
            classes: self.classes,
            images: self.images.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    /// Same labels, corrupted images.
    pub fn corrupted(&self, spec: &CorruptionSpec) -> Result<Self> {
        Ok(Self {
            images: corrupt(&self.images, self.dims, spec)?,
            ..self.clone()
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    pub fn to_checkpoint(&self, seed: Option<u64>) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("dataset", seed)
            .with_meta("dims", self.dims)?
            .with_meta("classes", self.classes)?;
        ck.push(Tensor::from_array("images", &self.images));
        ck.push(Tensor::from_vec(
            "labels",
            self.labels.iter().map(|&y| y as f64).collect(),
        ));
        Ok(ck.seal())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("dataset")?;
        let dims: ImageDims = ck.meta_value("dims")?;
        let classes: usize = ck.meta_value("classes")?;
        let images = ck.tensor("images")?.to_array()?;
        let labels: Vec<usize> = ck.tensor("labels")?.data.iter().map(|&y| y as usize).collect();
        if images.nrows() != labels.len() || images.ncols() != dims.len() {
            return Err(Error::Checkpoint("dataset tensors disagree".into()));
        }
        Ok(Self {
            dims,
            classes,
            images,
            labels,
        })
    }
}

/// Out-of-band label lookup by sample id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelBook {
    labels: HashMap<u64, usize>,
}

impl LabelBook {
    pub fn insert(&mut self, id: u64, label: usize) {
        self.labels.insert(id, label);
    }

    pub fn label(&self, id: u64) -> Option<usize> {
        self.labels.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of `(id, prediction)` pairs that match their label.
    pub fn hits(&self, ids: &[u64], predictions: &[usize]) -> usize {
        ids.iter()
            .zip(predictions)
            .filter(|(id, p)| self.label(**id) == Some(**p))
            .count()
    }
}
