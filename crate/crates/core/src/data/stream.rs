//! One-pass online streams over labeled sets.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageBatch, LabelBook, LabeledSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StreamMode {
    #[default]
    Iid,
    /// Each sample is grouped by its own label with probability `skew`,
    /// otherwise by a random class; batches never cross groups.
    LabelImbalance { skew: f64 },
    /// A single segment of a continual stream; see [`make_continual_stream`].
    Continual,
}


/// A named contiguous run of batches in a stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub batches: usize,
}

/// Batches that may be consumed exactly once.
#[derive(Debug)]
pub struct OnlineStream {
    batches: Option<Vec<ImageBatch>>,
    segments: Vec<Segment>,
    samples: usize,
}

impl OnlineStream {
    fn new(batches: Vec<ImageBatch>, segments: Vec<Segment>) -> Self {
        let samples = batches.iter().map(ImageBatch::len).sum();
        Self {
            batches: Some(batches),
            segments,
            samples,
        }
    }

    /// Pre-built batches as a single segment named `name`.
    pub fn from_batches(name: &str, batches: Vec<ImageBatch>) -> Self {
        let segments = if batches.is_empty() {
            Vec::new()
        } else {
            vec![Segment {
                name: name.to_string(),
                batches: batches.len(),
            }]
        };
        Self::new(batches, segments)
    }

    /// Hands out the batches. A second call fails.
    pub fn take(&mut self) -> Result<std::vec::IntoIter<ImageBatch>> {
        self.batches
            .take()
            .map(Vec::into_iter)
            .ok_or(Error::StreamConsumed)
    }

    pub fn is_consumed(&self) -> bool {
        self.batches.is_none()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn num_batches(&self) -> usize {
        self.segments.iter().map(|s| s.batches).sum()
    }
}

fn order(set: &LabeledSet, mode: StreamMode, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.shuffle(rng);
    match mode {
        StreamMode::Iid | StreamMode::Continual => {
            Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
        }
        StreamMode::LabelImbalance { skew } => {
            if !(0.0..=1.0).contains(&skew) {
                return Err(Error::Config(format!("skew {skew} outside [0, 1]")));
            }
            let mut groups = vec![Vec::new(); set.classes];
            for i in idx {
                let key = if rng.random::<f64>() < skew {
                    set.labels[i]
                } else {
                    rng.random_range(0..set.classes)
                };
                groups[key].push(i);
            }
            let mut batches: Vec<Vec<usize>> = groups
                .iter()
                .flat_map(|g| g.chunks(batch_size).map(<[usize]>::to_vec))
                .collect();
            // groups arrive in random order, samples within a batch stay grouped
            batches.shuffle(rng);
            Ok(batches)
        }
    }
}

fn build(
    parts: &[(String, &LabeledSet, StreamMode)],
    batch_size: usize,
    seed: u64,
) -> Result<(OnlineStream, LabelBook)> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let total: usize = parts.iter().map(|(_, s, _)| s.len()).sum();
    if total == 0 {
        return Err(Error::Config("stream dataset is empty".into()));
    }
    if batch_size > total {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds dataset size {total}"
        )));
    }
    let dims = parts[0].1.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut book = LabelBook::default();
    let mut batches = Vec::new();
    let mut segments = Vec::new();
    let mut next_id = 0u64;
    for (name, set, mode) in parts {
        if set.dims != dims {
            return Err(Error::Shape(format!("segment {name} has mismatched image dims")));
        }
        let groups = order(set, *mode, batch_size, &mut rng)?;
        segments.push(Segment {
            name: name.clone(),
            batches: groups.len(),
        });
        for rows in groups {
            let ids: Vec<u64> = (next_id..next_id + rows.len() as u64).collect();
            next_id += rows.len() as u64;
            for (&id, &r) in ids.iter().zip(&rows) {
                book.insert(id, set.labels[r]);
            }
            batches.push(ImageBatch::new(ids, set.images.select(Axis(0), &rows), dims)?);
        }
    }
    Ok((OnlineStream::new(batches, segments), book))
}

/// Stream over one dataset. Sample ids are assigned in stream order and
/// labels are returned separately.
pub fn make_stream(
    dataset: &LabeledSet,
    mode: StreamMode,
    batch_size: usize,
    seed: u64,
) -> Result<(OnlineStream, LabelBook)> {
    build(&[(mode_name(mode).into(), dataset, mode)], batch_size, seed)
}

/// Named segments concatenated in the given order, each shuffled on its own.
pub fn make_continual_stream(
    segments: &[(String, LabeledSet)],
    batch_size: usize,
    seed: u64,
) -> Result<(OnlineStream, LabelBook)> {
    if segments.is_empty() {
        return Err(Error::Config("continual stream needs at least one segment".into()));
    }
    let parts: Vec<_> = segments
        .iter()
        .map(|(n, s)| (n.clone(), s, StreamMode::Continual))
        .collect();
    build(&parts, batch_size, seed)
}

fn mode_name(mode: StreamMode) -> &'static str {
    match mode {
        StreamMode::Iid => "iid",
        StreamMode::LabelImbalance { .. } => "label_imbalance",
        StreamMode::Continual => "continual",
    }
}
