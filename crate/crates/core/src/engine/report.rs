use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::service::cost_of;

/// One row of a run trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub index: usize,
    pub segment: String,
    pub size: usize,
    /// Samples that received an answer from the service.
    pub answered: usize,
    pub correct: usize,
    pub correct_blackbox: usize,
    pub correct_harmonized: usize,
    pub loss: f64,
    pub loss_harmon: f64,
    pub loss_steer: f64,
    pub loss_consist: f64,
    pub entropy_steer: f64,
    pub entropy_blackbox: f64,
    pub entropy_harmonized: f64,
    pub reliable_rate: f64,
    pub diverse_rate: f64,
    /// Requests billed so far in this run.
    pub queries: u64,
    pub error: Option<String>,
}

impl BatchRecord {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.size)
    }

    pub fn accuracy_blackbox(&self) -> f64 {
        ratio(self.correct_blackbox, self.size)
    }

    pub fn accuracy_harmonized(&self) -> f64 {
        ratio(self.correct_harmonized, self.size)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Outcome of one online pass over a stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    /// Queries issued per test sample by design.
    pub queries_per_sample: u64,
    pub price_per_request: f64,
    pub batches: Vec<BatchRecord>,
    /// Wall time per batch; kept out of serialized reports so that they stay
    /// reproducible byte for byte.
    #[serde(skip)]
    pub wall: Vec<Duration>,
}

impl RunReport {
    pub fn new(method: &str, queries_per_sample: u64, price_per_request: f64) -> Self {
        Self {
            method: method.to_string(),
            queries_per_sample,
            price_per_request,
            ..Self::default()
        }
    }

    pub fn samples(&self) -> usize {
        self.batches.iter().map(|b| b.size).sum()
    }

    pub fn answered(&self) -> usize {
        self.batches.iter().map(|b| b.answered).sum()
    }

    pub fn correct(&self) -> usize {
        self.batches.iter().map(|b| b.correct).sum()
    }

    /// Headline online accuracy over every sample in the stream.
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct(), self.samples())
    }

    pub fn accuracy_blackbox(&self) -> f64 {
        ratio(self.batches.iter().map(|b| b.correct_blackbox).sum(), self.samples())
    }

    pub fn accuracy_harmonized(&self) -> f64 {
        ratio(self.batches.iter().map(|b| b.correct_harmonized).sum(), self.samples())
    }

    pub fn queries(&self) -> u64 {
        self.batches.last().map(|b| b.queries).unwrap_or(0)
    }

    pub fn cost(&self) -> f64 {
        cost_of(self.queries(), self.price_per_request)
    }

    pub fn skipped_batches(&self) -> usize {
        self.batches.iter().filter(|b| b.error.is_some()).count()
    }

    /// Accuracy over the first `n` samples of the stream.
    pub fn prefix_accuracy(&self, n: usize) -> f64 {
        let (mut seen, mut correct) = (0, 0);
        for b in &self.batches {
            if seen + b.size > n {
                break;
            }
            seen += b.size;
            correct += b.correct;
        }
        ratio(correct, seen)
    }

    /// Mean per-batch accuracy over the last quarter of the batches.
    pub fn final_quarter_accuracy(&self) -> f64 {
        let n = self.batches.len();
        if n == 0 {
            return 0.0;
        }
        let tail = &self.batches[n - n.div_ceil(4)..];
        tail.iter().map(BatchRecord::accuracy).sum::<f64>() / tail.len() as f64
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    /// Per-batch trace for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "batch,segment,size,answered,accuracy,accuracy_blackbox,accuracy_harmonized,loss,loss_harmon,loss_steer,loss_consist,entropy_steer,entropy_blackbox,entropy_harmonized,reliable_rate,diverse_rate,queries,cost,error\n",
        );
        for b in &self.batches {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                b.index,
                b.segment,
                b.size,
                b.answered,
                b.accuracy(),
                b.accuracy_blackbox(),
                b.accuracy_harmonized(),
                b.loss,
                b.loss_harmon,
                b.loss_steer,
                b.loss_consist,
                b.entropy_steer,
                b.entropy_blackbox,
                b.entropy_harmonized,
                b.reliable_rate,
                b.diverse_rate,
                b.queries,
                cost_of(b.queries, self.price_per_request),
                b.error.as_deref().unwrap_or("").replace(',', ";"),
            );
        }
        s
    }
}
