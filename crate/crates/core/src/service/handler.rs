use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ledger::{QueryLedger, PRICE_PER_REQUEST};
use super::wire::{quantize_all, ApiRequest, ApiResponse};
use crate::net::BlackBoxNet;

/// Delay applied before every answer: `fixed + U(0, jitter)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub fixed_ms: f64,
    pub jitter_ms: f64,
    pub seed: u64,
}

impl LatencyModel {
    pub fn zero() -> Self {
        Self {
            fixed_ms: 0.0,
            jitter_ms: 0.0,
            seed: 0,
        }
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            fixed_ms: 45.0,
            jitter_ms: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub price_per_request: f64,
    pub latency: LatencyModel,
    /// Most images accepted in one request.
    pub max_batch: usize,
    /// Pixel range enforced on input, if any.
    pub clamp: Option<(f64, f64)>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            price_per_request: PRICE_PER_REQUEST,
            latency: LatencyModel::default(),
            max_batch: 1024,
            clamp: None,
        }
    }
}

impl ServiceConfig {
    /// Defaults with no added latency.
    pub fn instant() -> Self {
        Self {
            latency: LatencyModel::zero(),
            ..Self::default()
        }
    }
}

const ANSWER_CACHE: usize = 4096;

#[derive(Debug, Default)]
struct AnswerCache {
    order: VecDeque<String>,
    answers: HashMap<String, Vec<Vec<f64>>>,
}

/// Transport-independent request handling shared by every front end.
pub struct ServiceCore {
    net: Arc<BlackBoxNet>,
    config: ServiceConfig,
    ledger: QueryLedger,
    cache: Mutex<AnswerCache>,
    jitter: Mutex<ChaCha8Rng>,
    drops: AtomicU64,
}

impl std::fmt::Debug for ServiceCore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceCore")
            .field("config", &self.config)
            .field("ledger", &self.ledger)
            .finish_non_exhaustive()
    }
}

impl ServiceCore {
    pub fn new(net: BlackBoxNet, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            net: Arc::new(net),
            ledger: QueryLedger::new(config.price_per_request),
            jitter: Mutex::new(ChaCha8Rng::seed_from_u64(config.latency.seed)),
            config,
            cache: Mutex::new(AnswerCache::default()),
            drops: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }

    pub(crate) fn net(&self) -> &Arc<BlackBoxNet> {
        &self.net
    }

    /// The next `n` computed answers are lost before reaching the caller.
    pub fn inject_dropped_responses(&self, n: u64) {
        self.drops.fetch_add(n, Ordering::SeqCst);
    }

    fn take_drop(&self) -> bool {
        self.drops
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |d| d.checked_sub(1))
            .is_ok()
    }

    fn sleep(&self) {
        let l = self.config.latency;
        let jitter = if l.jitter_ms > 0.0 {
            self.jitter.lock().expect("jitter lock").random_range(0.0..l.jitter_ms)
        } else {
            0.0
        };
        let ms = l.fixed_ms + jitter;
        if ms > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(ms / 1000.0));
        }
    }

    /// Answers a request. `None` means the answer was computed and counted
    /// but lost in transit (fault injection).
    pub fn serve(&self, req: &ApiRequest) -> Option<ApiResponse> {
        let resp = self.answer(req);
        if self.take_drop() {
            return None;
        }
        Some(resp)
    }

    fn answer(&self, req: &ApiRequest) -> ApiResponse {
        let err = |msg: String| ApiResponse::Err {
            request_id: req.request_id.clone(),
            error: msg,
        };
        if let Some(p) = self.cached(&req.request_id) {
            return ApiResponse::Ok {
                request_id: req.request_id.clone(),
                probabilities: p,
            };
        }
        let [n, h, w, c] = req.shape;
        let d = self.net.input_dim();
        if n == 0 {
            return err("empty batch".into());
        }
        if n > self.config.max_batch {
            return err(format!(
                "batch of {n} images exceeds the limit of {}",
                self.config.max_batch
            ));
        }
        if h * w * c != d {
            return err(format!("image of {h}x{w}x{c} values, model expects {d}"));
        }
        if req.pixels.len() != n * d {
            return err(format!("{} pixel values for shape {:?}", req.pixels.len(), req.shape));
        }
        if req.pixels.iter().any(|v| !v.is_finite()) {
            return err("non-finite pixel value".into());
        }
        let mut images = match Array2::from_shape_vec((n, d), req.pixels.clone()) {
            Ok(a) => a,
            Err(e) => return err(e.to_string()),
        };
        if let Some((lo, hi)) = self.config.clamp {
            images.mapv_inplace(|v| v.clamp(lo, hi));
        }
        self.sleep();
        let probs = match self.net.predict(&images) {
            Ok(p) => p,
            Err(e) => return err(e.to_string()),
        };
        let rows: Vec<Vec<f64>> = probs
            .rows()
            .into_iter()
            .map(|r| {
                let mut v = r.to_vec();
                quantize_all(&mut v);
                v
            })
            .collect();
        // count and cache atomically so a retry can never be billed twice
        let mut cache = self.cache.lock().expect("cache lock");
        if let Some(p) = cache.answers.get(&req.request_id) {
            return ApiResponse::Ok {
                request_id: req.request_id.clone(),
                probabilities: p.clone(),
            };
        }
        self.ledger.record(&req.tag, n as u64);
        if !req.request_id.is_empty() {
            cache.order.push_back(req.request_id.clone());
            cache.answers.insert(req.request_id.clone(), rows.clone());
            while cache.order.len() > ANSWER_CACHE {
                if let Some(old) = cache.order.pop_front() {
                    cache.answers.remove(&old);
                }
            }
        }
        ApiResponse::Ok {
            request_id: req.request_id.clone(),
            probabilities: rows,
        }
    }

    fn cached(&self, id: &str) -> Option<Vec<Vec<f64>>> {
        if id.is_empty() {
            return None;
        }
        self.cache.lock().expect("cache lock").answers.get(id).cloned()
    }
}
