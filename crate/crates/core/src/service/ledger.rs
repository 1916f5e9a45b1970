use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

/// Price per answered image at the simulated provider, in dollars.
pub const PRICE_PER_REQUEST: f64 = 0.0032;

/// Running count of answered requests. One image is one request.
#[derive(Debug)]
pub struct QueryLedger {
    price: f64,
    total: AtomicU64,
    per_method: Mutex<BTreeMap<String, u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub price_per_request: f64,
    pub total_requests: u64,
    pub total_cost: f64,
    pub per_method: BTreeMap<String, u64>,
}

impl LedgerSnapshot {
    pub fn requests_for(&self, method: &str) -> u64 {
        self.per_method.get(method).copied().unwrap_or(0)
    }
}

/// Dollar cost of `requests` at `price`, rounded to a hundredth of a cent.
pub fn cost_of(requests: u64, price: f64) -> f64 {
    (requests as f64 * price * 1e4).round() / 1e4
}

impl QueryLedger {
    pub fn new(price: f64) -> Self {
        Self {
            price,
            total: AtomicU64::new(0),
            per_method: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn record(&self, method: &str, requests: u64) {
        let mut m = self.per_method.lock().expect("ledger lock");
        *m.entry(method.to_string()).or_default() += requests;
        self.total.fetch_add(requests, Ordering::SeqCst);
    }

    pub fn total_requests(&self) -> u64 {
        self.total.load(Ordering::SeqCst)
    }

    pub fn price(&self) -> f64 {
        self.price
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let m = self.per_method.lock().expect("ledger lock");
        let total = self.total.load(Ordering::SeqCst);
        LedgerSnapshot {
            price_per_request: self.price,
            total_requests: total,
            total_cost: cost_of(total, self.price),
            per_method: m.clone(),
        }
    }
}

impl Default for QueryLedger {
    fn default() -> Self {
        Self::new(PRICE_PER_REQUEST)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_tracks_count() {
        let l = QueryLedger::default();
        l.record("beta", 1);
        let s = l.snapshot();
        assert_eq!(s.total_requests, 1);
        assert_eq!(s.total_cost, 0.0032);
        l.record("zoo", 7999);
        l.record("beta", 499);
        let s = l.snapshot();
        assert_eq!(s.requests_for("beta"), 500);
        assert_eq!(s.requests_for("zoo"), 7999);
        assert_eq!(s.total_cost, 27.1968);
        assert_eq!(cost_of(32_000, PRICE_PER_REQUEST), 102.4);
    }
}
