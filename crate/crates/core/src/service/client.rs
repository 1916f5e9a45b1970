use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::handler::ServiceCore;
use super::wire::{quantize, read_frame, write_frame, ApiRequest, ApiResponse};
use crate::autodiff::DenseArray;
use crate::data::ImageDims;
use crate::error::{Error, Result};
use crate::prob::ProbVector;

/// Everything a caller learns from one request.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub probabilities: Vec<ProbVector>,
    pub request_id: String,
    pub wall_time: Duration,
}

/// The opaque image-in, probabilities-out interface.
pub trait BlackBoxApi: Send + Sync {
    /// One request. At most [`BlackBoxApi::max_batch`] images.
    fn query(&self, images: &DenseArray, dims: ImageDims) -> Result<QueryResult>;

    fn max_batch(&self) -> usize;

    /// Images answered through this client so far.
    fn answered(&self) -> u64;
}

/// Queries every row, splitting into as many requests as needed.
pub fn query_all(api: &dyn BlackBoxApi, images: &DenseArray, dims: ImageDims) -> Result<Vec<ProbVector>> {
    let step = api.max_batch().max(1);
    let mut out = Vec::with_capacity(images.nrows());
    let mut start = 0;
    while start < images.nrows() {
        let end = (start + step).min(images.nrows());
        let chunk = images.slice(ndarray::s![start..end, ..]).to_owned();
        out.extend(api.query(&chunk, dims)?.probabilities);
        start = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
    /// Per-attempt connect and read limit.
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 4,
            initial_backoff: Duration::from_millis(10),
            max_backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Single attempt, no backoff.
    pub fn none() -> Self {
        Self {
            attempts: 1,
            ..Self::default()
        }
    }
}

static CLIENT_COUNTER: AtomicU64 = AtomicU64::new(0);

fn client_nonce() -> u64 {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0);
    let n = CLIENT_COUNTER.fetch_add(1, Ordering::Relaxed);
    nanos ^ ((std::process::id() as u64) << 40) ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Request building, retries and response validation shared by transports.
#[derive(Debug)]
struct ClientCore {
    tag: String,
    nonce: u64,
    counter: AtomicU64,
    answered: AtomicU64,
    retry: RetryPolicy,
    max_batch: usize,
}

enum Attempt {
    Answer(ApiResponse),
    Lost(String),
}

impl ClientCore {
    fn new(tag: &str, retry: RetryPolicy, max_batch: usize) -> Self {
        Self {
            tag: tag.to_string(),
            nonce: client_nonce(),
            counter: AtomicU64::new(0),
            answered: AtomicU64::new(0),
            retry,
            max_batch,
        }
    }

    fn request(&self, images: &DenseArray, dims: ImageDims) -> Result<ApiRequest> {
        if images.ncols() != dims.len() {
            return Err(Error::DimensionMismatch {
                expected: dims.len(),
                got: images.ncols(),
            });
        }
        if images.nrows() > self.max_batch {
            return Err(Error::Config(format!(
                "{} images exceed the request limit of {}",
                images.nrows(),
                self.max_batch
            )));
        }
        let id = self.counter.fetch_add(1, Ordering::Relaxed);
        Ok(ApiRequest {
            request_id: format!("{:016x}-{id}", self.nonce),
            tag: self.tag.clone(),
            shape: [images.nrows(), dims.height, dims.width, dims.channels],
            pixels: images.iter().map(|&v| quantize(v)).collect(),
        })
    }

    fn run(&self, req: ApiRequest, mut send: impl FnMut(&ApiRequest) -> Attempt) -> Result<QueryResult> {
        let start = Instant::now();
        let mut backoff = self.retry.initial_backoff;
        let mut last = String::new();
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff = (backoff * 2).min(self.retry.max_backoff);
            }
            match send(&req) {
                Attempt::Answer(resp) => return self.accept(&req, resp, start.elapsed()),
                Attempt::Lost(why) => {
                    log::debug!("request {} attempt {attempt} lost: {why}", req.request_id);
                    last = why;
                }
            }
        }
        Err(Error::Transport(format!(
            "request {} timed out after {} attempts: {last}",
            req.request_id, self.retry.attempts
        )))
    }

    fn accept(&self, req: &ApiRequest, resp: ApiResponse, wall_time: Duration) -> Result<QueryResult> {
        if resp.request_id() != req.request_id {
            return Err(Error::Protocol(format!(
                "response for {:?} to request {:?}",
                resp.request_id(),
                req.request_id
            )));
        }
        let rows = match resp {
            ApiResponse::Ok { probabilities, .. } => probabilities,
            ApiResponse::Err { error, .. } => return Err(Error::Protocol(error)),
        };
        if rows.len() != req.shape[0] {
            return Err(Error::Protocol(format!(
                "{} answers for {} images",
                rows.len(),
                req.shape[0]
            )));
        }
        let probabilities = rows
            .into_iter()
            .map(ProbVector::new)
            .collect::<Result<Vec<_>>>()?;
        if probabilities.windows(2).any(|w| w[0].len() != w[1].len()) {
            return Err(Error::Protocol("answers disagree on the class count".into()));
        }
        self.answered.fetch_add(req.shape[0] as u64, Ordering::SeqCst);
        Ok(QueryResult {
            probabilities,
            request_id: req.request_id.clone(),
            wall_time,
        })
    }
}

/// Client for a service running in the same process. Applies the same
/// quantization as the wire.
#[derive(Debug, Clone)]
pub struct InProcessClient {
    core: Arc<ServiceCore>,
    client: Arc<ClientCore>,
}

impl InProcessClient {
    pub fn new(core: Arc<ServiceCore>, tag: &str) -> Self {
        let max = core.config().max_batch;
        Self::with_retry(core, tag, RetryPolicy::default(), max)
    }

    pub fn with_retry(core: Arc<ServiceCore>, tag: &str, retry: RetryPolicy, max_batch: usize) -> Self {
        Self {
            core,
            client: Arc::new(ClientCore::new(tag, retry, max_batch)),
        }
    }
}

impl BlackBoxApi for InProcessClient {
    fn query(&self, images: &DenseArray, dims: ImageDims) -> Result<QueryResult> {
        let req = self.client.request(images, dims)?;
        self.client.run(req, |r| match self.core.serve(r) {
            Some(resp) => Attempt::Answer(resp),
            None => Attempt::Lost("response lost".into()),
        })
    }

    fn max_batch(&self) -> usize {
        self.client.max_batch
    }

    fn answered(&self) -> u64 {
        self.client.answered.load(Ordering::SeqCst)
    }
}

/// Client for the TCP front end. Safe to share between threads; requests on
/// one client are serialized over a single connection.
#[derive(Debug)]
pub struct TcpClient {
    addr: SocketAddr,
    conn: Mutex<Option<TcpStream>>,
    client: ClientCore,
}

impl TcpClient {
    pub fn connect(addr: impl ToSocketAddrs, tag: &str) -> Result<Self> {
        Self::with_retry(addr, tag, RetryPolicy::default(), 1024)
    }

    /// Resolves the address; the connection itself is opened lazily.
    pub fn with_retry(addr: impl ToSocketAddrs, tag: &str, retry: RetryPolicy, max_batch: usize) -> Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| Error::Config("address resolves to nothing".into()))?;
        Ok(Self {
            addr,
            conn: Mutex::new(None),
            client: ClientCore::new(tag, retry, max_batch),
        })
    }

    /// Opens the connection now, so an unreachable service is reported
    /// before any request is built.
    pub fn ping(&self) -> Result<()> {
        let mut slot = self.conn.lock().map_err(|_| Error::Transport("connection lock poisoned".into()))?;
        if slot.is_none() {
            let s = TcpStream::connect_timeout(&self.addr, self.client.retry.timeout)
                .map_err(|e| Error::Transport(format!("{}: {e}", self.addr)))?;
            s.set_read_timeout(Some(self.client.retry.timeout))?;
            s.set_write_timeout(Some(self.client.retry.timeout))?;
            let _ = s.set_nodelay(true);
            *slot = Some(s);
        }
        Ok(())
    }

    fn attempt(&self, slot: &mut Option<TcpStream>, req: &ApiRequest) -> std::result::Result<ApiResponse, String> {
        if slot.is_none() {
            let s = TcpStream::connect_timeout(&self.addr, self.client.retry.timeout).map_err(|e| e.to_string())?;
            s.set_read_timeout(Some(self.client.retry.timeout)).map_err(|e| e.to_string())?;
            s.set_write_timeout(Some(self.client.retry.timeout)).map_err(|e| e.to_string())?;
            let _ = s.set_nodelay(true);
            *slot = Some(s);
        }
        let s = slot.as_mut().expect("connected");
        write_frame(s, req).map_err(|e| e.to_string())?;
        match read_frame::<_, ApiResponse>(s) {
            Ok(Some(r)) => Ok(r),
            Ok(None) => Err("connection closed".into()),
            Err(e) => Err(e.to_string()),
        }
    }
}

impl BlackBoxApi for TcpClient {
    fn query(&self, images: &DenseArray, dims: ImageDims) -> Result<QueryResult> {
        let req = self.client.request(images, dims)?;
        let mut slot = self.conn.lock().expect("connection lock");
        self.client.run(req, |r| match self.attempt(&mut slot, r) {
            Ok(resp) => Attempt::Answer(resp),
            Err(why) => {
                *slot = None;
                Attempt::Lost(why)
            }
        })
    }

    fn max_batch(&self) -> usize {
        self.client.max_batch
    }

    fn answered(&self) -> u64 {
        self.client.answered.load(Ordering::SeqCst)
    }
}

/// Refuses any request that would push the answered count past `cap`.
#[derive(Debug)]
pub struct CappedClient<C> {
    inner: C,
    cap: u64,
}

impl<C: BlackBoxApi> CappedClient<C> {
    pub fn new(inner: C, cap: u64) -> Self {
        Self { inner, cap }
    }

    pub fn remaining(&self) -> u64 {
        self.cap.saturating_sub(self.inner.answered())
    }
}

impl<C: BlackBoxApi> BlackBoxApi for CappedClient<C> {
    fn query(&self, images: &DenseArray, dims: ImageDims) -> Result<QueryResult> {
        let n = images.nrows() as u64;
        if n > self.remaining() {
            return Err(Error::BudgetExhausted(format!(
                "{n} images requested, {} of {} left",
                self.remaining(),
                self.cap
            )));
        }
        self.inner.query(images, dims)
    }

    fn max_batch(&self) -> usize {
        self.inner.max_batch()
    }

    fn answered(&self) -> u64 {
        self.inner.answered()
    }
}

impl<C: BlackBoxApi + ?Sized> BlackBoxApi for &C {
    fn query(&self, images: &DenseArray, dims: ImageDims) -> Result<QueryResult> {
        (**self).query(images, dims)
    }

    fn max_batch(&self) -> usize {
        (**self).max_batch()
    }

    fn answered(&self) -> u64 {
        (**self).answered()
    }
}
