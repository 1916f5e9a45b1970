//! Experiments over the fixtures: one declarative config per run, JSON and
//! CSV reports keyed by a config hash, sweeps and the gradient analysis.

mod fixture;
mod gradients;
mod sweep;

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_continual_stream, make_stream, CorruptionSpec, LabelBook, LabeledSet, OnlineStream, StreamMode};
use crate::engine::{run_stream, BetaState, EngineConfig, Objective, PredictionSource, RunOptions, RunReport};
use crate::error::{Error, Result};
use crate::net::SteeringNet;
use crate::prompt::FramePrompt;
use crate::service::{
    cost_of, BlackBoxApi, InProcessClient, LatencyModel, LedgerSnapshot, ServiceConfig, ServiceCore, TcpClient,
    PRICE_PER_REQUEST,
};
use crate::zoo::{
    distill_stream, source_stream, tt_aug_stream, zoo_adapt_stream, DistillConfig, ZooAdapter, ZooConfig, ZooMethod,
};

pub use fixture::{clean_accuracy, train, FixtureConfig, Fixtures, Role};
pub use gradients::{analyze_gradients, AlphaSummary, GradientAnalysis, GradientAnalysisConfig};
pub use sweep::{apply_axis, sweep, SweepAxis, SweepCurve, SweepPoint};

/// Everything a run can do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Beta,
    ZooRgf,
    ZooSpsaGc,
    ZooIsoEs,
    TtAug,
    Distill,
    Source,
    /// Adapts only the steering model's normalization and mixes the two
    /// predictions at inference.
    AdaptEnsemble,
    /// Learns the prompt on the steering entropy alone and mixes the two
    /// predictions at inference.
    PromptEnsemble,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Beta,
        Method::ZooRgf,
        Method::ZooSpsaGc,
        Method::ZooIsoEs,
        Method::TtAug,
        Method::Distill,
        Method::Source,
        Method::AdaptEnsemble,
        Method::PromptEnsemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Beta => "beta",
            Method::ZooRgf => "zoo_rgf",
            Method::ZooSpsaGc => "zoo_spsa_gc",
            Method::ZooIsoEs => "zoo_iso_es",
            Method::TtAug => "tt_aug",
            Method::Distill => "distill",
            Method::Source => "source",
            Method::AdaptEnsemble => "adapt_ensemble",
            Method::PromptEnsemble => "prompt_ensemble",
        }
    }

    pub fn zoo(self) -> Option<ZooMethod> {
        match self {
            Method::ZooRgf => Some(ZooMethod::Rgf),
            Method::ZooSpsaGc => Some(ZooMethod::SpsaGc),
            Method::ZooIsoEs => Some(ZooMethod::IsoEs),
            _ => None,
        }
    }

    /// Methods driven by the steering model through the engine.
    pub fn uses_engine(self) -> bool {
        matches!(self, Method::Beta | Method::AdaptEnsemble | Method::PromptEnsemble)
    }

    /// Methods that learn a frame prompt.
    pub fn uses_prompt(self) -> bool {
        matches!(self, Method::Beta | Method::PromptEnsemble) || self.zoo().is_some()
    }

    /// Requests per test sample by design.
    pub fn queries_per_sample(self, cfg: &ExperimentConfig) -> u64 {
        match self {
            Method::TtAug => cfg.tt_aug.views as u64,
            m if m.zoo().is_some() => cfg.zoo.queries_per_sample as u64,
            _ => 1,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Iid,
    LabelImbalance,
    Continual,
}

/// Which target data arrive, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub mode: StreamKind,
    /// Label-imbalance skew in `[0, 1]`.
    pub skew: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// `kind:severity:seed` triples. Empty means the clean target set; for
    /// i.i.d. and label-imbalanced streams several corruptions are pooled,
    /// for continual streams each one is a segment, in order.
    pub corruptions: Vec<String>,
    /// Use only the first `n` target samples.
    pub samples: Option<usize>,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            mode: StreamKind::Iid,
            skew: 1.0,
            batch_size: 64,
            seed: 4,
            corruptions: vec!["contrast:5:3".into()],
            samples: None,
        }
    }
}

impl StreamSpec {
    pub fn specs(&self) -> Result<Vec<CorruptionSpec>> {
        self.corruptions.iter().map(|s| s.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.specs()?;
        if self.batch_size == 0 {
            return Err(Error::Config("stream batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.skew) {
            return Err(Error::Config(format!("skew {} outside [0, 1]", self.skew)));
        }
        if self.mode == StreamKind::Continual && self.corruptions.is_empty() {
            return Err(Error::Config("a continual stream needs at least one corruption".into()));
        }
        if self.samples == Some(0) {
            return Err(Error::Config("samples must be positive".into()));
        }
        Ok(())
    }

    /// Builds the one-pass stream and its out-of-band labels.
    pub fn build(&self, target: &LabeledSet) -> Result<(OnlineStream, LabelBook)> {
        self.validate()?;
        let base = match self.samples {
            Some(n) if n < target.len() => target.select(&(0..n).collect::<Vec<_>>()),
            _ => target.clone(),
        };
        let specs = self.specs()?;
        let shifted = specs.iter().map(|s| base.corrupted(s)).collect::<Result<Vec<_>>>()?;
        let pooled = || -> Result<LabeledSet> {
            match shifted.len() {
                0 => Ok(base.clone()),
                1 => Ok(shifted[0].clone()),
                _ => pool(&shifted),
            }
        };
        match self.mode {
            StreamKind::Iid => make_stream(&pooled()?, StreamMode::Iid, self.batch_size, self.seed),
            StreamKind::LabelImbalance => make_stream(
                &pooled()?,
                StreamMode::LabelImbalance { skew: self.skew },
                self.batch_size,
                self.seed,
            ),
            StreamKind::Continual => {
                let segs: Vec<(String, LabeledSet)> = specs
                    .iter()
                    .zip(shifted)
                    .map(|(s, set)| (s.kind.to_string(), set))
                    .collect();
                make_continual_stream(&segs, self.batch_size, self.seed)
            }
        }
    }
}

fn pool(sets: &[LabeledSet]) -> Result<LabeledSet> {
    let views: Vec<_> = sets.iter().map(|s| s.images.view()).collect();
    let images = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(LabeledSet {
        dims: sets[0].dims,
        classes: sets[0].classes,
        images,
        labels: sets.iter().flat_map(|s| s.labels.iter().copied()).collect(),
    })
}

/// Frame prompt shape and initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSpec {
    pub frame_width: usize,
    /// Zero gives an all-zero initial prompt.
    pub init_sigma: f64,
    pub seed: u64,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            frame_width: 4,
            init_sigma: crate::prompt::DEFAULT_SIGMA,
            seed: 5,
        }
    }
}

impl PromptSpec {
    pub fn build(&self, dims: crate::data::ImageDims) -> Result<FramePrompt> {
        if self.init_sigma == 0.0 {
            FramePrompt::zeros(dims, self.frame_width)
        } else {
            FramePrompt::init_gaussian(dims, self.frame_width, self.init_sigma, self.seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtAugSpec {
    pub views: usize,
    pub seed: u64,
}

impl Default for TtAugSpec {
    fn default() -> Self {
        Self { views: 64, seed: 0 }
    }
}

/// Where the target model lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSpec {
    /// Address of a running service; when unset an in-process simulator is
    /// started around the fixture target model.
    pub addr: Option<String>,
    pub price_per_request: f64,
    pub latency_ms: f64,
    pub jitter_ms: f64,
}

impl Default for ServiceSpec {
    fn default() -> Self {
        Self {
            addr: None,
            price_per_request: PRICE_PER_REQUEST,
            latency_ms: 0.0,
            jitter_ms: 0.0,
        }
    }
}

/// One run, as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    pub fixture: FixtureConfig,
    pub stream: StreamSpec,
    pub prompt: PromptSpec,
    pub engine: EngineConfig,
    pub zoo: ZooConfig,
    pub tt_aug: TtAugSpec,
    pub distill: DistillConfig,
    pub service: ServiceSpec,
    /// Hard cap on billed requests.
    pub max_queries: Option<u64>,
    /// Where reports go; not part of the config hash.
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            method: Method::Beta,
            fixture: FixtureConfig::default(),
            stream: StreamSpec::default(),
            prompt: PromptSpec::default(),
            engine: EngineConfig::default(),
            zoo: ZooConfig::default(),
            tt_aug: TtAugSpec::default(),
            distill: DistillConfig::default(),
            service: ServiceSpec::default(),
            max_queries: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Checks every field the chosen method reads; runs before any request.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name {:?} is not a plain file stem", self.name)));
        }
        self.fixture.validate()?;
        self.stream.validate()?;
        let p = self.service.price_per_request;
        if !(p >= 0.0 && p.is_finite()) {
            return Err(Error::Config(format!("price {p} must be >= 0")));
        }
        if self.method.uses_prompt() {
            self.prompt.build(self.fixture.dims()?)?;
        }
        if self.method.uses_engine() {
            self.engine_config().validate()?;
        }
        if self.method.zoo().is_some() {
            self.zoo_config().validate()?;
        }
        if self.method == Method::TtAug && self.tt_aug.views == 0 {
            return Err(Error::Config("tt_aug needs at least one view".into()));
        }
        if self.method == Method::Distill && !(self.distill.lr >= 0.0 && self.distill.lr.is_finite()) {
            return Err(Error::Config(format!("distillation lr {} must be >= 0", self.distill.lr)));
        }
        Ok(())
    }

    /// Engine settings with the method's switches applied.
    pub fn engine_config(&self) -> EngineConfig {
        let mut e = self.engine.clone();
        match self.method {
            Method::AdaptEnsemble => {
                e.update_prompt = false;
                e.prediction_source = PredictionSource::Harmonized;
            }
            Method::PromptEnsemble => {
                e.objective = Objective::SteeringOnly;
                e.prediction_source = PredictionSource::Harmonized;
            }
            _ => {}
        }
        e
    }

    pub fn zoo_config(&self) -> ZooConfig {
        let mut z = self.zoo.clone();
        if let Some(m) = self.method.zoo() {
            z.method = m;
        }
        z
    }

    fn service_config(&self) -> ServiceConfig {
        ServiceConfig {
            price_per_request: self.service.price_per_request,
            latency: LatencyModel {
                fixed_ms: self.service.latency_ms,
                jitter_ms: self.service.jitter_ms,
                ..LatencyModel::zero()
            },
            ..ServiceConfig::instant()
        }
    }
}

/// Headline numbers of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub samples: usize,
    pub answered: usize,
    /// Accuracy of the method's own predictions.
    pub accuracy: f64,
    pub accuracy_blackbox: f64,
    pub accuracy_harmonized: f64,
    pub final_quarter_accuracy: f64,
    pub skipped_batches: usize,
    pub queries: u64,
    pub cost: f64,
}

impl Summary {
    pub fn of(run: &RunReport) -> Self {
        Self {
            samples: run.samples(),
            answered: run.answered(),
            accuracy: run.accuracy(),
            accuracy_blackbox: run.accuracy_blackbox(),
            accuracy_harmonized: run.accuracy_harmonized(),
            final_quarter_accuracy: run.final_quarter_accuracy(),
            skipped_batches: run.skipped_batches(),
            queries: run.queries(),
            cost: run.cost(),
        }
    }

    /// Accuracy points per dollar; infinite for free runs.
    pub fn accuracy_per_dollar(&self) -> f64 {
        100.0 * self.accuracy / self.cost
    }
}

/// Everything written for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub method: Method,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub blackbox_digest: String,
    pub steering_digest: String,
    pub summary: Summary,
    pub ledger: LedgerSnapshot,
    pub run: RunReport,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Per-batch trace; every row carries the config hash and the billed
    /// requests and cost so far.
    pub fn to_csv(&self) -> String {
        let trace = self.run.to_csv();
        let mut lines = trace.lines();
        let mut out = String::new();
        if let Some(header) = lines.next() {
            let _ = writeln!(out, "config_hash,method,{header}");
        }
        for l in lines {
            let _ = writeln!(out, "{},{},{l}", &self.config_hash[..16], self.method);
        }
        out
    }

    /// Writes `<name>.json` and `<name>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let json = dir.join(format!("{}.json", self.name));
        let csv = dir.join(format!("{}.csv", self.name));
        std::fs::write(&json, self.to_json()?)?;
        std::fs::write(&csv, self.to_csv())?;
        Ok((json, csv))
    }
}

/// Runs `cfg` against already prepared fixtures. No files are touched.
pub fn run_with(cfg: &ExperimentConfig, fixtures: &Fixtures) -> Result<ExperimentReport> {
    cfg.validate()?;
    if fixtures.config.classes != cfg.fixture.classes || fixtures.dims() != cfg.fixture.dims()? {
        return Err(Error::Config("fixtures do not match the configured domain".into()));
    }
    let (mut stream, book) = cfg.stream.build(&fixtures.target)?;
    let tag = cfg.method.name();
    let core = cfg
        .service
        .addr
        .is_none()
        .then(|| ServiceCore::new(crate::net::BlackBoxNet(fixtures.blackbox.clone()), cfg.service_config()));
    let client: Box<dyn BlackBoxApi> = match (&core, &cfg.service.addr) {
        (Some(core), _) => Box::new(InProcessClient::new(Arc::clone(core), tag)),
        (None, addr) => {
            let c = TcpClient::connect(addr.as_deref().unwrap_or_default(), tag)
                .map_err(|e| Error::Transport(format!("cannot resolve service address: {e}")))?;
            c.ping()?;
            Box::new(c)
        }
    };
    let opts = RunOptions {
        max_queries: cfg.max_queries,
    };
    let mut run = dispatch(cfg, fixtures, &mut stream, client.as_ref(), &book, &opts)?;
    run.method = tag.to_string();
    run.price_per_request = cfg.service.price_per_request;
    let ledger = match &core {
        Some(core) => core.ledger().snapshot(),
        None => {
            let q = run.queries();
            LedgerSnapshot {
                price_per_request: cfg.service.price_per_request,
                total_requests: q,
                total_cost: cost_of(q, cfg.service.price_per_request),
                per_method: [(tag.to_string(), q)].into(),
            }
        }
    };
    Ok(ExperimentReport {
        name: cfg.name.clone(),
        method: cfg.method,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        blackbox_digest: fixtures.blackbox.digest(),
        steering_digest: fixtures.steering.digest(),
        summary: Summary::of(&run),
        ledger,
        run,
    })
}

fn dispatch(
    cfg: &ExperimentConfig,
    fixtures: &Fixtures,
    stream: &mut OnlineStream,
    client: &dyn BlackBoxApi,
    book: &LabelBook,
    opts: &RunOptions,
) -> Result<RunReport> {
    let dims = fixtures.dims();
    match cfg.method {
        Method::Beta | Method::AdaptEnsemble | Method::PromptEnsemble => {
            let e = cfg.engine_config();
            let prompt = if cfg.method.uses_prompt() {
                cfg.prompt.build(dims)?
            } else {
                FramePrompt::zeros(dims, cfg.prompt.frame_width)?
            };
            let mut state = BetaState::new(prompt, SteeringNet(fixtures.steering.clone()), &e);
            run_stream(stream, &mut state, client, &e, book, opts)
        }
        Method::ZooRgf | Method::ZooSpsaGc | Method::ZooIsoEs => {
            let mut adapter = ZooAdapter::new(cfg.prompt.build(dims)?, cfg.zoo_config())?;
            zoo_adapt_stream(stream, &mut adapter, client, book, opts)
        }
        Method::TtAug => tt_aug_stream(stream, client, cfg.tt_aug.views, cfg.tt_aug.seed, book, opts),
        Method::Distill => {
            let mut student = SteeringNet(fixtures.steering.clone());
            distill_stream(stream, &mut student, client, &cfg.distill, book, opts)
        }
        Method::Source => source_stream(stream, client, book, opts),
    }
}

/// Prepares fixtures (training or loading through `cache`), runs and writes
/// the reports into the configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<(ExperimentReport, PathBuf, PathBuf)> {
    cfg.validate()?;
    let fixtures = Fixtures::prepare(&cfg.fixture, cache)?;
    let report = run_with(cfg, &fixtures)?;
    let (json, csv) = report.write(&cfg.output_dir)?;
    Ok((report, json, csv))
}

/// Text table over finished runs, with accuracy per dollar.
pub fn summarize(reports: &[ExperimentReport]) -> String {
    let mut out = String::from(
        "name                 method           samples  acc(%)  acc_B(%)  acc_H(%)  requests      cost($)  acc/$     hash\n",
    );
    for r in reports {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{:<20} {:<16} {:>7}  {:>6.2}  {:>8.2}  {:>8.2}  {:>8}  {:>11.4}  {:>8.2}  {}",
            r.name,
            r.method.name(),
            s.samples,
            100.0 * s.accuracy,
            100.0 * s.accuracy_blackbox,
            100.0 * s.accuracy_harmonized,
            s.queries,
            s.cost,
            s.accuracy_per_dollar(),
            &r.config_hash[..12],
        );
    }
    out
}

#[cfg(test)]
mod tests;
