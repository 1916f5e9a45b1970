use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use beta_core::data::CorruptionSpec;
use beta_core::harness::{
    analyze_gradients, clean_accuracy, run_with, summarize, sweep, ExperimentConfig, ExperimentReport, Fixtures,
    GradientAnalysisConfig, Method, Role, SweepAxis,
};
use beta_core::net::{BlackBoxNet, Mlp};
use beta_core::checkpoint::Checkpoint;
use beta_core::service::{LatencyModel, RunningService, ServiceConfig, ServiceCore, PRICE_PER_REQUEST};
use beta_core::{Error, ErrorClass};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "beta", version, about = "Black-box test-time adaptation with a local steering model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the target and steering models on the source domain.
    TrainSource {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory for blackbox.json and steering.json.
        #[arg(long, default_value = "checkpoints")]
        out: PathBuf,
        /// Also write the source and target sets.
        #[arg(long)]
        save_data: bool,
    },
    /// Serve a target model over TCP until interrupted.
    Serve(ServeArgs),
    /// One adaptation run.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// One run per value of a hyperparameter axis.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        run: RunArgs,
        /// alpha, lambda, epsilon, frame_width or budget (dollars).
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Gradient cosines between local, target and fused objectives.
    AnalyzeGradients {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `kind:severity:seed`, or "clean".
        #[arg(long, default_value = "contrast:5:3")]
        corruption: String,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 8)]
        batches: usize,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = ".beta-cache")]
        cache: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize finished runs; accepts report files or directories.
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config file (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set engine.filter.alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    method: Option<Method>,
    /// Replaces the configured corruptions; repeatable.
    #[arg(long, value_name = "KIND:SEVERITY:SEED")]
    corruption: Vec<String>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    max_queries: Option<u64>,
    /// Address of a running service.
    #[arg(long, env = "BETA_SERVICE_ADDR")]
    service: Option<String>,
    /// Ignore any service address and simulate the target in process.
    #[arg(long)]
    in_process: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where trained fixtures are cached.
    #[arg(long, default_value = ".beta-cache")]
    cache: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Target model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 7070)]
    port: u16,
    #[arg(long, default_value_t = 7071)]
    admin_port: u16,
    #[arg(long, default_value_t = PRICE_PER_REQUEST)]
    price: f64,
    #[arg(long, default_value_t = 45.0)]
    latency_ms: f64,
    #[arg(long, default_value_t = 10.0)]
    jitter_ms: f64,
    #[arg(long, default_value_t = 1024)]
    max_batch: usize,
    /// Clamp incoming pixels, e.g. `0,1`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    clamp: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration problems, 3 for transport, 4 for numerical failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    let class = e.chain().find_map(|c| c.downcast_ref::<Error>()).map(Error::class);
    match class {
        Some(ErrorClass::Config) => 2,
        Some(ErrorClass::Transport) => 3,
        Some(ErrorClass::Numerical) => 4,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::TrainSource { cfg, out, save_data } => train(&cfg.load()?, &out, save_data),
        Command::Serve(args) => serve(args),
        Command::Adapt { cfg, run } => {
            let c = run.apply(cfg.load()?)?;
            let fixtures = Fixtures::prepare(&c.fixture, Some(&run.cache))?;
            let report = run_with(&c, &fixtures)?;
            let (json, csv) = report.write(&c.output_dir)?;
            print!("{}", summarize(std::slice::from_ref(&report)));
            println!("wrote {} and {}", json.display(), csv.display());
            Ok(())
        }
        Command::Sweep { cfg, run, axis, values } => {
            let c = run.apply(cfg.load()?)?;
            let axis: SweepAxis = axis.parse()?;
            let fixtures = Fixtures::prepare(&c.fixture, Some(&run.cache))?;
            let (curve, reports) = sweep(&c, &fixtures, axis, &values)?;
            for r in &reports {
                r.write(&c.output_dir)?;
            }
            let path = c.output_dir.join(format!("{}-sweep-{axis}.csv", c.name));
            std::fs::write(&path, curve.to_csv())?;
            print!("{}", summarize(&reports));
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::AnalyzeGradients {
            cfg,
            corruption,
            alphas,
            batches,
            batch_size,
            seed,
            cache,
            out,
        } => {
            let c = cfg.load()?;
            let fixtures = Fixtures::prepare(&c.fixture, Some(&cache))?;
            let mut g = GradientAnalysisConfig {
                corruption: if corruption == "clean" { String::new() } else { corruption },
                batches,
                batch_size,
                seed,
                prompt: c.prompt.clone(),
                ..GradientAnalysisConfig::default()
            };
            if let Some(a) = alphas {
                g.alphas = a;
            }
            let result = analyze_gradients(&fixtures, &g)?;
            println!("alpha  cos(ideal,black)  cos(beta,ideal)");
            for a in &result.per_alpha {
                println!("{:>5.2}  {:>16.4}  {:>15.4}", a.alpha, a.relevance, a.effectiveness);
            }
            println!(
                "cos(local,black): mean {:.4} over {} batches",
                result.local_vs_black_mean(),
                result.local_vs_black.len()
            );
            let dir = out.unwrap_or_else(|| c.output_dir.clone());
            std::fs::create_dir_all(&dir)?;
            let path = dir.join(format!("{}-gradients.csv", c.name));
            std::fs::write(&path, result.to_csv())?;
            std::fs::write(dir.join(format!("{}-gradients.json", c.name)), serde_json::to_string_pretty(&result)?)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Report { paths } => {
            let mut reports = Vec::new();
            for p in paths {
                for file in report_files(&p)? {
                    let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
                    match ExperimentReport::from_json(&text) {
                        Ok(r) => reports.push(r),
                        Err(e) => log::warn!("skipping {}: {e}", file.display()),
                    }
                }
            }
            if reports.is_empty() {
                return Err(Error::Config("no run reports found".into()).into());
            }
            reports.sort_by(|a, b| a.name.cmp(&b.name));
            print!("{}", summarize(&reports));
            Ok(())
        }
    }
}

fn report_files(p: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if p.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|f| f.extension().is_some_and(|x| x == "json") && !f.to_string_lossy().ends_with("-gradients.json"))
            .collect();
        files.sort();
        Ok(files)
    } else if p.exists() {
        Ok(vec![p.to_path_buf()])
    } else {
        Err(Error::Config(format!("{} does not exist", p.display())).into())
    }
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut value: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for o in &self.overrides {
            set_path(&mut value, o)?;
        }
        let text = toml::to_string(&value).map_err(|e| Error::Config(e.to_string()))?;
        Ok(ExperimentConfig::from_toml(&text)?)
    }
}

/// Applies `a.b.c=value`; the value is read as a TOML literal, or as a
/// string when it is not one.
fn set_path(root: &mut toml::Table, assignment: &str) -> Result<(), Error> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} in {key} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl RunArgs {
    fn apply(&self, mut c: ExperimentConfig) -> anyhow::Result<ExperimentConfig> {
        if let Some(m) = self.method {
            c.method = m;
        }
        if !self.corruption.is_empty() {
            for s in &self.corruption {
                s.parse::<CorruptionSpec>()?;
            }
            c.stream.corruptions = self.corruption.clone();
        }
        if let Some(n) = &self.name {
            c.name = n.clone();
        }
        if self.max_queries.is_some() {
            c.max_queries = self.max_queries;
        }
        if self.in_process {
            c.service.addr = None;
        } else if let Some(a) = &self.service {
            c.service.addr = Some(a.clone());
        }
        if let Some(o) = &self.out {
            c.output_dir = o.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn train(c: &ExperimentConfig, out: &Path, save_data: bool) -> anyhow::Result<()> {
    let f = &c.fixture;
    f.validate()?;
    let source = f.source_set()?;
    std::fs::create_dir_all(out)?;
    for role in [Role::BlackBox, Role::Steering] {
        let net = beta_core::harness::train(f, role, &source)?;
        let path = out.join(format!("{}.json", role.name()));
        net.to_checkpoint(role.name(), Some(f.train_config(role).seed))?.save(&path)?;
        println!("wrote {} ({} parameters)", path.display(), net.parameter_count());
    }
    let fixtures = Fixtures::prepare(
        &beta_core::harness::FixtureConfig {
            blackbox_checkpoint: Some(out.join("blackbox.json")),
            steering_checkpoint: Some(out.join("steering.json")),
            ..f.clone()
        },
        None,
    )?;
    let (b, s) = clean_accuracy(&fixtures)?;
    println!("clean target accuracy: blackbox {:.4}, steering {:.4}", b, s);
    if save_data {
        source.to_checkpoint(Some(f.source_seed))?.save(out.join("source.json"))?;
        fixtures.target.to_checkpoint(Some(f.target_seed))?.save(out.join("target.json"))?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let net = Mlp::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    if a.max_batch == 0 {
        bail!(Error::Config("max batch must be positive".into()));
    }
    let clamp = match a.clamp.as_deref() {
        Some([lo, hi]) if lo < hi => Some((*lo, *hi)),
        Some(_) => bail!(Error::Config("clamp needs LO,HI with LO < HI".into())),
        None => None,
    };
    let config = ServiceConfig {
        price_per_request: a.price,
        latency: LatencyModel {
            fixed_ms: a.latency_ms,
            jitter_ms: a.jitter_ms,
            ..LatencyModel::default()
        },
        max_batch: a.max_batch,
        clamp,
    };
    let core = ServiceCore::new(BlackBoxNet(net), config);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Error::Config(format!("bad listen address: {e}")))?;
    let admin: SocketAddr = format!("{}:{}", a.host, a.admin_port)
        .parse()
        .map_err(|e| Error::Config(format!("bad admin address: {e}")))?;
    let running = RunningService::start(core, addr, admin).map_err(|e| Error::Transport(e.to_string()))?;
    println!("listening on {} (ledger at http://{}/ledger)", running.addr(), running.admin_addr());
    use std::io::Write;
    std::io::stdout().flush()?;
    running.wait();
    Ok(())
}
