use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{gen_source, ImageDims, LabeledSet};
use crate::error::{Error, Result};
use crate::net::{evaluate, train_source, Architecture, Mlp, TrainConfig};

/// Source domain, target domain and the two source-trained models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub source_samples: usize,
    pub target_samples: usize,
    pub source_seed: u64,
    pub target_seed: u64,
    pub blackbox_seed: u64,
    pub steering_seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Load the target model from here instead of training it.
    pub blackbox_checkpoint: Option<PathBuf>,
    pub steering_checkpoint: Option<PathBuf>,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            height: 32,
            width: 32,
            channels: 3,
            source_samples: 2000,
            target_samples: 1000,
            source_seed: 1,
            target_seed: 2,
            blackbox_seed: 11,
            steering_seed: 12,
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-3,
            batch_size: 64,
            blackbox_checkpoint: None,
            steering_checkpoint: None,
        }
    }
}

/// Which of the two models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    BlackBox,
    Steering,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::BlackBox => "blackbox",
            Role::Steering => "steering",
        }
    }
}

impl FixtureConfig {
    pub fn dims(&self) -> Result<ImageDims> {
        ImageDims::new(self.height, self.width, self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.source_samples == 0 || self.target_samples == 0 {
            return Err(Error::Config("source and target sets must be nonempty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, role: Role) -> Result<Architecture> {
        let d = self.dims()?.len();
        Ok(match role {
            Role::BlackBox => Architecture::black_box(d, self.classes),
            Role::Steering => Architecture::steering(d, self.classes),
        })
    }

    pub fn train_config(&self, role: Role) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            seed: self.seed(role),
        }
    }

    fn seed(&self, role: Role) -> u64 {
        match role {
            Role::BlackBox => self.blackbox_seed,
            Role::Steering => self.steering_seed,
        }
    }

    fn checkpoint(&self, role: Role) -> Option<&PathBuf> {
        match role {
            Role::BlackBox => self.blackbox_checkpoint.as_ref(),
            Role::Steering => self.steering_checkpoint.as_ref(),
        }
    }

    /// Identifies everything that determines the trained weights of `role`.
    pub fn training_key(&self, role: Role) -> Result<String> {
        let key = serde_json::json!({
            "role": role.name(),
            "arch": self.architecture(role)?,
            "train": self.train_config(role),
            "classes": self.classes,
            "dims": [self.height, self.width, self.channels],
            "source": [self.source_samples, self.source_seed],
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        Ok(hex::encode(&digest[..8]))
    }

    pub fn source_set(&self) -> Result<LabeledSet> {
        gen_source(self.classes, self.source_samples, self.dims()?, self.source_seed)
    }

    pub fn target_set(&self) -> Result<LabeledSet> {
        gen_source(self.classes, self.target_samples, self.dims()?, self.target_seed)
    }
}

/// Clean target set plus both models.
#[derive(Debug, Clone)]
pub struct Fixtures {
    pub config: FixtureConfig,
    pub target: LabeledSet,
    pub blackbox: Mlp,
    pub steering: Mlp,
}

impl Fixtures {
    /// Loads the configured checkpoints, or trains on the source domain.
    /// Trained weights are cached in `cache` when given.
    pub fn prepare(config: &FixtureConfig, cache: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let mut source = None;
        let mut model = |role: Role| -> Result<Mlp> {
            if let Some(path) = config.checkpoint(role) {
                return load_model(path, config, role);
            }
            let key = config.training_key(role)?;
            let cached = cache.map(|dir| dir.join(format!("{}-{key}.json", role.name())));
            if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
                return load_model(path, config, role);
            }
            if source.is_none() {
                source = Some(config.source_set()?);
            }
            let net = train(config, role, source.as_ref().expect("source set"))?;
            if let Some(path) = cached {
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                net.to_checkpoint(role.name(), Some(config.seed(role)))?.save(&path)?;
            }
            Ok(net)
        };
        let blackbox = model(Role::BlackBox)?;
        let steering = model(Role::Steering)?;
        Ok(Self {
            target: config.target_set()?,
            config: config.clone(),
            blackbox,
            steering,
        })
    }

    pub fn dims(&self) -> ImageDims {
        self.target.dims
    }
}

/// Trains one model from scratch on the source domain.
pub fn train(config: &FixtureConfig, role: Role, source: &LabeledSet) -> Result<Mlp> {
    let mut net = Mlp::init(config.architecture(role)?, config.seed(role));
    let t0 = Instant::now();
    let report = train_source(&mut net, &source.images, &source.labels, &config.train_config(role))?;
    log::info!(
        "trained {} model: train accuracy {:.3} in {:.1?}",
        role.name(),
        report.train_accuracy,
        t0.elapsed()
    );
    Ok(net)
}

fn load_model(path: &Path, config: &FixtureConfig, role: Role) -> Result<Mlp> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("missing {} checkpoint {}", role.name(), path.display())));
    }
    let net = Mlp::from_checkpoint(&Checkpoint::load(path)?)?;
    let arch = net.architecture();
    if arch.classes != config.classes || arch.input_dim != config.dims()?.len() {
        return Err(Error::Checkpoint(format!(
            "{} does not fit {} classes of {}x{}x{} images",
            path.display(),
            config.classes,
            config.height,
            config.width,
            config.channels
        )));
    }
    Ok(net)
}

/// Clean accuracy of both models on the target domain.
pub fn clean_accuracy(f: &Fixtures) -> Result<(f64, f64)> {
    Ok((
        evaluate(&f.blackbox, &f.target.images, &f.target.labels)?,
        evaluate(&f.steering, &f.target.images, &f.target.labels)?,
    ))
}
