use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{run_with, ExperimentConfig, ExperimentReport, Fixtures};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Lambda,
    Epsilon,
    FrameWidth,
    /// Dollars; caps the run at `floor(budget / price)` requests.
    Budget,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::FrameWidth => "frame_width",
            SweepAxis::Budget => "budget",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::Alpha,
            SweepAxis::Lambda,
            SweepAxis::Epsilon,
            SweepAxis::FrameWidth,
            SweepAxis::Budget,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}")))
    }
}

/// `cfg` with one axis set to `value`, named after the point.
pub fn apply_axis(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    let m = cfg.method;
    match axis {
        SweepAxis::Alpha | SweepAxis::Lambda | SweepAxis::Epsilon if !m.uses_engine() => {
            return Err(Error::Config(format!("{m} has no {axis} parameter")));
        }
        SweepAxis::FrameWidth if !m.uses_prompt() => {
            return Err(Error::Config(format!("{m} learns no prompt")));
        }
        SweepAxis::Alpha => c.engine.filter.alpha = value,
        SweepAxis::Lambda => c.engine.filter.lambda = value,
        SweepAxis::Epsilon => c.engine.filter.epsilon = value,
        SweepAxis::FrameWidth => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::Config(format!("frame width {value} is not a positive integer")));
            }
            c.prompt.frame_width = value as usize;
        }
        SweepAxis::Budget => {
            let price = cfg.service.price_per_request;
            if !(value >= 0.0 && value.is_finite() && price > 0.0) {
                return Err(Error::Config(format!("budget {value} at price {price}")));
            }
            // guard against 0.2048 / 0.0032 landing just below 64
            c.max_queries = Some((value / price + 1e-9).floor() as u64);
        }
    }
    c.name = format!("{}-{}-{}", cfg.name, axis, value);
    c.validate()?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub config_hash: String,
    pub samples: usize,
    pub accuracy: f64,
    pub accuracy_blackbox: f64,
    pub accuracy_harmonized: f64,
    pub final_quarter_accuracy: f64,
    pub queries: u64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub axis: SweepAxis,
    pub method: String,
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},method,config_hash,samples,accuracy,accuracy_blackbox,accuracy_harmonized,final_quarter_accuracy,queries,cost\n",
            self.axis
        );
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                p.value,
                self.method,
                &p.config_hash[..16],
                p.samples,
                p.accuracy,
                p.accuracy_blackbox,
                p.accuracy_harmonized,
                p.final_quarter_accuracy,
                p.queries,
                p.cost
            );
        }
        s
    }
}

/// One run per value on shared fixtures and seeds. Every point is checked
/// before the first run starts.
pub fn sweep(
    cfg: &ExperimentConfig,
    fixtures: &Fixtures,
    axis: SweepAxis,
    values: &[f64],
) -> Result<(SweepCurve, Vec<ExperimentReport>)> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| apply_axis(cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::with_capacity(values.len());
    let mut reports = Vec::with_capacity(values.len());
    for (c, &value) in configs.iter().zip(values) {
        let r = run_with(c, fixtures)?;
        log::info!("{axis} = {value}: accuracy {:.4}", r.summary.accuracy);
        let s = &r.summary;
        points.push(SweepPoint {
            value,
            config_hash: r.config_hash.clone(),
            samples: s.samples,
            accuracy: s.accuracy,
            accuracy_blackbox: s.accuracy_blackbox,
            accuracy_harmonized: s.accuracy_harmonized,
            final_quarter_accuracy: s.final_quarter_accuracy,
            queries: s.queries,
            cost: s.cost,
        });
        reports.push(r);
    }
    Ok((
        SweepCurve {
            axis,
            method: cfg.method.name().into(),
            points,
        },
        reports,
    ))
}
