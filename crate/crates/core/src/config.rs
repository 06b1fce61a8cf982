//! Experiment configuration in a `key = value` format.
//!
//! ```text
//! # mallard, site-averaged detection covariates
//! dataset = data/mallard.csv
//! family = nb
//! site_means = ivel:mean.ivel, date:mean.date
//! squares = mean.date:mean.date.sq
//! abundance = length, elev, forest
//! detection = mean.ivel, mean.date, mean.date.sq
//! engine = laplace
//! ```
//!
//! Blank lines and text after `#` are ignored. Without `dataset` the data
//! come from the simulator, configured by the `n_sites`, `b0`, ... keys.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fit_bayes::{PriorSpec, ThetaPrior};
use crate::likelihood::TruncationPolicy;
use crate::model::MixtureFamily;
use crate::simulator::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Ml,
    Laplace,
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml" | "mle" => Ok(Engine::Ml),
            "laplace" | "bayes" => Ok(Engine::Laplace),
            other => Err(Error::InvalidInput(format!("unknown engine `{other}` (expected ml or laplace)"))),
        }
    }
}

/// Which simulated count array to analyse when no dataset is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SimCounts {
    /// `Y.m` with `x4.m`.
    Averaged,
    /// `Y` with survey-level `x4`.
    Full,
}

impl FromStr for SimCounts {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avg" | "averaged" => Ok(SimCounts::Averaged),
            "full" => Ok(SimCounts::Full),
            other => Err(Error::InvalidInput(format!("unknown sim_counts `{other}` (expected avg or full)"))),
        }
    }
}

fn parse_theta_prior(s: &str) -> Result<ThetaPrior> {
    match s.to_ascii_lowercase().as_str() {
        "internal" | "flat-log" | "flat-internal" => Ok(ThetaPrior::FlatOnInternalScale),
        "natural" | "flat" | "flat-natural" => Ok(ThetaPrior::FlatOnNaturalScale),
        other => Err(Error::InvalidInput(format!("unknown theta prior `{other}` (expected internal or natural)"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub sim: SimConfig,
    pub sim_counts: SimCounts,
    pub family: MixtureFamily,
    pub abundance: Vec<String>,
    pub detection: Vec<String>,
    /// `(per-survey column, new per-row column)` pairs, applied before `squares`.
    pub site_means: Vec<(String, String)>,
    /// `(column, new column)` pairs.
    pub squares: Vec<(String, String)>,
    pub priors: PriorSpec,
    pub engine: Engine,
    pub trunc: TruncationPolicy,
    pub output_dir: PathBuf,
    /// Seeds posterior sampling and the bias experiment; also the default
    /// simulation seed.
    pub seed: u64,
    pub samples: usize,
    /// 1-based rows for `posterior-n`.
    pub rows: Vec<usize>,
    pub n_grid_max: Option<u32>,
    pub runs: usize,
    pub a4_range: (f64, f64),
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        Self {
            dataset: None,
            seed: sim.seed,
            sim,
            sim_counts: SimCounts::Averaged,
            family: MixtureFamily::NegBinomialBinomial,
            abundance: vec!["x1".into(), "x2".into(), "x3".into()],
            detection: vec!["x1.p".into(), "x4.m".into()],
            site_means: Vec::new(),
            squares: Vec::new(),
            priors: PriorSpec::default(),
            engine: Engine::Laplace,
            trunc: TruncationPolicy::default(),
            output_dir: PathBuf::from("."),
            samples: 1000,
            rows: vec![1],
            n_grid_max: None,
            runs: 50,
            a4_range: (-3.0, 3.0),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidInput(format!("invalid value {value:?} for {key}")))
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_pairs(key: &str, value: &str) -> Result<Vec<(String, String)>> {
    parse_list(value)
        .into_iter()
        .map(|item| {
            item.split_once(':')
                .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                .filter(|(a, b)| !a.is_empty() && !b.is_empty())
                .ok_or_else(|| Error::InvalidInput(format!("{key} entries must look like from:to, got {item:?}")))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut sim_seed = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i as u64 + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected key = value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let result = if key == "sim_seed" {
                parse_value(key, value).map(|v| sim_seed = Some(v))
            } else {
                cfg.set(key, value)
            };
            result.map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        }
        if let Some(seed) = sim_seed {
            cfg.sim.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. `seed` also resets the simulation seed.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "sim_counts" => self.sim_counts = parse_value(key, value)?,
            "family" => self.family = value.parse()?,
            "abundance" => self.abundance = parse_list(value),
            "detection" => self.detection = parse_list(value),
            "site_means" => self.site_means = parse_pairs(key, value)?,
            "squares" => self.squares = parse_pairs(key, value)?,
            "prior_mean" => self.priors.normal_mean = parse_value(key, value)?,
            "prior_precision" => self.priors.normal_precision = parse_value(key, value)?,
            "theta_prior" => self.priors.theta_prior = parse_theta_prior(value)?,
            "engine" => self.engine = value.parse()?,
            "truncation_floor" => self.trunc.relative_increment_floor = parse_value(key, value)?,
            "truncation_cap" => self.trunc.hard_cap_offset = parse_value(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seed" => {
                self.seed = parse_value(key, value)?;
                self.sim.seed = self.seed;
            }
            "sim_seed" => self.sim.seed = parse_value(key, value)?,
            "samples" => self.samples = parse_value(key, value)?,
            "rows" => {
                self.rows = parse_list(value)
                    .iter()
                    .map(|v| parse_value(key, v))
                    .collect::<Result<_>>()?
            }
            "n_grid_max" => self.n_grid_max = Some(parse_value(key, value)?),
            "runs" => self.runs = parse_value(key, value)?,
            "a4_min" => self.a4_range.0 = parse_value(key, value)?,
            "a4_max" => self.a4_range.1 = parse_value(key, value)?,
            "n_sites" => self.sim.n_sites = parse_value(key, value)?,
            "n_surveys" => self.sim.n_surveys = parse_value(key, value)?,
            "n_years" => self.sim.n_years = parse_value(key, value)?,
            "b0" => self.sim.b0 = parse_value(key, value)?,
            "b1" => self.sim.b1 = parse_value(key, value)?,
            "b2" => self.sim.b2 = parse_value(key, value)?,
            "b3" => self.sim.b3 = parse_value(key, value)?,
            "a0" => self.sim.a0 = parse_value(key, value)?,
            "a1" => self.sim.a1 = parse_value(key, value)?,
            "a4" => self.sim.a4 = parse_value(key, value)?,
            "theta" => self.sim.theta = parse_value(key, value)?,
            other => return Err(Error::InvalidInput(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.priors.validate()?;
        self.trunc.validate()?;
        if self.samples == 0 {
            return Err(Error::InvalidInput("samples must be at least 1".into()));
        }
        if self.runs == 0 {
            return Err(Error::InvalidInput("runs must be at least 1".into()));
        }
        if self.rows.contains(&0) {
            return Err(Error::InvalidInput("rows are 1-based".into()));
        }
        let (lo, hi) = self.a4_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidInput(format!("a4 range ({lo}, {hi}) must be finite and increasing")));
        }
        Ok(())
    }
}
