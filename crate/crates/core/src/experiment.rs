//! Workflows behind the command-line tool: loading data, fitting, posterior
//! summaries, and the misspecified-detection bias study.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Engine, ExperimentConfig, SimCounts};
use crate::dataset::{format_float, BuiltDataset, DatasetFile};
use crate::error::{Error, Result};
use crate::fit_bayes::{fit_laplace, lambda_fitted, posterior_n_for_row, sample_posterior, LambdaFittedSummary};
use crate::fit_ml::{fit_ml, summarize_fit, Component, FitOptions, FitResult};
use crate::model::{DesignMatrices, MixtureFamily, ObservationTable, RowLabel};
use crate::par;
use crate::simulator::{simulate, SimConfig};

/// Data ready for fitting, with the rows lost to missing values.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub table: ObservationTable,
    pub designs: DesignMatrices,
    pub dropped: Vec<RowLabel>,
    /// Dataset path, or `simulated` for generated data.
    pub source: String,
}

/// Applies the configured column transforms to `file` and builds the designs.
pub fn prepare_dataset(cfg: &ExperimentConfig, mut file: DatasetFile) -> Result<BuiltDataset> {
    for (from, to) in &cfg.site_means {
        file.add_site_mean(from, to)?;
    }
    for (from, to) in &cfg.squares {
        file.add_square(from, to)?;
    }
    let abundance: Vec<&str> = cfg.abundance.iter().map(String::as_str).collect();
    let detection: Vec<&str> = cfg.detection.iter().map(String::as_str).collect();
    file.build(&abundance, &detection)
}

/// Reads the configured dataset, or simulates one when none is given.
pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    let (file, source) = match &cfg.dataset {
        Some(path) => (DatasetFile::read(path)?, path.display().to_string()),
        None => {
            let sim = simulate(&cfg.sim)?;
            let file = match cfg.sim_counts {
                SimCounts::Averaged => DatasetFile::from_sim_avg(&sim),
                SimCounts::Full => DatasetFile::from_sim_full(&sim),
            };
            (file, "simulated".to_string())
        }
    };
    let built = prepare_dataset(cfg, file)?;
    Ok(LoadedData {
        table: built.table,
        designs: built.designs,
        dropped: built.dropped,
        source,
    })
}

fn fit_options(cfg: &ExperimentConfig) -> FitOptions {
    FitOptions {
        trunc: cfg.trunc,
        ..FitOptions::default()
    }
}

/// Runs the configured engine on `table`.
pub fn fit_with(
    cfg: &ExperimentConfig,
    engine: Engine,
    table: &ObservationTable,
    designs: &DesignMatrices,
) -> Result<FitResult> {
    let options = fit_options(cfg);
    match engine {
        Engine::Ml => fit_ml(table, designs, cfg.family, &options),
        Engine::Laplace => fit_laplace(table, designs, cfg.family, &cfg.priors, &options),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterReport {
    pub component: Component,
    pub name: String,
    pub estimate: f64,
    /// Standard error (ml) or posterior sd (laplace).
    pub se: Option<f64>,
    pub lower95: Option<f64>,
    pub upper95: Option<f64>,
    pub z: Option<f64>,
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub source: String,
    pub engine: Engine,
    pub family: MixtureFamily,
    pub n_rows: usize,
    pub n_surveys: usize,
    pub dropped_rows: Vec<RowLabel>,
    pub parameters: Vec<ParameterReport>,
    pub theta: Option<f64>,
    pub inverse_theta: Option<f64>,
    pub loglik: f64,
    pub log_posterior: Option<f64>,
    pub initial_objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub covariance_available: bool,
    pub wall_clock_seconds: f64,
}

fn component_of(fit: &FitResult, i: usize) -> Component {
    let layout = fit.layout();
    if i < layout.n_beta {
        Component::Abundance
    } else if i < layout.n_beta + layout.n_alpha {
        Component::Detection
    } else {
        Component::Dispersion
    }
}

impl FitReport {
    pub fn new(data: &LoadedData, engine: Engine, fit: &FitResult, seconds: f64) -> Self {
        let parameters = match summarize_fit(fit) {
            Ok(summary) => summary
                .rows
                .iter()
                .map(|row| {
                    let (lo, hi) = row.interval95();
                    ParameterReport {
                        component: row.component,
                        name: row.name.clone(),
                        estimate: row.estimate,
                        se: Some(row.se),
                        lower95: Some(lo),
                        upper95: Some(hi),
                        z: Some(row.z),
                        p_value: Some(row.p_value),
                    }
                })
                .collect(),
            Err(_) => fit
                .estimates
                .to_stacked()
                .into_iter()
                .enumerate()
                .map(|(i, estimate)| ParameterReport {
                    component: component_of(fit, i),
                    name: fit.names[i].split_once(':').map_or(fit.names[i].clone(), |(_, n)| n.to_string()),
                    estimate,
                    se: None,
                    lower95: None,
                    upper95: None,
                    z: None,
                    p_value: None,
                })
                .collect(),
        };
        let theta = fit.estimates.theta();
        Self {
            source: data.source.clone(),
            engine,
            family: fit.family,
            n_rows: data.table.n_rows(),
            n_surveys: data.table.n_surveys(),
            dropped_rows: data.dropped.clone(),
            parameters,
            theta,
            inverse_theta: theta.map(|t| 1.0 / t),
            loglik: fit.loglik,
            log_posterior: fit.log_posterior,
            initial_objective: fit.initial_objective,
            converged: fit.converged,
            iterations: fit.iterations,
            gradient_norm: fit.gradient_norm,
            covariance_available: fit.covariance.is_some(),
            wall_clock_seconds: seconds,
        }
    }
}

fn opt(v: Option<f64>, width: usize, prec: usize) -> String {
    match v {
        Some(x) => format!("{x:>width$.prec$}"),
        None => format!("{:>width$}", "NA"),
    }
}

impl fmt::Display for FitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let spread = match self.engine {
            Engine::Ml => "SE",
            Engine::Laplace => "sd",
        };
        writeln!(
            f,
            "{} fit, {:?}, {} rows x {} surveys ({})",
            match self.engine {
                Engine::Ml => "Maximum-likelihood",
                Engine::Laplace => "Laplace",
            },
            self.family,
            self.n_rows,
            self.n_surveys,
            self.source
        )?;
        if !self.dropped_rows.is_empty() {
            writeln!(f, "{} rows dropped for missing values", self.dropped_rows.len())?;
        }
        let mut current = None;
        for p in &self.parameters {
            if current != Some(p.component) {
                writeln!(f)?;
                writeln!(
                    f,
                    "{:<9} {:<16} {:>9} {:>8} {:>9} {:>9} {:>8} {:>8}",
                    format!("{:?}", p.component),
                    "",
                    "Estimate",
                    spread,
                    "2.5%",
                    "97.5%",
                    "z",
                    "P(>|z|)"
                )?;
                current = Some(p.component);
            }
            writeln!(
                f,
                "{:<9} {:<16} {:>9.4} {} {} {} {} {}",
                "",
                p.name,
                p.estimate,
                opt(p.se, 8, 4),
                opt(p.lower95, 9, 4),
                opt(p.upper95, 9, 4),
                opt(p.z, 8, 3),
                opt(p.p_value, 8, 4)
            )?;
        }
        writeln!(f)?;
        if let (Some(t), Some(inv)) = (self.theta, self.inverse_theta) {
            writeln!(f, "theta = {t:.4}, 1/theta = {inv:.4}")?;
        }
        write!(f, "log-likelihood {:.4}", self.loglik)?;
        if let Some(lp) = self.log_posterior {
            write!(f, ", log posterior {lp:.4}")?;
        }
        writeln!(f)?;
        writeln!(
            f,
            "converged: {} after {} iterations (gradient {:.2e}); {:.2} s",
            self.converged, self.iterations, self.gradient_norm, self.wall_clock_seconds
        )?;
        if !self.covariance_available {
            writeln!(f, "warning: Hessian not invertible at the optimum; no standard errors")?;
        }
        Ok(())
    }
}

/// Fits the configured engine and reports wall-clock time.
pub fn run_fit(cfg: &ExperimentConfig, data: &LoadedData) -> Result<(FitResult, FitReport)> {
    let start = Instant::now();
    let fit = fit_with(cfg, cfg.engine, &data.table, &data.designs)?;
    let report = FitReport::new(data, cfg.engine, &fit, start.elapsed().as_secs_f64());
    Ok((fit, report))
}

fn require_laplace(cfg: &ExperimentConfig, what: &str) -> Result<()> {
    match cfg.engine {
        Engine::Laplace => Ok(()),
        Engine::Ml => Err(Error::InvalidInput(format!(
            "{what} summarises posterior draws and needs engine = laplace"
        ))),
    }
}

/// Laplace fit plus posterior summaries of every row's `λ`.
pub fn run_lambda_fitted(cfg: &ExperimentConfig, data: &LoadedData) -> Result<(FitResult, Vec<LambdaFittedSummary>)> {
    require_laplace(cfg, "lambda-fitted")?;
    let (fit, _) = run_fit(cfg, data)?;
    let samples = sample_posterior(&fit, cfg.samples, cfg.seed)?;
    let summaries = lambda_fitted(&fit, &samples, &data.designs)?;
    Ok((fit, summaries))
}

/// Posterior of `N` for one row: its label, `max(y)` and probabilities over
/// `N = max(y), max(y) + 1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorN {
    pub row: usize,
    pub label: RowLabel,
    pub n_min: u32,
    pub probabilities: Vec<f64>,
}

impl PosteriorN {
    pub fn mean(&self) -> f64 {
        self.probabilities
            .iter()
            .enumerate()
            .map(|(k, p)| (f64::from(self.n_min) + k as f64) * p)
            .sum()
    }
}

/// Laplace fit plus `N` posteriors for the configured 1-based rows.
pub fn run_posterior_n(cfg: &ExperimentConfig, data: &LoadedData) -> Result<Vec<PosteriorN>> {
    require_laplace(cfg, "posterior-n")?;
    let n_rows = data.table.n_rows();
    if let Some(&bad) = cfg.rows.iter().find(|&&r| r == 0 || r > n_rows) {
        return Err(Error::InvalidInput(format!("row {bad} out of range 1..={n_rows}")));
    }
    let (fit, _) = run_fit(cfg, data)?;
    let samples = sample_posterior(&fit, cfg.samples, cfg.seed)?;
    cfg.rows
        .iter()
        .map(|&r| {
            let (n_min, probabilities) =
                posterior_n_for_row(&fit, &samples, &data.table, &data.designs, r - 1, cfg.n_grid_max)?;
            Ok(PosteriorN {
                row: r,
                label: data.table.labels()[r - 1],
                n_min,
                probabilities,
            })
        })
        .collect()
}

/// Columns `index, mean, sd, q025, median, q975`, index 1-based.
pub fn write_lambda_fitted_csv<W: Write>(summaries: &[LambdaFittedSummary], writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["index", "mean", "sd", "q025", "median", "q975"])?;
    for s in summaries {
        csv.write_record([
            (s.index + 1).to_string(),
            format_float(s.mean),
            format_float(s.sd),
            format_float(s.q025),
            format_float(s.median),
            format_float(s.q975),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// Columns `row, site, year, N, probability`.
pub fn write_posterior_n_csv<W: Write>(posteriors: &[PosteriorN], writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["row", "site", "year", "N", "probability"])?;
    for post in posteriors {
        for (k, p) in post.probabilities.iter().enumerate() {
            csv.write_record([
                post.row.to_string(),
                post.label.site.to_string(),
                post.label.year.to_string(),
                (post.n_min + k as u32).to_string(),
                format_float(*p),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasModel {
    /// Detection with survey-level `x4`.
    True,
    /// Detection with the site-year mean `x4.m`.
    Averaged,
}

impl BiasModel {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasModel::True => "true",
            BiasModel::Averaged => "averaged",
        }
    }
}

pub const BIAS_PARAMETERS: [&str; 8] = ["b0", "b1", "b2", "b3", "a0", "a1", "a4", "theta"];

/// One parameter of one fit. `estimate` is the posterior median (the mode
/// under the Laplace Gaussian), on the `θ` scale for `theta`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRecord {
    pub run: usize,
    pub alpha4: f64,
    pub model: BiasModel,
    pub parameter: &'static str,
    pub truth: f64,
    pub estimate: f64,
    pub bias: f64,
    pub failed: bool,
}

/// `(α4, simulation seed)` for a run, from stream `run` of the master seed.
pub fn run_draw(master_seed: u64, run: usize, a4_range: (f64, f64)) -> (f64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(run as u64);
    let alpha4 = rng.random_range(a4_range.0..a4_range.1);
    (alpha4, rng.random())
}

fn bias_run(cfg: &ExperimentConfig, run: usize) -> Vec<BiasRecord> {
    let (alpha4, seed) = run_draw(cfg.seed, run, cfg.a4_range);
    let sim_cfg = SimConfig {
        a4: alpha4,
        seed,
        ..cfg.sim.clone()
    };
    let truth = sim_cfg.truth();
    let n_params = if cfg.family.has_dispersion() { 8 } else { 7 };
    let sim = simulate(&sim_cfg);
    let mut out = Vec::with_capacity(2 * n_params);
    for model in [BiasModel::True, BiasModel::Averaged] {
        let fit = sim.as_ref().ok().and_then(|sim| {
            let designs = match model {
                BiasModel::True => &sim.designs_full,
                BiasModel::Averaged => &sim.designs_avg,
            };
            fit_with(cfg, Engine::Laplace, &sim.table_full, designs).ok()
        });
        let (estimates, failed) = match &fit {
            Some(fit) => {
                let mut est = fit.estimates.to_stacked();
                if let Some(i) = fit.layout().theta_index() {
                    est[i] = est[i].exp();
                }
                (est, !fit.converged)
            }
            None => (vec![f64::NAN; n_params], true),
        };
        for p in 0..n_params {
            let estimate = estimates.get(p).copied().unwrap_or(f64::NAN);
            out.push(BiasRecord {
                run,
                alpha4,
                model,
                parameter: BIAS_PARAMETERS[p],
                truth: truth[p],
                estimate,
                bias: estimate - truth[p],
                failed,
            });
        }
    }
    out
}

/// Simulates `cfg.runs` datasets with `α4 ~ U(a4_range)` and survey-level
/// `x4`, fitting each with both detection models. Failed fits are flagged,
/// never fatal. Records are ordered by run, model, parameter.
///
/// The simulation must use the default covariate structure
/// (`x1, x2, x3` for abundance, `x1.p` plus `x4` or `x4.m` for detection).
pub fn bias_experiment(cfg: &ExperimentConfig) -> Result<Vec<BiasRecord>> {
    cfg.validate()?;
    let runs = par::map_range(cfg.runs, |run| bias_run(cfg, run));
    Ok(runs.into_iter().flatten().collect())
}

/// Columns `run, alpha4, model, parameter, truth, estimate, bias, failed`.
pub fn write_bias_csv<W: Write>(records: &[BiasRecord], writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["run", "alpha4", "model", "parameter", "truth", "estimate", "bias", "failed"])?;
    for r in records {
        csv.write_record([
            (r.run + 1).to_string(),
            format_float(r.alpha4),
            r.model.as_str().to_string(),
            r.parameter.to_string(),
            format_float(r.truth),
            format_float(r.estimate),
            format_float(r.bias),
            r.failed.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Per model and parameter: median |bias| for `|α4| > 2` and `|α4| < 1`, and
/// the rank correlation of bias with `α4`, over successful fits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasSummary {
    pub model: BiasModel,
    pub parameter: &'static str,
    pub runs: usize,
    pub median_abs_bias_strong: Option<f64>,
    pub median_abs_bias_weak: Option<f64>,
    pub rank_correlation: f64,
}

pub fn summarize_bias(records: &[BiasRecord]) -> Vec<BiasSummary> {
    let mut out = Vec::new();
    for model in [BiasModel::True, BiasModel::Averaged] {
        for parameter in BIAS_PARAMETERS {
            let rows: Vec<&BiasRecord> = records
                .iter()
                .filter(|r| r.model == model && r.parameter == parameter && !r.failed)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let mut strong: Vec<f64> = rows.iter().filter(|r| r.alpha4.abs() > 2.0).map(|r| r.bias.abs()).collect();
            let mut weak: Vec<f64> = rows.iter().filter(|r| r.alpha4.abs() < 1.0).map(|r| r.bias.abs()).collect();
            let a4: Vec<f64> = rows.iter().map(|r| r.alpha4).collect();
            let bias: Vec<f64> = rows.iter().map(|r| r.bias).collect();
            out.push(BiasSummary {
                model,
                parameter,
                runs: rows.len(),
                median_abs_bias_strong: median(&mut strong),
                median_abs_bias_weak: median(&mut weak),
                rank_correlation: spearman(&a4, &bias),
            });
        }
    }
    out
}
