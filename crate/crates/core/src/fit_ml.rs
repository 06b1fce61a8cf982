//! Maximum-likelihood fitting with observed-information standard errors.

use std::fmt;

use nalgebra::DMatrix;
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::likelihood::{central_gradient, central_hessian, TableModel, TruncationPolicy};
use crate::model::{DesignMatrices, MixtureFamily, ObservationTable, ParameterLayout, ParameterVector};
use crate::optim::{self, BfgsOptions};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitOptions {
    pub trunc: TruncationPolicy,
    pub optimizer: BfgsOptions,
    /// Starting point; `None` uses [`default_init`].
    pub init: Option<ParameterVector>,
}

/// Point estimates plus the curvature-based covariance at the optimum.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub estimates: ParameterVector,
    pub family: MixtureFamily,
    /// Names in stacked order `(beta, alpha, log_theta)`.
    pub names: Vec<String>,
    /// `None` when the negative Hessian at the optimum is not invertible.
    pub covariance: Option<DMatrix<f64>>,
    pub loglik: f64,
    /// Log posterior at the mode; `None` for maximum-likelihood fits.
    pub log_posterior: Option<f64>,
    /// Objective (log-likelihood or log posterior) at the starting point.
    pub initial_objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl FitResult {
    pub fn layout(&self) -> ParameterLayout {
        ParameterLayout {
            n_beta: self.estimates.beta.len(),
            n_alpha: self.estimates.alpha.len(),
            family: self.family,
        }
    }

    /// Standard errors (or posterior sds), `sqrt(diag covariance)`.
    pub fn standard_errors(&self) -> Option<Vec<f64>> {
        self.covariance
            .as_ref()
            .map(|c| (0..c.nrows()).map(|i| c[(i, i)].max(0.0).sqrt()).collect())
    }
}

/// Starting point: intercept `log(mean row max + 0.5)`, other coefficients
/// zero (so `p = 0.5`), `log_theta = 0`.
pub fn default_init(
    table: &ObservationTable,
    designs: &DesignMatrices,
    family: MixtureFamily,
) -> ParameterVector {
    let mean_max = (0..table.n_rows())
        .map(|r| f64::from(table.row_max(r)))
        .sum::<f64>()
        / table.n_rows() as f64;
    let mut beta = vec![0.0; designs.n_abundance()];
    beta[0] = (mean_max + 0.5).ln();
    ParameterVector {
        beta,
        alpha: vec![0.0; designs.n_detection()],
        log_theta: family.has_dispersion().then_some(0.0),
    }
}

fn numeric_rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().copied().fold(0.0, f64::max);
    let tol = top * 1e-10 * (m.nrows().max(m.ncols()) as f64);
    sv.iter().filter(|s| **s > tol).count()
}

/// First column (in order) that lies in the span of the columns before it.
fn first_collinear(m: &DMatrix<f64>) -> Option<usize> {
    (1..=m.ncols()).find(|&k| numeric_rank(&m.columns(0, k).into_owned()) < k).map(|k| k - 1)
}

/// Checks both designs for full column rank, the detection design over the
/// cells with an observed count only.
pub fn check_designs(table: &ObservationTable, designs: &DesignMatrices) -> Result<()> {
    designs.check_table(table)?;
    let a = DMatrix::from_fn(designs.n_rows(), designs.n_abundance(), |r, c| {
        designs.abundance_row(r)[c]
    });
    if let Some(c) = first_collinear(&a) {
        return Err(Error::RankDeficient {
            design: "abundance",
            column: designs.abundance_names()[c].clone(),
        });
    }
    let cells: Vec<(usize, usize)> = (0..table.n_rows())
        .flat_map(|r| (0..table.n_surveys()).map(move |j| (r, j)))
        .filter(|&(r, j)| table.get(r, j).is_some())
        .collect();
    let d = DMatrix::from_fn(cells.len(), designs.n_detection(), |i, c| {
        let (r, j) = cells[i];
        designs.detection_cell(r, j)[c]
    });
    if let Some(c) = first_collinear(&d) {
        return Err(Error::RankDeficient {
            design: "detection",
            column: designs.detection_names()[c].clone(),
        });
    }
    Ok(())
}

/// Inverse of `-H`, or `None` when `-H` is not positive definite.
pub(crate) fn covariance_from_hessian(hessian: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let n = hessian.len();
    let neg = DMatrix::from_fn(n, n, |i, j| -hessian[i][j]);
    let chol = neg.cholesky()?;
    let cov = chol.inverse();
    cov.iter().all(|v| v.is_finite()).then_some(cov)
}

/// Shared driver for both engines: maximises `objective` over the stacked
/// parameters and evaluates the curvature at the optimum.
pub(crate) struct Maximized {
    pub x: Vec<f64>,
    pub objective: f64,
    pub initial_objective: f64,
    pub covariance: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

pub(crate) fn maximize<F>(objective: F, x0: &[f64], opts: &BfgsOptions) -> Result<Maximized>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let neg = |x: &[f64]| objective(x).map(|v| -v);
    let neg_grad = |x: &[f64]| central_gradient(&neg, x);
    let out = optim::minimize(neg, neg_grad, x0, opts)?;
    let hessian = central_hessian(&objective, &out.x)?;
    Ok(Maximized {
        covariance: covariance_from_hessian(&hessian),
        objective: -out.value,
        initial_objective: -out.initial_value,
        converged: out.converged,
        iterations: out.iterations,
        gradient_norm: out.gradient_norm(),
        x: out.x,
    })
}

pub(crate) fn validate_fit_inputs(
    table: &ObservationTable,
    designs: &DesignMatrices,
    family: MixtureFamily,
) -> Result<ParameterLayout> {
    check_designs(table, designs)?;
    let layout = ParameterLayout::for_designs(designs, family);
    if table.n_rows() < layout.len() {
        return Err(Error::InvalidInput(format!(
            "{} rows cannot identify {} parameters",
            table.n_rows(),
            layout.len()
        )));
    }
    Ok(layout)
}

/// Maximum-likelihood fit. Non-convergence is reported in the result, not
/// raised.
pub fn fit_ml(
    table: &ObservationTable,
    designs: &DesignMatrices,
    family: MixtureFamily,
    options: &FitOptions,
) -> Result<FitResult> {
    let layout = validate_fit_inputs(table, designs, family)?;
    let model = TableModel::new(table, designs, family, options.trunc)?;
    let init = match &options.init {
        Some(p) => {
            p.check(designs, family)?;
            p.clone()
        }
        None => default_init(table, designs, family),
    };
    let m = maximize(|x| model.loglik(x), &init.to_stacked(), &options.optimizer)?;
    Ok(FitResult {
        estimates: ParameterVector::from_stacked(&m.x, layout)?,
        family,
        names: layout.names(designs),
        covariance: m.covariance,
        loglik: m.objective,
        log_posterior: None,
        initial_objective: m.initial_objective,
        converged: m.converged,
        iterations: m.iterations,
        gradient_norm: m.gradient_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Component {
    Abundance,
    Detection,
    Dispersion,
}

impl Component {
    fn heading(self) -> &'static str {
        match self {
            Component::Abundance => "Abundance (log-scale):",
            Component::Detection => "Detection (logit-scale):",
            Component::Dispersion => "Dispersion (log-scale):",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub component: Component,
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

impl SummaryRow {
    pub fn new(component: Component, name: impl Into<String>, estimate: f64, se: f64) -> Self {
        let z = if se > 0.0 { estimate / se } else { f64::NAN };
        Self {
            component,
            name: name.into(),
            estimate,
            se,
            z,
            p_value: two_sided_p(z),
        }
    }

    /// `estimate ± 1.96 se`.
    pub fn interval95(&self) -> (f64, f64) {
        (self.estimate - 1.959_963_984_540_054 * self.se, self.estimate + 1.959_963_984_540_054 * self.se)
    }
}

/// Two-sided standard-normal tail probability.
pub fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Dispersion on both natural scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DispersionNote {
    pub theta: f64,
    pub inverse_theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub rows: Vec<SummaryRow>,
    pub dispersion: Option<DispersionNote>,
}

/// Estimate / SE / z / two-sided p table, grouped by model component.
pub fn summarize_fit(fit: &FitResult) -> Result<FitSummary> {
    let se = fit
        .standard_errors()
        .ok_or_else(|| Error::InvalidInput("fit has no covariance to summarise".into()))?;
    let layout = fit.layout();
    let rows = fit
        .estimates
        .to_stacked()
        .into_iter()
        .enumerate()
        .map(|(i, est)| {
            let component = if i < layout.n_beta {
                Component::Abundance
            } else if i < layout.n_beta + layout.n_alpha {
                Component::Detection
            } else {
                Component::Dispersion
            };
            let name = fit.names[i]
                .split_once(':')
                .map_or(fit.names[i].as_str(), |(_, n)| n);
            SummaryRow::new(component, name, est, se[i])
        })
        .collect();
    let dispersion = fit.estimates.theta().map(|theta| DispersionNote {
        theta,
        inverse_theta: 1.0 / theta,
    });
    Ok(FitSummary { rows, dispersion })
}

impl fmt::Display for FitSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut current = None;
        for row in &self.rows {
            if current != Some(row.component) {
                if current.is_some() {
                    writeln!(f)?;
                }
                writeln!(f, "{}", row.component.heading())?;
                writeln!(
                    f,
                    "{:<16} {:>10} {:>10} {:>9} {:>10}",
                    "", "Estimate", "SE", "z", "P(>|z|)"
                )?;
                current = Some(row.component);
            }
            let label = if row.component == Component::Dispersion { "" } else { &row.name };
            writeln!(
                f,
                "{:<16} {:>10.4} {:>10.4} {:>9.3} {:>10.3e}",
                label, row.estimate, row.se, row.z, row.p_value
            )?;
        }
        if let Some(d) = self.dispersion {
            writeln!(f, "\ntheta = exp(log_theta) = {:.4}; 1/theta = {:.4}", d.theta, d.inverse_theta)?;
        }
        Ok(())
    }
}
