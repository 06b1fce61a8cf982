//! Marginal likelihood of replicated counts with the latent abundance summed
//! out.
//!
//! For one row with counts `y_1..y_J` and `y* = max_j y_j` the summand is
//!
//! ```text
//! g(N) = D(N) · Π_j Bin(y_j; N, p_j),   N = y*, y*+1, ...
//! ```
//!
//! with `D` the Poisson or negative-binomial abundance density. Successive
//! summands differ by the single-step ratio
//!
//! ```text
//! g(N) / g(N-1) = d(N) · Π_j N (1 - p_j) / (N - y_j)
//! d(N) = λ / N                                  (Poisson)
//! d(N) = (N - 1 + θ) / N · λ / (θ + λ)          (negative binomial)
//! ```
//!
//! so `Σ g(N) = g(y*) · {1 + f_1 (1 + f_2 (1 + ...))}` where `f_i` is the ratio
//! at `N = y* + i`. [`row_loglik_recursive`] evaluates the nested form from the
//! truncation point downward, adding the smallest contributions first.
//! [`row_loglik_bruteforce`] sums log-gamma terms directly and is kept as the
//! verification oracle.

use statrs::function::factorial::ln_factorial;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{
    dot, lambda_from_eta, logistic, DesignMatrices, MixtureFamily, ObservationTable,
    ParameterLayout, ParameterVector,
};
use crate::par;

/// How far the latent-abundance sum is carried.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationPolicy {
    /// The sum stops once a geometric bound on the remaining tail falls below
    /// this fraction of the largest summand seen.
    pub relative_increment_floor: f64,
    /// `N_max <= max(y) + hard_cap_offset`.
    pub hard_cap_offset: u32,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            relative_increment_floor: 1e-12,
            hard_cap_offset: 10_000,
        }
    }
}

impl TruncationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.relative_increment_floor > 0.0 && self.relative_increment_floor < 1.0) {
            return Err(Error::InvalidInput(format!(
                "relative_increment_floor must lie in (0, 1), got {}",
                self.relative_increment_floor
            )));
        }
        if self.hard_cap_offset == 0 {
            return Err(Error::InvalidInput("hard_cap_offset must be at least 1".into()));
        }
        Ok(())
    }
}

/// Counts and parameters of a single row, missing surveys already removed.
#[derive(Debug, Clone, Copy)]
pub struct RowLikelihoodInput<'a> {
    pub y: &'a [u32],
    pub p: &'a [f64],
    pub lambda: f64,
    pub theta: Option<f64>,
}

impl<'a> RowLikelihoodInput<'a> {
    pub fn new(y: &'a [u32], p: &'a [f64], lambda: f64, theta: Option<f64>) -> Result<Self> {
        let input = Self {
            y,
            p,
            lambda,
            theta,
        };
        input.validate()?;
        Ok(input)
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.is_empty() || self.y.len() != self.p.len() {
            return Err(Error::InvalidInput(format!(
                "row needs matching non-empty y and p, got {} and {}",
                self.y.len(),
                self.p.len()
            )));
        }
        if let Some(p) = self.p.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidInput(format!("detection probability {p} outside (0, 1)")));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda must be positive, got {}", self.lambda)));
        }
        if let Some(t) = self.theta {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidInput(format!("theta must be positive, got {t}")));
            }
        }
        Ok(())
    }

    pub fn y_max(&self) -> u32 {
        self.y.iter().copied().max().unwrap_or(0)
    }

    fn divergent(&self) -> Error {
        Error::DivergentTail {
            lambda: self.lambda,
            p: self.p.to_vec(),
            theta: self.theta,
        }
    }
}

pub fn ln_poisson(n: u32, lambda: f64) -> f64 {
    f64::from(n) * lambda.ln() - lambda - ln_factorial(u64::from(n))
}

/// Negative binomial with size `theta` and mean `mu`, i.e. success
/// probability `theta / (theta + mu)`.
pub fn ln_negbin(n: u32, theta: f64, mu: f64) -> f64 {
    let n_f = f64::from(n);
    ln_gamma(n_f + theta) - ln_gamma(theta) - ln_factorial(u64::from(n))
        - theta * (mu / theta).ln_1p()
        + n_f * (mu / (theta + mu)).ln()
}

/// `log Bin(y; n, p)`, exact at `p = 0` and `p = 1`.
pub fn ln_binomial(y: u32, n: u32, p: f64) -> f64 {
    if y > n {
        return f64::NEG_INFINITY;
    }
    let miss = n - y;
    let hit_term = if y == 0 { 0.0 } else { f64::from(y) * p.ln() };
    let miss_term = if miss == 0 {
        0.0
    } else {
        f64::from(miss) * (-p).ln_1p()
    };
    ln_factorial(u64::from(n)) - ln_factorial(u64::from(y)) - ln_factorial(u64::from(miss))
        + hit_term
        + miss_term
}

fn ln_abundance(n: u32, lambda: f64, theta: Option<f64>) -> f64 {
    match theta {
        None => ln_poisson(n, lambda),
        Some(t) => ln_negbin(n, t, lambda),
    }
}

/// `log g(N)` evaluated directly.
fn ln_summand(input: &RowLikelihoodInput<'_>, n: u32) -> f64 {
    ln_abundance(n, input.lambda, input.theta)
        + input
            .y
            .iter()
            .zip(input.p)
            .map(|(&y, &p)| ln_binomial(y, n, p))
            .sum::<f64>()
}

/// Single-step ratios `g(N) / g(N-1)` for `N > y*`.
struct StepRatio<'a> {
    y: &'a [u32],
    /// `λ Π_j (1 - p_j)` (Poisson) or `λ/(θ+λ) Π_j (1 - p_j)` (NB).
    base: f64,
    theta: Option<f64>,
}

impl<'a> StepRatio<'a> {
    fn new(input: &RowLikelihoodInput<'a>) -> Self {
        let miss: f64 = input.p.iter().map(|p| 1.0 - p).product();
        let base = match input.theta {
            None => input.lambda * miss,
            Some(t) => input.lambda / (t + input.lambda) * miss,
        };
        Self {
            y: input.y,
            base,
            theta: input.theta,
        }
    }

    /// `Π_j N / (N - y_j)`.
    #[inline]
    fn binomial_part(&self, n: f64) -> f64 {
        self.y.iter().map(|&y| n / (n - f64::from(y))).product()
    }

    /// Returns the ratio at `N` together with an upper bound on every ratio
    /// at larger `N`. The Poisson ratio and the θ >= 1 NB ratio are
    /// decreasing in `N`; for θ < 1 the factor `(N-1+θ)/N` rises towards 1,
    /// so the bound replaces it by 1.
    #[inline]
    fn at(&self, n: u32) -> (f64, f64) {
        let n_f = f64::from(n);
        let bin = self.binomial_part(n_f);
        match self.theta {
            None => {
                let r = self.base * bin / n_f;
                (r, r)
            }
            Some(t) => {
                let shape = (n_f - 1.0 + t) / n_f;
                let r = self.base * bin * shape;
                let bound = if t >= 1.0 { r } else { self.base * bin };
                (r, bound)
            }
        }
    }

    #[inline]
    fn ratio(&self, n: u32) -> f64 {
        self.at(n).0
    }
}

const RESCALE: f64 = 1e280;

/// Chooses the truncation point `N_max` for a row.
///
/// Walks the summands upward from `y*` (relative to `g(y*)`) until the
/// ratios are below one and the geometric tail bound
/// `t_N · r̄ / (1 - r̄)` drops under `relative_increment_floor` times the
/// largest summand so far.
pub fn truncation_point(input: &RowLikelihoodInput<'_>, trunc: &TruncationPolicy) -> Result<u32> {
    let y_star = input.y_max();
    let cap = y_star.saturating_add(trunc.hard_cap_offset);
    let steps = StepRatio::new(input);
    let mut term = 1.0f64;
    let mut largest = 1.0f64;
    let mut n = y_star;
    let mut last_bound = f64::INFINITY;
    while n < cap {
        n += 1;
        let (r, bound) = steps.at(n);
        term *= r;
        if term > largest {
            largest = term;
            if largest > RESCALE {
                term /= RESCALE;
                largest /= RESCALE;
            }
        }
        last_bound = bound;
        if bound < 1.0 && term * bound / (1.0 - bound) < trunc.relative_increment_floor * largest {
            return Ok(n);
        }
    }
    if last_bound >= 1.0 {
        return Err(input.divergent());
    }
    Ok(cap)
}

/// Recursive evaluation of `log Prob(y_1..y_J | λ, p [, θ])`.
pub fn row_loglik_recursive(input: &RowLikelihoodInput<'_>, trunc: &TruncationPolicy) -> Result<f64> {
    input.validate()?;
    let n_max = truncation_point(input, trunc)?;
    Ok(recursive_sum(input, n_max))
}

/// Horner accumulation `1 + f_1 (1 + f_2 (1 + ... f_K))` from `N_max` down
/// to `y* + 1`, on top of the leading term `log g(y*)`.
///
/// The factor is held as `mantissa · exp(log_scale)` so it cannot overflow
/// when the summands grow by many orders of magnitude above `g(y*)`.
pub(crate) fn recursive_sum(input: &RowLikelihoodInput<'_>, n_max: u32) -> f64 {
    let y_star = input.y_max();
    let steps = StepRatio::new(input);
    let mut mantissa = 1.0f64;
    let mut log_scale = 0.0f64;
    let mut one = 1.0f64;
    let mut n = n_max;
    while n > y_star {
        mantissa = one + mantissa * steps.ratio(n);
        if mantissa > RESCALE {
            mantissa /= RESCALE;
            log_scale += RESCALE.ln();
            one = (-log_scale).exp();
        }
        n -= 1;
    }
    ln_summand(input, y_star) + mantissa.ln() + log_scale
}

/// Direct log-sum-exp of `log g(N)` over `N = max(y)..=n_max`, each summand
/// from log-gamma functions.
pub fn row_loglik_bruteforce(input: &RowLikelihoodInput<'_>, n_max: u32) -> Result<f64> {
    input.validate()?;
    let y_star = input.y_max();
    if n_max < y_star {
        return Err(Error::InvalidInput(format!("n_max {n_max} below max(y) {y_star}")));
    }
    let terms: Vec<f64> = (y_star..=n_max).map(|n| ln_summand(input, n)).collect();
    let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::NonFinite(format!(
            "brute-force summands for lambda = {}",
            input.lambda
        )));
    }
    let sum: f64 = terms.iter().map(|t| (t - top).exp()).sum();
    Ok(top + sum.ln())
}

/// Stacked-parameter view of one model: table, designs, family and
/// truncation, evaluated as a function of `(beta, alpha, log_theta)`.
#[derive(Debug, Clone, Copy)]
pub struct TableModel<'a> {
    pub table: &'a ObservationTable,
    pub designs: &'a DesignMatrices,
    pub family: MixtureFamily,
    pub trunc: TruncationPolicy,
}

impl<'a> TableModel<'a> {
    pub fn new(
        table: &'a ObservationTable,
        designs: &'a DesignMatrices,
        family: MixtureFamily,
        trunc: TruncationPolicy,
    ) -> Result<Self> {
        designs.check_table(table)?;
        trunc.validate()?;
        Ok(Self {
            table,
            designs,
            family,
            trunc,
        })
    }

    pub fn layout(&self) -> ParameterLayout {
        ParameterLayout::for_designs(self.designs, self.family)
    }

    fn split<'x>(&self, x: &'x [f64]) -> (&'x [f64], &'x [f64], Option<f64>) {
        let layout = self.layout();
        let (beta, rest) = x.split_at(layout.n_beta);
        let (alpha, rest) = rest.split_at(layout.n_alpha);
        (beta, alpha, rest.first().map(|lt| lt.exp()))
    }

    /// Log-likelihood contribution of one row.
    pub fn row_loglik(&self, x: &[f64], row: usize) -> Result<f64> {
        let (beta, alpha, theta) = self.split(x);
        let lambda = lambda_from_eta(dot(self.designs.abundance_row(row), beta), row)?;
        let mut y = Vec::with_capacity(self.table.n_surveys());
        let mut p = Vec::with_capacity(self.table.n_surveys());
        for (j, count) in self.table.row(row).iter().enumerate() {
            if let Some(c) = count {
                y.push(*c);
                p.push(logistic(dot(self.designs.detection_cell(row, j), alpha)));
            }
        }
        let input = RowLikelihoodInput {
            y: &y,
            p: &p,
            lambda,
            theta,
        };
        let value = row_loglik_recursive(&input, &self.trunc).map_err(|e| e.at_row(row))?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("log-likelihood {value}")).at_row(row));
        }
        Ok(value)
    }

    /// Sum of row log-likelihoods. Rows may be evaluated in parallel; the
    /// sum is always taken in row order.
    pub fn loglik(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        let rows = par::map_range(self.table.n_rows(), |r| self.row_loglik(x, r));
        rows.into_iter().sum()
    }

    /// Same as [`TableModel::loglik`] but always on the calling thread.
    pub fn loglik_sequential(&self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        par::map_range_seq(self.table.n_rows(), |r| self.row_loglik(x, r))
            .into_iter()
            .sum()
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        let n = self.layout().len();
        if x.len() != n {
            return Err(Error::InvalidInput(format!(
                "parameter vector has {} entries, model expects {n}",
                x.len()
            )));
        }
        Ok(())
    }
}

/// Full-table log-likelihood at `params`.
pub fn table_loglik(
    params: &ParameterVector,
    table: &ObservationTable,
    designs: &DesignMatrices,
    family: MixtureFamily,
    trunc: &TruncationPolicy,
) -> Result<f64> {
    params.check(designs, family)?;
    TableModel::new(table, designs, family, *trunc)?.loglik(&params.to_stacked())
}

/// Central-difference step for coordinate value `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

fn probe<F>(f: &F, x: &[f64], coordinate: usize, step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    match f(x) {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Probe { coordinate, step }),
    }
}

/// Central-difference gradient of an arbitrary objective.
pub fn central_gradient<F>(f: &F, x: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut work = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = fd_step(x[i]);
        work[i] = x[i] + h;
        let up = probe(f, &work, i, h)?;
        work[i] = x[i] - h;
        let down = probe(f, &work, i, h)?;
        work[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Central-difference Hessian of an arbitrary objective, before
/// symmetrisation. Row-major `n × n`.
pub fn central_hessian_raw<F>(f: &F, x: &[f64]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = x.len();
    let f0 = probe(f, x, 0, 0.0)?;
    let steps: Vec<f64> = x.iter().map(|&v| fd_step(v)).collect();
    let mut h = vec![vec![0.0; n]; n];
    let mut work = x.to_vec();
    for i in 0..n {
        let hi = steps[i];
        work[i] = x[i] + hi;
        let up = probe(f, &work, i, hi)?;
        work[i] = x[i] - hi;
        let down = probe(f, &work, i, hi)?;
        work[i] = x[i];
        h[i][i] = (up - 2.0 * f0 + down) / (hi * hi);
    }
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (hi, hj) = (steps[i], steps[j]);
            let mut corner = |si: f64, sj: f64| {
                work[i] = x[i] + si * hi;
                work[j] = x[j] + sj * hj;
                let v = probe(f, &work, i, hi);
                work[i] = x[i];
                work[j] = x[j];
                v
            };
            let pp = corner(1.0, 1.0)?;
            let pm = corner(1.0, -1.0)?;
            let mp = corner(-1.0, 1.0)?;
            let mm = corner(-1.0, -1.0)?;
            h[i][j] = (pp - pm - mp + mm) / (4.0 * hi * hj);
        }
    }
    Ok(h)
}

/// Symmetrised central-difference Hessian, `(H + Hᵀ) / 2`.
pub fn central_hessian<F>(f: &F, x: &[f64]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let raw = central_hessian_raw(f, x)?;
    let n = raw.len();
    Ok((0..n)
        .map(|i| (0..n).map(|j| 0.5 * (raw[i][j] + raw[j][i])).collect())
        .collect())
}

/// Gradient of [`table_loglik`] in stacked order `(beta, alpha, log_theta)`.
pub fn numeric_gradient(
    params: &ParameterVector,
    table: &ObservationTable,
    designs: &DesignMatrices,
    family: MixtureFamily,
    trunc: &TruncationPolicy,
) -> Result<Vec<f64>> {
    params.check(designs, family)?;
    let model = TableModel::new(table, designs, family, *trunc)?;
    central_gradient(&|x: &[f64]| model.loglik(x), &params.to_stacked())
}

/// Hessian of [`table_loglik`] in stacked order.
pub fn numeric_hessian(
    params: &ParameterVector,
    table: &ObservationTable,
    designs: &DesignMatrices,
    family: MixtureFamily,
    trunc: &TruncationPolicy,
) -> Result<Vec<Vec<f64>>> {
    params.check(designs, family)?;
    let model = TableModel::new(table, designs, family, *trunc)?;
    central_hessian(&|x: &[f64]| model.loglik(x), &params.to_stacked())
}
