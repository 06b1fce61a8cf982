//! Bayesian fitting through a joint Laplace approximation.
//!
//! The posterior over the stacked parameters is approximated by a Gaussian
//! centred at its mode with covariance equal to the inverse negative Hessian
//! of the log posterior. Parameter draws from that Gaussian feed the fitted-λ
//! summaries and the posterior marginal of the latent abundance `N`.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fit_ml::{default_init, maximize, validate_fit_inputs, FitOptions, FitResult};
use crate::likelihood::{ln_binomial, ln_negbin, ln_poisson, TableModel};
use crate::model::{dot, logistic, DesignMatrices, MixtureFamily, ObservationTable, ParameterVector};
use crate::par;

/// Prior on the dispersion parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum ThetaPrior {
    /// Flat on `log θ`, the scale the mode search works on.
    #[default]
    FlatOnInternalScale,
    /// Improper flat prior on `θ` itself; adds the Jacobian `log θ` to the
    /// log posterior on the internal scale.
    FlatOnNaturalScale,
}

/// Independent normal priors on every `beta` and `alpha` coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PriorSpec {
    pub normal_mean: f64,
    pub normal_precision: f64,
    pub theta_prior: ThetaPrior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            normal_mean: 0.0,
            normal_precision: 0.01,
            theta_prior: ThetaPrior::FlatOnInternalScale,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.normal_precision > 0.0 && self.normal_precision.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "prior precision must be positive, got {}",
                self.normal_precision
            )));
        }
        if !self.normal_mean.is_finite() {
            return Err(Error::InvalidInput("prior mean must be finite".into()));
        }
        Ok(())
    }

    /// Log prior density of a stacked vector whose first `n_coef` entries are
    /// regression coefficients and whose optional last entry is `log θ`.
    pub fn log_density(&self, x: &[f64], n_coef: usize) -> f64 {
        let tau = self.normal_precision;
        let norm = 0.5 * (tau / (2.0 * std::f64::consts::PI)).ln();
        let coef: f64 = x[..n_coef]
            .iter()
            .map(|b| norm - 0.5 * tau * (b - self.normal_mean).powi(2))
            .sum();
        let theta = match (x.get(n_coef), self.theta_prior) {
            (Some(log_theta), ThetaPrior::FlatOnNaturalScale) => *log_theta,
            _ => 0.0,
        };
        coef + theta
    }
}

/// Posterior mode and Laplace covariance. `loglik` is the log-likelihood at
/// the mode, `log_posterior` the (unnormalised) log posterior there.
pub fn fit_laplace(
    table: &ObservationTable,
    designs: &DesignMatrices,
    family: MixtureFamily,
    priors: &PriorSpec,
    options: &FitOptions,
) -> Result<FitResult> {
    priors.validate()?;
    let layout = validate_fit_inputs(table, designs, family)?;
    let model = TableModel::new(table, designs, family, options.trunc)?;
    let n_coef = layout.n_beta + layout.n_alpha;
    let log_post = |x: &[f64]| model.loglik(x).map(|ll| ll + priors.log_density(x, n_coef));
    let init = match &options.init {
        Some(p) => {
            p.check(designs, family)?;
            p.clone()
        }
        None => default_init(table, designs, family),
    };
    let m = maximize(log_post, &init.to_stacked(), &options.optimizer)?;
    Ok(FitResult {
        estimates: ParameterVector::from_stacked(&m.x, layout)?,
        family,
        names: layout.names(designs),
        covariance: m.covariance,
        loglik: model.loglik(&m.x)?,
        log_posterior: Some(m.objective),
        initial_objective: m.initial_objective,
        converged: m.converged,
        iterations: m.iterations,
        gradient_norm: m.gradient_norm,
    })
}

/// `M` parameter draws in stacked order, one per row of `draws`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    pub draws: Vec<Vec<f64>>,
}

impl PosteriorSamples {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Values of one stacked coordinate across draws.
    pub fn column(&self, index: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[index]).collect()
    }
}

/// Draws `m` vectors from `N(mode, covariance)`. Draw `i` uses ChaCha8
/// stream `i` of `seed`, so the output is independent of thread count.
pub fn sample_posterior(fit: &FitResult, m: usize, seed: u64) -> Result<PosteriorSamples> {
    if m == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    let cov = fit
        .covariance
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("fit has no covariance to sample from".into()))?;
    let chol = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l();
    let mode = DVector::from_vec(fit.estimates.to_stacked());
    let dim = mode.len();
    let draws = par::map_range(m, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        (&mode + &l * z).as_slice().to_vec()
    });
    if draws.iter().flatten().any(|v: &f64| !v.is_finite()) {
        return Err(Error::NonFinite("posterior draw".into()));
    }
    Ok(PosteriorSamples {
        names: fit.names.clone(),
        draws,
    })
}

/// Posterior summary of one row's expected abundance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaFittedSummary {
    pub index: usize,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub median: f64,
    pub q975: f64,
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_type7(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Posterior of `λ_row = exp(x_row · beta)` for every row, by pushing each
/// draw through the log-linear predictor.
pub fn lambda_fitted(
    fit: &FitResult,
    samples: &PosteriorSamples,
    designs: &DesignMatrices,
) -> Result<Vec<LambdaFittedSummary>> {
    let n_beta = fit.estimates.beta.len();
    if designs.n_abundance() != n_beta {
        return Err(Error::InvalidInput(format!(
            "abundance design has {} columns, fit has {n_beta} coefficients",
            designs.n_abundance()
        )));
    }
    if samples.is_empty() || samples.draws.iter().any(|d| d.len() < n_beta) {
        return Err(Error::InvalidInput("samples do not match the fit layout".into()));
    }
    let m = samples.len() as f64;
    let out = par::map_range(designs.n_rows(), |row| {
        let x = designs.abundance_row(row);
        let mut lam: Vec<f64> = samples
            .draws
            .iter()
            .map(|d| dot(x, &d[..n_beta]).exp())
            .collect();
        let mean = lam.iter().sum::<f64>() / m;
        let sd = if lam.len() > 1 {
            (lam.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        } else {
            0.0
        };
        lam.sort_by(f64::total_cmp);
        LambdaFittedSummary {
            index: row,
            mean,
            sd,
            q025: quantile_type7(&lam, 0.025),
            median: quantile_type7(&lam, 0.5),
            q975: quantile_type7(&lam, 0.975),
        }
    });
    Ok(out)
}

/// Default upper end of the `N` grid: `max(y) + 50 sqrt(λ̂) + 50`.
pub fn default_grid_cap(y_max: u32, lambda_hat: f64) -> u32 {
    let extra = 50.0 * lambda_hat.max(0.0).sqrt() + 50.0;
    y_max.saturating_add(extra.ceil().min(f64::from(u32::MAX / 2)) as u32)
}

/// Posterior marginal of `N` for one row over `N = max(y)..=n_grid_max`.
///
/// For each draw the summands `Π_i Bin(y_i; N, p_i) · D(N)` are normalised on
/// the grid; the normalised vectors are averaged over draws and the average
/// renormalised.
pub fn posterior_n(
    y_row: &[u32],
    p_draws: &[Vec<f64>],
    lambda_draws: &[f64],
    family: MixtureFamily,
    theta_draws: Option<&[f64]>,
    n_grid_max: u32,
) -> Result<Vec<f64>> {
    let y_max = y_row.iter().copied().max().ok_or_else(|| {
        Error::InvalidInput("posterior_n needs at least one observed count".into())
    })?;
    if n_grid_max < y_max {
        return Err(Error::InvalidInput(format!(
            "grid cap {n_grid_max} is below max(y) = {y_max}"
        )));
    }
    let m = lambda_draws.len();
    if m == 0 || p_draws.len() != m {
        return Err(Error::InvalidInput(format!(
            "{} p draws and {m} lambda draws must agree and be non-empty",
            p_draws.len()
        )));
    }
    if p_draws.iter().any(|p| p.len() != y_row.len()) {
        return Err(Error::InvalidInput("each p draw must have one entry per count".into()));
    }
    let thetas = match (family, theta_draws) {
        (MixtureFamily::PoissonBinomial, _) => None,
        (MixtureFamily::NegBinomialBinomial, Some(t)) if t.len() == m => Some(t),
        (MixtureFamily::NegBinomialBinomial, _) => {
            return Err(Error::InvalidInput("negative binomial needs one theta per draw".into()))
        }
    };
    let width = (n_grid_max - y_max + 1) as usize;
    let per_draw = par::map_range(m, |k| -> Result<Vec<f64>> {
        let lambda = lambda_draws[k];
        let logs: Vec<f64> = (y_max..=n_grid_max)
            .map(|n| {
                let dens = match thetas {
                    None => ln_poisson(n, lambda),
                    Some(t) => ln_negbin(n, t[k], lambda),
                };
                dens + y_row
                    .iter()
                    .zip(&p_draws[k])
                    .map(|(&y, &p)| ln_binomial(y, n, p))
                    .sum::<f64>()
            })
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::EmptyPosterior { draw: k });
        }
        let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        Ok(w.into_iter().map(|v| v / z).collect())
    });
    let mut avg = vec![0.0; width];
    for draw in per_draw {
        for (a, v) in avg.iter_mut().zip(draw?) {
            *a += v;
        }
    }
    let total: f64 = avg.iter().sum();
    Ok(avg.into_iter().map(|v| v / total).collect())
}

/// [`posterior_n`] for table row `row`, with `p` and `λ` draws derived from
/// parameter samples. `n_grid_max = None` uses [`default_grid_cap`] at the
/// fitted `λ̂`.
pub fn posterior_n_for_row(
    fit: &FitResult,
    samples: &PosteriorSamples,
    table: &ObservationTable,
    designs: &DesignMatrices,
    row: usize,
    n_grid_max: Option<u32>,
) -> Result<(u32, Vec<f64>)> {
    if row >= table.n_rows() {
        return Err(Error::InvalidInput(format!(
            "row {row} out of range (table has {} rows)",
            table.n_rows()
        )));
    }
    designs.check_table(table)?;
    let layout = fit.layout();
    let present: Vec<(usize, u32)> = table
        .row(row)
        .iter()
        .enumerate()
        .filter_map(|(j, c)| c.map(|c| (j, c)))
        .collect();
    let y: Vec<u32> = present.iter().map(|&(_, c)| c).collect();
    let x = designs.abundance_row(row);
    let beta_end = layout.n_beta;
    let alpha_end = beta_end + layout.n_alpha;
    let lambda_draws: Vec<f64> = samples.draws.iter().map(|d| dot(x, &d[..beta_end]).exp()).collect();
    let p_draws: Vec<Vec<f64>> = samples
        .draws
        .iter()
        .map(|d| {
            present
                .iter()
                .map(|&(j, _)| logistic(dot(designs.detection_cell(row, j), &d[beta_end..alpha_end])))
                .collect()
        })
        .collect();
    let theta_draws: Option<Vec<f64>> = layout
        .theta_index()
        .map(|i| samples.draws.iter().map(|d| d[i].exp()).collect());
    let y_max = y.iter().copied().max().unwrap_or(0);
    let cap = n_grid_max.unwrap_or_else(|| {
        let lambda_hat = dot(x, &fit.estimates.beta).exp();
        default_grid_cap(y_max, lambda_hat)
    });
    let probs = posterior_n(&y, &p_draws, &lambda_draws, fit.family, theta_draws.as_deref(), cap)?;
    Ok((y_max, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn point_fit(beta: Vec<f64>, cov_scale: f64) -> FitResult {
        let n = beta.len() + 1;
        FitResult {
            estimates: ParameterVector::new(beta, vec![0.0], None).unwrap(),
            family: MixtureFamily::PoissonBinomial,
            names: (0..n).map(|i| format!("c{i}")).collect(),
            covariance: Some(DMatrix::identity(n, n) * cov_scale),
            loglik: 0.0,
            log_posterior: None,
            initial_objective: 0.0,
            converged: true,
            iterations: 0,
            gradient_norm: 0.0,
        }
    }

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&v, 0.5), 2.5);
        assert_eq!(quantile_type7(&v, 0.0), 1.0);
        assert_eq!(quantile_type7(&v, 1.0), 4.0);
        assert!((quantile_type7(&v, 0.025) - 1.075).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_centred() {
        let fit = point_fit(vec![1.0, -0.5], 0.04);
        let a = sample_posterior(&fit, 5000, 11).unwrap();
        let b = sample_posterior(&fit, 5000, 11).unwrap();
        assert_eq!(a, b);
        let c = sample_posterior(&fit, 5000, 12).unwrap();
        assert_ne!(a, c);
        let mode = fit.estimates.to_stacked();
        for (i, m) in mode.iter().enumerate() {
            let col = a.column(i);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!((mean - m).abs() < 3.0 * 0.2 / (5000f64).sqrt());
        }
    }

    #[test]
    fn sample_covariance_matches_input() {
        let fit = point_fit(vec![0.0, 0.0], 2.5);
        let s = sample_posterior(&fit, 5000, 3).unwrap();
        let n = s.draws[0].len();
        let m = s.len() as f64;
        let means: Vec<f64> = (0..n).map(|i| s.column(i).iter().sum::<f64>() / m).collect();
        let mut diff2 = 0.0;
        let mut ref2 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let c = s.draws.iter().map(|d| (d[i] - means[i]) * (d[j] - means[j])).sum::<f64>() / (m - 1.0);
                let target = if i == j { 2.5 } else { 0.0 };
                diff2 += (c - target).powi(2);
                ref2 += target * target;
            }
        }
        assert!((diff2 / ref2).sqrt() < 0.1);
    }

    #[test]
    fn non_pd_covariance_is_rejected() {
        let mut fit = point_fit(vec![0.0], 1.0);
        fit.covariance = Some(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(sample_posterior(&fit, 10, 0), Err(Error::NotPositiveDefinite)));
    }

    #[test]
    fn degenerate_posterior_gives_zero_spread() {
        let fit = point_fit(vec![0.3, 0.2], 0.0);
        let samples = PosteriorSamples {
            names: fit.names.clone(),
            draws: vec![fit.estimates.to_stacked(); 50],
        };
        let designs = DesignMatrices::from_covariates(1, &[("x", vec![0.5, -1.0])], &[]).unwrap();
        for s in lambda_fitted(&fit, &samples, &designs).unwrap() {
            assert!(s.sd <= 1e-12 * s.mean);
            assert!((s.q025 - s.median).abs() <= 1e-12 * s.mean);
            assert!((s.q975 - s.median).abs() <= 1e-12 * s.mean);
        }
    }

    #[test]
    fn posterior_n_point_mass_under_perfect_detection() {
        let post = posterior_n(&[4, 4, 4], &[vec![1.0, 1.0, 1.0]], &[6.0], MixtureFamily::PoissonBinomial, None, 60).unwrap();
        assert_eq!(post[0], 1.0);
        assert!(post[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn posterior_n_zero_count_conjugacy() {
        // Pois(N; 2) 0.5^N ∝ Pois(N; 1)
        let post = posterior_n(&[0], &[vec![0.5]], &[2.0], MixtureFamily::PoissonBinomial, None, 80).unwrap();
        let oracle: Vec<f64> = (0..=80u32).map(|n| ln_poisson(n, 1.0).exp()).collect();
        let z: f64 = oracle.iter().sum();
        for (a, b) in post.iter().zip(&oracle) {
            assert!((a - b / z).abs() < 1e-10);
        }
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_n_averaging_is_idempotent() {
        let one = posterior_n(&[3, 1], &[vec![0.3, 0.6]], &[7.0], MixtureFamily::NegBinomialBinomial, Some(&[2.0]), 100).unwrap();
        let two = posterior_n(
            &[3, 1],
            &[vec![0.3, 0.6], vec![0.3, 0.6]],
            &[7.0, 7.0],
            MixtureFamily::NegBinomialBinomial,
            Some(&[2.0, 2.0]),
            100,
        )
        .unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_n_input_errors() {
        assert!(posterior_n(&[5], &[vec![0.5]], &[2.0], MixtureFamily::PoissonBinomial, None, 4).is_err());
        assert!(posterior_n(&[1], &[vec![0.5]], &[2.0], MixtureFamily::NegBinomialBinomial, None, 9).is_err());
        assert!(matches!(
            posterior_n(&[1], &[vec![0.0]], &[2.0], MixtureFamily::PoissonBinomial, None, 9),
            Err(Error::EmptyPosterior { draw: 0 })
        ));
    }

    #[test]
    fn prior_density() {
        let prior = PriorSpec::default();
        let flat_theta = prior.log_density(&[0.0, 0.0, 1.3], 2);
        let with_jacobian = PriorSpec {
            theta_prior: ThetaPrior::FlatOnNaturalScale,
            ..prior
        }
        .log_density(&[0.0, 0.0, 1.3], 2);
        assert!((with_jacobian - flat_theta - 1.3).abs() < 1e-15);
        assert!(PriorSpec {
            normal_precision: 0.0,
            ..prior
        }
        .validate()
        .is_err());
    }
}
