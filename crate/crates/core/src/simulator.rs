//! Synthetic multi-year survey data.
//!
//! Sites carry two habitat covariates `x1`, `x2` (centred uniform on
//! `(-0.5, 0.5)`, constant over years) and years a centred trend `x3`
//! spanning `[-0.5, 0.5]`. Abundance is `N ~ NegBin(mean λ, size θ)` with
//! `log λ = b0 + b1 x1 + b2 x2 + b3 x3`. Detection uses `x1` again plus a
//! survey-level covariate `x4`; two count arrays are drawn from the same `N`:
//! `Y` with survey-specific `x4`, and `Y.m` with its per-site-year mean
//! `x4.m` replicated across surveys.
//!
//! Randomness comes from ChaCha8 seeded with `seed`, one stream per variable
//! family (see [`Stream`]), so that e.g. changing the detection model leaves
//! covariates and abundances untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DesignMatrices, DetectionCovariate, ObservationTable, RowLabel};

/// RNG stream per variable family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Covariates = 0,
    Abundance = 1,
    CountsAveraged = 2,
    CountsFull = 3,
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_sites: usize,
    pub n_surveys: usize,
    pub n_years: usize,
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub a0: f64,
    pub a1: f64,
    pub a4: f64,
    pub theta: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_sites: 72,
            n_surveys: 3,
            n_years: 9,
            b0: 2.0,
            b1: 2.0,
            b2: -3.0,
            b3: 1.0,
            a0: 1.0,
            a1: -2.0,
            a4: 1.0,
            theta: 3.0,
            seed: 12345,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 || self.n_surveys == 0 || self.n_years == 0 {
            return Err(Error::InvalidInput(
                "n_sites, n_surveys and n_years must all be at least 1".into(),
            ));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidInput(format!("theta must be positive, got {}", self.theta)));
        }
        let coefs = [self.b0, self.b1, self.b2, self.b3, self.a0, self.a1, self.a4];
        if coefs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("coefficients must be finite".into()));
        }
        Ok(())
    }

    /// True parameters in model order: `b0..b3, a0, a1, a4, theta`.
    pub fn truth(&self) -> [f64; 8] {
        [
            self.b0, self.b1, self.b2, self.b3, self.a0, self.a1, self.a4, self.theta,
        ]
    }
}

/// Covariates of a simulation, indexed `[site]`, `[year]` or
/// `[site][year][survey]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimCovariates {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x3: Vec<f64>,
    pub x4: Vec<Vec<Vec<f64>>>,
    /// `x4` averaged over surveys, `[site][year]`.
    pub x4_mean: Vec<Vec<f64>>,
}

/// Output tables are flattened year-major: row `k * n_sites + i` is site `i`
/// in year `k`, labelled 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub config: SimConfig,
    /// Counts `Y.m`, drawn with `x4.m`.
    pub table_avg: ObservationTable,
    /// Counts `Y`, drawn with survey-level `x4`.
    pub table_full: ObservationTable,
    /// Abundance `(1, x1, x2, x3)`, detection `(1, x1.p, x4.m)`.
    pub designs_avg: DesignMatrices,
    /// Abundance `(1, x1, x2, x3)`, detection `(1, x1.p, x4)`.
    pub designs_full: DesignMatrices,
    /// `[site][year]`.
    pub true_lambda: Vec<Vec<f64>>,
    /// `[site][year]`.
    pub true_n: Vec<Vec<u32>>,
    pub covariates: SimCovariates,
}

impl SimOutput {
    pub fn n_rows(&self) -> usize {
        self.config.n_sites * self.config.n_years
    }

    /// `(site, year)` of flattened row `row`, both 0-based.
    pub fn site_year(&self, row: usize) -> (usize, usize) {
        (row % self.config.n_sites, row / self.config.n_sites)
    }

    pub fn true_lambda_rows(&self) -> Vec<f64> {
        (0..self.n_rows())
            .map(|r| {
                let (i, k) = self.site_year(r);
                self.true_lambda[i][k]
            })
            .collect()
    }

    pub fn true_n_rows(&self) -> Vec<u32> {
        (0..self.n_rows())
            .map(|r| {
                let (i, k) = self.site_year(r);
                self.true_n[i][k]
            })
            .collect()
    }
}

fn centered_uniform<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mean = v.iter().sum::<f64>() / n as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    v
}

/// Year trend centred and scaled to `[-0.5, 0.5]`; a single year maps to 0.
pub fn year_trend(n_years: usize) -> Vec<f64> {
    let mean = (n_years as f64 + 1.0) / 2.0;
    let half_span = n_years as f64 - mean;
    (1..=n_years)
        .map(|k| {
            if half_span > 0.0 {
                (k as f64 - mean) / half_span / 2.0
            } else {
                0.0
            }
        })
        .collect()
}

fn logistic(eta: f64) -> f64 {
    1.0 / (1.0 + (-eta).exp())
}

/// `N ~ NegBin(mean λ, size θ)` as a gamma-Poisson mixture.
fn draw_negbin<R: Rng>(rng: &mut R, lambda: f64, theta: f64) -> Result<u32> {
    let gamma = Gamma::new(theta, lambda / theta)
        .map_err(|e| Error::InvalidInput(format!("gamma({theta}, {lambda}/{theta}): {e}")))?;
    let rate: f64 = gamma.sample(rng);
    if rate <= 0.0 {
        return Ok(0);
    }
    let poisson = Poisson::new(rate).map_err(|e| Error::InvalidInput(format!("poisson({rate}): {e}")))?;
    let n: f64 = poisson.sample(rng);
    if n > f64::from(u32::MAX) {
        return Err(Error::NonFinite(format!("abundance draw {n} overflows u32")));
    }
    Ok(n as u32)
}

fn draw_binomial<R: Rng>(rng: &mut R, n: u32, p: f64) -> Result<u32> {
    let b = Binomial::new(u64::from(n), p).map_err(|e| Error::InvalidInput(format!("binomial({n}, {p}): {e}")))?;
    Ok(b.sample(rng) as u32)
}

pub fn simulate(config: &SimConfig) -> Result<SimOutput> {
    config.validate()?;
    let (ns, nj, nk) = (config.n_sites, config.n_surveys, config.n_years);

    let mut cov_rng = stream_rng(config.seed, Stream::Covariates);
    let x1 = centered_uniform(&mut cov_rng, ns);
    let x2 = centered_uniform(&mut cov_rng, ns);
    let x3 = year_trend(nk);
    let x4_flat = centered_uniform(&mut cov_rng, ns * nk * nj);
    let x4: Vec<Vec<Vec<f64>>> = (0..ns)
        .map(|i| {
            (0..nk)
                .map(|k| (0..nj).map(|j| x4_flat[(i * nk + k) * nj + j]).collect())
                .collect()
        })
        .collect();
    let x4_mean: Vec<Vec<f64>> = x4
        .iter()
        .map(|site| site.iter().map(|s| s.iter().sum::<f64>() / nj as f64).collect())
        .collect();

    let true_lambda: Vec<Vec<f64>> = (0..ns)
        .map(|i| {
            (0..nk)
                .map(|k| (config.b0 + config.b1 * x1[i] + config.b2 * x2[i] + config.b3 * x3[k]).exp())
                .collect()
        })
        .collect();
    let mut n_rng = stream_rng(config.seed, Stream::Abundance);
    let mut true_n = vec![vec![0u32; nk]; ns];
    for i in 0..ns {
        for k in 0..nk {
            true_n[i][k] = draw_negbin(&mut n_rng, true_lambda[i][k], config.theta)?;
        }
    }

    let p_avg = |i: usize, k: usize| logistic(config.a0 + config.a1 * x1[i] + config.a4 * x4_mean[i][k]);
    let p_full = |i: usize, k: usize, j: usize| logistic(config.a0 + config.a1 * x1[i] + config.a4 * x4[i][k][j]);

    let mut avg_rng = stream_rng(config.seed, Stream::CountsAveraged);
    let mut full_rng = stream_rng(config.seed, Stream::CountsFull);
    let mut y_avg = vec![vec![vec![0u32; nj]; nk]; ns];
    let mut y_full = vec![vec![vec![0u32; nj]; nk]; ns];
    for i in 0..ns {
        for k in 0..nk {
            for cell in y_avg[i][k].iter_mut() {
                *cell = draw_binomial(&mut avg_rng, true_n[i][k], p_avg(i, k))?;
            }
        }
    }
    for i in 0..ns {
        for k in 0..nk {
            for (j, cell) in y_full[i][k].iter_mut().enumerate() {
                *cell = draw_binomial(&mut full_rng, true_n[i][k], p_full(i, k, j))?;
            }
        }
    }

    let rows: Vec<(usize, usize)> = (0..nk).flat_map(|k| (0..ns).map(move |i| (i, k))).collect();
    let labels: Vec<RowLabel> = rows
        .iter()
        .map(|&(i, k)| RowLabel {
            site: i as u32 + 1,
            year: k as u32 + 1,
        })
        .collect();
    let to_table = |y: &Vec<Vec<Vec<u32>>>| {
        let counts = rows
            .iter()
            .map(|&(i, k)| y[i][k].iter().map(|&c| Some(c)).collect())
            .collect();
        ObservationTable::new(counts, labels.clone())
    };
    let table_avg = to_table(&y_avg)?;
    let table_full = to_table(&y_full)?;

    let col = |f: &dyn Fn(usize, usize) -> f64| -> Vec<f64> { rows.iter().map(|&(i, k)| f(i, k)).collect() };
    let abundance = [
        ("x1", col(&|i, _| x1[i])),
        ("x2", col(&|i, _| x2[i])),
        ("x3", col(&|_, k| x3[k])),
    ];
    let x1p = DetectionCovariate::PerRow(col(&|i, _| x1[i]));
    let designs_avg = DesignMatrices::from_covariates(
        nj,
        &abundance,
        &[
            ("x1.p", x1p.clone()),
            ("x4.m", DetectionCovariate::PerRow(col(&|i, k| x4_mean[i][k]))),
        ],
    )?;
    let designs_full = DesignMatrices::from_covariates(
        nj,
        &abundance,
        &[
            ("x1.p", x1p),
            (
                "x4",
                DetectionCovariate::PerSurvey(rows.iter().map(|&(i, k)| x4[i][k].clone()).collect()),
            ),
        ],
    )?;

    Ok(SimOutput {
        config: config.clone(),
        table_avg,
        table_full,
        designs_avg,
        designs_full,
        true_lambda,
        true_n,
        covariates: SimCovariates {
            x1,
            x2,
            x3,
            x4,
            x4_mean,
        },
    })
}
