//! Data model shared by the inference engines: count tables, design
//! matrices, link functions and the stacked parameter layout.
//!
//! Multi-year data is flattened to one row per (site, year); years enter the
//! model only through covariate columns. Intercepts are ordinary columns of
//! ones in the design matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Detection probabilities are kept inside `[P_FLOOR, 1 - P_FLOOR]` so the
/// likelihood recursion never sees an exact 0 or 1.
pub const P_FLOOR: f64 = 1e-12;

/// Identifies the site and year of one table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLabel {
    pub site: u32,
    pub year: u32,
}

/// Counts per row × survey. `None` marks a survey that was not conducted.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    counts: Vec<Option<u32>>,
    n_rows: usize,
    n_surveys: usize,
    labels: Vec<RowLabel>,
}

impl ObservationTable {
    pub fn new(counts: Vec<Vec<Option<u32>>>, labels: Vec<RowLabel>) -> Result<Self> {
        let n_rows = counts.len();
        if n_rows == 0 {
            return Err(Error::InvalidInput("observation table has no rows".into()));
        }
        if labels.len() != n_rows {
            return Err(Error::InvalidInput(format!(
                "{} row labels for {} rows",
                labels.len(),
                n_rows
            )));
        }
        let n_surveys = counts[0].len();
        if n_surveys == 0 {
            return Err(Error::InvalidInput("observation table has no surveys".into()));
        }
        let mut flat = Vec::with_capacity(n_rows * n_surveys);
        for (r, row) in counts.into_iter().enumerate() {
            if row.len() != n_surveys {
                return Err(Error::InvalidInput(format!(
                    "row {r} has {} surveys, expected {n_surveys}",
                    row.len()
                )));
            }
            if row.iter().all(Option::is_none) {
                return Err(Error::InvalidInput(format!("row {r} has no observed counts")));
            }
            flat.extend(row);
        }
        Ok(Self {
            counts: flat,
            n_rows,
            n_surveys,
            labels,
        })
    }

    /// Table with labels `(row + 1, 1)`, handy for single-year data.
    pub fn from_counts(counts: Vec<Vec<Option<u32>>>) -> Result<Self> {
        let labels = (0..counts.len())
            .map(|r| RowLabel {
                site: r as u32 + 1,
                year: 1,
            })
            .collect();
        Self::new(counts, labels)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_surveys(&self) -> usize {
        self.n_surveys
    }

    pub fn labels(&self) -> &[RowLabel] {
        &self.labels
    }

    pub fn row(&self, row: usize) -> &[Option<u32>] {
        &self.counts[row * self.n_surveys..(row + 1) * self.n_surveys]
    }

    pub fn get(&self, row: usize, survey: usize) -> Option<u32> {
        self.row(row)[survey]
    }

    /// Largest observed count in a row.
    pub fn row_max(&self, row: usize) -> u32 {
        self.row(row).iter().flatten().copied().max().unwrap_or(0)
    }

    /// Number of present (row, survey) cells.
    pub fn n_present(&self) -> usize {
        self.counts.iter().filter(|c| c.is_some()).count()
    }

    /// Reorders rows; `order[i]` is the source row of new row `i`.
    pub fn permute_rows(&self, order: &[usize]) -> Result<Self> {
        let counts = order.iter().map(|&r| self.row(r).to_vec()).collect();
        let labels = order.iter().map(|&r| self.labels[r]).collect();
        Self::new(counts, labels)
    }
}

/// A detection covariate, either constant within a row or survey-specific.
#[derive(Debug, Clone, PartialEq)]
pub enum DetectionCovariate {
    PerRow(Vec<f64>),
    PerSurvey(Vec<Vec<f64>>),
}

/// Abundance design (rows × P_λ) and detection design (rows × surveys × P_p).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    abundance: Vec<f64>,
    abundance_names: Vec<String>,
    detection: Vec<f64>,
    detection_names: Vec<String>,
    n_rows: usize,
    n_surveys: usize,
}

impl DesignMatrices {
    /// Builds designs from raw matrices. Callers supply the intercept column.
    pub fn new(
        abundance: Vec<Vec<f64>>,
        abundance_names: Vec<String>,
        detection: Vec<Vec<Vec<f64>>>,
        detection_names: Vec<String>,
    ) -> Result<Self> {
        let n_rows = abundance.len();
        if n_rows == 0 || detection.len() != n_rows {
            return Err(Error::InvalidInput(format!(
                "design row counts disagree: abundance {n_rows}, detection {}",
                detection.len()
            )));
        }
        let pa = abundance_names.len();
        let pd = detection_names.len();
        if pa == 0 || pd == 0 {
            return Err(Error::InvalidInput("designs need at least one column".into()));
        }
        let n_surveys = detection[0].len();
        if n_surveys == 0 {
            return Err(Error::InvalidInput("detection design has no surveys".into()));
        }
        let mut a_flat = Vec::with_capacity(n_rows * pa);
        for (r, row) in abundance.iter().enumerate() {
            if row.len() != pa {
                return Err(Error::InvalidInput(format!(
                    "abundance design row {r} has {} columns, expected {pa}",
                    row.len()
                )));
            }
            a_flat.extend_from_slice(row);
        }
        let mut d_flat = Vec::with_capacity(n_rows * n_surveys * pd);
        for (r, row) in detection.iter().enumerate() {
            if row.len() != n_surveys {
                return Err(Error::InvalidInput(format!(
                    "detection design row {r} has {} surveys, expected {n_surveys}",
                    row.len()
                )));
            }
            for cell in row {
                if cell.len() != pd {
                    return Err(Error::InvalidInput(format!(
                        "detection design row {r} has a cell with {} columns, expected {pd}",
                        cell.len()
                    )));
                }
                d_flat.extend_from_slice(cell);
            }
        }
        if let Some(i) = a_flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite abundance covariate at row {}, column `{}`",
                i / pa,
                abundance_names[i % pa]
            )));
        }
        if let Some(i) = d_flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite detection covariate at row {}, column `{}`",
                i / (pd * n_surveys),
                detection_names[i % pd]
            )));
        }
        Ok(Self {
            abundance: a_flat,
            abundance_names,
            detection: d_flat,
            detection_names,
            n_rows,
            n_surveys,
        })
    }

    /// Builds designs from named covariate columns, prepending an explicit
    /// intercept column named `(Intercept)` to both designs.
    pub fn from_covariates(
        n_surveys: usize,
        abundance: &[(&str, Vec<f64>)],
        detection: &[(&str, DetectionCovariate)],
    ) -> Result<Self> {
        let n_rows = match (abundance.first(), detection.first()) {
            (Some((_, v)), _) => v.len(),
            (None, Some((_, DetectionCovariate::PerRow(v)))) => v.len(),
            (None, Some((_, DetectionCovariate::PerSurvey(v)))) => v.len(),
            (None, None) => {
                return Err(Error::InvalidInput(
                    "from_covariates needs at least one covariate to infer the row count; \
                     use intercept_only instead"
                        .into(),
                ))
            }
        };
        Self::assemble(n_rows, n_surveys, abundance, detection)
    }

    /// Intercept-only designs for both model components.
    pub fn intercept_only(n_rows: usize, n_surveys: usize) -> Result<Self> {
        Self::assemble(n_rows, n_surveys, &[], &[])
    }

    fn assemble(
        n_rows: usize,
        n_surveys: usize,
        abundance: &[(&str, Vec<f64>)],
        detection: &[(&str, DetectionCovariate)],
    ) -> Result<Self> {
        for (name, col) in abundance {
            if col.len() != n_rows {
                return Err(Error::InvalidInput(format!(
                    "abundance covariate `{name}` has {} values, expected {n_rows}",
                    col.len()
                )));
            }
        }
        for (name, col) in detection {
            let ok = match col {
                DetectionCovariate::PerRow(v) => v.len() == n_rows,
                DetectionCovariate::PerSurvey(v) => {
                    v.len() == n_rows && v.iter().all(|r| r.len() == n_surveys)
                }
            };
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "detection covariate `{name}` does not match {n_rows} rows x {n_surveys} surveys"
                )));
            }
        }
        let mut a_names = vec!["(Intercept)".to_string()];
        a_names.extend(abundance.iter().map(|(n, _)| n.to_string()));
        let mut d_names = vec!["(Intercept)".to_string()];
        d_names.extend(detection.iter().map(|(n, _)| n.to_string()));

        let a_rows = (0..n_rows)
            .map(|r| {
                std::iter::once(1.0)
                    .chain(abundance.iter().map(|(_, c)| c[r]))
                    .collect()
            })
            .collect();
        let d_rows = (0..n_rows)
            .map(|r| {
                (0..n_surveys)
                    .map(|j| {
                        std::iter::once(1.0)
                            .chain(detection.iter().map(|(_, c)| match c {
                                DetectionCovariate::PerRow(v) => v[r],
                                DetectionCovariate::PerSurvey(v) => v[r][j],
                            }))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self::new(a_rows, a_names, d_rows, d_names)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_surveys(&self) -> usize {
        self.n_surveys
    }

    pub fn n_abundance(&self) -> usize {
        self.abundance_names.len()
    }

    pub fn n_detection(&self) -> usize {
        self.detection_names.len()
    }

    pub fn abundance_names(&self) -> &[String] {
        &self.abundance_names
    }

    pub fn detection_names(&self) -> &[String] {
        &self.detection_names
    }

    pub fn abundance_row(&self, row: usize) -> &[f64] {
        let p = self.n_abundance();
        &self.abundance[row * p..(row + 1) * p]
    }

    pub fn detection_cell(&self, row: usize, survey: usize) -> &[f64] {
        let p = self.n_detection();
        let start = (row * self.n_surveys + survey) * p;
        &self.detection[start..start + p]
    }

    /// Checks that the designs line up with a table.
    pub fn check_table(&self, table: &ObservationTable) -> Result<()> {
        if self.n_rows != table.n_rows() || self.n_surveys != table.n_surveys() {
            return Err(Error::InvalidInput(format!(
                "designs are {} x {} but the table is {} x {}",
                self.n_rows,
                self.n_surveys,
                table.n_rows(),
                table.n_surveys()
            )));
        }
        Ok(())
    }

    /// Reorders rows; `order[i]` is the source row of new row `i`.
    pub fn permute_rows(&self, order: &[usize]) -> Result<Self> {
        let a = order.iter().map(|&r| self.abundance_row(r).to_vec()).collect();
        let d = order
            .iter()
            .map(|&r| {
                (0..self.n_surveys)
                    .map(|j| self.detection_cell(r, j).to_vec())
                    .collect()
            })
            .collect();
        Self::new(
            a,
            self.abundance_names.clone(),
            d,
            self.detection_names.clone(),
        )
    }
}

/// Latent abundance distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixtureFamily {
    /// `N ~ Pois(λ)`.
    PoissonBinomial,
    /// `N ~ NegBin(size θ, mean λ)`.
    NegBinomialBinomial,
}

impl MixtureFamily {
    pub fn has_dispersion(self) -> bool {
        matches!(self, MixtureFamily::NegBinomialBinomial)
    }
}

impl std::str::FromStr for MixtureFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poisson" | "p" | "nmix" => Ok(MixtureFamily::PoissonBinomial),
            "nb" | "negbin" | "negative-binomial" | "nmixnb" => {
                Ok(MixtureFamily::NegBinomialBinomial)
            }
            other => Err(Error::InvalidInput(format!(
                "unknown mixture family `{other}` (expected poisson or nb)"
            ))),
        }
    }
}

/// Sizes of the stacked parameter vector `(beta, alpha, log_theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterLayout {
    pub n_beta: usize,
    pub n_alpha: usize,
    pub family: MixtureFamily,
}

impl ParameterLayout {
    pub fn for_designs(designs: &DesignMatrices, family: MixtureFamily) -> Self {
        Self {
            n_beta: designs.n_abundance(),
            n_alpha: designs.n_detection(),
            family,
        }
    }

    pub fn len(&self) -> usize {
        self.n_beta + self.n_alpha + usize::from(self.family.has_dispersion())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of `log_theta` in the stacked vector, if present.
    pub fn theta_index(&self) -> Option<usize> {
        self.family
            .has_dispersion()
            .then_some(self.n_beta + self.n_alpha)
    }

    /// Display names in stacked order, e.g. `lambda:(Intercept)`.
    pub fn names(&self, designs: &DesignMatrices) -> Vec<String> {
        let mut names: Vec<String> = designs
            .abundance_names()
            .iter()
            .map(|n| format!("lambda:{n}"))
            .chain(designs.detection_names().iter().map(|n| format!("p:{n}")))
            .collect();
        if self.family.has_dispersion() {
            names.push("log_theta".into());
        }
        names
    }
}

/// Abundance coefficients, detection coefficients and optional log-dispersion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub log_theta: Option<f64>,
}

impl ParameterVector {
    pub fn new(beta: Vec<f64>, alpha: Vec<f64>, log_theta: Option<f64>) -> Result<Self> {
        let v = Self {
            beta,
            alpha,
            log_theta,
        };
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("parameter vector has non-finite entries".into()));
        }
        Ok(v)
    }

    pub fn layout(&self) -> ParameterLayout {
        ParameterLayout {
            n_beta: self.beta.len(),
            n_alpha: self.alpha.len(),
            family: if self.log_theta.is_some() {
                MixtureFamily::NegBinomialBinomial
            } else {
                MixtureFamily::PoissonBinomial
            },
        }
    }

    pub fn theta(&self) -> Option<f64> {
        self.log_theta.map(f64::exp)
    }

    fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.beta
            .iter()
            .chain(&self.alpha)
            .copied()
            .chain(self.log_theta)
    }

    pub fn to_stacked(&self) -> Vec<f64> {
        self.iter().collect()
    }

    pub fn from_stacked(x: &[f64], layout: ParameterLayout) -> Result<Self> {
        if x.len() != layout.len() {
            return Err(Error::InvalidInput(format!(
                "stacked vector has {} entries, layout expects {}",
                x.len(),
                layout.len()
            )));
        }
        let (beta, rest) = x.split_at(layout.n_beta);
        let (alpha, rest) = rest.split_at(layout.n_alpha);
        Self::new(beta.to_vec(), alpha.to_vec(), rest.first().copied())
    }

    /// Checks sizes against designs and family.
    pub fn check(&self, designs: &DesignMatrices, family: MixtureFamily) -> Result<()> {
        if self.beta.len() != designs.n_abundance() || self.alpha.len() != designs.n_detection() {
            return Err(Error::InvalidInput(format!(
                "parameters have {} beta / {} alpha, designs have {} / {} columns",
                self.beta.len(),
                self.alpha.len(),
                designs.n_abundance(),
                designs.n_detection()
            )));
        }
        if self.log_theta.is_some() != family.has_dispersion() {
            return Err(Error::InvalidInput(format!(
                "log_theta presence does not match family {family:?}"
            )));
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Expected abundance of a row, `exp(x_row · beta)`.
pub fn eval_lambda(params: &ParameterVector, design: &DesignMatrices, row: usize) -> Result<f64> {
    lambda_from_eta(dot(design.abundance_row(row), &params.beta), row)
}

pub(crate) fn lambda_from_eta(eta: f64, row: usize) -> Result<f64> {
    let lambda = eta.exp();
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::LambdaOutOfRange { row, eta });
    }
    Ok(lambda)
}

/// Detection probability of a row-survey cell, inverse-logit of
/// `x_{row,survey} · alpha`, clamped to `[P_FLOOR, 1 - P_FLOOR]`.
pub fn eval_p(params: &ParameterVector, design: &DesignMatrices, row: usize, survey: usize) -> f64 {
    logistic(dot(design.detection_cell(row, survey), &params.alpha))
}

pub(crate) fn logistic(eta: f64) -> f64 {
    let p = if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    };
    p.clamp(P_FLOOR, 1.0 - P_FLOOR)
}
