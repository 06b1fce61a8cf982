//! CSV dataset files.
//!
//! A dataset has a header row and one row per site (or site-year):
//!
//! ```text
//! site,year,y1,y2,y3,length,elev,ivel_1,ivel_2,ivel_3
//! 1,1,0,0,,-0.47,-1.17,-0.51,-0.93,
//! ```
//!
//! `site` and `year` are positive integers, `y1..yJ` are counts, and every
//! further column is a covariate. Covariates named `name_1..name_J` form a
//! single per-survey covariate `name`; all others are per-row. Empty cells and
//! `NA` mark missing values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DesignMatrices, DetectionCovariate, ObservationTable, RowLabel};
use crate::simulator::SimOutput;

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    PerRow(Vec<Option<f64>>),
    /// `[row][survey]`.
    PerSurvey(Vec<Vec<Option<f64>>>),
}

impl Column {
    pub fn is_per_survey(&self) -> bool {
        matches!(self, Column::PerSurvey(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub labels: Vec<RowLabel>,
    /// `[row][survey]`.
    pub counts: Vec<Vec<Option<u32>>>,
    /// Covariates in file order.
    pub columns: Vec<(String, Column)>,
}

/// Tables and designs selected from a [`DatasetFile`].
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltDataset {
    pub table: ObservationTable,
    pub designs: DesignMatrices,
    /// Rows left out because no count survived missing-value handling.
    pub dropped: Vec<RowLabel>,
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell.eq_ignore_ascii_case("na")
}

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn count_column(name: &str) -> Option<usize> {
    let digits = name.strip_prefix('y')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn split_survey_suffix(name: &str) -> Option<(&str, usize)> {
    let (base, index) = name.rsplit_once('_')?;
    if base.is_empty() || index.is_empty() || !index.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((base, index.parse().ok()?))
}

enum Slot {
    Row(usize),
    Survey(usize, usize),
}

/// Formats with 17 significant digits, dropping trailing zeros.
pub fn format_float(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent in scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{exp}")
    }
}

fn format_cell(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

impl DatasetFile {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_surveys(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(fs::File::open(path)?)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = csv.headers()?.clone();
        let names: Vec<&str> = header.iter().collect();
        if names.len() < 3 || names[0] != "site" || names[1] != "year" {
            return Err(parse_error(1, "header must start with site,year followed by y1..yJ"));
        }
        let mut n_surveys = 0;
        while let Some(j) = names.get(2 + n_surveys).and_then(|n| count_column(n)) {
            if j != n_surveys + 1 {
                return Err(parse_error(1, format!("expected y{}, found {}", n_surveys + 1, names[2 + n_surveys])));
            }
            n_surveys += 1;
        }
        if n_surveys == 0 {
            return Err(parse_error(1, "no count columns y1..yJ"));
        }

        let mut columns: Vec<(String, Column)> = Vec::new();
        let mut slots = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for &name in &names[2 + n_surveys..] {
            if !seen.insert(name) {
                return Err(parse_error(1, format!("duplicate column {name}")));
            }
            if count_column(name).is_some() {
                return Err(parse_error(1, format!("count column {name} must directly follow y1..y{n_surveys}")));
            }
        }
        for &name in &names[2 + n_surveys..] {
            let survey_group = split_survey_suffix(name).filter(|&(base, j)| {
                (1..=n_surveys).contains(&j) && (1..=n_surveys).all(|k| seen.contains(format!("{base}_{k}").as_str()))
            });
            match survey_group {
                Some((base, j)) => {
                    let index = match columns.iter().position(|(n, _)| n == base) {
                        Some(i) => i,
                        None => {
                            columns.push((base.to_string(), Column::PerSurvey(Vec::new())));
                            columns.len() - 1
                        }
                    };
                    slots.push(Slot::Survey(index, j - 1));
                }
                None => {
                    if columns.iter().any(|(n, _)| n == name) {
                        return Err(parse_error(1, format!("column {name} clashes with a per-survey group")));
                    }
                    columns.push((name.to_string(), Column::PerRow(Vec::new())));
                    slots.push(Slot::Row(columns.len() - 1));
                }
            }
        }

        let mut labels = Vec::new();
        let mut counts = Vec::new();
        for record in csv.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_error(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let field = |i: usize| record.get(i).unwrap_or("");
            let label_part = |i: usize, what: &str| -> Result<u32> {
                field(i)
                    .parse::<u32>()
                    .map_err(|_| parse_error(line, format!("{what} must be a non-negative integer, got {:?}", field(i))))
            };
            labels.push(RowLabel {
                site: label_part(0, "site")?,
                year: label_part(1, "year")?,
            });
            let row: Vec<Option<u32>> = (0..n_surveys)
                .map(|j| {
                    let cell = field(2 + j);
                    if is_missing(cell) {
                        Ok(None)
                    } else {
                        cell.parse::<u32>()
                            .map(Some)
                            .map_err(|_| parse_error(line, format!("y{} must be a non-negative integer, got {cell:?}", j + 1)))
                    }
                })
                .collect::<Result<_>>()?;
            counts.push(row);

            for (c, slot) in slots.iter().enumerate() {
                let cell = field(2 + n_surveys + c);
                let value = if is_missing(cell) {
                    None
                } else {
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| parse_error(line, format!("column {} is not numeric: {cell:?}", names[2 + n_surveys + c])))?;
                    if !v.is_finite() {
                        return Err(parse_error(line, format!("column {} is not finite", names[2 + n_surveys + c])));
                    }
                    Some(v)
                };
                match *slot {
                    Slot::Row(i) => {
                        if let Column::PerRow(v) = &mut columns[i].1 {
                            v.push(value);
                        }
                    }
                    Slot::Survey(i, j) => {
                        if let Column::PerSurvey(v) = &mut columns[i].1 {
                            if j == 0 {
                                v.push(vec![None; n_surveys]);
                            }
                            v.last_mut().expect("first survey column precedes the rest")[j] = value;
                        }
                    }
                }
            }
        }
        if labels.is_empty() {
            return Err(parse_error(1, "dataset has no rows"));
        }
        Ok(Self {
            labels,
            counts,
            columns,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = fs::File::create(path)?;
        self.to_writer(&mut file)?;
        file.flush()?;
        Ok(())
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let j = self.n_surveys();
        let mut csv = csv::Writer::from_writer(writer);
        let mut header = vec!["site".to_string(), "year".to_string()];
        header.extend((1..=j).map(|k| format!("y{k}")));
        for (name, col) in &self.columns {
            match col {
                Column::PerRow(_) => header.push(name.clone()),
                Column::PerSurvey(_) => header.extend((1..=j).map(|k| format!("{name}_{k}"))),
            }
        }
        csv.write_record(&header)?;
        for (r, label) in self.labels.iter().enumerate() {
            let mut rec = vec![label.site.to_string(), label.year.to_string()];
            rec.extend(self.counts[r].iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
            for (_, col) in &self.columns {
                match col {
                    Column::PerRow(v) => rec.push(format_cell(v[r])),
                    Column::PerSurvey(v) => rec.extend(v[r].iter().map(|&x| format_cell(x))),
                }
            }
            csv.write_record(&rec)?;
        }
        csv.flush()?;
        Ok(())
    }

    fn push_column(&mut self, name: &str, column: Column) -> Result<()> {
        if self.column(name).is_some() {
            return Err(Error::InvalidInput(format!("column {name} already exists")));
        }
        self.columns.push((name.to_string(), column));
        Ok(())
    }

    pub fn push_per_row(&mut self, name: &str, values: Vec<Option<f64>>) -> Result<()> {
        if values.len() != self.n_rows() {
            return Err(Error::InvalidInput(format!("column {name} has {} values for {} rows", values.len(), self.n_rows())));
        }
        self.push_column(name, Column::PerRow(values))
    }

    pub fn push_per_survey(&mut self, name: &str, values: Vec<Vec<Option<f64>>>) -> Result<()> {
        if values.len() != self.n_rows() || values.iter().any(|v| v.len() != self.n_surveys()) {
            return Err(Error::InvalidInput(format!("column {name} must be {} × {}", self.n_rows(), self.n_surveys())));
        }
        self.push_column(name, Column::PerSurvey(values))
    }

    fn require(&self, name: &str) -> Result<&Column> {
        self.column(name)
            .ok_or_else(|| Error::InvalidInput(format!("no column named {name}")))
    }

    /// Adds the per-row mean of a per-survey covariate, ignoring missing
    /// surveys. Rows with no observed survey get the mean of the other rows.
    pub fn add_site_mean(&mut self, name: &str, new_name: &str) -> Result<()> {
        let Column::PerSurvey(values) = self.require(name)? else {
            return Err(Error::InvalidInput(format!("{name} is not a per-survey column")));
        };
        let means: Vec<Option<f64>> = values
            .iter()
            .map(|row| {
                let present: Vec<f64> = row.iter().flatten().copied().collect();
                (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
            })
            .collect();
        let known: Vec<f64> = means.iter().flatten().copied().collect();
        if known.is_empty() {
            return Err(Error::InvalidInput(format!("{name} has no observed values")));
        }
        let overall = known.iter().sum::<f64>() / known.len() as f64;
        let filled = means.into_iter().map(|m| Some(m.unwrap_or(overall))).collect();
        self.push_per_row(new_name, filled)
    }

    /// Adds the elementwise square of a covariate with the same layout.
    pub fn add_square(&mut self, name: &str, new_name: &str) -> Result<()> {
        let sq = |v: &Option<f64>| v.map(|x| x * x);
        let column = match self.require(name)? {
            Column::PerRow(v) => Column::PerRow(v.iter().map(sq).collect()),
            Column::PerSurvey(v) => Column::PerSurvey(v.iter().map(|r| r.iter().map(sq).collect()).collect()),
        };
        self.push_column(new_name, column)
    }

    /// Builds the observation table and designs with intercepts plus the
    /// listed covariates.
    ///
    /// Missing values never enter the likelihood: a missing per-survey
    /// detection value hides that survey's count, and a missing per-row value
    /// hides the whole row. Rows left without any count are dropped and
    /// reported in [`BuiltDataset::dropped`].
    pub fn build(&self, abundance: &[&str], detection: &[&str]) -> Result<BuiltDataset> {
        let n_rows = self.n_rows();
        let n_surveys = self.n_surveys();
        let mut counts = self.counts.clone();

        for &name in abundance {
            match self.require(name)? {
                Column::PerRow(v) => {
                    for (r, value) in v.iter().enumerate() {
                        if value.is_none() {
                            counts[r].iter_mut().for_each(|c| *c = None);
                        }
                    }
                }
                Column::PerSurvey(_) => {
                    return Err(Error::InvalidInput(format!(
                        "abundance covariate {name} varies by survey; use a per-row column"
                    )))
                }
            }
        }
        for &name in detection {
            match self.require(name)? {
                Column::PerRow(v) => {
                    for (r, value) in v.iter().enumerate() {
                        if value.is_none() {
                            counts[r].iter_mut().for_each(|c| *c = None);
                        }
                    }
                }
                Column::PerSurvey(v) => {
                    for r in 0..n_rows {
                        for j in 0..n_surveys {
                            if v[r][j].is_none() {
                                counts[r][j] = None;
                            }
                        }
                    }
                }
            }
        }

        let kept: Vec<usize> = (0..n_rows).filter(|&r| counts[r].iter().any(Option::is_some)).collect();
        let dropped = (0..n_rows)
            .filter(|r| !kept.contains(r))
            .map(|r| self.labels[r])
            .collect();
        if kept.is_empty() {
            return Err(Error::InvalidInput("no rows with observed counts".into()));
        }

        let table = ObservationTable::new(
            kept.iter().map(|&r| counts[r].clone()).collect(),
            kept.iter().map(|&r| self.labels[r]).collect(),
        )?;
        // Values hidden by missing counts never enter the likelihood; zero keeps
        // the designs finite.
        let fill = |v: Option<f64>| v.unwrap_or(0.0);
        let abundance_cols: Vec<(&str, Vec<f64>)> = abundance
            .iter()
            .map(|&name| match self.require(name)? {
                Column::PerRow(v) => Ok((name, kept.iter().map(|&r| fill(v[r])).collect())),
                Column::PerSurvey(_) => unreachable!("rejected above"),
            })
            .collect::<Result<_>>()?;
        let detection_cols: Vec<(&str, DetectionCovariate)> = detection
            .iter()
            .map(|&name| {
                Ok((
                    name,
                    match self.require(name)? {
                        Column::PerRow(v) => DetectionCovariate::PerRow(kept.iter().map(|&r| fill(v[r])).collect()),
                        Column::PerSurvey(v) => DetectionCovariate::PerSurvey(
                            kept.iter().map(|&r| v[r].iter().map(|&x| fill(x)).collect()).collect(),
                        ),
                    },
                ))
            })
            .collect::<Result<_>>()?;
        let designs = DesignMatrices::from_covariates(n_surveys, &abundance_cols, &detection_cols)?;
        Ok(BuiltDataset {
            table,
            designs,
            dropped,
        })
    }

    fn from_sim_table(sim: &SimOutput, table: &ObservationTable) -> Self {
        let n = sim.n_rows();
        let rows: Vec<(usize, usize)> = (0..n).map(|r| sim.site_year(r)).collect();
        let c = &sim.covariates;
        let per_row = |f: &dyn Fn(usize, usize) -> f64| rows.iter().map(|&(i, k)| Some(f(i, k))).collect();
        Self {
            labels: table.labels().to_vec(),
            counts: (0..n).map(|r| table.row(r).to_vec()).collect(),
            columns: vec![
                ("x1".into(), Column::PerRow(per_row(&|i, _| c.x1[i]))),
                ("x2".into(), Column::PerRow(per_row(&|i, _| c.x2[i]))),
                ("x3".into(), Column::PerRow(per_row(&|_, k| c.x3[k]))),
                ("x1.p".into(), Column::PerRow(per_row(&|i, _| c.x1[i]))),
                ("x4.m".into(), Column::PerRow(per_row(&|i, k| c.x4_mean[i][k]))),
            ],
        }
    }

    /// Counts `Y.m` with covariates `x1, x2, x3, x1.p, x4.m`.
    pub fn from_sim_avg(sim: &SimOutput) -> Self {
        Self::from_sim_table(sim, &sim.table_avg)
    }

    /// Counts `Y` with the averaged covariates plus survey-level `x4`.
    pub fn from_sim_full(sim: &SimOutput) -> Self {
        let mut file = Self::from_sim_table(sim, &sim.table_full);
        let x4 = (0..sim.n_rows())
            .map(|r| {
                let (i, k) = sim.site_year(r);
                sim.covariates.x4[i][k].iter().map(|&v| Some(v)).collect()
            })
            .collect();
        file.columns.push(("x4".into(), Column::PerSurvey(x4)));
        file
    }
}

/// Writes per-row true `lambda` and `N` of a simulation.
pub fn write_truth<W: Write>(sim: &SimOutput, writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["site", "year", "lambda", "N"])?;
    let lambda = sim.true_lambda_rows();
    let n = sim.true_n_rows();
    for (r, label) in sim.table_avg.labels().iter().enumerate() {
        csv.write_record([
            label.site.to_string(),
            label.year.to_string(),
            format_float(lambda[r]),
            n[r].to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}
