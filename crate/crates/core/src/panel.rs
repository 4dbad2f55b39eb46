//! Balanced long-format panel data: the data model shared by every estimator.
//!
//! A [`PanelDataset`] holds one [`UnitSeries`] per cross-sectional unit. Each
//! unit carries its treatment cohort (the first period in which it is
//! treated, or [`Cohort::Never`]), a time-invariant sampling weight, an
//! outcome per period and a `T x K` block of covariates.
//!
//! Event time is measured by index distance on the ordered period list, so
//! calendar labels with gaps (e.g. 2009, 2011, 2013) never shift event time.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while loading, validating or normalizing a panel.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PanelError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric cell at row {row}, column `{col}`: `{value}`")]
    NonNumericCell { row: usize, col: String, value: String },
    #[error("non-finite value at row {row}, column `{col}`")]
    NonFiniteCell { row: usize, col: String },
    #[error("unbalanced panel: unit `{unit}` is missing periods {missing:?}")]
    UnbalancedPanel { unit: String, missing: Vec<i64> },
    #[error("duplicate observation for unit `{unit}` in period {period}")]
    DuplicateObservation { unit: String, period: i64 },
    #[error("unit `{unit}`: column `{col}` must be constant over time")]
    TimeVaryingAttribute { unit: String, col: String },
    #[error("unit `{unit}`: negative sampling weight {weight}")]
    NegativeWeight { unit: String, weight: f64 },
    #[error("unit `{unit}`: first-treatment period {group} is not an observed period")]
    InvalidGroup { unit: String, group: i64 },
    #[error("cohort {0} has zero total sampling weight")]
    ZeroGroupWeight(String),
    #[error("panel needs at least 2 distinct periods, found {0}")]
    TooFewPeriods(usize),
    #[error("panel has no units")]
    Empty,
    #[error("no comparison possible after normalization: {0}")]
    NoComparisonPossible(String),
    #[error("csv error: {0}")]
    Csv(String),
    #[error("invalid panel: {0}")]
    Invalid(String),
}

impl From<csv::Error> for PanelError {
    fn from(e: csv::Error) -> Self {
        PanelError::Csv(e.to_string())
    }
}

/// Treatment cohort of a unit: the first treated period, or never treated.
///
/// `Treated` sorts before `Never`, so ordered collections list cohorts by
/// adoption date with the never-treated group last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cohort {
    Treated(i64),
    Never,
}

impl Cohort {
    pub fn is_never(self) -> bool {
        matches!(self, Cohort::Never)
    }

    pub fn period(self) -> Option<i64> {
        match self {
            Cohort::Treated(g) => Some(g),
            Cohort::Never => None,
        }
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cohort::Treated(g) => write!(f, "{g}"),
            Cohort::Never => write!(f, "never"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Uniform,
    Supplied,
}

/// One unit's full time series.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSeries {
    pub unit_id: String,
    pub group: Cohort,
    pub weight: f64,
    /// Cluster label; `None` means the unit is its own cluster.
    pub cluster: Option<String>,
    pub outcomes: Vec<f64>,
    /// Row-major `T x K` covariate block.
    pub covariates: Vec<f64>,
}

impl UnitSeries {
    /// Covariate row for period index `t`.
    pub fn covariates_at(&self, t: usize, k: usize) -> &[f64] {
        &self.covariates[t * k..(t + 1) * k]
    }
}

/// A validated, balanced panel. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    units: Vec<UnitSeries>,
    periods: Vec<i64>,
    covariate_names: Vec<String>,
    weight_kind: WeightKind,
}

impl PanelDataset {
    /// Builds a dataset from already-assembled unit series and validates it.
    pub fn new(
        units: Vec<UnitSeries>,
        periods: Vec<i64>,
        covariate_names: Vec<String>,
        weight_kind: WeightKind,
    ) -> Result<Self, PanelError> {
        let data = PanelDataset { units, periods, covariate_names, weight_kind };
        data.validate()?;
        Ok(data)
    }

    fn validate(&self) -> Result<(), PanelError> {
        if self.units.is_empty() {
            return Err(PanelError::Empty);
        }
        if self.periods.len() < 2 {
            return Err(PanelError::TooFewPeriods(self.periods.len()));
        }
        if self.periods.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PanelError::Invalid("periods must be strictly increasing".into()));
        }
        let t = self.periods.len();
        let k = self.covariate_names.len();
        let mut seen = BTreeSet::new();
        for u in &self.units {
            if !seen.insert(u.unit_id.as_str()) {
                return Err(PanelError::Invalid(format!("duplicate unit id `{}`", u.unit_id)));
            }
            if u.outcomes.len() != t {
                return Err(PanelError::UnbalancedPanel {
                    unit: u.unit_id.clone(),
                    missing: self.periods[u.outcomes.len().min(t)..].to_vec(),
                });
            }
            if u.covariates.len() != t * k {
                return Err(PanelError::Invalid(format!(
                    "unit `{}` has {} covariate values, expected {}",
                    u.unit_id,
                    u.covariates.len(),
                    t * k
                )));
            }
            if !(u.weight >= 0.0) || !u.weight.is_finite() {
                return Err(PanelError::NegativeWeight { unit: u.unit_id.clone(), weight: u.weight });
            }
            if u.outcomes.iter().chain(&u.covariates).any(|v| !v.is_finite()) {
                return Err(PanelError::Invalid(format!("unit `{}` has non-finite values", u.unit_id)));
            }
            if let Cohort::Treated(g) = u.group {
                if self.period_index(g).is_none() {
                    return Err(PanelError::InvalidGroup { unit: u.unit_id.clone(), group: g });
                }
            }
        }
        let mut totals: BTreeMap<Cohort, f64> = BTreeMap::new();
        for u in &self.units {
            *totals.entry(u.group).or_default() += u.weight;
        }
        if let Some((c, _)) = totals.iter().find(|(_, w)| **w <= 0.0) {
            return Err(PanelError::ZeroGroupWeight(c.to_string()));
        }
        Ok(())
    }

    pub fn units(&self) -> &[UnitSeries] {
        &self.units
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn periods(&self) -> &[i64] {
        &self.periods
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn weight_kind(&self) -> WeightKind {
        self.weight_kind
    }

    pub fn period_index(&self, period: i64) -> Option<usize> {
        self.periods.binary_search(&period).ok()
    }

    /// Period index of a cohort's first treated period (`None` for never-treated).
    pub fn cohort_index(&self, cohort: Cohort) -> Option<usize> {
        cohort.period().and_then(|g| self.period_index(g))
    }

    /// Distinct cohorts present, treated cohorts first in adoption order.
    pub fn cohorts(&self) -> Vec<Cohort> {
        self.units.iter().map(|u| u.group).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn treated_cohorts(&self) -> Vec<i64> {
        self.cohorts().into_iter().filter_map(Cohort::period).collect()
    }

    pub fn has_never_treated(&self) -> bool {
        self.units.iter().any(|u| u.group.is_never())
    }

    /// Baseline (first-period) covariate row of unit `i`.
    pub fn baseline_covariates(&self, i: usize) -> &[f64] {
        self.units[i].covariates_at(0, self.n_covariates())
    }

    /// Dense cluster codes per unit: the cluster column when supplied, else one
    /// cluster per unit.
    pub fn cluster_codes(&self) -> Vec<usize> {
        let mut codes: HashMap<&str, usize> = HashMap::new();
        self.units
            .iter()
            .map(|u| {
                let key = u.cluster.as_deref().unwrap_or(u.unit_id.as_str());
                let next = codes.len();
                *codes.entry(key).or_insert(next)
            })
            .collect()
    }

    /// Returns a copy with every sampling weight multiplied by `c`.
    pub fn with_scaled_weights(&self, c: f64) -> Result<Self, PanelError> {
        let mut out = self.clone();
        for u in &mut out.units {
            u.weight *= c;
        }
        out.validate()?;
        Ok(out)
    }

    /// Returns a copy keeping only the listed period indices (in order).
    pub fn select_periods(&self, keep: &[usize]) -> Result<Self, PanelError> {
        let k = self.n_covariates();
        let periods: Vec<i64> = keep.iter().map(|&t| self.periods[t]).collect();
        let units = self
            .units
            .iter()
            .map(|u| UnitSeries {
                outcomes: keep.iter().map(|&t| u.outcomes[t]).collect(),
                covariates: keep.iter().flat_map(|&t| u.covariates_at(t, k).to_vec()).collect(),
                ..u.clone()
            })
            .collect();
        PanelDataset::new(units, periods, self.covariate_names.clone(), self.weight_kind)
    }

    /// Returns a copy keeping only units for which `keep` returns true.
    pub fn filter_units(&self, mut keep: impl FnMut(&UnitSeries) -> bool) -> Result<Self, PanelError> {
        let units = self.units.iter().filter(|u| keep(u)).cloned().collect();
        PanelDataset::new(units, self.periods.clone(), self.covariate_names.clone(), self.weight_kind)
    }
}

/// Column mapping for the long-format CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    pub unit: String,
    pub period: String,
    pub outcome: String,
    pub first_treat: String,
    pub weight: Option<String>,
    pub cluster: Option<String>,
    /// Covariate columns; `None` takes every column not mapped elsewhere.
    pub covariates: Option<Vec<String>>,
    /// First-treatment value meaning "never treated". Empty cells always do.
    pub never_value: i64,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            unit: "unit".into(),
            period: "period".into(),
            outcome: "outcome".into(),
            first_treat: "first_treat".into(),
            weight: None,
            cluster: None,
            covariates: None,
            never_value: 0,
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, PanelError> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| PanelError::MissingColumn(name.to_string()))
}

fn parse_f64(record: &csv::StringRecord, idx: usize, row: usize, col: &str) -> Result<f64, PanelError> {
    let raw = record.get(idx).unwrap_or("").trim();
    let v: f64 =
        raw.parse().map_err(|_| PanelError::NonNumericCell { row, col: col.to_string(), value: raw.to_string() })?;
    if !v.is_finite() {
        return Err(PanelError::NonFiniteCell { row, col: col.to_string() });
    }
    Ok(v)
}

fn parse_i64(record: &csv::StringRecord, idx: usize, row: usize, col: &str) -> Result<i64, PanelError> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse::<i64>()
        .or_else(|_| match raw.parse::<f64>() {
            Ok(v) if v.fract() == 0.0 && v.abs() < 9.0e15 => Ok(v as i64),
            _ => Err(()),
        })
        .map_err(|_| PanelError::NonNumericCell { row, col: col.to_string(), value: raw.to_string() })
}

struct RawUnit {
    group: Option<i64>,
    weight: f64,
    cluster: Option<String>,
    rows: BTreeMap<i64, (f64, Vec<f64>)>,
}

/// Reads a long-format CSV (`unit,period,outcome,first_treat[,weight][,covariates..]`).
///
/// Units keep their order of first appearance. A first-treatment value after
/// the last observed period means "not treated within the sample" and is
/// recoded to [`Cohort::Never`].
pub fn load_panel<R: Read>(source: R, schema: &Schema) -> Result<PanelDataset, PanelError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let unit_col = column(&headers, &schema.unit)?;
    let period_col = column(&headers, &schema.period)?;
    let outcome_col = column(&headers, &schema.outcome)?;
    let group_col = column(&headers, &schema.first_treat)?;
    let weight_col = schema.weight.as_deref().map(|w| column(&headers, w)).transpose()?;
    let cluster_col = schema.cluster.as_deref().map(|c| column(&headers, c)).transpose()?;
    let covariate_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => {
            let mapped: Vec<usize> =
                [Some(unit_col), Some(period_col), Some(outcome_col), Some(group_col), weight_col, cluster_col]
                    .into_iter()
                    .flatten()
                    .collect();
            headers.iter().enumerate().filter(|(i, _)| !mapped.contains(i)).map(|(_, h)| h.trim().to_string()).collect()
        }
    };
    let cov_cols = covariate_names.iter().map(|c| column(&headers, c)).collect::<Result<Vec<_>, _>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut raw: HashMap<String, RawUnit> = HashMap::new();
    let mut all_periods = BTreeSet::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 2; // 1-based, header is row 1
        let unit = record.get(unit_col).unwrap_or("").trim().to_string();
        let period = parse_i64(&record, period_col, row, &schema.period)?;
        let outcome = parse_f64(&record, outcome_col, row, &schema.outcome)?;
        let group_raw = record.get(group_col).unwrap_or("").trim();
        let group = if group_raw.is_empty() {
            None
        } else {
            let g = parse_i64(&record, group_col, row, &schema.first_treat)?;
            (g != schema.never_value).then_some(g)
        };
        let weight = match weight_col {
            Some(c) => parse_f64(&record, c, row, schema.weight.as_deref().unwrap_or_default())?,
            None => 1.0,
        };
        let cluster = cluster_col.map(|c| record.get(c).unwrap_or("").trim().to_string());
        let covs = cov_cols
            .iter()
            .zip(&covariate_names)
            .map(|(&c, name)| parse_f64(&record, c, row, name))
            .collect::<Result<Vec<_>, _>>()?;
        all_periods.insert(period);

        let entry = raw.entry(unit.clone()).or_insert_with(|| {
            order.push(unit.clone());
            RawUnit { group, weight, cluster: cluster.clone(), rows: BTreeMap::new() }
        });
        if entry.group != group {
            return Err(PanelError::TimeVaryingAttribute { unit, col: schema.first_treat.clone() });
        }
        if entry.weight != weight {
            return Err(PanelError::TimeVaryingAttribute { unit, col: schema.weight.clone().unwrap_or_default() });
        }
        if entry.cluster != cluster {
            return Err(PanelError::TimeVaryingAttribute { unit, col: schema.cluster.clone().unwrap_or_default() });
        }
        if entry.rows.insert(period, (outcome, covs)).is_some() {
            return Err(PanelError::DuplicateObservation { unit, period });
        }
    }
    if order.is_empty() {
        return Err(PanelError::Empty);
    }
    let periods: Vec<i64> = all_periods.into_iter().collect();
    if periods.len() < 2 {
        return Err(PanelError::TooFewPeriods(periods.len()));
    }
    let last = *periods.last().expect("nonempty");

    let mut units = Vec::with_capacity(order.len());
    for id in order {
        let ru = raw.remove(&id).expect("unit recorded");
        if ru.rows.len() != periods.len() {
            let missing = periods.iter().copied().filter(|p| !ru.rows.contains_key(p)).collect();
            return Err(PanelError::UnbalancedPanel { unit: id, missing });
        }
        let group = match ru.group {
            None => Cohort::Never,
            Some(g) if g > last => Cohort::Never,
            Some(g) => Cohort::Treated(g),
        };
        let mut outcomes = Vec::with_capacity(periods.len());
        let mut covariates = Vec::with_capacity(periods.len() * covariate_names.len());
        for (_, (y, x)) in ru.rows {
            outcomes.push(y);
            covariates.extend(x);
        }
        units.push(UnitSeries { unit_id: id, group, weight: ru.weight, cluster: ru.cluster, outcomes, covariates });
    }
    let weight_kind = if weight_col.is_some() { WeightKind::Supplied } else { WeightKind::Uniform };
    PanelDataset::new(units, periods, covariate_names, weight_kind)
}

/// Writes the dataset in canonical long format. Floats use the shortest
/// representation that round-trips exactly.
pub fn write_panel<W: Write>(data: &PanelDataset, sink: W, never_value: i64) -> Result<(), PanelError> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["unit".to_string(), "period".into(), "outcome".into(), "first_treat".into()];
    let weighted = data.weight_kind == WeightKind::Supplied;
    if weighted {
        header.push("weight".into());
    }
    let clustered = data.units.iter().any(|u| u.cluster.is_some());
    if clustered {
        header.push("cluster".into());
    }
    header.extend(data.covariate_names.iter().cloned());
    w.write_record(&header)?;
    let k = data.n_covariates();
    for u in &data.units {
        let g = match u.group {
            Cohort::Treated(g) => g,
            Cohort::Never => never_value,
        };
        for (t, &period) in data.periods.iter().enumerate() {
            let mut rec = vec![u.unit_id.clone(), period.to_string(), u.outcomes[t].to_string(), g.to_string()];
            if weighted {
                rec.push(u.weight.to_string());
            }
            if clustered {
                rec.push(u.cluster.clone().unwrap_or_default());
            }
            rec.extend(u.covariates_at(t, k).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| PanelError::Csv(e.to_string()))?;
    Ok(())
}

/// Why a unit was removed during normalization.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroppedUnit {
    pub unit_id: String,
    pub reason: String,
}

/// Record of every change made by [`normalize_groups`].
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct BalanceReport {
    pub original_units: usize,
    pub n_units: BTreeMap<String, usize>,
    pub n_periods: usize,
    pub dropped_units: Vec<DroppedUnit>,
    pub dropped_periods: Vec<i64>,
    /// Cohort first-treatment periods recoded to never-treated.
    pub recoded_groups: Vec<i64>,
}

impl BalanceReport {
    pub fn is_empty(&self) -> bool {
        self.dropped_units.is_empty() && self.dropped_periods.is_empty() && self.recoded_groups.is_empty()
    }
}

/// Puts a panel into the shape the staggered estimators expect.
///
/// Without a never-treated group, every period from the last adoption date on
/// is removed and the last-treated cohort becomes the never-treated cohort.
/// Units treated in the first available period have no pre-period and are
/// dropped.
pub fn normalize_groups(data: &PanelDataset) -> Result<(PanelDataset, BalanceReport), PanelError> {
    let mut report = BalanceReport { original_units: data.n_units(), ..Default::default() };
    let mut periods = data.periods().to_vec();
    let mut units: Vec<UnitSeries> = data.units().to_vec();
    let k = data.n_covariates();

    if !data.has_never_treated() {
        let last_g = data
            .treated_cohorts()
            .into_iter()
            .max()
            .ok_or_else(|| PanelError::NoComparisonPossible("no treated or never-treated units".into()))?;
        let keep: Vec<usize> = (0..periods.len()).filter(|&t| periods[t] < last_g).collect();
        report.dropped_periods = periods.iter().copied().filter(|&p| p >= last_g).collect();
        report.recoded_groups.push(last_g);
        for u in &mut units {
            u.outcomes = keep.iter().map(|&t| u.outcomes[t]).collect();
            u.covariates = keep.iter().flat_map(|&t| u.covariates_at(t, k).to_vec()).collect();
            if u.group == Cohort::Treated(last_g) {
                u.group = Cohort::Never;
            }
        }
        periods = keep.iter().map(|&t| periods[t]).collect();
    }
    if periods.len() < 2 {
        return Err(PanelError::NoComparisonPossible(format!(
            "{} period(s) remain after removing post-adoption periods",
            periods.len()
        )));
    }
    let first = periods[0];
    units.retain(|u| {
        if u.group == Cohort::Treated(first) {
            report.dropped_units.push(DroppedUnit {
                unit_id: u.unit_id.clone(),
                reason: format!("treated in the first available period ({first})"),
            });
            false
        } else {
            true
        }
    });
    if !units.iter().any(|u| u.group.is_never()) {
        return Err(PanelError::NoComparisonPossible("no never-treated units remain".into()));
    }
    let out = PanelDataset::new(units, periods, data.covariate_names().to_vec(), data.weight_kind())?;
    for u in out.units() {
        *report.n_units.entry(u.group.to_string()).or_default() += 1;
    }
    report.n_periods = out.n_periods();
    Ok((out, report))
}
