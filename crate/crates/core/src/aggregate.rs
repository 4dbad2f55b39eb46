//! Event-study aggregation of group-time effects.
//!
//! Cohort weights are plug-in shares of the ω-weighted cohort sizes; their
//! own sampling noise is not propagated into the influence functions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::did2x2::EffectEstimate;
use crate::inference::cluster_se;
use crate::staggered::GroupTimeTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("group-time table has no estimated cells")]
    EmptyTable,
    #[error("no cohort is observed over the whole window [{0}, {1}]")]
    NoBalancedCohort(i64, i64),
    #[error("invalid window [{0}, {1}]")]
    InvalidWindow(i64, i64),
    #[error("curve has no post-treatment event times")]
    NoPostPeriods,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortWeight {
    pub group: i64,
    pub weight: f64,
}

/// Weights used at one event time, with the total cohort mass they were
/// normalized by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTimeWeights {
    pub event_time: i64,
    pub cohorts: Vec<CohortWeight>,
    pub normalizer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AggregationWeights {
    pub by_event_time: Vec<EventTimeWeights>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn around(center: f64, half_width: f64) -> Self {
        Interval { lower: center - half_width, upper: center + half_width }
    }

    pub fn contains(&self, other: &Interval) -> bool {
        self.lower <= other.lower && other.upper <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStudyPoint {
    pub event_time: i64,
    pub estimate: f64,
    pub se: f64,
    pub pointwise: Interval,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simultaneous: Option<Interval>,
    #[serde(skip)]
    pub influence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStudyCurve {
    pub points: Vec<EventStudyPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall: Option<EffectEstimate>,
    pub weights: AggregationWeights,
    pub window: (i64, i64),
    pub balanced: bool,
    /// Confidence level of the intervals.
    pub level: f64,
    pub n_units: usize,
    #[serde(skip)]
    pub clusters: Vec<usize>,
}

impl EventStudyCurve {
    pub fn point(&self, event_time: i64) -> Option<&EventStudyPoint> {
        self.points.iter().find(|p| p.event_time == event_time)
    }
}

pub const DEFAULT_LEVEL: f64 = 0.95;

/// Two-sided standard normal critical value for `level`.
pub fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

fn cohort_masses(table: &GroupTimeTable) -> BTreeMap<i64, f64> {
    table.cohort_sizes.iter().map(|c| (c.group, c.total_weight)).collect()
}

fn build_curve(
    table: &GroupTimeTable,
    event_times: &[i64],
    cohorts_for: impl Fn(i64) -> Vec<i64>,
    window: (i64, i64),
    balanced: bool,
) -> EventStudyCurve {
    let mass = cohort_masses(table);
    let cells: BTreeMap<(i64, i64), &crate::staggered::GroupTimeEffect> =
        table.cells.iter().map(|c| ((c.group, c.event_time), c)).collect();
    let z = normal_quantile(DEFAULT_LEVEL);
    let mut points = Vec::new();
    let mut weights = AggregationWeights::default();
    for &e in event_times {
        let groups = cohorts_for(e);
        if groups.is_empty() {
            continue;
        }
        let normalizer: f64 = groups.iter().map(|g| mass[g]).sum();
        let mut estimate = 0.0;
        let mut influence = vec![0.0; table.n_units];
        let mut cw = Vec::with_capacity(groups.len());
        for g in groups {
            let w = mass[&g] / normalizer;
            let cell = cells[&(g, e)];
            estimate += w * cell.estimate;
            for (acc, v) in influence.iter_mut().zip(&cell.influence) {
                *acc += w * v;
            }
            cw.push(CohortWeight { group: g, weight: w });
        }
        let se = cluster_se(&influence, &table.clusters);
        points.push(EventStudyPoint {
            event_time: e,
            estimate,
            se,
            pointwise: Interval::around(estimate, z * se),
            simultaneous: None,
            influence,
        });
        weights.by_event_time.push(EventTimeWeights { event_time: e, cohorts: cw, normalizer });
    }
    let mut curve = EventStudyCurve {
        points,
        overall: None,
        weights,
        window,
        balanced,
        level: DEFAULT_LEVEL,
        n_units: table.n_units,
        clusters: table.clusters.clone(),
    };
    if let Ok(mut overall) = overall_att(&curve) {
        overall.estimator = table.settings.estimator;
        curve.overall = Some(overall);
    }
    curve
}

/// `ATT_es(e) = Σ_g w_{g,e} ATT(g, g+e)` over every event time present,
/// with weights proportional to cohort mass among cohorts having the cell.
pub fn event_study(table: &GroupTimeTable) -> Result<EventStudyCurve, AggregateError> {
    if table.cells.is_empty() {
        return Err(AggregateError::EmptyTable);
    }
    let mut by_e: BTreeMap<i64, Vec<i64>> = BTreeMap::new();
    for c in &table.cells {
        by_e.entry(c.event_time).or_default().push(c.group);
    }
    let times: Vec<i64> = by_e.keys().copied().collect();
    let window = (times[0], *times.last().expect("nonempty"));
    Ok(build_curve(table, &times, |e| by_e[&e].clone(), window, false))
}

/// Event study restricted to cohorts observed at every event time of the
/// window (the reference time -1 excepted), with one fixed set of weights.
pub fn event_study_balanced(table: &GroupTimeTable, window: (i64, i64)) -> Result<EventStudyCurve, AggregateError> {
    let (lo, hi) = window;
    if lo > hi {
        return Err(AggregateError::InvalidWindow(lo, hi));
    }
    if table.cells.is_empty() {
        return Err(AggregateError::EmptyTable);
    }
    let present: BTreeSet<(i64, i64)> = table.cells.iter().map(|c| (c.group, c.event_time)).collect();
    let times: Vec<i64> = (lo..=hi).filter(|&e| e != -1).collect();
    let kept: Vec<i64> = table
        .cohort_sizes
        .iter()
        .map(|c| c.group)
        .filter(|&g| times.iter().all(|&e| present.contains(&(g, e))))
        .collect();
    if kept.is_empty() || times.is_empty() {
        return Err(AggregateError::NoBalancedCohort(lo, hi));
    }
    Ok(build_curve(table, &times, |_| kept.clone(), window, true))
}

/// Unweighted mean of the curve over event times `e >= 0`.
pub fn overall_att(curve: &EventStudyCurve) -> Result<EffectEstimate, AggregateError> {
    let post: Vec<&EventStudyPoint> = curve.points.iter().filter(|p| p.event_time >= 0).collect();
    if post.is_empty() {
        return Err(AggregateError::NoPostPeriods);
    }
    let k = post.len() as f64;
    let estimate = post.iter().map(|p| p.estimate).sum::<f64>() / k;
    let mut influence = vec![0.0; curve.n_units];
    for p in &post {
        for (acc, v) in influence.iter_mut().zip(&p.influence) {
            *acc += v / k;
        }
    }
    Ok(EffectEstimate {
        estimate,
        se: cluster_se(&influence, &curve.clusters),
        influence,
        n_treated: 0,
        n_comparison: 0,
        estimator: crate::did2x2::Estimator::Means,
        warnings: Vec::new(),
    })
}
