//! Group-time average treatment effects under staggered adoption.
//!
//! Every (cohort, period) cell is a 2x2 comparison built from the panel and
//! handed to [`crate::did2x2`]. Pre-treatment cells use the same long
//! difference against period `g-1`, so `τ(g,t) = DiD(Y_t - Y_{g-1})`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::did2x2::{estimate, Adjustment, Baseline, CovariateTiming, Design, DidError, Estimator, TwoByTwoFrame};
use crate::inference::cluster_se;
use crate::nuisance::{fit_wls, NuisanceError};
use crate::panel::{Cohort, PanelDataset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StaggeredError {
    #[error("estimator `{0}` needs covariates but the panel has none")]
    MissingCovariates(Estimator),
    #[error("the pooled pre-period comparison supports only the `means` estimator")]
    PooledWithCovariates,
    #[error("a never-treated cohort is required")]
    NoNeverTreated,
    #[error("no treated cohorts in the panel")]
    NoTreatedCohorts,
    #[error("saturated regression is rank deficient: {0}")]
    RankDeficient(NuisanceError),
}

/// Which units serve as comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Assumption {
    /// Only never-treated units; base period `g-1`.
    #[default]
    Never,
    /// Units with `G > max(g, t)`, never-treated included; base period `g-1`.
    NotYet,
    /// Same comparison units as `NotYet`; each unit's baseline is its mean
    /// outcome over all periods up to `g-1`.
    AllPeriods,
}

impl Assumption {
    pub const ALL: [Assumption; 3] = [Assumption::Never, Assumption::NotYet, Assumption::AllPeriods];

    pub fn name(self) -> &'static str {
        match self {
            Assumption::Never => "never",
            Assumption::NotYet => "not_yet",
            Assumption::AllPeriods => "all_periods",
        }
    }

    pub fn comparison_tag(self) -> ComparisonTag {
        match self {
            Assumption::Never => ComparisonTag::Never,
            Assumption::NotYet => ComparisonTag::NotYet,
            Assumption::AllPeriods => ComparisonTag::PooledPre,
        }
    }
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Assumption {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Assumption::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown assumption `{s}`; valid values: never, not_yet, all_periods"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonTag {
    Never,
    NotYet,
    PooledPre,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttGtSettings {
    pub assumption: Assumption,
    pub estimator: Estimator,
    pub outcome_design: Design,
    pub propensity_design: Design,
    pub include_pretrends: bool,
    pub covariate_timing: CovariateTiming,
}

impl Default for AttGtSettings {
    fn default() -> Self {
        AttGtSettings {
            assumption: Assumption::Never,
            estimator: Estimator::Means,
            outcome_design: Design::Linear,
            propensity_design: Design::Linear,
            include_pretrends: true,
            covariate_timing: CovariateTiming::Base,
        }
    }
}

/// One ATT(g,t), or a pre-treatment τ when `event_time < 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTimeEffect {
    pub group: i64,
    pub period: i64,
    pub event_time: i64,
    pub estimate: f64,
    pub se: f64,
    #[serde(skip)]
    pub influence: Vec<f64>,
    pub comparison: ComparisonTag,
    pub estimator: Estimator,
    pub n_treated: usize,
    pub n_comparison: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// A cell that could not be estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub group: i64,
    pub period: i64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSize {
    pub group: i64,
    pub n_units: usize,
    pub total_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTimeTable {
    pub cells: Vec<GroupTimeEffect>,
    pub skipped: Vec<SkippedCell>,
    /// Treated cohorts in adoption order.
    pub cohort_sizes: Vec<CohortSize>,
    pub settings: AttGtSettings,
    pub n_units: usize,
    pub periods: Vec<i64>,
    /// Dense cluster code per unit, aligned with influence vectors.
    #[serde(skip)]
    pub clusters: Vec<usize>,
}

impl GroupTimeTable {
    pub fn get(&self, group: i64, period: i64) -> Option<&GroupTimeEffect> {
        self.cells.iter().find(|c| c.group == group && c.period == period)
    }

    pub fn post_cells(&self) -> impl Iterator<Item = &GroupTimeEffect> {
        self.cells.iter().filter(|c| c.event_time >= 0)
    }

    pub fn pre_cells(&self) -> impl Iterator<Item = &GroupTimeEffect> {
        self.cells.iter().filter(|c| c.event_time < 0)
    }
}

#[derive(Debug, Clone, Copy)]
struct CellSpec {
    group: i64,
    group_idx: usize,
    period_idx: usize,
}

fn cohort_sizes(data: &PanelDataset) -> Vec<CohortSize> {
    let mut sizes: BTreeMap<i64, (usize, f64)> = BTreeMap::new();
    for u in data.units() {
        if let Cohort::Treated(g) = u.group {
            let e = sizes.entry(g).or_default();
            e.0 += 1;
            e.1 += u.weight;
        }
    }
    sizes.into_iter().map(|(group, (n_units, total_weight))| CohortSize { group, n_units, total_weight }).collect()
}

/// Whether a unit of cohort `cohort` is a valid comparison for cell
/// (`group_idx`, `period_idx`).
fn is_comparison(
    data: &PanelDataset,
    cohort: Cohort,
    assumption: Assumption,
    group_idx: usize,
    period_idx: usize,
) -> bool {
    match (assumption, cohort) {
        (_, Cohort::Never) => true,
        (Assumption::Never, Cohort::Treated(_)) => false,
        (_, c @ Cohort::Treated(_)) => data.cohort_index(c).is_some_and(|h| h > group_idx.max(period_idx)),
    }
}

/// Estimates every feasible ATT(g,t) (and pre-treatment τ when requested)
/// with the built-in designs from `settings`.
pub fn att_gt(data: &PanelDataset, settings: &AttGtSettings) -> Result<GroupTimeTable, StaggeredError> {
    let adj = Adjustment { outcome: &settings.outcome_design, propensity: &settings.propensity_design };
    att_gt_with(data, settings, adj)
}

/// As [`att_gt`] with caller-supplied design builders.
pub fn att_gt_with(
    data: &PanelDataset,
    settings: &AttGtSettings,
    adj: Adjustment<'_>,
) -> Result<GroupTimeTable, StaggeredError> {
    if settings.estimator.uses_covariates() {
        if settings.assumption == Assumption::AllPeriods {
            return Err(StaggeredError::PooledWithCovariates);
        }
        if data.n_covariates() == 0 {
            return Err(StaggeredError::MissingCovariates(settings.estimator));
        }
    }
    let cohorts = data.treated_cohorts();
    if cohorts.is_empty() {
        return Err(StaggeredError::NoTreatedCohorts);
    }
    let t_count = data.n_periods();
    let mut specs = Vec::new();
    let mut skipped = Vec::new();
    for &g in &cohorts {
        let gi = data.cohort_index(Cohort::Treated(g)).expect("validated cohort");
        if gi == 0 {
            for (ti, &p) in data.periods().iter().enumerate() {
                if ti >= gi {
                    skipped.push(SkippedCell {
                        group: g,
                        period: p,
                        reason: "cohort has no pre-treatment period".into(),
                    });
                }
            }
            continue;
        }
        for ti in 0..t_count {
            let pre = ti + 1 < gi;
            if ti >= gi || (pre && settings.include_pretrends && settings.assumption != Assumption::AllPeriods) {
                specs.push(CellSpec { group: g, group_idx: gi, period_idx: ti });
            }
        }
    }

    let clusters = data.cluster_codes();
    let results: Vec<Result<GroupTimeEffect, SkippedCell>> =
        specs.par_iter().map(|spec| estimate_cell(data, settings, adj, *spec, &clusters)).collect();
    let mut cells = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(c) => cells.push(c),
            Err(s) => skipped.push(s),
        }
    }
    skipped.sort_by_key(|s| (s.group, s.period));
    Ok(GroupTimeTable {
        cells,
        skipped,
        cohort_sizes: cohort_sizes(data),
        settings: settings.clone(),
        n_units: data.n_units(),
        periods: data.periods().to_vec(),
        clusters,
    })
}

fn estimate_cell(
    data: &PanelDataset,
    settings: &AttGtSettings,
    adj: Adjustment<'_>,
    spec: CellSpec,
    clusters: &[usize],
) -> Result<GroupTimeEffect, SkippedCell> {
    let CellSpec { group, group_idx, period_idx } = spec;
    let period = data.periods()[period_idx];
    let skip = |reason: String| SkippedCell { group, period, reason };
    let base = match settings.assumption {
        Assumption::AllPeriods => Baseline::PooledThrough(group_idx - 1),
        _ => Baseline::Period(group_idx - 1),
    };
    let assumption = settings.assumption;
    let frame = TwoByTwoFrame::from_panel(
        data,
        |u| {
            if u.group == Cohort::Treated(group) {
                Some(true)
            } else if is_comparison(data, u.group, assumption, group_idx, period_idx) {
                Some(false)
            } else {
                None
            }
        },
        base,
        period_idx,
        settings.covariate_timing,
    )
    .map_err(|e| match e {
        DidError::EmptyArm(arm) => skip(format!("no {arm} units")),
        other => skip(other.to_string()),
    })?;
    let est = estimate(&frame, settings.estimator, adj).map_err(|e| skip(e.to_string()))?;
    Ok(GroupTimeEffect {
        group,
        period,
        event_time: period_idx as i64 - group_idx as i64,
        estimate: est.estimate,
        se: cluster_se(&est.influence, clusters),
        influence: est.influence,
        comparison: assumption.comparison_tag(),
        estimator: settings.estimator,
        n_treated: est.n_treated,
        n_comparison: est.n_comparison,
        warnings: est.warnings,
    })
}

/// Two-way within transformation of a balanced panel with unit-constant
/// weights: `x - x̄_i - x̄_t + x̄` where period and grand means are weighted.
pub(crate) fn two_way_demean(values: &[f64], n: usize, t: usize, w: &[f64]) -> Vec<f64> {
    let total_w: f64 = w.iter().sum();
    let unit_mean: Vec<f64> = (0..n).map(|i| values[i * t..(i + 1) * t].iter().sum::<f64>() / t as f64).collect();
    let period_mean: Vec<f64> =
        (0..t).map(|s| (0..n).map(|i| w[i] * values[i * t + s]).sum::<f64>() / total_w).collect();
    let grand: f64 = period_mean.iter().sum::<f64>() / t as f64;
    let mut out = vec![0.0; n * t];
    for i in 0..n {
        for s in 0..t {
            out[i * t + s] = values[i * t + s] - unit_mean[i] - period_mean[s] + grand;
        }
    }
    out
}

/// Result of a within-transformed least-squares fit with unit-clustered
/// influence functions.
pub(crate) struct WithinFit {
    pub coefficients: Vec<f64>,
    /// Per-unit influence (`n x p`), on the `se = sqrt(Σψ²)/n` scale.
    pub influence: DMatrix<f64>,
}

/// Regresses the within-transformed outcome on within-transformed
/// regressors (`regressors[j]` is unit-major, length `n*t`).
pub(crate) fn within_fit(
    outcome: &[f64],
    regressors: &[Vec<f64>],
    n: usize,
    t: usize,
    w: &[f64],
) -> Result<WithinFit, NuisanceError> {
    let p = regressors.len();
    let y = two_way_demean(outcome, n, t, w);
    let cols: Vec<Vec<f64>> = regressors.iter().map(|r| two_way_demean(r, n, t, w)).collect();
    let x = DMatrix::from_fn(n * t, p, |r, c| cols[c][r]);
    let row_w: Vec<f64> = (0..n * t).map(|r| w[r / t]).collect();
    let fit = fit_wls(&x, &y, &row_w)?;
    let resid: Vec<f64> =
        (0..n * t).map(|r| y[r] - (0..p).map(|c| x[(r, c)] * fit.coefficients[c]).sum::<f64>()).collect();
    let mut scores = DMatrix::zeros(n, p);
    for i in 0..n {
        for s in 0..t {
            let r = i * t + s;
            for c in 0..p {
                scores[(i, c)] += w[i] * x[(r, c)] * resid[r];
            }
        }
    }
    let influence = (scores * &fit.xtwx_inverse) * n as f64;
    Ok(WithinFit { coefficients: fit.coefficients.iter().copied().collect(), influence })
}

/// Saturated cohort x event-time regression with unit and period effects,
/// omitting event time -1 and the never-treated cohort. Each coefficient
/// equals the never-treated comparison-of-means ATT for that cell.
pub fn sun_abraham_fit(data: &PanelDataset, weighted: bool) -> Result<GroupTimeTable, StaggeredError> {
    if !data.has_never_treated() {
        return Err(StaggeredError::NoNeverTreated);
    }
    let n = data.n_units();
    let t = data.n_periods();
    let w: Vec<f64> = if weighted { data.units().iter().map(|u| u.weight).collect() } else { vec![1.0; n] };
    let mut labels = Vec::new();
    let mut regressors = Vec::new();
    for g in data.treated_cohorts() {
        let gi = data.cohort_index(Cohort::Treated(g)).expect("validated cohort");
        if gi == 0 {
            continue;
        }
        for ti in (0..t).filter(|&ti| ti + 1 != gi) {
            let col: Vec<f64> = data
                .units()
                .iter()
                .flat_map(|u| (0..t).map(move |s| if u.group == Cohort::Treated(g) && s == ti { 1.0 } else { 0.0 }))
                .collect();
            labels.push((g, gi, ti));
            regressors.push(col);
        }
    }
    if labels.is_empty() {
        return Err(StaggeredError::NoTreatedCohorts);
    }
    let outcome: Vec<f64> = data.units().iter().flat_map(|u| u.outcomes.iter().copied()).collect();
    let fit = within_fit(&outcome, &regressors, n, t, &w).map_err(StaggeredError::RankDeficient)?;
    let counts: BTreeMap<i64, usize> = cohort_sizes(data).into_iter().map(|c| (c.group, c.n_units)).collect();
    let n_never = data.units().iter().filter(|u| u.group.is_never()).count();
    let clusters = data.cluster_codes();
    let cells = labels
        .iter()
        .enumerate()
        .map(|(j, &(g, gi, ti))| {
            let influence: Vec<f64> = fit.influence.column(j).iter().copied().collect();
            GroupTimeEffect {
                group: g,
                period: data.periods()[ti],
                event_time: ti as i64 - gi as i64,
                estimate: fit.coefficients[j],
                se: cluster_se(&influence, &clusters),
                influence,
                comparison: ComparisonTag::Never,
                estimator: Estimator::Means,
                n_treated: counts[&g],
                n_comparison: n_never,
                warnings: Vec::new(),
            }
        })
        .collect();
    Ok(GroupTimeTable {
        cells,
        skipped: Vec::new(),
        cohort_sizes: cohort_sizes(data),
        settings: AttGtSettings { assumption: Assumption::Never, estimator: Estimator::Means, ..Default::default() },
        n_units: n,
        periods: data.periods().to_vec(),
        clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::did2x2::att_means;
    use crate::panel::{UnitSeries, WeightKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random staggered panel: cohorts at the listed period indices plus
    /// never-treated, arbitrary effects and noise.
    fn panel(seed: u64, n: usize, periods: usize, cohorts: &[i64], weighted: bool, k: usize) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let units = (0..n)
            .map(|i| {
                let slot = i % (cohorts.len() + 1);
                let group = cohorts.get(slot).map_or(Cohort::Never, |&g| Cohort::Treated(g));
                let fe: f64 = rng.random_range(-2.0..2.0);
                let outcomes = (1..=periods as i64)
                    .map(|p| {
                        let eff = match group {
                            Cohort::Treated(g) if p >= g => 1.0 + (p - g) as f64 * 0.5 + slot as f64,
                            _ => 0.0,
                        };
                        fe + 0.3 * p as f64 + eff + rng.random_range(-1.0..1.0)
                    })
                    .collect();
                UnitSeries {
                    unit_id: format!("u{i}"),
                    group,
                    weight: if weighted { rng.random_range(0.5..3.0) } else { 1.0 },
                    cluster: None,
                    outcomes,
                    covariates: (0..periods * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
                }
            })
            .collect();
        let names = (0..k).map(|j| format!("x{j}")).collect();
        PanelDataset::new(units, (1..=periods as i64).collect(), names, WeightKind::Supplied).unwrap()
    }

    #[test]
    fn sun_abraham_equals_never_treated_means() {
        for weighted in [false, true] {
            let data = panel(1, 120, 7, &[3, 4, 6], weighted, 0);
            let sa = sun_abraham_fit(&data, true).unwrap();
            let gt = att_gt(&data, &AttGtSettings::default()).unwrap();
            assert_eq!(sa.cells.len(), gt.cells.len());
            for c in &gt.cells {
                let s = sa.get(c.group, c.period).unwrap();
                assert!((s.estimate - c.estimate).abs() < 1e-8, "({}, {})", c.group, c.period);
                assert_eq!(s.event_time, c.event_time);
            }
        }
    }

    #[test]
    fn never_and_not_yet_comparison_sets() {
        let data = panel(2, 80, 6, &[3, 5], false, 0);
        let n_never = data.units().iter().filter(|u| u.group.is_never()).count();
        for cell in att_gt(&data, &AttGtSettings::default()).unwrap().cells {
            assert_eq!(cell.n_comparison, n_never);
        }
        let nyt = att_gt(&data, &AttGtSettings { assumption: Assumption::NotYet, ..Default::default() }).unwrap();
        let nev = att_gt(&data, &AttGtSettings::default()).unwrap();
        for c in &nyt.cells {
            let n = nev.get(c.group, c.period).unwrap();
            assert!(c.n_comparison >= n.n_comparison);
        }
        // cohort 3 at t=3 and t=4 can use cohort 5; at t=5 it cannot
        let c33 = nyt.get(3, 3).unwrap();
        let c35 = nyt.get(3, 5).unwrap();
        assert!(c33.n_comparison > c35.n_comparison);
        assert_eq!(c35.n_comparison, nev.get(3, 5).unwrap().n_comparison);
        // the last cohort only has the never-treated
        assert_eq!(nyt.get(5, 5).unwrap().n_comparison, nev.get(5, 5).unwrap().n_comparison);
    }

    #[test]
    fn frames_never_use_exposed_comparisons() {
        let data = panel(3, 90, 8, &[3, 4, 6], false, 0);
        for assumption in [Assumption::Never, Assumption::NotYet] {
            let table = att_gt(&data, &AttGtSettings { assumption, ..Default::default() }).unwrap();
            for c in &table.cells {
                let gi = data.period_index(c.group).unwrap();
                let ti = data.period_index(c.period).unwrap();
                let comparisons: Vec<_> = data
                    .units()
                    .iter()
                    .filter(|u| {
                        u.group != Cohort::Treated(c.group) && is_comparison(&data, u.group, assumption, gi, ti)
                    })
                    .collect();
                for u in &comparisons {
                    if let Some(h) = data.cohort_index(u.group) {
                        assert!(h > ti && h > gi - 1, "exposed comparison in ({}, {})", c.group, c.period);
                    }
                }
                assert_eq!(comparisons.len(), c.n_comparison);
            }
        }
    }

    #[test]
    fn pretrend_cells_use_long_difference_sign() {
        let data = panel(4, 60, 6, &[4], false, 0);
        let table = att_gt(&data, &AttGtSettings::default()).unwrap();
        assert!(table.get(4, 3).is_none(), "reference cell is excluded");
        let tau = table.get(4, 1).unwrap();
        assert_eq!(tau.event_time, -3);
        let frame = TwoByTwoFrame::from_panel(
            &data,
            |u| match u.group {
                Cohort::Treated(4) => Some(true),
                Cohort::Never => Some(false),
                _ => None,
            },
            Baseline::Period(2),
            0,
            CovariateTiming::Base,
        )
        .unwrap();
        assert!((att_means(&frame).unwrap().estimate - tau.estimate).abs() < 1e-12);
    }

    #[test]
    fn two_period_collapse_matches_2x2() {
        let data = panel(5, 50, 2, &[2], true, 0);
        let table = att_gt(&data, &AttGtSettings::default()).unwrap();
        assert_eq!(table.cells.len(), 1);
        let frame = TwoByTwoFrame::from_panel(
            &data,
            |u| Some(!u.group.is_never()),
            Baseline::Period(0),
            1,
            CovariateTiming::Base,
        )
        .unwrap();
        let direct = att_means(&frame).unwrap();
        assert_eq!(table.cells[0].estimate, direct.estimate);
        assert_eq!(table.cells[0].se, direct.se);
        let sa = sun_abraham_fit(&data, true).unwrap();
        assert!((sa.cells[0].estimate - direct.estimate).abs() < 1e-10);
    }

    #[test]
    fn pooled_pre_uses_mean_baseline() {
        let data = panel(6, 60, 5, &[4], false, 0);
        let table = att_gt(&data, &AttGtSettings { assumption: Assumption::AllPeriods, ..Default::default() }).unwrap();
        assert!(table.pre_cells().next().is_none());
        let c = table.get(4, 4).unwrap();
        assert_eq!(c.comparison, ComparisonTag::PooledPre);
        let mean_change = |treated: bool| {
            let us: Vec<_> = data.units().iter().filter(|u| u.group.is_never() != treated).collect();
            us.iter().map(|u| u.outcomes[3] - u.outcomes[..3].iter().sum::<f64>() / 3.0).sum::<f64>() / us.len() as f64
        };
        assert!((c.estimate - (mean_change(true) - mean_change(false))).abs() < 1e-12);
    }

    #[test]
    fn usage_errors() {
        let data = panel(7, 40, 4, &[3], false, 0);
        let s = AttGtSettings { estimator: Estimator::Dr, ..Default::default() };
        assert_eq!(att_gt(&data, &s).unwrap_err(), StaggeredError::MissingCovariates(Estimator::Dr));
        let data = panel(7, 40, 4, &[3], false, 2);
        let s = AttGtSettings { estimator: Estimator::Ra, assumption: Assumption::AllPeriods, ..Default::default() };
        assert_eq!(att_gt(&data, &s).unwrap_err(), StaggeredError::PooledWithCovariates);
    }

    #[test]
    fn skipped_cells_are_recorded() {
        // Cohort 2 with no never-treated units in the not-yet comparison at t=4
        let mut data = panel(8, 30, 4, &[2, 4], false, 0);
        data = data.filter_units(|u| !u.group.is_never()).unwrap();
        let table = att_gt(
            &data,
            &AttGtSettings { assumption: Assumption::NotYet, include_pretrends: false, ..Default::default() },
        )
        .unwrap();
        assert!(table.get(2, 2).is_some());
        assert!(table.get(2, 4).is_none());
        assert!(table.skipped.iter().any(|s| s.group == 2 && s.period == 4 && s.reason.contains("comparison")));
    }

    #[test]
    fn covariate_adjusted_cells_run_in_parallel_deterministically() {
        let data = panel(9, 300, 6, &[3, 5], true, 2);
        let s = AttGtSettings { estimator: Estimator::Dr, assumption: Assumption::NotYet, ..Default::default() };
        let a = att_gt(&data, &s).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| att_gt(&data, &s).unwrap());
        assert_eq!(a, b);
    }
}
