//! Covariate balance, TWFE reference regressions and the two-period
//! three-group decomposition of the TWFE coefficient.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::cluster_se;
use crate::nuisance::{fit_wls, NuisanceError};
use crate::panel::{Cohort, PanelDataset};
use crate::staggered::{sun_abraham_fit, within_fit, StaggeredError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("dataset has no covariates")]
    NoCovariates,
    #[error("period {0} is not in the panel")]
    UnknownPeriod(i64),
    #[error("pre period must precede post period")]
    PeriodOrder,
    #[error("the {0} arm is empty")]
    EmptyArm(&'static str),
    #[error("frequency-weighted variance needs total weight above 1 in the {0} arm")]
    InsufficientWeight(&'static str),
    #[error("regressors are rank deficient")]
    RankDeficient,
    #[error("no treated observations to identify the coefficient")]
    NoTreatment,
    #[error("wrong data shape: {0}")]
    WrongShape(String),
    #[error(transparent)]
    Staggered(#[from] StaggeredError),
}

impl From<NuisanceError> for DiagnosticsError {
    fn from(_: NuisanceError) -> Self {
        DiagnosticsError::RankDeficient
    }
}

/// Imbalance above this normalized difference is conventionally flagged.
pub const IMBALANCE_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub variable: String,
    pub mean_treated: f64,
    pub mean_comparison: f64,
    pub var_treated: f64,
    pub var_comparison: f64,
    /// `±inf` when both variances vanish but the means differ.
    pub normalized_difference: f64,
    pub zero_variance: bool,
}

impl BalanceRow {
    pub fn from_moments(variable: impl Into<String>, mean_t: f64, mean_c: f64, var_t: f64, var_c: f64) -> Self {
        let pooled = ((var_t + var_c) / 2.0).sqrt();
        let diff = mean_t - mean_c;
        let zero_variance = pooled == 0.0;
        let normalized_difference = if !zero_variance {
            diff / pooled
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        };
        BalanceRow {
            variable: variable.into(),
            mean_treated: mean_t,
            mean_comparison: mean_c,
            var_treated: var_t,
            var_comparison: var_c,
            normalized_difference,
            zero_variance,
        }
    }

    pub fn flagged(&self) -> bool {
        self.normalized_difference.abs() > IMBALANCE_THRESHOLD
    }

    /// The same row with the arms exchanged.
    pub fn swapped(&self) -> Self {
        Self::from_moments(
            self.variable.clone(),
            self.mean_comparison,
            self.mean_treated,
            self.var_comparison,
            self.var_treated,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceTable {
    pub pre_period: i64,
    pub post_period: i64,
    pub weighted: bool,
    pub n_treated: usize,
    pub n_comparison: usize,
    /// Covariate levels at the pre period.
    pub levels: Vec<BalanceRow>,
    /// Post minus pre changes.
    pub differences: Vec<BalanceRow>,
}

impl BalanceTable {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let fmt_nd = |r: &BalanceRow| {
            let mark = if r.flagged() { " *" } else { "" };
            format!("{:.2}{mark}", r.normalized_difference)
        };
        for (title, rows) in [
            (format!("Levels ({})", self.pre_period), &self.levels),
            (format!("Changes ({} - {})", self.post_period, self.pre_period), &self.differences),
        ] {
            let _ = writeln!(out, "### {title}\n");
            let _ = writeln!(out, "| variable | treated | comparison | norm. diff |");
            let _ = writeln!(out, "|---|---:|---:|---:|");
            for r in rows {
                let _ = writeln!(
                    out,
                    "| {} | {:.2} | {:.2} | {} |",
                    r.variable,
                    r.mean_treated,
                    r.mean_comparison,
                    fmt_nd(r)
                );
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "{} treated, {} comparison units; {}weighted; * marks |norm. diff| > {IMBALANCE_THRESHOLD}",
            self.n_treated,
            self.n_comparison,
            if self.weighted { "" } else { "un" }
        );
        out
    }
}

/// Weighted mean and frequency-weight variance `Σw(x-x̄)² / (Σw - 1)`.
fn moments(values: &[f64], w: &[f64]) -> (f64, f64) {
    let total: f64 = w.iter().sum();
    let mean = values.iter().zip(w).map(|(x, w)| w * x).sum::<f64>() / total;
    let ss = values.iter().zip(w).map(|(x, w)| w * (x - mean).powi(2)).sum::<f64>();
    (mean, ss / (total - 1.0))
}

/// Covariate balance between units first treated in `(pre, post]` and units
/// still untreated at `post`. Units treated by `pre` are left out.
pub fn balance_table(
    data: &PanelDataset,
    pre: i64,
    post: i64,
    weighted: bool,
) -> Result<BalanceTable, DiagnosticsError> {
    let k = data.n_covariates();
    if k == 0 {
        return Err(DiagnosticsError::NoCovariates);
    }
    let pi = data.period_index(pre).ok_or(DiagnosticsError::UnknownPeriod(pre))?;
    let qi = data.period_index(post).ok_or(DiagnosticsError::UnknownPeriod(post))?;
    if pi >= qi {
        return Err(DiagnosticsError::PeriodOrder);
    }
    let (mut treated, mut comparison) = (Vec::new(), Vec::new());
    for u in data.units() {
        match u.group {
            Cohort::Treated(g) if g <= pre => {}
            Cohort::Treated(g) if g <= post => treated.push(u),
            _ => comparison.push(u),
        }
    }
    if treated.is_empty() {
        return Err(DiagnosticsError::EmptyArm("treated"));
    }
    if comparison.is_empty() {
        return Err(DiagnosticsError::EmptyArm("comparison"));
    }
    let weights = |arm: &[&crate::panel::UnitSeries]| -> Vec<f64> {
        arm.iter().map(|u| if weighted { u.weight } else { 1.0 }).collect()
    };
    let (wt, wc) = (weights(&treated), weights(&comparison));
    if wt.iter().sum::<f64>() <= 1.0 {
        return Err(DiagnosticsError::InsufficientWeight("treated"));
    }
    if wc.iter().sum::<f64>() <= 1.0 {
        return Err(DiagnosticsError::InsufficientWeight("comparison"));
    }
    let mut levels = Vec::with_capacity(k);
    let mut differences = Vec::with_capacity(k);
    for (j, name) in data.covariate_names().iter().enumerate() {
        let level =
            |arm: &[&crate::panel::UnitSeries]| -> Vec<f64> { arm.iter().map(|u| u.covariates_at(pi, k)[j]).collect() };
        let change = |arm: &[&crate::panel::UnitSeries]| -> Vec<f64> {
            arm.iter().map(|u| u.covariates_at(qi, k)[j] - u.covariates_at(pi, k)[j]).collect()
        };
        let (mt, vt) = moments(&level(&treated), &wt);
        let (mc, vc) = moments(&level(&comparison), &wc);
        levels.push(BalanceRow::from_moments(name.clone(), mt, mc, vt, vc));
        let (mt, vt) = moments(&change(&treated), &wt);
        let (mc, vc) = moments(&change(&comparison), &wc);
        differences.push(BalanceRow::from_moments(name.clone(), mt, mc, vt, vc));
    }
    Ok(BalanceTable {
        pre_period: pre,
        post_period: post,
        weighted,
        n_treated: treated.len(),
        n_comparison: comparison.len(),
        levels,
        differences,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TwfeSpecification {
    /// One coefficient on the treatment indicator `D_it`.
    #[default]
    Static,
    /// Event-time dummies pooled across cohorts, omitting event time -1.
    #[serde(rename = "dynamic_2xT")]
    Dynamic,
    /// Cohort by period interactions, omitting each cohort's period `g-1`.
    #[serde(rename = "saturated_SA")]
    Saturated,
}

impl FromStr for TwfeSpecification {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(TwfeSpecification::Static),
            "dynamic_2xT" | "dynamic" => Ok(TwfeSpecification::Dynamic),
            "saturated_SA" | "saturated" => Ok(TwfeSpecification::Saturated),
            _ => Err(format!("unknown specification `{s}`; valid values: static, dynamic_2xT, saturated_SA")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCoefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_time: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwfeFit {
    pub specification: TwfeSpecification,
    pub weighted: bool,
    pub coefficients: Vec<NamedCoefficient>,
    pub n_units: usize,
    pub n_periods: usize,
}

impl TwfeFit {
    pub fn coefficient(&self, name: &str) -> Option<&NamedCoefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

fn unit_weights(data: &PanelDataset, weighted: bool) -> Vec<f64> {
    data.units().iter().map(|u| if weighted { u.weight } else { 1.0 }).collect()
}

fn treated_at(group: Cohort, period: i64) -> bool {
    matches!(group, Cohort::Treated(g) if g <= period)
}

/// Two-way fixed-effects regression by exact within transformation,
/// with unit-clustered (or cluster-column) standard errors.
pub fn twfe_fit(data: &PanelDataset, spec: TwfeSpecification, weighted: bool) -> Result<TwfeFit, DiagnosticsError> {
    let n = data.n_units();
    let t = data.n_periods();
    let periods = data.periods();
    let clusters = data.cluster_codes();
    let coefficients = match spec {
        TwfeSpecification::Saturated => {
            let table = sun_abraham_fit(data, weighted)?;
            table
                .cells
                .iter()
                .map(|c| NamedCoefficient {
                    name: format!("g{}_t{}", c.group, c.period),
                    estimate: c.estimate,
                    se: c.se,
                    group: Some(c.group),
                    period: Some(c.period),
                    event_time: Some(c.event_time),
                })
                .collect()
        }
        TwfeSpecification::Static => {
            let d: Vec<f64> = data
                .units()
                .iter()
                .flat_map(|u| periods.iter().map(move |&p| if treated_at(u.group, p) { 1.0 } else { 0.0 }))
                .collect();
            if d.iter().all(|&v| v == 0.0) {
                return Err(DiagnosticsError::NoTreatment);
            }
            let fit = within_fit(&outcome_vector(data), &[d], n, t, &unit_weights(data, weighted))?;
            let infl: Vec<f64> = fit.influence.column(0).iter().copied().collect();
            vec![NamedCoefficient {
                name: "treated".into(),
                estimate: fit.coefficients[0],
                se: cluster_se(&infl, &clusters),
                group: None,
                period: None,
                event_time: None,
            }]
        }
        TwfeSpecification::Dynamic => {
            let event_time = |u: &crate::panel::UnitSeries, p: i64| -> Option<i64> {
                let g = u.group.period()?;
                let gi = data.period_index(g)? as i64;
                Some(data.period_index(p)? as i64 - gi)
            };
            let mut times: Vec<i64> = data
                .units()
                .iter()
                .flat_map(|u| periods.iter().filter_map(move |&p| event_time(u, p)))
                .filter(|&e| e != -1)
                .collect();
            times.sort_unstable();
            times.dedup();
            if times.is_empty() {
                return Err(DiagnosticsError::NoTreatment);
            }
            let regressors: Vec<Vec<f64>> = times
                .iter()
                .map(|&e| {
                    data.units()
                        .iter()
                        .flat_map(|u| periods.iter().map(move |&p| if event_time(u, p) == Some(e) { 1.0 } else { 0.0 }))
                        .collect()
                })
                .collect();
            let fit = within_fit(&outcome_vector(data), &regressors, n, t, &unit_weights(data, weighted))?;
            times
                .iter()
                .enumerate()
                .map(|(j, &e)| {
                    let infl: Vec<f64> = fit.influence.column(j).iter().copied().collect();
                    NamedCoefficient {
                        name: format!("e{e}"),
                        estimate: fit.coefficients[j],
                        se: cluster_se(&infl, &clusters),
                        group: None,
                        period: None,
                        event_time: Some(e),
                    }
                })
                .collect()
        }
    };
    Ok(TwfeFit { specification: spec, weighted, coefficients, n_units: n, n_periods: t })
}

fn outcome_vector(data: &PanelDataset) -> Vec<f64> {
    data.units().iter().flat_map(|u| u.outcomes.iter().copied()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongDifferenceFit {
    pub base_period: i64,
    pub target_period: i64,
    pub intercept: f64,
    pub slope: f64,
    pub se: f64,
    pub n_units: usize,
}

/// Regression of `Y_target - Y_base` on an intercept and the indicator of
/// treatment by `target`. Units already treated at `base` are rejected.
pub fn long_difference_fit(
    data: &PanelDataset,
    base: i64,
    target: i64,
    weighted: bool,
) -> Result<LongDifferenceFit, DiagnosticsError> {
    let bi = data.period_index(base).ok_or(DiagnosticsError::UnknownPeriod(base))?;
    let ti = data.period_index(target).ok_or(DiagnosticsError::UnknownPeriod(target))?;
    if bi >= ti {
        return Err(DiagnosticsError::PeriodOrder);
    }
    if data.units().iter().any(|u| treated_at(u.group, base)) {
        return Err(DiagnosticsError::WrongShape(format!("units are already treated at period {base}")));
    }
    let n = data.n_units();
    let dy: Vec<f64> = data.units().iter().map(|u| u.outcomes[ti] - u.outcomes[bi]).collect();
    let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 || treated_at(data.units()[i].group, target) { 1.0 } else { 0.0 });
    let w = unit_weights(data, weighted);
    let fit = fit_wls(&x, &dy, &w)?;
    let slope_row = fit.xtwx_inverse.row(1).clone_owned();
    let infl: Vec<f64> = (0..n)
        .map(|i| {
            let e = dy[i] - fit.coefficients[0] - x[(i, 1)] * fit.coefficients[1];
            n as f64 * w[i] * e * (slope_row[0] + slope_row[1] * x[(i, 1)])
        })
        .collect();
    Ok(LongDifferenceFit {
        base_period: base,
        target_period: target,
        intercept: fit.coefficients[0],
        slope: fit.coefficients[1],
        se: cluster_se(&infl, &data.cluster_codes()),
        n_units: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTerm {
    pub label: String,
    pub estimate: f64,
    pub weight: f64,
}

/// Two-period, three-group decomposition of the TWFE coefficient.
///
/// `comparisons` splits `β` into the late-vs-never and late-vs-early 2x2
/// contrasts with weights `1-w₁` and `w₁`. `effects` rewrites it as the late
/// cohort's effect with weight 1 plus the early cohort's effect growth
/// `ATT(early, 2) - ATT(early, 1)`, which enters with weight `-w₁`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaconDecomposition {
    pub early_group: i64,
    pub late_group: i64,
    /// Weighted share of the early cohort among units whose treatment does
    /// not change between the two periods.
    pub early_share: f64,
    pub comparisons: Vec<DecompositionTerm>,
    pub effects: Vec<DecompositionTerm>,
    pub beta_twfe: f64,
}

impl BaconDecomposition {
    pub fn reconstructed(&self) -> f64 {
        self.comparisons.iter().map(|t| t.weight * t.estimate).sum()
    }

    pub fn reconstructed_from_effects(&self) -> f64 {
        self.effects.iter().map(|t| t.weight * t.estimate).sum()
    }
}

/// Decomposes the static TWFE coefficient on a two-period panel with an
/// early cohort (treated in the first period), a late cohort (treated in the
/// second) and never-treated units.
pub fn bacon_two_period(data: &PanelDataset, weighted: bool) -> Result<BaconDecomposition, DiagnosticsError> {
    if data.n_periods() != 2 {
        return Err(DiagnosticsError::WrongShape(format!("need exactly 2 periods, found {}", data.n_periods())));
    }
    let (p1, p2) = (data.periods()[0], data.periods()[1]);
    let mut sums = [(0.0, 0.0); 3];
    for u in data.units() {
        let slot = match u.group {
            Cohort::Treated(g) if g <= p1 => 0,
            Cohort::Treated(g) if g == p2 => 1,
            Cohort::Never => 2,
            Cohort::Treated(g) => return Err(DiagnosticsError::WrongShape(format!("unexpected cohort {g}"))),
        };
        let w = if weighted { u.weight } else { 1.0 };
        sums[slot].0 += w * (u.outcomes[1] - u.outcomes[0]);
        sums[slot].1 += w;
    }
    for (slot, name) in ["early", "late", "never-treated"].iter().enumerate() {
        if sums[slot].1 == 0.0 {
            return Err(DiagnosticsError::WrongShape(format!("the {name} group is empty")));
        }
    }
    let mean = |s: (f64, f64)| s.0 / s.1;
    let (early, late, never) = (mean(sums[0]), mean(sums[1]), mean(sums[2]));
    let w1 = sums[0].1 / (sums[0].1 + sums[2].1);
    let late_vs_never = late - never;
    let late_vs_early = late - early;
    let growth = early - never;
    let beta_twfe = twfe_fit(data, TwfeSpecification::Static, weighted)?.coefficients[0].estimate;
    Ok(BaconDecomposition {
        early_group: p1,
        late_group: p2,
        early_share: w1,
        comparisons: vec![
            DecompositionTerm { label: "late_vs_never".into(), estimate: late_vs_never, weight: 1.0 - w1 },
            DecompositionTerm { label: "late_vs_early".into(), estimate: late_vs_early, weight: w1 },
        ],
        effects: vec![
            DecompositionTerm { label: "late_effect".into(), estimate: late_vs_never, weight: 1.0 },
            DecompositionTerm { label: "early_effect_growth".into(), estimate: growth, weight: -w1 },
        ],
        beta_twfe,
    })
}
