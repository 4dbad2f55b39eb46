//! The 2x2 building block: one treated arm, one comparison arm, one base and
//! one target period.
//!
//! All four estimators share a single routine parameterized by an optional
//! outcome regression and a comparison-arm weighting rule:
//!
//! | estimator | outcome model | comparison weights          |
//! |-----------|---------------|-----------------------------|
//! | means     | none          | `ω`                         |
//! | ra        | fitted        | none (imputed by the model) |
//! | ipw       | none          | `ω π/(1-π)`                 |
//! | dr        | fitted        | `ω π/(1-π)`                 |
//!
//! Every estimate carries a per-unit influence vector over all units of the
//! dataset (zeros outside the frame), scaled so that
//! `se = sqrt(mean(ψ²) / N)` with `N` the dataset size.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nuisance::{fit_logit, fit_wls, LogitOptions, NuisanceError};
use crate::panel::{PanelDataset, UnitSeries};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DidError {
    #[error("{0} arm is empty or has zero total weight")]
    EmptyArm(Arm),
    #[error("base and target periods coincide")]
    SamePeriod,
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
    #[error("comparison unit {0} has a fitted score numerically equal to 1")]
    DegenerateWeights(usize),
    #[error("partition cell {0} lacks treated or comparison units")]
    EmptyCell(usize),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treated,
    Comparison,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Treated => "treated",
            Arm::Comparison => "comparison",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Means,
    Ra,
    Ipw,
    Dr,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Means, Estimator::Ra, Estimator::Ipw, Estimator::Dr];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Means => "means",
            Estimator::Ra => "ra",
            Estimator::Ipw => "ipw",
            Estimator::Dr => "dr",
        }
    }

    pub fn uses_covariates(self) -> bool {
        self != Estimator::Means
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| format!("unknown estimator `{s}`; valid values: means, ra, ipw, dr"))
    }
}

/// Maps a unit's covariate row to a regression row. Rows should start with
/// an intercept so estimates stay invariant to level shifts.
pub trait DesignBuilder: Send + Sync {
    fn build(&self, covariates: &[f64]) -> Vec<f64>;
}

/// Built-in designs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    InterceptOnly,
    /// Intercept plus every covariate.
    #[default]
    Linear,
    /// Intercept plus the listed covariate positions.
    Subset(Vec<usize>),
}

impl DesignBuilder for Design {
    fn build(&self, x: &[f64]) -> Vec<f64> {
        let mut row = vec![1.0];
        match self {
            Design::InterceptOnly => {}
            Design::Linear => row.extend_from_slice(x),
            Design::Subset(cols) => row.extend(cols.iter().map(|&c| x[c])),
        }
        row
    }
}

/// Adapter turning a closure into a [`DesignBuilder`].
pub struct FnDesign<F>(pub F);

impl<F: Fn(&[f64]) -> Vec<f64> + Send + Sync> DesignBuilder for FnDesign<F> {
    fn build(&self, x: &[f64]) -> Vec<f64> {
        (self.0)(x)
    }
}

/// Outcome and propensity designs used by the covariate-adjusted estimators.
#[derive(Clone, Copy)]
pub struct Adjustment<'a> {
    pub outcome: &'a dyn DesignBuilder,
    pub propensity: &'a dyn DesignBuilder,
}

impl Default for Adjustment<'static> {
    fn default() -> Self {
        static LINEAR: Design = Design::Linear;
        Adjustment { outcome: &LINEAR, propensity: &LINEAR }
    }
}

/// Which covariate values enter the working models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateTiming {
    /// Values in the base period.
    #[default]
    Base,
    /// Base-period values followed by target-period values. Covariates that
    /// respond to treatment bias the estimate; opt in only deliberately.
    BaseAndTarget,
}

/// How each unit's baseline outcome is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Outcome in a single period index.
    Period(usize),
    /// Mean outcome over period indices `0..=last`.
    PooledThrough(usize),
}

/// One 2x2 comparison: members drawn from a dataset of `n_total` units.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoByTwoFrame {
    pub n_total: usize,
    /// Dataset index of each member.
    pub members: Vec<usize>,
    pub treated: Vec<bool>,
    /// Target-period outcome minus baseline outcome.
    pub delta_y: Vec<f64>,
    pub weights: Vec<f64>,
    /// Row-major `members x n_covariates`.
    pub covariates: Vec<f64>,
    pub n_covariates: usize,
    pub base: Baseline,
    pub target: usize,
}

impl TwoByTwoFrame {
    /// Builds a frame from explicit per-member data. Member `i` has dataset
    /// index `i` and `n_total = treated.len()`.
    pub fn from_parts(
        treated: Vec<bool>,
        delta_y: Vec<f64>,
        weights: Vec<f64>,
        covariates: Vec<f64>,
        n_covariates: usize,
    ) -> Result<Self, DidError> {
        let n = treated.len();
        let frame = TwoByTwoFrame {
            n_total: n,
            members: (0..n).collect(),
            treated,
            delta_y,
            weights,
            covariates,
            n_covariates,
            base: Baseline::Period(0),
            target: 1,
        };
        frame.validate()?;
        Ok(frame)
    }

    /// Builds a frame from a panel: `arm` assigns each unit to the treated
    /// arm (`Some(true)`), the comparison arm (`Some(false)`) or neither.
    pub fn from_panel(
        data: &PanelDataset,
        arm: impl Fn(&UnitSeries) -> Option<bool>,
        base: Baseline,
        target: usize,
        timing: CovariateTiming,
    ) -> Result<Self, DidError> {
        let t = data.n_periods();
        let base_period = match base {
            Baseline::Period(b) => b,
            Baseline::PooledThrough(b) => b,
        };
        if base_period >= t || target >= t {
            return Err(DidError::InvalidFrame("period index out of range".into()));
        }
        if base == Baseline::Period(target) {
            return Err(DidError::SamePeriod);
        }
        let k = data.n_covariates();
        let width = match timing {
            CovariateTiming::Base => k,
            CovariateTiming::BaseAndTarget => 2 * k,
        };
        if timing == CovariateTiming::BaseAndTarget && k > 0 {
            log::warn!(
                "covariates measured in the target period enter the working models; \
                 if they respond to treatment the estimate is biased"
            );
        }
        let mut frame = TwoByTwoFrame {
            n_total: data.n_units(),
            members: Vec::new(),
            treated: Vec::new(),
            delta_y: Vec::new(),
            weights: Vec::new(),
            covariates: Vec::new(),
            n_covariates: width,
            base,
            target,
        };
        for (i, u) in data.units().iter().enumerate() {
            let Some(d) = arm(u) else { continue };
            let baseline = match base {
                Baseline::Period(b) => u.outcomes[b],
                Baseline::PooledThrough(b) => u.outcomes[..=b].iter().sum::<f64>() / (b + 1) as f64,
            };
            frame.members.push(i);
            frame.treated.push(d);
            frame.delta_y.push(u.outcomes[target] - baseline);
            frame.weights.push(u.weight);
            frame.covariates.extend_from_slice(u.covariates_at(base_period, k));
            if timing == CovariateTiming::BaseAndTarget {
                frame.covariates.extend_from_slice(u.covariates_at(target, k));
            }
        }
        frame.validate()?;
        Ok(frame)
    }

    fn validate(&self) -> Result<(), DidError> {
        let n = self.members.len();
        if self.treated.len() != n
            || self.delta_y.len() != n
            || self.weights.len() != n
            || self.covariates.len() != n * self.n_covariates
        {
            return Err(DidError::InvalidFrame("member vectors have inconsistent lengths".into()));
        }
        if self.members.iter().any(|&m| m >= self.n_total) {
            return Err(DidError::InvalidFrame("member index exceeds dataset size".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(DidError::InvalidFrame("weights must be nonnegative".into()));
        }
        for (arm, flag) in [(Arm::Treated, true), (Arm::Comparison, false)] {
            let total: f64 = (0..n).filter(|&i| self.treated[i] == flag).map(|i| self.weights[i]).sum();
            if total <= 0.0 {
                return Err(DidError::EmptyArm(arm));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn n_treated(&self) -> usize {
        self.treated.iter().filter(|&&d| d).count()
    }

    pub fn n_comparison(&self) -> usize {
        self.len() - self.n_treated()
    }

    pub fn covariate_row(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.n_covariates..(i + 1) * self.n_covariates]
    }

    /// Sub-frame keeping members with `keep[i]`; dataset indexing is preserved.
    pub fn subset(&self, keep: &[bool]) -> Result<Self, DidError> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep[i]).collect();
        let frame = TwoByTwoFrame {
            n_total: self.n_total,
            members: idx.iter().map(|&i| self.members[i]).collect(),
            treated: idx.iter().map(|&i| self.treated[i]).collect(),
            delta_y: idx.iter().map(|&i| self.delta_y[i]).collect(),
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
            covariates: idx.iter().flat_map(|&i| self.covariate_row(i).to_vec()).collect(),
            n_covariates: self.n_covariates,
            base: self.base,
            target: self.target,
        };
        frame.validate()?;
        Ok(frame)
    }

    fn design(&self, builder: &dyn DesignBuilder) -> Result<DMatrix<f64>, DidError> {
        let rows: Vec<Vec<f64>> = (0..self.len()).map(|i| builder.build(self.covariate_row(i))).collect();
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) || p == 0 {
            return Err(DidError::InvalidFrame("design builder produced ragged or empty rows".into()));
        }
        Ok(DMatrix::from_row_iterator(rows.len(), p, rows.into_iter().flatten()))
    }
}

/// A point estimate with its influence function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimate: f64,
    pub se: f64,
    /// Per-unit influence over the whole dataset.
    #[serde(skip)]
    pub influence: Vec<f64>,
    pub n_treated: usize,
    pub n_comparison: usize,
    pub estimator: Estimator,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// `sqrt(mean(ψ²) / N)` for an influence vector of length `N`.
pub fn se_from_influence(influence: &[f64]) -> f64 {
    let n = influence.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    (influence.iter().map(|v| v * v).sum::<f64>()).sqrt() / n
}

enum ComparisonWeighting<'a> {
    /// Comparison arm enters only through the outcome model.
    Imputed,
    Sampling,
    Propensity(&'a dyn DesignBuilder),
}

const SCORE_CEILING: f64 = 1.0 - 1e-12;

fn estimate_frame(
    frame: &TwoByTwoFrame,
    outcome: Option<&dyn DesignBuilder>,
    comparison: ComparisonWeighting<'_>,
    tag: Estimator,
) -> Result<EffectEstimate, DidError> {
    let n = frame.len();
    let nf = n as f64;
    let d = &frame.treated;
    let w = &frame.weights;
    let mut warnings = Vec::new();

    // Outcome regression on the comparison arm.
    let mut resid: Vec<f64> = frame.delta_y.clone();
    let mut outcome_fit = None;
    if let Some(builder) = outcome {
        let x = frame.design(builder)?;
        let wc: Vec<f64> = (0..n).map(|i| if d[i] { 0.0 } else { w[i] }).collect();
        let fit = fit_wls(&x, &frame.delta_y, &wc)?;
        let mu = fit.predict_all(&x);
        for i in 0..n {
            resid[i] -= mu[i];
        }
        outcome_fit = Some((x, fit));
    }

    // Comparison-arm weights r_i.
    let mut propensity = None;
    let r: Vec<f64> = match comparison {
        ComparisonWeighting::Imputed => vec![0.0; n],
        ComparisonWeighting::Sampling => (0..n).map(|i| if d[i] { 0.0 } else { w[i] }).collect(),
        ComparisonWeighting::Propensity(builder) => {
            let x = frame.design(builder)?;
            let fit = fit_logit(&x, d, w, LogitOptions::default())?;
            if fit.separation {
                warnings.push("propensity model: classes are separated; fitted scores reach 0 or 1".to_string());
            } else if !fit.converged {
                warnings.push(format!("propensity model did not converge in {} iterations", fit.iterations));
            }
            let mut r = vec![0.0; n];
            for i in 0..n {
                if !d[i] && w[i] > 0.0 {
                    let p = fit.fitted_scores[i];
                    if p >= SCORE_CEILING {
                        return Err(DidError::DegenerateWeights(frame.members[i]));
                    }
                    r[i] = w[i] * p / (1.0 - p);
                }
            }
            propensity = Some((x, fit));
            r
        }
    };
    let imputed = matches!(comparison, ComparisonWeighting::Imputed);

    let w1: Vec<f64> = (0..n).map(|i| if d[i] { w[i] } else { 0.0 }).collect();
    let sum_w1: f64 = w1.iter().sum();
    let sum_r: f64 = r.iter().sum();
    if !imputed && sum_r <= 0.0 {
        return Err(DidError::EmptyArm(Arm::Comparison));
    }
    let theta1 = (0..n).map(|i| w1[i] * resid[i]).sum::<f64>() / sum_w1;
    let theta0 = if imputed { 0.0 } else { (0..n).map(|i| r[i] * resid[i]).sum::<f64>() / sum_r };
    let estimate = theta1 - theta0;

    let mut psi: Vec<f64> = (0..n)
        .map(|i| {
            let treated_part = nf * w1[i] * (resid[i] - theta1) / sum_w1;
            let comparison_part = if imputed { 0.0 } else { nf * r[i] * (resid[i] - theta0) / sum_r };
            treated_part - comparison_part
        })
        .collect();

    // Correction for the estimated outcome regression.
    if let Some((x, fit)) = &outcome_fit {
        let p = x.ncols();
        let mut m = DVector::zeros(p);
        for i in 0..n {
            let coef = -w1[i] / sum_w1 + if imputed { 0.0 } else { r[i] / sum_r };
            if coef != 0.0 {
                m.axpy(coef, &x.row(i).transpose(), 1.0);
            }
        }
        let lever = &fit.xtwx_inverse * m;
        for i in 0..n {
            if !d[i] && w[i] > 0.0 {
                let score = w[i] * resid[i];
                psi[i] += nf * score * x.row(i).dot(&lever.transpose());
            }
        }
    }

    // Correction for the estimated propensity score.
    if let Some((x, fit)) = &propensity {
        let p = x.ncols();
        let mut m2 = DVector::zeros(p);
        for i in 0..n {
            if r[i] != 0.0 {
                m2.axpy(r[i] * (resid[i] - theta0) / sum_r, &x.row(i).transpose(), 1.0);
            }
        }
        let lever = &fit.information_inverse * m2;
        for i in 0..n {
            let label = if d[i] { 1.0 } else { 0.0 };
            let score = w[i] * (label - fit.fitted_scores[i]);
            if score != 0.0 {
                psi[i] -= nf * score * x.row(i).dot(&lever.transpose());
            }
        }
    }

    let scale = frame.n_total as f64 / nf;
    let mut influence = vec![0.0; frame.n_total];
    for (i, &m) in frame.members.iter().enumerate() {
        influence[m] = psi[i] * scale;
    }
    Ok(EffectEstimate {
        estimate,
        se: se_from_influence(&influence),
        influence,
        n_treated: frame.n_treated(),
        n_comparison: frame.n_comparison(),
        estimator: tag,
        warnings,
    })
}

/// Difference of weighted mean outcome changes between arms.
pub fn att_means(frame: &TwoByTwoFrame) -> Result<EffectEstimate, DidError> {
    estimate_frame(frame, None, ComparisonWeighting::Sampling, Estimator::Means)
}

/// Regression adjustment: treated mean of `ΔY - μ̂(X)` with `μ̂` fitted on
/// the comparison arm.
pub fn att_ra(frame: &TwoByTwoFrame, outcome: &dyn DesignBuilder) -> Result<EffectEstimate, DidError> {
    estimate_frame(frame, Some(outcome), ComparisonWeighting::Imputed, Estimator::Ra)
}

/// Inverse probability weighting with ratio-normalized weights in each arm.
pub fn att_ipw(frame: &TwoByTwoFrame, propensity: &dyn DesignBuilder) -> Result<EffectEstimate, DidError> {
    estimate_frame(frame, None, ComparisonWeighting::Propensity(propensity), Estimator::Ipw)
}

/// Doubly robust combination of the two working models.
pub fn att_dr(
    frame: &TwoByTwoFrame,
    outcome: &dyn DesignBuilder,
    propensity: &dyn DesignBuilder,
) -> Result<EffectEstimate, DidError> {
    estimate_frame(frame, Some(outcome), ComparisonWeighting::Propensity(propensity), Estimator::Dr)
}

/// Dispatches on the estimator tag.
pub fn estimate(frame: &TwoByTwoFrame, estimator: Estimator, adj: Adjustment<'_>) -> Result<EffectEstimate, DidError> {
    match estimator {
        Estimator::Means => att_means(frame),
        Estimator::Ra => att_ra(frame, adj.outcome),
        Estimator::Ipw => att_ipw(frame, adj.propensity),
        Estimator::Dr => att_dr(frame, adj.outcome, adj.propensity),
    }
}

/// One cell of a partition-specific analysis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionEffect {
    pub cell: usize,
    pub effect: EffectEstimate,
    /// Weighted share of the treated arm falling in this cell.
    pub treated_share: f64,
}

/// Runs the estimator inside each cell of `partition` (indexed by dataset
/// unit). Cells are reported in increasing label order.
pub fn att_by_partition(
    frame: &TwoByTwoFrame,
    partition: &[usize],
    estimator: Estimator,
    adj: Adjustment<'_>,
) -> Result<Vec<PartitionEffect>, DidError> {
    if partition.len() != frame.n_total {
        return Err(DidError::InvalidFrame("partition must label every dataset unit".into()));
    }
    let mut treated_weight: BTreeMap<usize, f64> = BTreeMap::new();
    for i in 0..frame.len() {
        let e = treated_weight.entry(partition[frame.members[i]]).or_default();
        if frame.treated[i] {
            *e += frame.weights[i];
        }
    }
    let total: f64 = treated_weight.values().sum();
    treated_weight
        .into_iter()
        .map(|(cell, tw)| {
            let keep: Vec<bool> = frame.members.iter().map(|&m| partition[m] == cell).collect();
            let sub = frame.subset(&keep).map_err(|_| DidError::EmptyCell(cell))?;
            let effect = estimate(&sub, estimator, adj)?;
            Ok(PartitionEffect { cell, effect, treated_share: tw / total })
        })
        .collect()
}
