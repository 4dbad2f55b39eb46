//! Data builders shared by the integration tests.
#![allow(dead_code)]

use didlab::did2x2::{FnDesign, TwoByTwoFrame};
use didlab::panel::{Cohort, PanelDataset, UnitSeries, WeightKind};
use didlab::simulate::{CohortConfig, DgpConfig, EffectSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn unit(id: usize, group: Cohort, weight: f64, outcomes: Vec<f64>, covariates: Vec<f64>) -> UnitSeries {
    UnitSeries { unit_id: format!("u{id:05}"), group, weight, cluster: None, outcomes, covariates }
}

/// Two-period panel whose arm-by-period weighted means are exactly
/// `[treated pre, comparison pre, treated post, comparison post]`.
/// Units come in pairs with equal weight and opposite deviations.
pub fn four_means_panel(means: [f64; 4], pair_weights: &[f64]) -> PanelDataset {
    let mut units = Vec::new();
    for (arm, group) in [(0, Cohort::Treated(2)), (1, Cohort::Never)] {
        for (p, &w) in pair_weights.iter().enumerate() {
            for sign in [1.0, -1.0] {
                let d = sign * (1.0 + p as f64);
                let id = units.len();
                units.push(unit(id, group, w, vec![means[arm] + d, means[arm + 2] + 0.5 * d], vec![]));
            }
        }
    }
    let kind = if pair_weights.iter().all(|&w| w == 1.0) { WeightKind::Uniform } else { WeightKind::Supplied };
    PanelDataset::new(units, vec![1, 2], vec![], kind).unwrap()
}

/// Noisy panel over `periods` with cohorts cycled from `groups`; effects
/// grow with event time when `dynamic`.
pub fn random_panel(seed: u64, n: usize, periods: &[i64], groups: &[Cohort], dynamic: bool) -> PanelDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = (0..n)
        .map(|i| {
            let g = groups[i % groups.len()];
            let eta: f64 = rng.sample(StandardNormal);
            let outcomes = periods
                .iter()
                .map(|&p| {
                    let effect = match g {
                        Cohort::Treated(gv) if gv <= p => 1.0 + if dynamic { (p - gv) as f64 } else { 0.0 },
                        _ => 0.0,
                    };
                    let noise: f64 = rng.sample(StandardNormal);
                    eta + 0.2 * p as f64 + effect + noise
                })
                .collect();
            unit(i, g, rng.random_range(0.5..4.0), outcomes, vec![])
        })
        .collect();
    PanelDataset::new(units, periods.to_vec(), vec![], WeightKind::Supplied).unwrap()
}

/// Which working model is deliberately wrong in the robustness simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Misspecified {
    Outcome,
    Propensity,
}

pub const TRUE_EFFECT: f64 = 1.0;

/// One cross-section for the double-robustness check. Covariates are
/// `(x1, x2)`; selection loads on `x1` and `x2²`, the untreated trend on
/// `x1` and `x1²`, and the effect is constant.
pub fn robustness_frame(seed: u64, n: usize) -> TwoByTwoFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut treated = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    let mut cov = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let x1: f64 = rng.sample(StandardNormal);
        let x2: f64 = rng.sample(StandardNormal);
        let index = -0.4 + 0.8 * x1 + 0.4 * (x2 * x2 - 1.0);
        let d = rng.random::<f64>() < 1.0 / (1.0 + (-index).exp());
        let noise: f64 = rng.sample(StandardNormal);
        let trend = 1.0 + 2.0 * x1 + 0.5 * x1 * x1;
        dy.push(trend + if d { TRUE_EFFECT } else { 0.0 } + noise);
        treated.push(d);
        cov.extend([x1, x2]);
    }
    TwoByTwoFrame::from_parts(treated, dy, vec![1.0; n], cov, 2).unwrap()
}

pub type Design = FnDesign<fn(&[f64]) -> Vec<f64>>;

pub fn correct_outcome() -> Design {
    FnDesign(|x| vec![1.0, x[0], x[0] * x[0]])
}

pub fn correct_propensity() -> Design {
    FnDesign(|x| vec![1.0, x[0], x[1] * x[1]])
}

/// Omits the covariate that drives both selection and trends.
pub fn wrong_design() -> Design {
    FnDesign(|x| vec![1.0, x[1]])
}

/// Staggered design with covariate-driven selection and covariate-specific
/// untreated trends; effects `1 + e`.
pub fn selection_config(n_units: usize, seed: u64) -> DgpConfig {
    let cohort = |g: i64, share: f64, sel: [f64; 2]| CohortConfig {
        group: Some(g),
        share,
        selection_covariates: sel.to_vec(),
        selection_unit_effect: 0.0,
    };
    DgpConfig {
        n_units,
        seed,
        periods: (1..=8).collect(),
        cohorts: vec![
            cohort(3, 0.15, [0.8, -0.4]),
            cohort(4, 0.15, [0.6, 0.0]),
            cohort(5, 0.15, [0.4, 0.4]),
            cohort(6, 0.15, [0.2, 0.6]),
            CohortConfig { group: None, share: 0.4, selection_covariates: vec![0.0, 0.0], selection_unit_effect: 0.0 },
        ],
        n_covariates: 2,
        trend_loadings: vec![0.5, -0.3],
        effect: EffectSpec::Linear { intercept: 1.0, slope: 1.0, group_slope: 0.0 },
        ..Default::default()
    }
}

/// Effects and covariate trends switched off.
pub fn null_config(n_units: usize, seed: u64) -> DgpConfig {
    DgpConfig { n_units, seed, ..Default::default() }
}

pub fn mean_and_mc_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
