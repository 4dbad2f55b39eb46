//! Workloads shared by the benchmarks.

use didlab::panel::PanelDataset;
use didlab::simulate::{simulate_staggered, CohortConfig, DgpConfig, EffectSpec};

/// A panel with 2,604 units, 11 periods and 6 covariates, five adoption
/// cohorts and covariate-driven selection.
pub fn county_sized_panel(seed: u64) -> PanelDataset {
    let selection = |a: f64| vec![a, -0.5 * a, 0.25, 0.0, 0.0, 0.1];
    let mut cohorts: Vec<CohortConfig> = [4, 5, 6, 7, 8]
        .iter()
        .enumerate()
        .map(|(i, &g)| CohortConfig {
            group: Some(g),
            share: 0.1,
            selection_covariates: selection(0.2 * i as f64),
            selection_unit_effect: 0.0,
        })
        .collect();
    cohorts.push(CohortConfig {
        group: None,
        share: 0.5,
        selection_covariates: vec![0.0; 6],
        selection_unit_effect: 0.0,
    });
    let cfg = DgpConfig {
        n_units: 2604,
        periods: (1..=11).collect(),
        cohorts,
        n_covariates: 6,
        trend_loadings: vec![0.3, -0.2, 0.1, 0.0, 0.05, -0.1],
        effect: EffectSpec::Linear { intercept: 1.0, slope: 0.5, group_slope: 0.0 },
        cluster_size: 4,
        seed,
        ..Default::default()
    };
    simulate_staggered(&cfg).expect("benchmark design is valid").0
}
