//! Synthetic staggered-adoption panels with known group-time effects.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{Cohort, PanelDataset, PanelError, UnitSeries, WeightKind};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cohort {0} received no units")]
    InfeasibleShares(Cohort),
    #[error("cannot parse configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    /// First treated period; omit for the never-treated group.
    #[serde(default)]
    pub group: Option<i64>,
    pub share: f64,
    /// Loading of the assignment logit on each covariate.
    #[serde(default)]
    pub selection_covariates: Vec<f64>,
    /// Loading of the assignment logit on the unit effect.
    #[serde(default)]
    pub selection_unit_effect: f64,
}

impl CohortConfig {
    fn cohort(&self) -> Cohort {
        self.group.map_or(Cohort::Never, Cohort::Treated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovariateDistribution {
    #[default]
    Normal,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightDistribution {
    /// Every unit has weight 1 and no weight column is written.
    #[default]
    None,
    LogNormal {
        sigma: f64,
    },
    Uniform {
        low: f64,
        high: f64,
    },
}

/// Treatment effect `τ(g, e)` for `e ≥ 0`; zero before adoption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EffectSpec {
    /// `intercept + slope·e + group_slope·(g - first treated cohort)`.
    Linear {
        #[serde(default)]
        intercept: f64,
        #[serde(default)]
        slope: f64,
        #[serde(default)]
        group_slope: f64,
    },
    /// Explicit cells; missing cells have no effect.
    Table { cells: Vec<EffectCell> },
}

impl Default for EffectSpec {
    fn default() -> Self {
        EffectSpec::Linear { intercept: 0.0, slope: 0.0, group_slope: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectCell {
    pub group: i64,
    pub event_time: i64,
    pub effect: f64,
}

impl EffectSpec {
    fn effect(&self, group: i64, event_time: i64, first_group: i64) -> f64 {
        if event_time < 0 {
            return 0.0;
        }
        match self {
            EffectSpec::Linear { intercept, slope, group_slope } => {
                intercept + slope * event_time as f64 + group_slope * (group - first_group) as f64
            }
            EffectSpec::Table { cells } => {
                cells.iter().find(|c| c.group == group && c.event_time == event_time).map_or(0.0, |c| c.effect)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n_units: usize,
    pub periods: Vec<i64>,
    pub cohorts: Vec<CohortConfig>,
    pub unit_effect_sd: f64,
    /// Deterministic period effects added to the shocks; zero when empty.
    pub period_effects: Vec<f64>,
    pub period_shock_sd: f64,
    pub n_covariates: usize,
    pub covariate_distribution: CovariateDistribution,
    /// Loading of `ΔY(∞)` on each covariate: `Y(∞)` contains `X'λ·t`.
    pub trend_loadings: Vec<f64>,
    pub effect: EffectSpec,
    pub noise_sd: f64,
    pub weights: WeightDistribution,
    /// Number of units per cluster label; `0` writes no cluster column.
    pub cluster_size: usize,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n_units: 1000,
            periods: (1..=6).collect(),
            cohorts: vec![
                CohortConfig { group: Some(3), share: 0.25, selection_covariates: vec![], selection_unit_effect: 0.0 },
                CohortConfig { group: Some(5), share: 0.25, selection_covariates: vec![], selection_unit_effect: 0.0 },
                CohortConfig { group: None, share: 0.5, selection_covariates: vec![], selection_unit_effect: 0.0 },
            ],
            unit_effect_sd: 1.0,
            period_effects: vec![],
            period_shock_sd: 0.5,
            n_covariates: 0,
            covariate_distribution: CovariateDistribution::Normal,
            trend_loadings: vec![],
            effect: EffectSpec::default(),
            noise_sd: 1.0,
            weights: WeightDistribution::None,
            cluster_size: 0,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimulateError> {
        let cfg: DgpConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::InvalidConfig(m));
        if self.periods.len() < 2 || self.periods.windows(2).any(|w| w[0] >= w[1]) {
            return bad("periods must be at least two strictly increasing values".into());
        }
        if self.cohorts.is_empty() {
            return bad("no cohorts".into());
        }
        let total: f64 = self.cohorts.iter().map(|c| c.share).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("cohort shares sum to {total}, not 1"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cohorts {
            if !(c.share > 0.0) {
                return bad(format!("cohort {} has nonpositive share", c.cohort()));
            }
            if !seen.insert(c.cohort()) {
                return bad(format!("cohort {} listed twice", c.cohort()));
            }
            if let Some(g) = c.group {
                if !self.periods.contains(&g) {
                    return bad(format!("cohort {g} is not one of the periods"));
                }
            }
            if !c.selection_covariates.is_empty() && c.selection_covariates.len() != self.n_covariates {
                return bad(format!("cohort {} needs {} selection loadings", c.cohort(), self.n_covariates));
            }
        }
        if self.n_units < 4 * self.cohorts.len() {
            return bad(format!("n_units must be at least {}", 4 * self.cohorts.len()));
        }
        if !self.trend_loadings.is_empty() && self.trend_loadings.len() != self.n_covariates {
            return bad(format!("trend_loadings needs {} entries", self.n_covariates));
        }
        if !self.period_effects.is_empty() && self.period_effects.len() != self.periods.len() {
            return bad(format!("period_effects needs {} entries", self.periods.len()));
        }
        for (name, v) in [
            ("unit_effect_sd", self.unit_effect_sd),
            ("period_shock_sd", self.period_shock_sd),
            ("noise_sd", self.noise_sd),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name} must be nonnegative"));
            }
        }
        match self.weights {
            WeightDistribution::LogNormal { sigma } if !(sigma >= 0.0) => {
                return bad("lognormal sigma must be nonnegative".into())
            }
            WeightDistribution::Uniform { low, high } if !(low > 0.0 && high >= low) => {
                return bad("uniform weights need 0 < low <= high".into())
            }
            _ => {}
        }
        Ok(())
    }

    fn first_group(&self) -> i64 {
        self.cohorts.iter().filter_map(|c| c.group).min().unwrap_or(0)
    }

    /// `τ(g, e)` under this configuration.
    pub fn effect(&self, group: i64, event_time: i64) -> f64 {
        self.effect.effect(group, event_time, self.first_group())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueCell {
    pub group: i64,
    pub period: i64,
    pub event_time: i64,
    pub att: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueEventPoint {
    pub event_time: i64,
    pub att: f64,
}

/// Ground truth for a simulated panel. The event-study curve weights cohorts
/// by their realized weighted mass, the same weighting the estimator uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrueEffects {
    pub cells: Vec<TrueCell>,
    pub event_study: Vec<TrueEventPoint>,
}

impl TrueEffects {
    pub fn att(&self, group: i64, period: i64) -> Option<f64> {
        self.cells.iter().find(|c| c.group == group && c.period == period).map(|c| c.att)
    }

    pub fn event_time(&self, e: i64) -> Option<f64> {
        self.event_study.iter().find(|p| p.event_time == e).map(|p| p.att)
    }
}

/// Draws a panel from `cfg`. Each unit uses its own ChaCha stream keyed by
/// `(seed, unit)`, so the result is independent of thread scheduling.
pub fn simulate_staggered(cfg: &DgpConfig) -> Result<(PanelDataset, TrueEffects), SimulateError> {
    cfg.validate()?;
    let t = cfg.periods.len();
    let k = cfg.n_covariates;
    let mut period_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    period_rng.set_stream(0);
    let theta: Vec<f64> = (0..t)
        .map(|s| {
            let base = cfg.period_effects.get(s).copied().unwrap_or(0.0);
            let shock: f64 = period_rng.sample(StandardNormal);
            base + cfg.period_shock_sd * shock
        })
        .collect();
    let log_shares: Vec<f64> = cfg.cohorts.iter().map(|c| c.share.ln()).collect();
    let lambda: Vec<f64> = if cfg.trend_loadings.is_empty() { vec![0.0; k] } else { cfg.trend_loadings.clone() };
    let weight_kind = if cfg.weights == WeightDistribution::None { WeightKind::Uniform } else { WeightKind::Supplied };
    let width = (cfg.n_units.max(1) - 1).to_string().len();

    let units: Vec<UnitSeries> = (0..cfg.n_units)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let eta = cfg.unit_effect_sd * rng.sample::<f64, _>(StandardNormal);
            let x: Vec<f64> = (0..k)
                .map(|_| match cfg.covariate_distribution {
                    CovariateDistribution::Normal => rng.sample(StandardNormal),
                    CovariateDistribution::Uniform => rng.random::<f64>(),
                })
                .collect();
            let logits: Vec<f64> = cfg
                .cohorts
                .iter()
                .zip(&log_shares)
                .map(|(c, a)| {
                    let cov: f64 = c.selection_covariates.iter().zip(&x).map(|(g, x)| g * x).sum();
                    a + cov + c.selection_unit_effect * eta
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = probs.iter().sum();
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (j, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            let group = cfg.cohorts[pick].cohort();
            let weight = match cfg.weights {
                WeightDistribution::None => 1.0,
                WeightDistribution::LogNormal { sigma } => {
                    LogNormal::new(0.0, sigma).expect("validated sigma").sample(&mut rng)
                }
                WeightDistribution::Uniform { low, high } => {
                    if high > low {
                        rng.random_range(low..high)
                    } else {
                        low
                    }
                }
            };
            let noise = Normal::new(0.0, cfg.noise_sd).expect("validated noise sd");
            let trend: f64 = x.iter().zip(&lambda).map(|(x, l)| x * l).sum();
            let outcomes = cfg
                .periods
                .iter()
                .enumerate()
                .map(|(s, &p)| {
                    let untreated = eta + theta[s] + trend * p as f64 + noise.sample(&mut rng);
                    let effect = match group {
                        Cohort::Treated(g) => cfg.effect(g, (s as i64) - period_position(&cfg.periods, g)),
                        Cohort::Never => 0.0,
                    };
                    untreated + effect
                })
                .collect();
            UnitSeries {
                unit_id: format!("u{i:0width$}"),
                group,
                weight,
                cluster: (cfg.cluster_size > 0).then(|| format!("c{}", i / cfg.cluster_size)),
                outcomes,
                covariates: (0..t).flat_map(|_| x.iter().copied()).collect(),
            }
        })
        .collect();

    let mut mass: BTreeMap<Cohort, f64> = BTreeMap::new();
    for u in &units {
        *mass.entry(u.group).or_default() += u.weight;
    }
    for c in &cfg.cohorts {
        if !mass.contains_key(&c.cohort()) {
            return Err(SimulateError::InfeasibleShares(c.cohort()));
        }
    }
    let names = (1..=k).map(|j| format!("x{j}")).collect();
    let data = PanelDataset::new(units, cfg.periods.clone(), names, weight_kind)?;
    Ok((data, true_effects(cfg, &mass)))
}

fn period_position(periods: &[i64], g: i64) -> i64 {
    periods.iter().position(|&p| p == g).expect("validated cohort") as i64
}

fn true_effects(cfg: &DgpConfig, mass: &BTreeMap<Cohort, f64>) -> TrueEffects {
    let mut cells = Vec::new();
    let mut by_event: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for (&cohort, &m) in mass {
        let Cohort::Treated(g) = cohort else { continue };
        let gi = period_position(&cfg.periods, g);
        for (s, &p) in cfg.periods.iter().enumerate() {
            let e = s as i64 - gi;
            let att = cfg.effect(g, e);
            cells.push(TrueCell { group: g, period: p, event_time: e, att });
            // Cohorts without a pre-period never enter the estimated curve.
            if gi > 0 && e != -1 {
                let slot = by_event.entry(e).or_default();
                slot.0 += m * att;
                slot.1 += m;
            }
        }
    }
    let event_study =
        by_event.into_iter().map(|(e, (num, den))| TrueEventPoint { event_time: e, att: num / den }).collect();
    TrueEffects { cells, event_study }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{load_panel, write_panel, Schema};

    fn ramp(n: usize, seed: u64) -> DgpConfig {
        DgpConfig {
            n_units: n,
            seed,
            effect: EffectSpec::Linear { intercept: 1.0, slope: 1.0, group_slope: 0.0 },
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = DgpConfig { n_covariates: 2, weights: WeightDistribution::LogNormal { sigma: 0.5 }, ..ramp(300, 4) };
        let render = |cfg: &DgpConfig| {
            let (d, _) = simulate_staggered(cfg).unwrap();
            let mut buf = Vec::new();
            write_panel(&d, &mut buf, 0).unwrap();
            buf
        };
        let a = render(&cfg);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| render(&cfg));
        assert_eq!(a, b);
        assert_ne!(a, render(&DgpConfig { seed: 5, ..cfg }));
    }

    #[test]
    fn csv_round_trip_at_paper_scale() {
        let cfg = DgpConfig { n_units: 2604, periods: (2009..=2019).collect(), n_covariates: 6, ..Default::default() };
        let cfg = DgpConfig {
            cohorts: vec![
                CohortConfig {
                    group: Some(2014),
                    share: 0.4,
                    selection_covariates: vec![],
                    selection_unit_effect: 0.0,
                },
                CohortConfig { group: None, share: 0.6, selection_covariates: vec![], selection_unit_effect: 0.0 },
            ],
            ..cfg
        };
        let (d, _) = simulate_staggered(&cfg).unwrap();
        let mut buf = Vec::new();
        write_panel(&d, &mut buf, 0).unwrap();
        let back = load_panel(buf.as_slice(), &Schema::default()).unwrap();
        assert_eq!(back.covariate_names().len(), 6);
        assert_eq!(back, d);
    }

    #[test]
    fn truth_follows_effect_function() {
        let (d, truth) = simulate_staggered(&ramp(400, 1)).unwrap();
        assert_eq!(truth.att(3, 5), Some(3.0));
        assert_eq!(truth.att(5, 4), Some(0.0));
        assert_eq!(truth.event_time(0), Some(1.0));
        assert_eq!(truth.event_time(3), Some(4.0));
        assert_eq!(truth.event_time(-1), None);
        assert_eq!(d.n_units(), 400);
    }

    #[test]
    fn noiseless_panel_reproduces_truth_exactly() {
        let cfg = DgpConfig { noise_sd: 0.0, period_shock_sd: 0.3, ..ramp(200, 2) };
        let (d, truth) = simulate_staggered(&cfg).unwrap();
        let table = crate::staggered::att_gt(&d, &Default::default()).unwrap();
        for c in &table.cells {
            assert!((c.estimate - truth.att(c.group, c.period).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ramp(100, 0);
        cfg.cohorts[0].share = 0.5;
        assert!(matches!(simulate_staggered(&cfg), Err(SimulateError::InvalidConfig(_))));
        let small = ramp(8, 0);
        assert!(matches!(simulate_staggered(&small), Err(SimulateError::InvalidConfig(_))));
        let text = r#"
            n_units = 50
            periods = [1, 2, 3]
            seed = 9
            [[cohorts]]
            group = 2
            share = 0.5
            [[cohorts]]
            share = 0.5
            [effect]
            kind = "linear"
            intercept = 2.0
            [weights]
            kind = "uniform"
            low = 1.0
            high = 2.0
        "#;
        let cfg = DgpConfig::from_toml(text).unwrap();
        assert_eq!(cfg.effect(2, 0), 2.0);
        assert!(DgpConfig::from_toml("n_units = 10\nbogus = 1").is_err());
    }

    #[test]
    fn rare_cohort_can_be_infeasible() {
        let cfg = DgpConfig {
            n_units: 12,
            cohorts: vec![
                CohortConfig { group: Some(3), share: 1e-9, selection_covariates: vec![], selection_unit_effect: 0.0 },
                CohortConfig {
                    group: None,
                    share: 1.0 - 1e-9,
                    selection_covariates: vec![],
                    selection_unit_effect: 0.0,
                },
            ],
            ..Default::default()
        };
        assert!(matches!(simulate_staggered(&cfg), Err(SimulateError::InfeasibleShares(Cohort::Treated(3)))));
    }

    #[test]
    fn selection_on_unit_effect_keeps_trends_parallel() {
        let cfg = DgpConfig {
            n_units: 50_000,
            seed: 17,
            cohorts: vec![
                CohortConfig { group: Some(4), share: 0.5, selection_covariates: vec![], selection_unit_effect: 1.5 },
                CohortConfig { group: None, share: 0.5, selection_covariates: vec![], selection_unit_effect: 0.0 },
            ],
            ..Default::default()
        };
        let (d, _) = simulate_staggered(&cfg).unwrap();
        let (mut sums, mut counts) = ([0.0; 2], [0.0; 2]);
        let mut levels = [0.0; 2];
        for u in d.units() {
            let j = usize::from(u.group.is_never());
            sums[j] += u.outcomes[1] - u.outcomes[0];
            levels[j] += u.outcomes[0];
            counts[j] += 1.0;
        }
        // Levels differ through selection, changes do not.
        assert!((levels[0] / counts[0] - levels[1] / counts[1]).abs() > 0.3);
        assert!((sums[0] / counts[0] - sums[1] / counts[1]).abs() < 0.02 * cfg.noise_sd);
    }
}
