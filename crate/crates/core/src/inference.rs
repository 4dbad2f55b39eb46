//! Inference from influence functions: cluster-robust covariance,
//! multiplier-bootstrap simultaneous bands, a joint pre-trend Wald test and
//! relative-magnitude sensitivity bounds.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::aggregate::{normal_quantile, EventStudyCurve, Interval};
use crate::linalg::symmetric_inverse;
use crate::staggered::GroupTimeTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("at least two clusters are required")]
    SingleCluster,
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("at least 199 bootstrap draws are required, got {0}")]
    TooFewDraws(usize),
    #[error("every coordinate has zero standard error")]
    AllDegenerate,
    #[error("no pre-treatment estimates available")]
    NoPretrends,
    #[error("event time {0} is not on the curve")]
    MissingEventTime(i64),
    #[error("target event time must be nonnegative, got {0}")]
    PreTreatmentTarget(i64),
    #[error("violation bound must be nonnegative, got {0}")]
    NegativeBound(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Sums influence rows within clusters: returns a `clusters x p` matrix.
fn cluster_sums(influence: &DMatrix<f64>, clusters: &[usize]) -> DMatrix<f64> {
    let n_clusters = clusters.iter().max().map_or(0, |m| m + 1);
    let mut sums = DMatrix::zeros(n_clusters, influence.ncols());
    for (i, &c) in clusters.iter().enumerate() {
        for j in 0..influence.ncols() {
            sums[(c, j)] += influence[(i, j)];
        }
    }
    sums
}

/// Standard error of one influence vector with cluster-summed
/// contributions: `sqrt(Σ_c s_c²) / n`. An empty `clusters` slice means
/// every unit is its own cluster.
pub fn cluster_se(influence: &[f64], clusters: &[usize]) -> f64 {
    let n = influence.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    if clusters.is_empty() {
        return influence.iter().map(|v| v * v).sum::<f64>().sqrt() / n;
    }
    let n_clusters = clusters.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![0.0; n_clusters];
    for (v, &c) in influence.iter().zip(clusters) {
        sums[c] += v;
    }
    sums.iter().map(|s| s * s).sum::<f64>().sqrt() / n
}

/// Stacks influence vectors as the columns of an `n x p` matrix.
pub fn influence_matrix<'a>(columns: impl IntoIterator<Item = &'a [f64]>) -> DMatrix<f64> {
    let cols: Vec<&[f64]> = columns.into_iter().collect();
    let n = cols.first().map_or(0, |c| c.len());
    DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])
}

fn check_clusters(influence: &DMatrix<f64>, clusters: &[usize]) -> Result<(), InferenceError> {
    if clusters.len() != influence.nrows() {
        return Err(InferenceError::Dimension(format!(
            "{} cluster labels for {} influence rows",
            clusters.len(),
            influence.nrows()
        )));
    }
    let distinct: std::collections::BTreeSet<usize> = clusters.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(InferenceError::SingleCluster);
    }
    Ok(())
}

/// Cluster-robust covariance `(1/n²) Σ_c s_c s_c'` and its diagonal roots.
pub fn clustered_se(influence: &DMatrix<f64>, clusters: &[usize]) -> Result<(Vec<f64>, DMatrix<f64>), InferenceError> {
    check_clusters(influence, clusters)?;
    let n = influence.nrows() as f64;
    let sums = cluster_sums(influence, clusters);
    let cov = sums.transpose() * &sums / (n * n);
    let se = (0..cov.nrows()).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    Ok((se, cov))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Multiplier {
    #[default]
    Rademacher,
    Mammen,
}

impl FromStr for Multiplier {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rademacher" => Ok(Multiplier::Rademacher),
            "mammen" => Ok(Multiplier::Mammen),
            _ => Err(format!("unknown multiplier `{s}`; valid values: rademacher, mammen")),
        }
    }
}

impl fmt::Display for Multiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Multiplier::Rademacher => "rademacher",
            Multiplier::Mammen => "mammen",
        })
    }
}

impl Multiplier {
    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Multiplier::Rademacher => {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            }
            Multiplier::Mammen => {
                let s5 = 5f64.sqrt();
                if rng.random::<f64>() < (s5 + 1.0) / (2.0 * s5) {
                    -(s5 - 1.0) / 2.0
                } else {
                    (s5 + 1.0) / 2.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandOptions {
    pub level: f64,
    pub draws: usize,
    pub seed: u64,
    pub multiplier: Multiplier,
}

impl Default for BandOptions {
    fn default() -> Self {
        BandOptions { level: 0.95, draws: 999, seed: 0, multiplier: Multiplier::Rademacher }
    }
}

pub const MIN_DRAWS: usize = 199;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandResult {
    pub level: f64,
    pub pointwise_critical: f64,
    /// Bootstrap quantile of the maximal |t| statistic.
    pub sup_t_critical: f64,
    /// Critical value applied to the bands: the larger of the two above.
    pub critical_used: f64,
    pub se: Vec<f64>,
    pub bands: Vec<Interval>,
    pub draws: usize,
    pub multiplier: Multiplier,
    pub seed: u64,
    /// Coordinates with zero standard error, excluded from the maximum.
    pub degenerate: Vec<usize>,
}

/// Simultaneous confidence band by the multiplier bootstrap.
///
/// Draw `b` perturbs each cluster's influence sum by an independent
/// multiplier from a ChaCha stream keyed by `(seed, b)`, so results do not
/// depend on how draws are scheduled across threads.
pub fn sup_t_band(
    influence: &DMatrix<f64>,
    estimates: &[f64],
    clusters: &[usize],
    opts: BandOptions,
) -> Result<BandResult, InferenceError> {
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(InferenceError::InvalidLevel(opts.level));
    }
    if opts.draws < MIN_DRAWS {
        return Err(InferenceError::TooFewDraws(opts.draws));
    }
    if estimates.len() != influence.ncols() {
        return Err(InferenceError::Dimension("one estimate per influence column required".into()));
    }
    let (se, _) = clustered_se(influence, clusters)?;
    let n = influence.nrows() as f64;
    let sums = cluster_sums(influence, clusters);
    let active: Vec<usize> = (0..se.len()).filter(|&j| se[j] > 0.0).collect();
    let degenerate: Vec<usize> = (0..se.len()).filter(|&j| se[j] <= 0.0).collect();
    if active.is_empty() {
        return Err(InferenceError::AllDegenerate);
    }
    // Scale cluster sums so each draw's statistic is |v' s_j| directly.
    let scaled = DMatrix::from_fn(sums.nrows(), active.len(), |c, k| sums[(c, active[k])] / (n * se[active[k]]));
    let n_clusters = sums.nrows();
    let mut maxima: Vec<f64> = (0..opts.draws)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(b as u64);
            let v = DVector::from_fn(n_clusters, |_, _| opts.multiplier.draw(&mut rng));
            let t = scaled.tr_mul(&v);
            t.iter().fold(0.0f64, |m, x| m.max(x.abs()))
        })
        .collect();
    maxima.sort_by(f64::total_cmp);
    let idx = ((opts.level * opts.draws as f64).ceil() as usize).clamp(1, opts.draws) - 1;
    let sup_t_critical = maxima[idx];
    let pointwise_critical = normal_quantile(opts.level);
    let critical_used = sup_t_critical.max(pointwise_critical);
    let bands = estimates.iter().zip(&se).map(|(&e, &s)| Interval::around(e, critical_used * s)).collect();
    Ok(BandResult {
        level: opts.level,
        pointwise_critical,
        sup_t_critical,
        critical_used,
        se,
        bands,
        draws: opts.draws,
        multiplier: opts.multiplier,
        seed: opts.seed,
        degenerate,
    })
}

/// Computes simultaneous bands for every point of `curve` and stores them,
/// refreshing the pointwise intervals at the same level.
pub fn attach_bands(curve: &mut EventStudyCurve, opts: BandOptions) -> Result<BandResult, InferenceError> {
    let infl = influence_matrix(curve.points.iter().map(|p| p.influence.as_slice()));
    let est: Vec<f64> = curve.points.iter().map(|p| p.estimate).collect();
    let clusters: Vec<usize> =
        if curve.clusters.is_empty() { (0..infl.nrows()).collect() } else { curve.clusters.clone() };
    let band = sup_t_band(&infl, &est, &clusters, opts)?;
    curve.level = opts.level;
    for (p, b) in curve.points.iter_mut().zip(&band.bands) {
        p.pointwise = Interval::around(p.estimate, band.pointwise_critical * p.se);
        p.simultaneous = Some(*b);
    }
    Ok(band)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Numerical rank of the covariance; below `dof` when the
    /// pseudo-inverse was used.
    pub rank: usize,
    pub pseudo_inverse: bool,
}

/// Joint Wald test that every pre-treatment cell of `table` is zero.
pub fn pretrend_joint_test(table: &GroupTimeTable) -> Result<WaldTest, InferenceError> {
    let pre: Vec<_> = table.pre_cells().collect();
    if pre.is_empty() {
        return Err(InferenceError::NoPretrends);
    }
    let infl = influence_matrix(pre.iter().map(|c| c.influence.as_slice()));
    let clusters: Vec<usize> =
        if table.clusters.is_empty() { (0..infl.nrows()).collect() } else { table.clusters.clone() };
    let (_, cov) = clustered_se(&infl, &clusters)?;
    let tau = DVector::from_iterator(pre.len(), pre.iter().map(|c| c.estimate));
    wald(&tau, &cov)
}

/// `τ' V⁻¹ τ` against χ² with as many degrees of freedom as the rank of `V`.
pub fn wald(tau: &DVector<f64>, cov: &DMatrix<f64>) -> Result<WaldTest, InferenceError> {
    let p = tau.len();
    let (inv, rank) = symmetric_inverse(cov);
    let statistic = (tau.transpose() * &inv * tau)[(0, 0)].max(0.0);
    let p_value = if rank == 0 || statistic == 0.0 {
        1.0
    } else {
        ChiSquared::new(rank as f64).map(|d| d.sf(statistic)).unwrap_or(f64::NAN)
    };
    Ok(WaldTest { statistic, dof: rank, p_value, rank, pseudo_inverse: rank < p })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    /// Budget is `M̄` times the largest step between adjacent pre-period estimates.
    #[default]
    MaxPreStep,
    /// Budget is `M̄` itself, in outcome units.
    Absolute,
}

impl FromStr for Benchmark {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max_pre_step" => Ok(Benchmark::MaxPreStep),
            "absolute" => Ok(Benchmark::Absolute),
            _ => Err(format!("unknown benchmark `{s}`; valid values: max_pre_step, absolute")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensitivityOptions {
    pub target_event_time: i64,
    pub mbar: f64,
    pub benchmark: Benchmark,
    pub level: f64,
    /// Multiply the budget by the number of post periods up to the target.
    pub cumulate: bool,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        SensitivityOptions {
            target_event_time: 0,
            mbar: 1.0,
            benchmark: Benchmark::MaxPreStep,
            level: 0.95,
            cumulate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityResult {
    pub target_event_time: i64,
    pub mbar: f64,
    pub benchmark: Benchmark,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_pre_step: Option<f64>,
    /// Half-width of the identified set.
    pub budget: f64,
    pub estimate: f64,
    pub se: f64,
    pub identified_set: Interval,
    pub robust_ci: Interval,
    pub level: f64,
}

/// Largest absolute change between consecutive pre-treatment event times,
/// counting the normalized reference `τ(-1) = 0`.
pub fn max_pre_step(curve: &EventStudyCurve) -> Option<f64> {
    let mut pre: Vec<(i64, f64)> =
        curve.points.iter().filter(|p| p.event_time < 0).map(|p| (p.event_time, p.estimate)).collect();
    if pre.is_empty() {
        return None;
    }
    if !pre.iter().any(|&(e, _)| e == -1) {
        pre.push((-1, 0.0));
    }
    pre.sort_by_key(|&(e, _)| e);
    pre.windows(2).map(|w| (w[1].1 - w[0].1).abs()).reduce(f64::max)
}

/// Bounds for the effect at `target_event_time` when post-treatment
/// violations of parallel trends are at most the chosen budget.
///
/// The robust interval widens the identified set by the pointwise normal
/// margin of the target estimate.
pub fn sensitivity_bounds(
    curve: &EventStudyCurve,
    opts: SensitivityOptions,
) -> Result<SensitivityResult, InferenceError> {
    if opts.target_event_time < 0 {
        return Err(InferenceError::PreTreatmentTarget(opts.target_event_time));
    }
    if !(opts.mbar >= 0.0) {
        return Err(InferenceError::NegativeBound(opts.mbar));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(InferenceError::InvalidLevel(opts.level));
    }
    let target = curve.point(opts.target_event_time).ok_or(InferenceError::MissingEventTime(opts.target_event_time))?;
    let step = max_pre_step(curve);
    let per_period = match opts.benchmark {
        Benchmark::Absolute => opts.mbar,
        Benchmark::MaxPreStep => opts.mbar * step.ok_or(InferenceError::NoPretrends)?,
    };
    let budget = if opts.cumulate { per_period * (opts.target_event_time + 1) as f64 } else { per_period };
    let identified_set = Interval::around(target.estimate, budget);
    let margin = normal_quantile(opts.level) * target.se;
    Ok(SensitivityResult {
        target_event_time: opts.target_event_time,
        mbar: opts.mbar,
        benchmark: opts.benchmark,
        max_pre_step: step,
        budget,
        estimate: target.estimate,
        se: target.se,
        robust_ci: Interval { lower: identified_set.lower - margin, upper: identified_set.upper + margin },
        identified_set,
        level: opts.level,
    })
}
