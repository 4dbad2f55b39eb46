//! Working models for the covariate-adjusted estimators: a weighted linear
//! outcome regression and a weighted logistic propensity model, plus an
//! overlap summary of fitted scores.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{first_dependent_column, PivotedQr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NuisanceError {
    #[error("design is rank deficient: column {0} is collinear with earlier columns")]
    RankDeficient(usize),
    #[error("no observations with positive weight")]
    EmptySample,
    #[error("label class {0} has no observations with positive weight")]
    EmptyClass(u8),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Fitted weighted linear regression.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModelFit {
    pub coefficients: DVector<f64>,
    pub n_obs: usize,
    pub weighted_rss: f64,
    /// `(X'WX)^{-1}` on the estimation sample, used for influence corrections.
    pub xtwx_inverse: DMatrix<f64>,
}

impl OutcomeModelFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        x.iter().zip(self.coefficients.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn predict_all(&self, x: &DMatrix<f64>) -> DVector<f64> {
        x * &self.coefficients
    }
}

fn check_dims(x: &DMatrix<f64>, y_len: usize, w: &[f64]) -> Result<(), NuisanceError> {
    if x.nrows() != y_len || x.nrows() != w.len() {
        return Err(NuisanceError::Dimension(format!(
            "design has {} rows, response {}, weights {}",
            x.nrows(),
            y_len,
            w.len()
        )));
    }
    if w.iter().any(|v| !(*v >= 0.0)) {
        return Err(NuisanceError::Dimension("weights must be nonnegative".into()));
    }
    Ok(())
}

/// Builds the row-scaled system `sqrt(w) X`, `sqrt(w) y` over positive-weight rows.
fn scaled_system(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let rows: Vec<usize> = (0..x.nrows()).filter(|&i| w[i] > 0.0).collect();
    let p = x.ncols();
    let mut a = DMatrix::zeros(rows.len(), p);
    let mut b = DVector::zeros(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        let s = w[i].sqrt();
        for j in 0..p {
            a[(r, j)] = s * x[(i, j)];
        }
        b[r] = s * y[i];
    }
    (a, b)
}

fn factor(a: DMatrix<f64>) -> Result<PivotedQr, NuisanceError> {
    let check = a.clone();
    let qr = PivotedQr::new(a);
    if qr.rank() < qr.ncols() {
        let col = first_dependent_column(&check).unwrap_or(qr.rank());
        return Err(NuisanceError::RankDeficient(col));
    }
    Ok(qr)
}

/// Weighted least squares `argmin Σ w_i (y_i - x_i'β)^2` via pivoted QR.
///
/// Zero-weight rows are dropped before factorization. A rank-deficient
/// design is an error naming the first collinear column.
pub fn fit_wls(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<OutcomeModelFit, NuisanceError> {
    check_dims(x, y.len(), w)?;
    let (a, b) = scaled_system(x, y, w);
    if a.nrows() == 0 {
        return Err(NuisanceError::EmptySample);
    }
    let n_obs = a.nrows();
    let qr = factor(a.clone())?;
    let coefficients = qr.solve(&b);
    let resid = &b - &a * &coefficients;
    Ok(OutcomeModelFit { weighted_rss: resid.norm_squared(), coefficients, n_obs, xtwx_inverse: qr.gram_inverse() })
}

/// Fitted weighted logistic regression.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityFit {
    pub coefficients: DVector<f64>,
    /// Fitted probabilities for every input row (including zero-weight rows).
    pub fitted_scores: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of the weighted score divided by the total weight.
    pub gradient_norm: f64,
    /// Coefficients diverged: the classes are (quasi-)separated.
    pub separation: bool,
    /// `(Σ w p(1-p) x x')^{-1}` at the final coefficients.
    pub information_inverse: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogitOptions {
    fn default() -> Self {
        LogitOptions { tol: 1e-8, max_iter: 100 }
    }
}

const MAX_HALVINGS: usize = 30;
const SEPARATION_NORM: f64 = 1e3;
const FLAT_SHIFT: f64 = 1e-3;

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Weighted logistic log-likelihood `Σ w (y η - log(1 + e^η))`.
pub fn logit_log_likelihood(x: &DMatrix<f64>, labels: &[bool], w: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    (0..x.nrows())
        .filter(|&i| w[i] > 0.0)
        .map(|i| w[i] * (if labels[i] { eta[i] } else { 0.0 } - softplus(eta[i])))
        .sum()
}

/// Gradient of [`logit_log_likelihood`]: `Σ w x (y - p)`.
pub fn logit_score(x: &DMatrix<f64>, labels: &[bool], w: &[f64], beta: &DVector<f64>) -> DVector<f64> {
    let eta = x * beta;
    let mut g = DVector::zeros(x.ncols());
    for i in 0..x.nrows() {
        if w[i] > 0.0 {
            let r = w[i] * (f64::from(u8::from(labels[i])) - logistic(eta[i]));
            g.axpy(r, &x.row(i).transpose(), 1.0);
        }
    }
    g
}

fn information(x: &DMatrix<f64>, w: &[f64], p: &[f64]) -> DMatrix<f64> {
    let k = x.ncols();
    let mut h = DMatrix::zeros(k, k);
    for i in 0..x.nrows() {
        let v = w[i] * p[i] * (1.0 - p[i]);
        if v > 0.0 {
            let row = x.row(i);
            h.ger(v, &row.transpose(), &row.transpose(), 1.0);
        }
    }
    h
}

/// Weighted logistic regression by IRLS from the zero vector with
/// step-halving on likelihood decrease.
pub fn fit_logit(
    x: &DMatrix<f64>,
    labels: &[bool],
    w: &[f64],
    opts: LogitOptions,
) -> Result<PropensityFit, NuisanceError> {
    check_dims(x, labels.len(), w)?;
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(NuisanceError::EmptySample);
    }
    for class in [false, true] {
        if !(0..w.len()).any(|i| labels[i] == class && w[i] > 0.0) {
            return Err(NuisanceError::EmptyClass(u8::from(class)));
        }
    }
    let rows: Vec<usize> = (0..x.nrows()).filter(|&i| w[i] > 0.0).collect();
    let k = x.ncols();
    // Rank check on the support, once.
    let (a0, _) = scaled_system(x, &vec![0.0; x.nrows()], w);
    factor(a0)?;

    let newton_step = |beta: &DVector<f64>| -> Option<DVector<f64>> {
        let eta = x * beta;
        let mut a = DMatrix::zeros(rows.len(), k);
        let mut b = DVector::zeros(rows.len());
        for (r, &i) in rows.iter().enumerate() {
            let p = logistic(eta[i]);
            let v = p * (1.0 - p);
            if v <= 1e-300 {
                continue;
            }
            let s = (w[i] * v).sqrt();
            for j in 0..k {
                a[(r, j)] = s * x[(i, j)];
            }
            b[r] = w[i].sqrt() * (f64::from(u8::from(labels[i])) - p) / v.sqrt();
        }
        let qr = PivotedQr::new(a);
        (qr.rank() == k).then(|| qr.solve(&b))
    };
    // Largest change the step makes to any linear predictor; invariant to
    // covariate scaling, O(1) along a separating direction.
    let predictor_shift = |step: &DVector<f64>| (x * step).amax();

    let mut beta = DVector::zeros(k);
    let mut ll = logit_log_likelihood(x, labels, w, &beta);
    let mut iterations = 0;
    let mut separation = false;
    let mut converged = false;
    let grad_norm = |beta: &DVector<f64>| logit_score(x, labels, w, beta).amax() / total;
    let mut gnorm = grad_norm(&beta);
    loop {
        let Some(step) = newton_step(&beta) else {
            separation = true;
            break;
        };
        if gnorm <= opts.tol {
            if predictor_shift(&step) <= FLAT_SHIFT {
                // Polish with the final full Newton step.
                let cand = &beta + &step;
                let cand_ll = logit_log_likelihood(x, labels, w, &cand);
                if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                    beta = cand;
                    gnorm = grad_norm(&beta);
                }
                converged = gnorm <= opts.tol;
            } else {
                separation = true;
            }
            break;
        }
        if iterations == opts.max_iter {
            break;
        }
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &beta + &step * t;
            let cand_ll = logit_log_likelihood(x, labels, w, &cand);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        gnorm = grad_norm(&beta);
        if beta.norm() > SEPARATION_NORM {
            separation = true;
            break;
        }
        if !accepted {
            break;
        }
    }
    let eta = x * &beta;
    let fitted_scores: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
    let (information_inverse, _) = crate::linalg::symmetric_inverse(&information(x, w, &fitted_scores));
    Ok(PropensityFit {
        converged: converged && !separation,
        coefficients: beta,
        fitted_scores,
        iterations,
        gradient_norm: gnorm,
        separation,
        information_inverse,
    })
}

/// Summary of fitted-score overlap between arms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    pub treated_range: (f64, f64),
    pub comparison_range: (f64, f64),
    pub trim_threshold: f64,
    /// Row indices of comparison units whose score exceeds the threshold.
    pub flagged: Vec<usize>,
    /// Counts over 20 equal-width bins on [0, 1].
    pub treated_histogram: Vec<usize>,
    pub comparison_histogram: Vec<usize>,
}

pub const OVERLAP_BINS: usize = 20;
pub const DEFAULT_TRIM: f64 = 0.995;

/// Reports score ranges per arm and flags comparison units above
/// `trim_threshold`. Never alters the inputs; trimming is up to the caller.
pub fn overlap_report(fit: &PropensityFit, treated: &[bool], trim_threshold: f64) -> OverlapReport {
    let mut treated_histogram = vec![0; OVERLAP_BINS];
    let mut comparison_histogram = vec![0; OVERLAP_BINS];
    let mut tr = (f64::INFINITY, f64::NEG_INFINITY);
    let mut cr = tr;
    let mut flagged = Vec::new();
    for (i, (&s, &d)) in fit.fitted_scores.iter().zip(treated).enumerate() {
        let bin = ((s * OVERLAP_BINS as f64) as usize).min(OVERLAP_BINS - 1);
        let (hist, range) = if d { (&mut treated_histogram, &mut tr) } else { (&mut comparison_histogram, &mut cr) };
        hist[bin] += 1;
        range.0 = range.0.min(s);
        range.1 = range.1.max(s);
        if !d && s > trim_threshold {
            flagged.push(i);
        }
    }
    OverlapReport {
        treated_range: tr,
        comparison_range: cr,
        trim_threshold,
        flagged,
        treated_histogram,
        comparison_histogram,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn intercept_only_is_mean() {
        let fit = fit_wls(&col(&[1.0, 1.0]), &[3.0, 5.0], &[1.0, 1.0]).unwrap();
        assert!((fit.coefficients[0] - 4.0).abs() < 1e-14);
        assert_eq!(fit.n_obs, 2);
        assert!((fit.weighted_rss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exact_interpolation() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let fit = fit_wls(&x, &[1.0, 3.0], &[1.0, 1.0]).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-12);
        assert!((fit.predict(&[1.0, 0.5]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn noiseless_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let beta = [0.5, -1.25, 2.0, 3.5];
        let n = 200;
        let mut x = DMatrix::zeros(n, 4);
        let mut y = vec![0.0; n];
        let mut w = vec![0.0; n];
        for i in 0..n {
            x[(i, 0)] = 1.0;
            for j in 1..4 {
                x[(i, j)] = rng.random_range(-3.0..3.0);
            }
            y[i] = (0..4).map(|j| x[(i, j)] * beta[j]).sum();
            w[i] = rng.random_range(0.1..5.0);
        }
        let fit = fit_wls(&x, &y, &w).unwrap();
        for (got, want) in fit.coefficients.iter().zip(&beta) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn collinear_and_empty_designs_fail() {
        let x = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 4.0, 1.0, 3.0, 6.0, 1.0, 5.0, 10.0]);
        assert_eq!(fit_wls(&x, &[1.0, 2.0, 3.0], &[1.0; 3]).unwrap_err(), NuisanceError::RankDeficient(2));
        assert_eq!(fit_wls(&col(&[1.0]), &[1.0], &[0.0]).unwrap_err(), NuisanceError::EmptySample);
        // Weighted support matters: column 1 is constant on positive-weight rows.
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(fit_wls(&x, &[1.0, 2.0, 3.0], &[1.0, 1.0, 0.0]).unwrap_err(), NuisanceError::RankDeficient(1));
    }

    #[test]
    fn logit_symmetric_and_closed_form() {
        let ones = col(&[1.0; 100]);
        let labels: Vec<bool> = (0..100).map(|i| i < 50).collect();
        let fit = fit_logit(&ones, &labels, &[1.0; 100], LogitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.coefficients[0].abs() < 1e-12);
        assert!(fit.fitted_scores.iter().all(|&p| (p - 0.5).abs() < 1e-12));

        let labels: Vec<bool> = (0..100).map(|i| i < 30).collect();
        let fit = fit_logit(&ones, &labels, &[1.0; 100], LogitOptions::default()).unwrap();
        assert!((fit.coefficients[0] - (3.0f64 / 7.0).ln()).abs() < 1e-9);
    }

    #[test]
    fn saturated_logit_matches_cell_shares() {
        // (d,x) counts: (1,1)=40, (0,1)=10, (1,0)=10, (0,0)=40
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (d, xv, n) in [(true, 1.0, 40), (false, 1.0, 10), (true, 0.0, 10), (false, 0.0, 40)] {
            for _ in 0..n {
                rows.extend([1.0, xv]);
                labels.push(d);
            }
        }
        let x = DMatrix::from_row_slice(100, 2, &rows);
        let fit = fit_logit(&x, &labels, &[1.0; 100], LogitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.fitted_scores[0] - 0.8).abs() < 1e-9);
        assert!((fit.fitted_scores[99] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn logit_empty_class() {
        let err = fit_logit(&col(&[1.0, 1.0]), &[true, true], &[1.0, 1.0], LogitOptions::default()).unwrap_err();
        assert_eq!(err, NuisanceError::EmptyClass(0));
    }

    #[test]
    fn separation_is_flagged_not_fatal() {
        let x = DMatrix::from_row_slice(6, 2, &[1.0, -3.0, 1.0, -2.0, 1.0, -1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let labels = [false, false, false, true, true, true];
        let fit = fit_logit(&x, &labels, &[1.0; 6], LogitOptions::default()).unwrap();
        assert!(fit.separation);
        assert!(!fit.converged);
    }

    #[test]
    fn overlap_counts() {
        let fit = PropensityFit {
            coefficients: DVector::zeros(1),
            fitted_scores: vec![0.5, 0.5, 0.999, 0.2],
            converged: true,
            iterations: 1,
            gradient_norm: 0.0,
            separation: false,
            information_inverse: DMatrix::zeros(1, 1),
        };
        let rep = overlap_report(&fit, &[true, false, false, false], DEFAULT_TRIM);
        assert_eq!(rep.flagged, vec![2]);
        assert_eq!(rep.treated_histogram.iter().sum::<usize>(), 1);
        assert_eq!(rep.comparison_histogram.iter().sum::<usize>(), 3);
        assert_eq!(rep.comparison_histogram[19], 1);
        assert_eq!(rep.comparison_range, (0.2, 0.999));
        let flat = PropensityFit { fitted_scores: vec![0.5; 4], ..fit };
        assert!(overlap_report(&flat, &[true, false, false, false], DEFAULT_TRIM).flagged.is_empty());
    }

    fn random_logit_problem(seed: u64, n: usize) -> (DMatrix<f64>, Vec<bool>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(n, 3);
        let mut labels = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        for i in 0..n {
            x[(i, 0)] = 1.0;
            x[(i, 1)] = rng.random_range(-2.0..2.0);
            x[(i, 2)] = if rng.random_bool(0.4) { 1.0 } else { 0.0 };
            let p = logistic(0.3 + 0.8 * x[(i, 1)] - 0.5 * x[(i, 2)]);
            labels.push(rng.random_bool(p));
            w.push(rng.random_range(0.5..3.0));
        }
        (x, labels, w)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn wls_residuals_orthogonal(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 50;
            let mut x = DMatrix::zeros(n, 3);
            let mut y = vec![0.0; n];
            let mut w = vec![0.0; n];
            for i in 0..n {
                x[(i, 0)] = 1.0;
                x[(i, 1)] = rng.random_range(-1.0..1.0) * scale;
                x[(i, 2)] = rng.random_range(0.0..10.0);
                y[i] = rng.random_range(-5.0..5.0);
                w[i] = rng.random_range(0.0..2.0);
            }
            let fit = fit_wls(&x, &y, &w).unwrap();
            let r: Vec<f64> = (0..n).map(|i| y[i] - fit.predict(&x.row(i).iter().copied().collect::<Vec<_>>())).collect();
            for j in 0..3 {
                let dot: f64 = (0..n).map(|i| w[i] * x[(i, j)] * r[i]).sum();
                let s: f64 = (0..n).map(|i| w[i] * (x[(i, j)] * r[i]).abs()).sum::<f64>().max(1.0);
                prop_assert!(dot.abs() <= 1e-8 * s);
            }
            // weight scaling invariance
            let w2: Vec<f64> = w.iter().map(|v| v * 37.5).collect();
            let fit2 = fit_wls(&x, &y, &w2).unwrap();
            prop_assert!((&fit.coefficients - &fit2.coefficients).amax() <= 1e-10 * fit.coefficients.amax().max(1.0));
        }

        #[test]
        fn logit_score_equations_and_scaling(seed in 0u64..1000, c in 0.01f64..100.0) {
            let (x, labels, w) = random_logit_problem(seed, 300);
            let fit = fit_logit(&x, &labels, &w, LogitOptions::default()).unwrap();
            prop_assert!(fit.converged);
            let total: f64 = w.iter().sum();
            let g = logit_score(&x, &labels, &w, &fit.coefficients);
            prop_assert!(g.amax() <= 1e-8 * total);
            let wc: Vec<f64> = w.iter().map(|v| v * c).collect();
            let fit_c = fit_logit(&x, &labels, &wc, LogitOptions::default()).unwrap();
            prop_assert!((&fit.coefficients - &fit_c.coefficients).amax() <= 1e-10);
        }

        #[test]
        fn logit_gradient_matches_finite_differences(seed in 0u64..1000) {
            let (x, labels, w) = random_logit_problem(seed, 120);
            let fit = fit_logit(&x, &labels, &w, LogitOptions::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let random = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            for point in [fit.coefficients.clone(), random] {
                let g = logit_score(&x, &labels, &w, &point);
                let h = 1e-5;
                let scale = g.amax().max(1.0);
                for j in 0..3 {
                    let mut up = point.clone();
                    up[j] += h;
                    let mut dn = point.clone();
                    dn[j] -= h;
                    let fd = (logit_log_likelihood(&x, &labels, &w, &up) - logit_log_likelihood(&x, &labels, &w, &dn)) / (2.0 * h);
                    prop_assert!((fd - g[j]).abs() <= 1e-6 * scale, "j={} fd={} g={}", j, fd, g[j]);
                }
            }
        }
    }
}
