//! Small dense least-squares kernels.
//!
//! Householder QR with column pivoting by remaining column norm
//! (Businger-Golub), which gives a reliable numerical rank for the modest
//! design matrices used here.

use nalgebra::{DMatrix, DVector};

/// Relative tolerance on |R_jj| (columns are equilibrated to unit norm first).
pub(crate) const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub(crate) struct PivotedQr {
    /// Upper triangle holds R; Householder vectors are kept separately.
    r: DMatrix<f64>,
    reflectors: Vec<(DVector<f64>, f64)>,
    /// `perm[i]` is the original column placed at position `i`.
    perm: Vec<usize>,
    /// Column scale factors applied before factorization.
    scale: Vec<f64>,
    rank: usize,
}

fn equilibrate(a: &mut DMatrix<f64>) -> Vec<f64> {
    (0..a.ncols())
        .map(|j| {
            let norm = a.column(j).norm();
            let s = if norm > 0.0 { 1.0 / norm } else { 1.0 };
            a.column_mut(j).scale_mut(s);
            s
        })
        .collect()
}

fn householder(a: &mut DMatrix<f64>, j: usize) -> (DVector<f64>, f64) {
    let n = a.nrows();
    let mut v = a.view((j, j), (n - j, 1)).clone_owned().column(0).into_owned();
    let norm = v.norm();
    if norm == 0.0 {
        return (v, 0.0);
    }
    let alpha = if v[0] > 0.0 { -norm } else { norm };
    v[0] -= alpha;
    let vtv = v.norm_squared();
    let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };
    for c in j..a.ncols() {
        let mut col = a.view_mut((j, c), (n - j, 1));
        let dot = v.dot(&col.column(0));
        col.column_mut(0).axpy(-beta * dot, &v, 1.0);
    }
    (v, beta)
}

impl PivotedQr {
    pub(crate) fn new(mut a: DMatrix<f64>) -> Self {
        let (n, p) = a.shape();
        let scale = equilibrate(&mut a);
        let mut perm: Vec<usize> = (0..p).collect();
        let mut reflectors = Vec::with_capacity(p.min(n));
        for j in 0..p.min(n) {
            let (best, _) = (j..p).map(|c| (c, a.view((j, c), (n - j, 1)).norm_squared())).fold((j, -1.0), |acc, x| {
                if x.1 > acc.1 {
                    x
                } else {
                    acc
                }
            });
            if best != j {
                a.swap_columns(j, best);
                perm.swap(j, best);
            }
            reflectors.push(householder(&mut a, j));
        }
        let lead = if p > 0 && n > 0 { a[(0, 0)].abs() } else { 0.0 };
        let rank = (0..p.min(n)).take_while(|&j| lead > 0.0 && a[(j, j)].abs() > RANK_TOL * lead).count();
        PivotedQr { r: a, reflectors, perm, scale, rank }
    }

    pub(crate) fn rank(&self) -> usize {
        self.rank
    }

    pub(crate) fn ncols(&self) -> usize {
        self.perm.len()
    }

    /// Least-squares solution of `A x = b`; requires full column rank.
    pub(crate) fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let p = self.ncols();
        debug_assert_eq!(self.rank, p);
        let mut qtb = b.clone();
        for (j, (v, beta)) in self.reflectors.iter().enumerate() {
            let mut seg = qtb.rows_mut(j, v.len());
            let dot = v.dot(&seg);
            seg.axpy(-beta * dot, v, 1.0);
        }
        let mut z = DVector::zeros(p);
        for i in (0..p).rev() {
            let mut s = qtb[i];
            for k in i + 1..p {
                s -= self.r[(i, k)] * z[k];
            }
            z[i] = s / self.r[(i, i)];
        }
        let mut x = DVector::zeros(p);
        for (i, &c) in self.perm.iter().enumerate() {
            x[c] = z[i] * self.scale[c];
        }
        x
    }

    /// `(A'A)^{-1}` in the original column coordinates; requires full rank.
    pub(crate) fn gram_inverse(&self) -> DMatrix<f64> {
        let p = self.ncols();
        // R^{-1} by back substitution on the identity.
        let mut rinv = DMatrix::zeros(p, p);
        for c in 0..p {
            for i in (0..=c).rev() {
                let mut s = if i == c { 1.0 } else { 0.0 };
                for k in i + 1..=c {
                    s -= self.r[(i, k)] * rinv[(k, c)];
                }
                rinv[(i, c)] = s / self.r[(i, i)];
            }
        }
        let inner = &rinv * rinv.transpose();
        let mut out = DMatrix::zeros(p, p);
        for i in 0..p {
            for j in 0..p {
                let (ci, cj) = (self.perm[i], self.perm[j]);
                out[(ci, cj)] = inner[(i, j)] * self.scale[ci] * self.scale[cj];
            }
        }
        out
    }
}

/// Index of the first column that is numerically a combination of the
/// columns before it (scanning left to right), if any.
pub(crate) fn first_dependent_column(a: &DMatrix<f64>) -> Option<usize> {
    let mut a = a.clone();
    equilibrate(&mut a);
    let n = a.nrows();
    for j in 0..a.ncols() {
        if j >= n {
            return Some(j);
        }
        let tail = a.view((j, j), (n - j, 1)).norm();
        if tail <= RANK_TOL * 10.0 {
            return Some(j);
        }
        householder(&mut a, j);
    }
    None
}

/// Inverse of a symmetric matrix, falling back to the Moore-Penrose
/// pseudo-inverse when it is numerically singular. Returns the numerical rank.
pub(crate) fn symmetric_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let p = m.nrows();
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = smax * 1e-12 * p.max(1) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank == p {
        if let Some(chol) = m.clone().cholesky() {
            return (chol.inverse(), p);
        }
    }
    let pinv = svd.pseudo_inverse(tol).unwrap_or_else(|_| DMatrix::zeros(p, p));
    (pinv, rank)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_overdetermined_system() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]);
        let qr = PivotedQr::new(a.clone());
        assert_eq!(qr.rank(), 2);
        let x = qr.solve(&b);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
        let gi = qr.gram_inverse();
        let direct = (a.transpose() * &a).try_inverse().unwrap();
        assert!((gi - direct).abs().max() < 1e-12);
    }

    #[test]
    fn detects_collinear_column() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 1.0, 5.0, 6.0, 1.0, 7.0, 8.0]);
        assert_eq!(PivotedQr::new(a.clone()).rank(), 2);
        assert_eq!(first_dependent_column(&a), Some(2));
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(first_dependent_column(&b), Some(1));
    }

    #[test]
    fn pseudo_inverse_on_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (pinv, rank) = symmetric_inverse(&m);
        assert_eq!(rank, 1);
        assert!((pinv[(0, 0)] - 0.25).abs() < 1e-12);
    }
}
