//! Row-major design matrices and the few dense solves the learners need.

use nalgebra::{DMatrix, DVector};

use crate::error::{AlqrError, Result};

/// Dense row-major matrix. Learners iterate over observations far more often
/// than over columns, so rows are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn zeros(n: usize, p: usize) -> Self {
        Design { n, p, data: vec![0.0; n * p] }
    }

    pub fn from_row_major(n: usize, p: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * p, "design buffer has wrong length");
        Design { n, p, data }
    }

    pub fn from_fn(n: usize, p: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * p);
        for i in 0..n {
            for j in 0..p {
                data.push(f(i, j));
            }
        }
        Design { n, p, data }
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.p + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.p + j] = v;
    }

    /// Rows `idx` in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Design {
        let mut data = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Design { n: idx.len(), p: self.p, data }
    }

    /// Columns `cols` in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Design {
        Design::from_fn(self.n, cols.len(), |i, j| self.get(i, cols[j]))
    }

    /// Prepends a column of ones.
    pub fn with_intercept(&self) -> Design {
        Design::from_fn(self.n, self.p + 1, |i, j| if j == 0 { 1.0 } else { self.get(i, j - 1) })
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.p, &self.data)
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Design {
        Design::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    // Four independent accumulators let the compiler vectorize the loop.
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[2]) + (acc[1] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// Builds `XᵀWX` and `XᵀWz`.
pub fn weighted_normal_equations(x: &Design, z: &[f64], w: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let p = x.ncols();
    // Row-major lower triangle; each row update is a contiguous axpy.
    let mut lower = vec![0.0; p * p];
    let mut xtz = DVector::<f64>::zeros(p);
    for i in 0..x.nrows() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        let r = x.row(i);
        for a in 0..p {
            let wa = wi * r[a];
            xtz[a] += wa * z[i];
            for (acc, rb) in lower[a * p..a * p + a + 1].iter_mut().zip(&r[..=a]) {
                *acc += wa * rb;
            }
        }
    }
    let xtx = DMatrix::from_fn(p, p, |a, b| if b <= a { lower[a * p + b] } else { lower[b * p + a] });
    (xtx, xtz)
}

/// Solves a symmetric positive-definite system, rejecting numerically singular
/// matrices (pivot ratio below `1e-12`).
pub fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let chol = a.cholesky().ok_or_else(|| AlqrError::SingularDesign(what.to_string()))?;
    let l = chol.l_dirty();
    let diag: Vec<f64> = (0..l.nrows()).map(|i| l[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min / max < 1e-7 {
        return Err(AlqrError::SingularDesign(what.to_string()));
    }
    Ok(chol.solve(b))
}

/// Weighted least squares `argmin Σ w (z − Xb)²`.
pub fn weighted_least_squares(x: &Design, z: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let (xtx, xtz) = weighted_normal_equations(x, z, w);
    Ok(solve_spd(xtx, &xtz, "least squares")?.iter().copied().collect())
}
