//! Dense 64-bit matrices plus the two factorizations the initializers rely on:
//! a thin singular value decomposition and a symmetric eigendecomposition.
//!
//! Conventions kept throughout:
//! - storage is row-major;
//! - `svd(A)` returns `U` (r x k), `sigma` (k, descending), `V` (c x k) with
//!   k = min(r, c), so `A = U * diag(sigma) * V^T`;
//! - the sign of every V column is fixed so that its first nonzero entry is
//!   non-negative, which makes the factorization deterministic;
//! - factorizations reject non-finite input and run entirely in f64.
//!
//! Both factorizations are Jacobi iterations: one-sided (Hestenes) rotations
//! for the SVD, classical two-sided rotations for the eigendecomposition.
//! They are independent code paths, so each can serve as an oracle for the
//! other in tests via sigma_i(A) = sqrt(lambda_i(A^T A)).

use crate::error::{Error, Result};
use std::ops::Range;

/// Which axis of a matrix an operation walks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Matrix {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = rhs.row(k);
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn slice_rows(&self, r: Range<usize>) -> Result<Matrix> {
        if r.start > r.end || r.end > self.rows {
            return Err(Error::shape(format!(
                "row slice {:?} of a {}-row matrix",
                r, self.rows
            )));
        }
        Ok(Matrix {
            rows: r.end - r.start,
            cols: self.cols,
            data: self.data[r.start * self.cols..r.end * self.cols].to_vec(),
        })
    }

    pub fn slice_cols(&self, r: Range<usize>) -> Result<Matrix> {
        if r.start > r.end || r.end > self.cols {
            return Err(Error::shape(format!(
                "col slice {:?} of a {}-col matrix",
                r, self.cols
            )));
        }
        let cols = r.end - r.start;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[r.start..r.end]);
        }
        Ok(Matrix { rows: self.rows, cols, data })
    }

    /// Select rows or columns by index. Indices must be strictly increasing
    /// and in bounds, which keeps every gather a pure subsequence selection.
    pub fn gather(&self, axis: Axis, indices: &[usize]) -> Result<Matrix> {
        let limit = match axis {
            Axis::Rows => self.rows,
            Axis::Cols => self.cols,
        };
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::shape(format!(
                    "gather indices must be strictly increasing, got {:?}",
                    indices
                )));
            }
        }
        if indices.iter().any(|&i| i >= limit) {
            return Err(Error::shape(format!(
                "gather index out of bounds: {:?} on axis of size {}",
                indices, limit
            )));
        }
        match axis {
            Axis::Rows => {
                let mut data = Vec::with_capacity(indices.len() * self.cols);
                for &i in indices {
                    data.extend_from_slice(self.row(i));
                }
                Ok(Matrix { rows: indices.len(), cols: self.cols, data })
            }
            Axis::Cols => {
                let mut data = Vec::with_capacity(self.rows * indices.len());
                for i in 0..self.rows {
                    let row = self.row(i);
                    data.extend(indices.iter().map(|&j| row[j]));
                }
                Ok(Matrix { rows: self.rows, cols: indices.len(), data })
            }
        }
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows of zero matrices".to_string()))?;
        let cols = first.cols;
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::shape("concat_rows with unequal column counts".to_string()));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// Thin SVD: `u` is r x k, `sigma` has k entries sorted descending,
/// `v` is c x k, where k = min(r, c).
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

/// Symmetric eigendecomposition: `values` descending, `vectors` holds the
/// matching orthonormal eigenvectors as columns.
#[derive(Clone, Debug)]
pub struct SymEigResult {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

const SVD_MAX_SWEEPS: usize = 64;
// Column pairs whose normalized coupling falls below this count as orthogonal.
const SVD_PAIR_TOL: f64 = 1e-13;
const EIG_MAX_SWEEPS: usize = 64;
const EIG_PAIR_TOL: f64 = 1e-14;

/// Thin SVD via one-sided Jacobi rotations.
///
/// The input is transposed up front if it is wider than tall, so the sweep
/// always orthogonalizes the smaller side. Exact zero columns (rank-deficient
/// input) get their singular value set to zero and their U column completed
/// to an orthonormal basis, so `U^T U = I` holds for every result.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::shape("svd of an empty matrix".to_string()));
    }
    if !a.is_finite() {
        return Err(Error::invalid("svd input has non-finite entries"));
    }

    let transposed = a.rows < a.cols;
    let work = if transposed { a.transpose() } else { a.clone() };
    let (r, c) = (work.rows, work.cols);

    // Column-major working copies: w[j] is the j-th column of `work`.
    let mut w: Vec<Vec<f64>> = (0..c).map(|j| (0..r).map(|i| work.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..c)
        .map(|j| (0..c).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..c {
            for q in p + 1..c {
                let (app, aqq, apq) = {
                    let (wp, wq) = (&w[p], &w[q]);
                    let mut app = 0.0;
                    let mut aqq = 0.0;
                    let mut apq = 0.0;
                    for i in 0..r {
                        app += wp[i] * wp[i];
                        aqq += wq[i] * wq[i];
                        apq += wp[i] * wq[i];
                    }
                    (app, aqq, apq)
                };
                if apq.abs() <= SVD_PAIR_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let cos = 1.0 / (1.0 + t * t).sqrt();
                let sin = cos * t;
                let (lo, hi) = w.split_at_mut(q);
                let (wp, wq) = (&mut lo[p], &mut hi[0]);
                for i in 0..r {
                    let (x, y) = (wp[i], wq[i]);
                    wp[i] = cos * x - sin * y;
                    wq[i] = sin * x + cos * y;
                }
                let (lo, hi) = v.split_at_mut(q);
                let (vp, vq) = (&mut lo[p], &mut hi[0]);
                for i in 0..c {
                    let (x, y) = (vp[i], vq[i]);
                    vp[i] = cos * x - sin * y;
                    vq[i] = sin * x + cos * y;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        // One extra pass to see whether anything is still meaningfully coupled.
        let mut worst: f64 = 0.0;
        for p in 0..c {
            for q in p + 1..c {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for (&x, &y) in w[p].iter().zip(w[q].iter()) {
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if app > 0.0 && aqq > 0.0 {
                    worst = worst.max(apq.abs() / (app * aqq).sqrt());
                }
            }
        }
        if worst > 1e-9 {
            return Err(Error::Numerical(format!(
                "svd failed to converge after {} sweeps (residual coupling {:.2e})",
                SVD_MAX_SWEEPS, worst
            )));
        }
    }

    // Singular values are the column norms; sort everything descending.
    let mut order: Vec<usize> = (0..c).collect();
    let norms: Vec<f64> = w.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut sigma = Vec::with_capacity(c);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(c);
    for &j in &order {
        sigma.push(norms[j]);
        v_cols.push(v[j].clone());
        if norms[j] > 0.0 {
            u_cols.push(w[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; r]); // completed below
        }
    }

    // Complete U columns for exact zero singular values: Gram-Schmidt the
    // standard basis against the columns already fixed.
    for j in 0..c {
        if sigma[j] > 0.0 {
            continue;
        }
        'basis: for b in 0..r {
            let mut cand = vec![0.0; r];
            cand[b] = 1.0;
            for _ in 0..2 {
                for (k, other) in u_cols.iter().enumerate() {
                    if k == j {
                        continue;
                    }
                    let d: f64 = cand.iter().zip(other).map(|(x, y)| x * y).sum();
                    for (x, y) in cand.iter_mut().zip(other) {
                        *x -= d * y;
                    }
                }
            }
            let n: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.5 {
                for x in cand.iter_mut() {
                    *x /= n;
                }
                u_cols[j] = cand;
                break 'basis;
            }
        }
    }

    let u_work = Matrix::from_fn(r, c, |i, j| u_cols[j][i]);
    let v_work = Matrix::from_fn(c, c, |i, j| v_cols[j][i]);
    let (mut u_fin, mut v_fin) = if transposed { (v_work, u_work) } else { (u_work, v_work) };

    // Deterministic sign: first nonzero entry of every V column non-negative.
    for j in 0..v_fin.cols {
        let mut flip = false;
        for i in 0..v_fin.rows {
            let x = v_fin.get(i, j);
            if x != 0.0 {
                flip = x < 0.0;
                break;
            }
        }
        if flip {
            for i in 0..v_fin.rows {
                let x = v_fin.get(i, j);
                v_fin.set(i, j, -x);
            }
            for i in 0..u_fin.rows {
                let x = u_fin.get(i, j);
                u_fin.set(i, j, -x);
            }
        }
    }

    Ok(SvdResult { u: u_fin, sigma, v: v_fin })
}

/// Symmetric eigendecomposition via cyclic two-sided Jacobi rotations.
///
/// The input must be square and symmetric to within 1e-10 relative asymmetry;
/// it is symmetrized exactly before iterating.
pub fn sym_eig(a: &Matrix) -> Result<SymEigResult> {
    if a.rows != a.cols {
        return Err(Error::shape(format!("sym_eig of a {}x{} matrix", a.rows, a.cols)));
    }
    if a.rows == 0 {
        return Err(Error::shape("sym_eig of an empty matrix".to_string()));
    }
    if !a.is_finite() {
        return Err(Error::invalid("sym_eig input has non-finite entries"));
    }
    let n = a.rows;
    let scale = a.max_abs();
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    if asym > 1e-10 * scale {
        return Err(Error::invalid(format!(
            "sym_eig input is asymmetric ({:.2e} vs scale {:.2e})",
            asym, scale
        )));
    }

    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut v = Matrix::identity(n);

    let mut converged = false;
    for _ in 0..EIG_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let denom = (app.abs() * aqq.abs()).sqrt().max(scale * 1e-300);
                if apq.abs() <= EIG_PAIR_TOL * denom.max(1e-300) {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let cos = 1.0 / (1.0 + t * t).sqrt();
                let sin = cos * t;
                // Two-sided rotation on rows/cols p and q.
                for k in 0..n {
                    let (x, y) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, cos * x - sin * y);
                    m.set(q, k, sin * x + cos * y);
                }
                for k in 0..n {
                    let (x, y) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, cos * x - sin * y);
                    m.set(k, q, sin * x + cos * y);
                }
                for k in 0..n {
                    let (x, y) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, cos * x - sin * y);
                    v.set(k, q, sin * x + cos * y);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        let mut off: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off = off.max(m.get(i, j).abs());
                }
            }
        }
        if off > 1e-9 * scale.max(1.0) {
            return Err(Error::Numerical(format!(
                "sym_eig failed to converge after {} sweeps (off-diagonal {:.2e})",
                EIG_MAX_SWEEPS, off
            )));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());

    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Matrix::from_fn(n, n, |i, j| v.get(i, order[j]));

    for j in 0..n {
        let mut flip = false;
        for i in 0..n {
            let x = vectors.get(i, j);
            if x != 0.0 {
                flip = x < 0.0;
                break;
            }
        }
        if flip {
            for i in 0..n {
                let x = vectors.get(i, j);
                vectors.set(i, j, -x);
            }
        }
    }

    Ok(SymEigResult { values, vectors })
}
