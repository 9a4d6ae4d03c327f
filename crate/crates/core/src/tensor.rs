//! Dense double-precision linear algebra: matrix products, a cyclic-Jacobi
//! symmetric eigensolver, positive-definite solves, and a dense Kronecker
//! oracle used by tests to cross-check matrix-free operators.

use crate::error::{MatsError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row-major data. Fails on a length mismatch or a
    /// non-finite entry.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MatsError::Shape(format!(
                "expected {} values for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatsError::Contract(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from a slice of rows (test convenience).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(MatsError::Shape("ragged rows".into()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MatsError::Shape(format!(
                "add: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.add(&other.scale(-1.0))
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Maximum absolute asymmetry `|a_ij - a_ji|` (0 for non-square input is
    /// meaningless; callers check squareness first).
    fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(MatsError::Shape(format!(
            "matmul: {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · a` without forming the transpose.
pub fn gram(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.cols, a.cols);
    for n in 0..a.rows {
        let row = a.row(n);
        for i in 0..a.cols {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in 0..a.cols {
                out.data[i * a.cols + j] += ri * row[j];
            }
        }
    }
    out
}

const SYM_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns `(q, lambda)` with `c = q · diag(lambda) · qᵀ`, the columns of `q`
/// orthonormal, and `lambda` sorted descending (ties broken by the
/// pre-sorting column index). The input must be square and symmetric within
/// an absolute tolerance of `1e-10` (scaled by the largest entry).
pub fn sym_eig(c: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let n = c.rows;
    if c.cols != n {
        return Err(MatsError::Shape(format!(
            "sym_eig needs a square matrix, got {}x{}",
            c.rows, c.cols
        )));
    }
    let scale = c.max_abs().max(1.0);
    if c.max_asymmetry() > SYM_TOL * scale {
        return Err(MatsError::Contract(format!(
            "matrix is not symmetric: max |a_ij - a_ji| = {:e}",
            c.max_asymmetry()
        )));
    }
    if n == 0 {
        return Ok((Matrix::zeros(0, 0), Vec::new()));
    }

    // Cyclic Jacobi on the upper triangle, following the classic
    // Numerical Recipes formulation.
    let mut a = c.clone();
    let mut v = Matrix::identity(n);
    let mut d: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    let mut b = d.clone();
    let mut z = vec![0.0; n];
    let frob = c.frob_norm().max(f64::MIN_POSITIVE);

    let mut converged = false;
    for sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q).abs();
            }
        }
        if off <= 1e-14 * frob {
            converged = true;
            break;
        }
        let tresh = if sweep < 3 {
            0.2 * off / ((n * n) as f64)
        } else {
            0.0
        };
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                let g = 100.0 * apq.abs();
                // Small off-diagonal entries are annihilated outright once
                // the rotations no longer change the diagonal.
                if sweep > 3 && d[p].abs() + g == d[p].abs() && d[q].abs() + g == d[q].abs() {
                    a.set(p, q, 0.0);
                } else if apq.abs() > tresh {
                    let mut h = d[q] - d[p];
                    let t = if h.abs() + g == h.abs() {
                        apq / h
                    } else {
                        let theta = 0.5 * h / apq;
                        let mut t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                        if theta < 0.0 {
                            t = -t;
                        }
                        t
                    };
                    let cr = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * cr;
                    let tau = s / (1.0 + cr);
                    h = t * apq;
                    z[p] -= h;
                    z[q] += h;
                    d[p] -= h;
                    d[q] += h;
                    a.set(p, q, 0.0);
                    let rot = |x: f64, y: f64| (x - s * (y + x * tau), y + s * (x - y * tau));
                    for j in 0..p {
                        let (x, y) = rot(a.get(j, p), a.get(j, q));
                        a.set(j, p, x);
                        a.set(j, q, y);
                    }
                    for j in (p + 1)..q {
                        let (x, y) = rot(a.get(p, j), a.get(j, q));
                        a.set(p, j, x);
                        a.set(j, q, y);
                    }
                    for j in (q + 1)..n {
                        let (x, y) = rot(a.get(p, j), a.get(q, j));
                        a.set(p, j, x);
                        a.set(q, j, y);
                    }
                    for j in 0..n {
                        let (x, y) = rot(v.get(j, p), v.get(j, q));
                        v.set(j, p, x);
                        v.set(j, q, y);
                    }
                }
            }
        }
        for p in 0..n {
            b[p] += z[p];
            d[p] = b[p];
            z[p] = 0.0;
        }
    }
    if !converged {
        return Err(MatsError::Numerical(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps (n = {n})"
        )));
    }

    // Sort eigenvalues descending; ties keep the original column order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).expect("finite eigenvalues").then(i.cmp(&j)));
    let lambda: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let mut q = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            q.set(r, new_col, v.get(r, old_col));
        }
    }
    Ok((q, lambda))
}

/// Cholesky factor `L` (lower triangular) with `L·Lᵀ = a`.
///
/// Fails with a singularity error on a non-positive pivot; callers that can
/// tolerate a perturbed system may retry through [`chol_solve_ridged`].
pub fn chol_factor(a: &Matrix) -> Result<Matrix> {
    let n = a.rows;
    if a.cols != n {
        return Err(MatsError::Shape(format!(
            "chol_factor needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let scale = a.max_abs().max(1.0);
    if a.max_asymmetry() > SYM_TOL * scale {
        return Err(MatsError::Contract(
            "chol_factor input is not symmetric".into(),
        ));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(MatsError::Singular(format!(
                "non-positive pivot {diag:e} at column {j}"
            )));
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, sum / ljj);
        }
    }
    Ok(l)
}

/// Solves `a · X = b` for symmetric positive-definite `a` via Cholesky.
pub fn chol_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows != a.rows {
        return Err(MatsError::Shape(format!(
            "chol_solve: a is {}x{} but b has {} rows",
            a.rows, a.cols, b.rows
        )));
    }
    let l = chol_factor(a)?;
    let n = a.rows;
    let mut x = Matrix::zeros(b.rows, b.cols);
    for col in 0..b.cols {
        // forward: L y = b
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut sum = b.get(i, col);
            for k in 0..i {
                sum -= l.get(i, k) * y[k];
            }
            y[i] = sum / l.get(i, i);
        }
        // back: Lᵀ x = y
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in (i + 1)..n {
                sum -= l.get(k, i) * x.get(k, col);
            }
            x.set(i, col, sum / l.get(i, i));
        }
    }
    Ok(x)
}

/// [`chol_solve`] with a ridge fallback: on a singular pivot, retries with
/// `a + εI` where ε starts at `1e-10 · trace(a)/n` and grows by 100× per
/// retry, at most 3 times.
pub fn chol_solve_ridged(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    match chol_solve(a, b) {
        Ok(x) => Ok(x),
        Err(MatsError::Singular(_)) => {
            let n = a.rows.max(1);
            let trace: f64 = (0..a.rows).map(|i| a.get(i, i)).sum();
            let mut eps = 1e-10 * trace.abs().max(f64::MIN_POSITIVE) / n as f64;
            let mut last = None;
            for _ in 0..3 {
                let mut ridged = a.clone();
                for i in 0..a.rows {
                    ridged.set(i, i, ridged.get(i, i) + eps);
                }
                match chol_solve(&ridged, b) {
                    Ok(x) => return Ok(x),
                    Err(e) => last = Some(e),
                }
                eps *= 100.0;
            }
            Err(last.expect("at least one ridge retry ran"))
        }
        Err(e) => Err(e),
    }
}

/// Dense Kronecker product `a ⊗ g`. Output entry
/// `K[i·p + r, j·q + s] = a[i,j] · g[r,s]` for `g` of shape `p×q`.
///
/// Under the crate's row-major vectorization (`vec` stacks matrix rows),
/// `(A ⊗ G) · vec(W) = vec(A · W · Gᵀ)`, which for symmetric `G` is
/// `vec(A · W · G)` — the identity the matrix-free K-FAC operator relies on.
/// A size cap keeps this test-oriented oracle from materializing huge
/// matrices by accident.
pub fn kron_dense(a: &Matrix, g: &Matrix, max_elems: usize) -> Result<Matrix> {
    let rows = a.rows * g.rows;
    let cols = a.cols * g.cols;
    if rows.saturating_mul(cols) > max_elems {
        return Err(MatsError::Capacity(format!(
            "kron_dense output {rows}x{cols} exceeds cap of {max_elems} elements"
        )));
    }
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..a.rows {
        for j in 0..a.cols {
            let aij = a.get(i, j);
            if aij == 0.0 {
                continue;
            }
            for r in 0..g.rows {
                for s in 0..g.cols {
                    out.set(i * g.rows + r, j * g.cols + s, aij * g.get(r, s));
                }
            }
        }
    }
    Ok(out)
}
