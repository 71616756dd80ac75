//! Dense matrix/tensor kernels: Cholesky, triangular solves, mode unfolding,
//! and Kronecker trace/log-det identities.
//!
//! Everything is row-major `f64`. These are desk-scale kernels (matrices up to
//! a few hundred rows), not a BLAS replacement.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {max_asym:.3e})")]
    NotSymmetric { max_asym: f64 },
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("mode {mode} out of range for tensor with {modes} modes")]
    ModeOutOfRange { mode: usize, modes: usize },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    dst[j] += a * src[j];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
        out
    }

    pub fn trace(&self) -> f64 {
        assert!(self.is_square());
        (0..self.rows).map(|i| self.data[i * self.cols + i]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Dense tensor in lexicographic (last index fastest) order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.is_empty(), "tensor shape must be nonempty");
        let n = shape.iter().product();
        DenseTensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn from_data(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        DenseTensor { shape: shape.to_vec(), data }
    }

    /// Row-major strides (last mode has stride 1).
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for k in (0..self.shape.len().saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.shape[k + 1];
        }
        s
    }
}

/// Lower Cholesky factor of `a + jitter*I`.
///
/// `a` must be square and symmetric to 1e-10 relative. Fails with
/// `NotPositiveDefinite` when a pivot is not strictly positive, which for
/// kernel matrices usually means the caller should retry with more jitter.
pub fn cholesky(a: &Matrix, jitter: f64) -> Result<Matrix, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
    }
    let n = a.rows;
    let scale = a.data.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    if max_asym > 1e-10 * scale {
        return Err(LinalgError::NotSymmetric { max_asym });
    }

    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return Err(LinalgError::NotPositiveDefinite { index: i, pivot: s });
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Default jitter ladder: try `1e-8`, retry once at `1e-6`.
pub fn cholesky_with_retry(a: &Matrix) -> Result<(Matrix, f64), LinalgError> {
    match cholesky(a, 1e-8) {
        Ok(l) => Ok((l, 1e-8)),
        Err(LinalgError::NotPositiveDefinite { .. }) => cholesky(a, 1e-6).map(|l| (l, 1e-6)),
        Err(e) => Err(e),
    }
}

/// Solve L x = b with L lower-triangular.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    assert_eq!(b.len(), n);
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l.get(i, k) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Solve Lᵀ x = b with L lower-triangular.
pub fn solve_lower_transpose(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    assert_eq!(b.len(), n);
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Solve (L Lᵀ) x = b given the lower factor.
pub fn chol_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Inverse of an SPD matrix via its Cholesky factorization.
pub fn spd_inverse(a: &Matrix, jitter: f64) -> Result<Matrix, LinalgError> {
    let l = cholesky(a, jitter)?;
    let n = a.rows;
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = chol_solve(&l, &e);
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
        e[j] = 0.0;
    }
    Ok(inv)
}

/// log det of L Lᵀ from the lower factor.
pub fn logdet_from_cholesky(l: &Matrix) -> f64 {
    2.0 * (0..l.rows).map(|i| l.get(i, i).ln()).sum::<f64>()
}

/// Mode-k unfolding (1-based mode). Mode k becomes the rows; the remaining
/// modes keep their original order, last one fastest, as the columns.
pub fn unfold(t: &DenseTensor, mode: usize) -> Result<Matrix, LinalgError> {
    let m = t.shape.len();
    if mode < 1 || mode > m {
        return Err(LinalgError::ModeOutOfRange { mode, modes: m });
    }
    let k = mode - 1;
    let rows = t.shape[k];
    let cols = t.data.len() / rows;
    let strides = t.strides();

    // strides of the column index over the remaining modes, in original order
    let mut col_dims: Vec<(usize, usize)> = Vec::with_capacity(m - 1); // (size, src stride)
    for (i, &sz) in t.shape.iter().enumerate() {
        if i != k {
            col_dims.push((sz, strides[i]));
        }
    }
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let base = r * strides[k];
        for c in 0..cols {
            // decode c into the remaining-mode multi-index (last fastest)
            let mut rem = c;
            let mut src = base;
            for &(sz, st) in col_dims.iter().rev() {
                src += (rem % sz) * st;
                rem /= sz;
            }
            out.data[r * cols + c] = t.data[src];
        }
    }
    Ok(out)
}

/// Inverse of [`unfold`]: rebuild the tensor of `shape` from its mode-k unfolding.
pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<DenseTensor, LinalgError> {
    let nm = shape.len();
    if mode < 1 || mode > nm {
        return Err(LinalgError::ModeOutOfRange { mode, modes: nm });
    }
    let k = mode - 1;
    if m.rows != shape[k] || m.rows * m.cols != shape.iter().product::<usize>() {
        return Err(LinalgError::DimMismatch(format!(
            "cannot fold {}x{} into {:?} at mode {}",
            m.rows, m.cols, shape, mode
        )));
    }
    let mut t = DenseTensor::zeros(shape);
    let strides = t.strides();
    let mut col_dims: Vec<(usize, usize)> = Vec::with_capacity(nm - 1);
    for (i, &sz) in shape.iter().enumerate() {
        if i != k {
            col_dims.push((sz, strides[i]));
        }
    }
    for r in 0..m.rows {
        let base = r * strides[k];
        for c in 0..m.cols {
            let mut rem = c;
            let mut dst = base;
            for &(sz, st) in col_dims.iter().rev() {
                dst += (rem % sz) * st;
                rem /= sz;
            }
            t.data[dst] = m.data[r * m.cols + c];
        }
    }
    Ok(t)
}

/// Explicit Kronecker product (oracle-sized inputs only).
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows * b.rows, a.cols * b.cols);
    for ia in 0..a.rows {
        for ja in 0..a.cols {
            let av = a.get(ia, ja);
            for ib in 0..b.rows {
                for jb in 0..b.cols {
                    out.set(ia * b.rows + ib, ja * b.cols + jb, av * b.get(ib, jb));
                }
            }
        }
    }
    out
}

/// Trace and weighted log-det of a Kronecker product of SPD factors, without
/// materializing it: returns (Π_r tr Σ_r, Σ_r (N/d_r)·logdet Σ_r) where
/// N = Π_r d_r.
pub fn kron_diag_stats(factors: &[Matrix]) -> Result<(f64, f64), LinalgError> {
    let total: usize = factors.iter().map(|f| f.rows).product();
    let mut trace_product = 1.0;
    let mut logdet_sum = 0.0;
    for f in factors {
        if !f.is_square() {
            return Err(LinalgError::NotSquare { rows: f.rows, cols: f.cols });
        }
        trace_product *= f.trace();
        let l = cholesky(f, 0.0)?;
        logdet_sum += (total / f.rows) as f64 * logdet_from_cholesky(&l);
    }
    Ok((trace_product, logdet_sum))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues descending, eigenvectors as columns).
pub fn sym_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix), LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = m.data.iter().fold(0.0f64, |mx, x| mx.max(x.abs())).max(1e-300);

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(m.get(i, j).abs());
            }
        }
        if off < 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (m.get(i, i), i)).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let eigvals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (dst, &(_, src)) in pairs.iter().enumerate() {
        for k in 0..n {
            vecs.set(k, dst, v.get(k, src));
        }
    }
    Ok((eigvals, vecs))
}

/// Principal components of a row-sample matrix via the Gram trick.
pub struct PcaBasis {
    /// Column mean of the samples (length d).
    pub mean: Vec<f64>,
    /// d×k, orthonormal components as columns, row-major.
    pub components: Vec<f64>,
    /// Singular values of the centered sample matrix, descending.
    pub singular_values: Vec<f64>,
    pub d: usize,
    pub k: usize,
}

impl PcaBasis {
    /// Component matrix scaled columnwise by σ_j/√N — the warm-start scale
    /// used for basis initialization.
    pub fn scaled_components(&self, n_samples: usize) -> Vec<f64> {
        let mut out = self.components.clone();
        let root_n = (n_samples as f64).sqrt().max(1.0);
        for i in 0..self.d {
            for j in 0..self.k {
                out[i * self.k + j] *= self.singular_values[j] / root_n;
            }
        }
        out
    }
}

/// Top-k PCA of `rows` (N samples of dimension d), d possibly ≫ N,
/// centering the columns first.
pub fn pca_basis(rows: &[Vec<f64>], k: usize) -> Result<PcaBasis, LinalgError> {
    pca_basis_impl(rows, k, true)
}

/// Top-k singular structure of the raw (uncentered) sample matrix. The
/// leading component then carries the sample mean, which makes this the
/// better warm start for multiplicative basis models.
pub fn svd_basis(rows: &[Vec<f64>], k: usize) -> Result<PcaBasis, LinalgError> {
    pca_basis_impl(rows, k, false)
}

fn pca_basis_impl(rows: &[Vec<f64>], k: usize, center: bool) -> Result<PcaBasis, LinalgError> {
    let n = rows.len();
    if n == 0 {
        return Err(LinalgError::DimMismatch("pca of empty sample set".into()));
    }
    let d = rows[0].len();
    if k > n.min(d) {
        return Err(LinalgError::DimMismatch(format!(
            "pca rank {} exceeds min(N={}, d={})",
            k, n, d
        )));
    }
    let mut mean = vec![0.0; d];
    if center {
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
    }
    // Gram matrix of centered rows
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for t in 0..d {
                s += (rows[i][t] - mean[t]) * (rows[j][t] - mean[t]);
            }
            gram.set(i, j, s);
            gram.set(j, i, s);
        }
    }
    let (eigvals, eigvecs) = sym_eig(&gram)?;
    let mut components = vec![0.0; d * k];
    let mut singular_values = vec![0.0; k];
    for j in 0..k {
        let lam = eigvals[j].max(0.0);
        let sv = lam.sqrt();
        singular_values[j] = sv;
        if sv < 1e-12 {
            // rank-deficient direction: leave the component zero
            continue;
        }
        // v_j = Yᵀ u_j / σ_j
        for i in 0..n {
            let u = eigvecs.get(i, j) / sv;
            if u == 0.0 {
                continue;
            }
            for t in 0..d {
                components[t * k + j] += (rows[i][t] - mean[t]) * u;
            }
        }
    }
    Ok(PcaBasis { mean, components, singular_values, d, k })
}
