//! Dense linear algebra for the small matrices this crate works with.
//!
//! Everything here is row-major `f64`. Symmetric eigenproblems go through a
//! cyclic Jacobi solver; singular values of general matrices come from the
//! spectrum of the Gram matrix.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative cutoff used by [`pinv_psd`].
pub const DEFAULT_PINV_TOL: f64 = 1e-10;

const SYMMETRY_TOL: f64 = 1e-10;
const QL_MAX_ITERS: usize = 60;

/// Row-major dense matrix of finite reals.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major entries, validating shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::contract(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite entry at flat index {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::contract("ragged rows"));
        }
        Self::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::contract(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::contract(format!(
                "matmul: {:?} * {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::contract(format!(
                "t_matmul: {:?}^T * {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::contract(format!(
                "matmul_t: {:?} * {:?}^T",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `self^T v`.
    pub fn t_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::contract(format!(
                "t_matvec: {:?}^T * vec[{}]",
                self.shape(),
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    /// `self v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::contract(format!(
                "matvec: {:?} * vec[{}]",
                self.shape(),
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `self self^T`.
    pub fn gram_rows(&self) -> Self {
        let n = self.rows;
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot(self.row(i), self.row(j));
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// `self^T self`.
    pub fn gram_cols(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.cols);
        for k in 0..self.rows {
            let row = self.row(k);
            for i in 0..self.cols {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                for j in i..self.cols {
                    out.data[i * self.cols + j] += a * row[j];
                }
            }
        }
        for i in 0..self.cols {
            for j in 0..i {
                out.data[i * self.cols + j] = out.data[j * self.cols + i];
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, scale: f64, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add_scaled")?;
        Ok(self.zip_map(other, |a, b| a + scale * b))
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add_identity(&self, s: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out[(i, i)] += s;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    /// Frobenius inner product.
    pub fn inner(&self, other: &Self) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let mut sq = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, v) in sq.iter_mut().zip(self.row(i)) {
                *s += v * v;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    /// Symmetric part `(M + M^T) / 2`.
    pub fn symmetrize(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    /// Relative asymmetry `max |M_ij - M_ji| / max(max|M|, tiny)`.
    pub fn asymmetry(&self) -> f64 {
        if self.rows != self.cols {
            return f64::INFINITY;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Eigenvalues, sorted descending.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in the order of `values`.
    pub vectors: DenseMatrix,
}

impl SymEigen {
    /// `V diag(f(λ)) V^T`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let n = self.values.len();
        let mapped: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let v = &self.vectors;
        DenseMatrix::from_fn(n, n, |i, j| {
            (0..n).map(|k| v[(i, k)] * mapped[k] * v[(j, k)]).sum()
        })
    }
}

fn require_symmetric(m: &DenseMatrix, op: &str) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(Error::contract(format!(
            "{op}: expected square matrix, got {:?}",
            m.shape()
        )));
    }
    if !m.is_finite() {
        return Err(Error::contract(format!("{op}: non-finite entries")));
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::contract(format!(
            "{op}: matrix not symmetric (relative asymmetry {asym:.3e})"
        )));
    }
    Ok(())
}

/// Eigenvalues (descending) and eigenvectors of a symmetric matrix:
/// Householder reduction to tridiagonal form, then implicit QL with shifts.
pub fn sym_spectral(m: &DenseMatrix) -> Result<SymEigen> {
    require_symmetric(m, "sym_spectral")?;
    let n = m.rows();
    if n == 0 {
        return Ok(SymEigen {
            values: Vec::new(),
            vectors: DenseMatrix::zeros(0, 0),
        });
    }
    let sym = m.symmetrize();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| sym.row(i).to_vec()).collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut v, &mut d, &mut e);
    tridiagonal_ql(&mut v, &mut d, &mut e)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, k| v[i][order[k]]);
    Ok(SymEigen { values, vectors })
}

// Householder tridiagonalization (EISPACK tred2). On return `d` holds the
// diagonal, `e[1..]` the subdiagonal and `v` the accumulated transform.
fn tridiagonalize(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    d.copy_from_slice(&v[n - 1]);
    for i in (1..n).rev() {
        let scale: f64 = d[..i].iter().map(|x| x.abs()).sum();
        let mut h = 0.0;
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for dk in d[..i].iter_mut() {
                *dk /= scale;
                h += *dk * *dk;
            }
            let f = d[i - 1];
            let g = if f > 0.0 { -h.sqrt() } else { h.sqrt() };
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].iter_mut().for_each(|x| *x = 0.0);
            for j in 0..i {
                let f = d[j];
                v[j][i] = f;
                let mut g = e[j] + v[j][j] * f;
                for k in j + 1..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let g: f64 = (0..=i).map(|k| v[k][i + 1] * v[k][j]).sum();
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[k][i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

// Implicit QL on the tridiagonal form (EISPACK tql2), accumulating into `v`.
fn tridiagonal_ql(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= f64::EPSILON * tst1 {
                break;
            }
            m += 1;
        }
        let m = m.min(n - 1);
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > QL_MAX_ITERS {
                    return Err(Error::Degenerate("symmetric eigensolver did not converge".into()));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    let h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        let h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= f64::EPSILON * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Singular values of a general matrix, descending, via the spectrum of the
/// smaller Gram matrix.
pub fn singular_values(m: &DenseMatrix) -> Vec<f64> {
    let gram = if m.rows() >= m.cols() {
        m.gram_cols()
    } else {
        m.gram_rows()
    };
    let eig = sym_spectral(&gram).expect("Gram matrices are symmetric");
    eig.values.into_iter().map(|l| l.max(0.0).sqrt()).collect()
}

/// Largest singular value.
pub fn spectral_norm(m: &DenseMatrix) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Orthonormal basis of the column space of a full-column-rank `d x r` matrix.
///
/// Modified Gram-Schmidt with one re-orthogonalization pass. The columns of
/// the result have the same orientation as the input (positive `R` diagonal),
/// so an input that is already orthonormal comes back unchanged.
pub fn orthonormalize(m: &DenseMatrix) -> Result<DenseMatrix> {
    let (d, r) = m.shape();
    if d < r {
        return Err(Error::contract(format!(
            "orthonormalize: need rows >= cols, got {d}x{r}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::contract("orthonormalize: non-finite entries"));
    }
    let mut cols: Vec<Vec<f64>> = (0..r).map(|j| m.column(j)).collect();
    let largest = cols.iter().map(|c| norm2(c)).fold(0.0, f64::max);
    if largest == 0.0 {
        return Err(Error::Degenerate("orthonormalize: zero matrix".into()));
    }
    for j in 0..r {
        let (done, rest) = cols.split_at_mut(j);
        let col = &mut rest[0];
        for _pass in 0..2 {
            for q in done.iter() {
                let proj = dot(q, col);
                for (c, qi) in col.iter_mut().zip(q) {
                    *c -= proj * qi;
                }
            }
        }
        let nrm = norm2(col);
        if nrm <= 1e-12 * largest {
            return Err(Error::Degenerate(format!(
                "orthonormalize: column {j} is linearly dependent (residual {nrm:.3e})"
            )));
        }
        for c in col.iter_mut() {
            *c /= nrm;
        }
    }
    let mut out = DenseMatrix::zeros(d, r);
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    Ok(out)
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix. Eigenvalues below
/// `tol * λ_max` are treated as zero.
pub fn pinv_psd(m: &DenseMatrix, tol: f64) -> Result<DenseMatrix> {
    require_symmetric(m, "pinv_psd")?;
    let eig = sym_spectral(m)?;
    let lmax = eig.values.first().copied().unwrap_or(0.0);
    if lmax <= 0.0 {
        return Ok(DenseMatrix::zeros(m.rows(), m.cols()));
    }
    let cutoff = tol * lmax;
    Ok(eig.reconstruct_with(|l| if l > cutoff { 1.0 / l } else { 0.0 }))
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(m: &DenseMatrix) -> Result<DenseMatrix> {
    require_symmetric(m, "cholesky")?;
    let n = m.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) {
            return Err(Error::Singular {
                pivot: j,
                value: diag,
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// `ln det M` for symmetric positive-definite `M`, as twice the sum of the
/// log Cholesky pivots.
pub fn logdet_psd(m: &DenseMatrix) -> Result<f64> {
    let l = cholesky(m)?;
    Ok(2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>())
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
pub fn spd_inverse(m: &DenseMatrix) -> Result<DenseMatrix> {
    let l = cholesky(m)?;
    let n = l.rows();
    // Solve L L^T X = I column by column.
    let mut inv = DenseMatrix::zeros(n, n);
    let mut y = vec![0.0; n];
    for col in 0..n {
        for i in 0..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[(k, i)] * inv[(k, col)];
            }
            inv[(i, col)] = s / l[(i, i)];
        }
    }
    Ok(inv.symmetrize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_symmetric(n: usize, rng: &mut impl Rng) -> DenseMatrix {
        random_matrix(n, n, rng).symmetrize()
    }

    // det(M - λI) by Gaussian elimination with partial pivoting.
    fn char_poly(m: &DenseMatrix, lambda: f64) -> f64 {
        let n = m.rows();
        let mut a = m.add_identity(-lambda);
        let mut det = 1.0;
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
                .unwrap();
            if a[(piv, col)] == 0.0 {
                return 0.0;
            }
            if piv != col {
                for k in 0..n {
                    let tmp = a[(col, k)];
                    a[(col, k)] = a[(piv, k)];
                    a[(piv, k)] = tmp;
                }
                det = -det;
            }
            det *= a[(col, col)];
            for i in col + 1..n {
                let f = a[(i, col)] / a[(col, col)];
                for k in col..n {
                    a[(i, k)] -= f * a[(col, k)];
                }
            }
        }
        det
    }

    fn roots_by_bisection(m: &DenseMatrix) -> Vec<f64> {
        let n = m.rows();
        let bound = (0..n)
            .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
            + 1.0;
        let steps = 20_000;
        let h = 2.0 * bound / steps as f64;
        let mut roots = Vec::new();
        let mut lo = -bound;
        let mut f_lo = char_poly(m, lo);
        for s in 1..=steps {
            let hi = -bound + s as f64 * h;
            let f_hi = char_poly(m, hi);
            if f_lo.signum() != f_hi.signum() {
                let (mut a, mut b, mut fa) = (lo, hi, f_lo);
                for _ in 0..200 {
                    let mid = 0.5 * (a + b);
                    let fm = char_poly(m, mid);
                    if fm.signum() == fa.signum() {
                        a = mid;
                        fa = fm;
                    } else {
                        b = mid;
                    }
                }
                roots.push(0.5 * (a + b));
            }
            lo = hi;
            f_lo = f_hi;
        }
        roots.sort_by(|a, b| b.total_cmp(a));
        roots
    }

    #[test]
    fn spectral_identity_and_diagonal() {
        let eig = sym_spectral(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(eig.values, vec![1.0, 1.0, 1.0]);
        let eig = sym_spectral(&DenseMatrix::from_diag(&[1.0, 4.0])).unwrap();
        assert_eq!(eig.values, vec![4.0, 1.0]);
    }

    #[test]
    fn spectral_matches_characteristic_roots() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let m = random_symmetric(5, &mut rng);
            let eig = sym_spectral(&m).unwrap();
            let roots = roots_by_bisection(&m);
            assert_eq!(roots.len(), 5, "all roots bracketed");
            for (l, r) in eig.values.iter().zip(&roots) {
                assert!((l - r).abs() < 1e-9, "{l} vs {r}");
            }
            let recon = eig.reconstruct_with(|l| l);
            assert!(recon.sub(&m).unwrap().frobenius_norm() <= 1e-8 * m.frobenius_norm());
        }
    }

    #[test]
    fn spectral_rejects_bad_input() {
        assert!(matches!(
            sym_spectral(&DenseMatrix::zeros(2, 3)),
            Err(Error::ContractViolation(_))
        ));
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_spectral(&m), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn spectral_shift_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_symmetric(6, &mut rng);
        let eps = 1e-3;
        let a = sym_spectral(&m).unwrap().values;
        let b = sym_spectral(&m.add_identity(eps)).unwrap().values;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - (y - eps)).abs() <= 1e-8);
        }
    }

    #[test]
    fn orthonormalize_cases() {
        let m = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let q = orthonormalize(&m).unwrap();
        let expected =
            DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(q, expected);
        assert_eq!(orthonormalize(&q).unwrap(), q);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_matrix(6, 3, &mut rng);
        let q = orthonormalize(&m).unwrap();
        let qtq = q.gram_cols();
        assert!(qtq.sub(&DenseMatrix::identity(3)).unwrap().frobenius_norm() < 1e-10);
        let p = q.matmul_t(&q).unwrap();
        let pm = p.matmul(&m).unwrap();
        assert!(pm.sub(&m).unwrap().frobenius_norm() < 1e-10);
    }

    #[test]
    fn orthonormalize_rank_deficient() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(orthonormalize(&m), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pinv_cases() {
        assert_eq!(
            pinv_psd(&DenseMatrix::identity(3), DEFAULT_PINV_TOL).unwrap(),
            DenseMatrix::identity(3)
        );
        let p = pinv_psd(&DenseMatrix::from_diag(&[2.0, 0.0]), 1e-8).unwrap();
        assert_relative_eq!(p[(0, 0)], 0.5, epsilon = 1e-14);
        assert_relative_eq!(p[(1, 1)], 0.0, epsilon = 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_matrix(4, 2, &mut rng);
        let m = f.matmul_t(&f).unwrap();
        let mp = pinv_psd(&m, DEFAULT_PINV_TOL).unwrap();
        let mmm = m.matmul(&mp).unwrap().matmul(&m).unwrap();
        assert!(mmm.sub(&m).unwrap().frobenius_norm() < 1e-8);
    }

    #[test]
    fn pinv_is_involutive_on_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = random_matrix(5, 5, &mut rng);
        let m = f.matmul_t(&f).unwrap().add_identity(0.1);
        let back = pinv_psd(&pinv_psd(&m, DEFAULT_PINV_TOL).unwrap(), DEFAULT_PINV_TOL).unwrap();
        assert!(back.sub(&m).unwrap().frobenius_norm() <= 1e-7 * m.frobenius_norm());
    }

    #[test]
    fn logdet_cases() {
        assert_eq!(logdet_psd(&DenseMatrix::identity(4)).unwrap(), 0.0);
        assert_relative_eq!(
            logdet_psd(&DenseMatrix::from_diag(&[1.0, 4.0])).unwrap(),
            4f64.ln(),
            epsilon = 1e-14
        );
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = random_matrix(6, 6, &mut rng);
        let m = f.matmul_t(&f).unwrap().add_identity(0.5);
        let spectral: f64 = sym_spectral(&m).unwrap().values.iter().map(|l| l.ln()).sum();
        assert!((logdet_psd(&m).unwrap() - spectral).abs() < 1e-9);
    }

    #[test]
    fn logdet_reports_failing_pivot() {
        let m = DenseMatrix::from_diag(&[1.0, 2.0, -1.0]);
        match logdet_psd(&m) {
            Err(Error::Singular { pivot, .. }) => assert_eq!(pivot, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn logdet_multiplicative_on_diagonals() {
        let a = DenseMatrix::from_diag(&[0.5, 3.0, 7.0]);
        let b = DenseMatrix::from_diag(&[2.0, 0.1, 4.0]);
        let ab = a.matmul(&b).unwrap();
        let lhs = logdet_psd(&ab).unwrap();
        let rhs = logdet_psd(&a).unwrap() + logdet_psd(&b).unwrap();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn spd_inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let f = random_matrix(4, 4, &mut rng);
        let m = f.matmul_t(&f).unwrap().add_identity(0.3);
        let inv = spd_inverse(&m).unwrap();
        let prod = m.matmul(&inv).unwrap();
        assert!(prod.sub(&DenseMatrix::identity(4)).unwrap().frobenius_norm() < 1e-10);
    }

    #[test]
    fn singular_values_of_diagonal_block() {
        let m = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, -2.0], vec![0.0, 0.0]]).unwrap();
        let s = singular_values(&m);
        assert_relative_eq!(s[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(s[1], 2.0, epsilon = 1e-12);
    }

    fn assert_decomposes(m: &DenseMatrix, tol: f64) {
        let n = m.rows();
        let eig = sym_spectral(m).unwrap();
        assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        let vtv = eig.vectors.t_matmul(&eig.vectors).unwrap();
        assert!(vtv.sub(&DenseMatrix::identity(n)).unwrap().max_abs() < tol);
        let back = eig.reconstruct_with(|l| l);
        assert!(back.sub(m).unwrap().max_abs() < tol * (1.0 + m.max_abs()));
    }

    #[test]
    fn spectral_handles_repeated_and_clustered_eigenvalues() {
        let u = [0.6, 0.0, -0.8, 0.0];
        let rank_one = DenseMatrix::from_fn(4, 4, |i, j| u[i] * u[j]);
        assert_decomposes(&rank_one.add_identity(2.0), 1e-12);
        assert_decomposes(&DenseMatrix::identity(5).scale(3.0), 1e-12);
        assert_decomposes(&DenseMatrix::from_diag(&[1.0, 1.0 + 1e-13, 5.0, -2.0]), 1e-12);
        let one = sym_spectral(&DenseMatrix::from_rows(&[vec![-4.0]]).unwrap()).unwrap();
        assert_eq!(one.values, vec![-4.0]);
        assert_eq!(sym_spectral(&DenseMatrix::zeros(0, 0)).unwrap().values.len(), 0);
    }

    proptest::proptest! {
        #[test]
        fn spectral_reconstructs(n in 1usize..40, seed in 0u64..1_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_decomposes(&random_symmetric(n, &mut rng), 1e-11);
        }
    }
}
