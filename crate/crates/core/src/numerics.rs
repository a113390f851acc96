//! Dense linear algebra used by the extraction and editing pipeline.
//!
//! Everything here works in `f64`. Singular vectors come from a one-sided
//! (Hestenes) cyclic Jacobi iteration run on whichever side of the input is
//! smaller, which is the Jacobi eigensolver applied implicitly to the smaller
//! Gram matrix. Working on the matrix itself rather than the explicit Gram
//! product keeps tiny singular values accurate enough for rank detection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Off-diagonal tolerance for the Jacobi sweeps.
pub const JACOBI_TOL: f64 = 1e-12;
/// Singular values below this fraction of the largest are flagged degenerate.
pub const RANK_TOL: f64 = 1e-12;
/// Gram-Schmidt residual norm below which a vector is dropped.
pub const DROP_TOL: f64 = 1e-8;

const MAX_SWEEPS: usize = 80;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, found: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equal-length vectors as rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch { expected: cols, found: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Result<Self> {
        Self::from_vec(rows, cols, data.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&x| x as f32).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch { expected: self.cols, found: other.rows });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `x · self` for a row vector `x` of length `rows`.
    pub fn vec_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (k, &a) in x.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (o, &b) in out.iter_mut().zip(self.row(k)) {
                *o += a * b;
            }
        }
        out
    }

    /// `self · x` for a column vector `x` of length `cols`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.row_iter().map(|r| dot(r, x)).collect()
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Mean of each column.
    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        let n = self.rows.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = norm(a) * norm(b);
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

/// Returns `v / ‖v‖`, or `None` for the zero vector.
pub fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Flips `v` so its largest-magnitude component is positive. Ties go to the
/// lowest index.
pub fn orient_by_largest(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Thin singular value decomposition `M = U diag(sigma) Vᵀ`, restricted to
/// the non-degenerate part of the spectrum.
#[derive(Clone, Debug)]
pub struct Svd {
    /// N×r, columns are left singular vectors.
    pub u: Matrix,
    pub sigma: Vec<f64>,
    /// r×d, rows are right singular vectors.
    pub vt: Matrix,
    /// All singular values (length min(N, d)), descending, including the
    /// ones dropped as degenerate.
    pub full_spectrum: Vec<f64>,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.sigma.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul(&self.vt).expect("svd factors are conformant")
    }
}

/// One-sided Jacobi on the columns of `cols` (each of equal length). Rotates
/// in place until all column pairs are orthogonal, accumulating the rotations
/// in `acc` (also column-stored, initially the identity).
fn hestenes(cols: &mut [Vec<f64>], acc: &mut [Vec<f64>]) {
    let n = cols.len();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(cols, p, q, c, s);
                rotate(acc, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (a, b) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Thin SVD of `m`. Components with sigma below `RANK_TOL · sigma_1` are
/// excluded from `u`, `sigma`, `vt` but remain visible in `full_spectrum`.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::Degenerate("matrix contains non-finite values".into()));
    }
    let (n, d) = m.shape();
    let k = n.min(d);
    // Rotate the columns of whichever orientation has fewer columns.
    let wide = d > n;
    let work = if wide { m.clone() } else { m.transpose() };
    // `work` rows are the columns being orthogonalized.
    let mut cols: Vec<Vec<f64>> = work.row_iter().map(<[f64]>::to_vec).collect();
    let mut acc: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut e = vec![0.0; k];
            e[i] = 1.0;
            e
        })
        .collect();
    hestenes(&mut cols, &mut acc);

    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let full_spectrum: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let top = full_spectrum.first().copied().unwrap_or(0.0);
    let keep: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| top > 0.0 && norms[i] >= RANK_TOL * top)
        .collect();

    let r = keep.len();
    let mut u = Matrix::zeros(n, r);
    let mut vt = Matrix::zeros(r, d);
    let mut sigma = Vec::with_capacity(r);
    for (j, &i) in keep.iter().enumerate() {
        let s = norms[i];
        sigma.push(s);
        // Rotated columns live in the "long" space; accumulated rotations in
        // the short one.
        let (mut long, mut short): (Vec<f64>, Vec<f64>) =
            (cols[i].iter().map(|x| x / s).collect(), acc[i].clone());
        // Fix sign on the right vector, carry it to the left one.
        let right = if wide { &mut long } else { &mut short };
        let before = right.clone();
        orient_by_largest(right);
        if before != *right {
            let left = if wide { &mut short } else { &mut long };
            left.iter_mut().for_each(|x| *x = -*x);
        }
        let (left, right) = if wide { (&short, &long) } else { (&long, &short) };
        for row in 0..n {
            u[(row, j)] = left[row];
        }
        vt.row_mut(j).copy_from_slice(right);
    }
    Ok(Svd { u, sigma, vt, full_spectrum })
}

/// A right singular vector with its singular value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularComponent {
    pub vector: Vec<f64>,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopSingular {
    pub components: Vec<SingularComponent>,
    /// 1-based ranks within the requested k whose sigma fell under
    /// `RANK_TOL · sigma_1`; those vectors are not returned.
    pub degenerate: Vec<usize>,
}

/// Top-k right singular vectors of `m`, sigma descending, each oriented so
/// its largest-magnitude component is positive.
pub fn top_right_singular(m: &Matrix, k: usize) -> Result<TopSingular> {
    let max = m.rows().min(m.cols());
    if k > max {
        return Err(Error::RankTooLarge { k, max });
    }
    let dec = svd(m)?;
    if dec.rank() == 0 {
        return Err(Error::Degenerate("matrix has no non-zero singular value".into()));
    }
    let components = (0..k.min(dec.rank()))
        .map(|i| SingularComponent { vector: dec.vt.row(i).to_vec(), sigma: dec.sigma[i] })
        .collect();
    let degenerate = (dec.rank()..k).map(|i| i + 1).collect();
    Ok(TopSingular { components, degenerate })
}

/// Orthonormal rows spanning a subspace of R^d. May be empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl Basis {
    pub const ORTHO_TOL: f64 = 1e-5;
    pub const NORM_TOL: f64 = 1e-6;

    /// Checks orthonormality and wraps the vectors.
    pub fn new(dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self> {
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
            }
            if (norm(v) - 1.0).abs() > Self::NORM_TOL {
                return Err(Error::Degenerate(format!("basis vector {i} is not unit norm")));
            }
            for (j, w) in vectors[..i].iter().enumerate() {
                if dot(v, w).abs() > Self::ORTHO_TOL {
                    return Err(Error::Degenerate(format!(
                        "basis vectors {j} and {i} are not orthogonal"
                    )));
                }
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    /// Flips the sign of vector `i` (orthonormality is preserved).
    pub fn negate(&mut self, i: usize) {
        self.vectors[i].iter_mut().for_each(|x| *x = -*x);
    }

    pub fn as_matrix(&self) -> Matrix {
        if self.vectors.is_empty() {
            return Matrix::zeros(0, self.dim);
        }
        Matrix::from_rows(&self.vectors).expect("basis rows share a dimension")
    }

    /// Dense projector `P = Σ d_i d_iᵀ`.
    pub fn projector(&self) -> Matrix {
        let mut p = Matrix::zeros(self.dim, self.dim);
        for v in &self.vectors {
            for i in 0..self.dim {
                for j in 0..self.dim {
                    p[(i, j)] += v[i] * v[j];
                }
            }
        }
        p
    }

    /// `(I − P) v`.
    pub fn remove_from(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for d in &self.vectors {
            let c = dot(d, v);
            for (o, x) in out.iter_mut().zip(d) {
                *o -= c * x;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Centering {
    /// Decompose the rows as given.
    #[default]
    Uncentered,
    /// Subtract the column mean first.
    Centered,
}

#[derive(Clone, Debug)]
pub struct PrincipalComponents {
    pub basis: Basis,
    /// Per-component share of total variance, for the retained components.
    pub explained: Vec<f64>,
    /// Share of total variance for every non-degenerate component.
    pub spectrum: Vec<f64>,
}

impl PrincipalComponents {
    pub fn r(&self) -> usize {
        self.basis.len()
    }
}

/// Smallest r with Σ_{i≤r} σ_i² / Σ_j σ_j² ≥ `eta`.
pub fn select_rank(sigmas: &[f64], eta: f64) -> usize {
    let total: f64 = sigmas.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    for (i, s) in sigmas.iter().enumerate() {
        acc += s * s;
        if acc / total >= eta {
            return i + 1;
        }
    }
    sigmas.len()
}

pub fn principal_components(
    rows: &Matrix,
    eta: f64,
    centering: Centering,
) -> Result<PrincipalComponents> {
    if rows.rows() == 0 {
        return Err(Error::Degenerate("no rows to decompose".into()));
    }
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidConfig(format!("eta must lie in (0, 1], got {eta}")));
    }
    let mut data = rows.clone();
    if centering == Centering::Centered {
        let mean = rows.column_means();
        for i in 0..data.rows() {
            for (x, m) in data.row_mut(i).iter_mut().zip(&mean) {
                *x -= m;
            }
        }
    }
    let dec = svd(&data)?;
    if dec.rank() == 0 {
        return Err(Error::Degenerate("all-zero input to principal_components".into()));
    }
    let r = select_rank(&dec.sigma, eta);
    let total: f64 = dec.sigma.iter().map(|s| s * s).sum();
    let spectrum: Vec<f64> = dec.sigma.iter().map(|s| s * s / total).collect();
    let vectors = (0..r).map(|i| dec.vt.row(i).to_vec()).collect();
    Ok(PrincipalComponents {
        basis: Basis::new(rows.cols(), vectors)?,
        explained: spectrum[..r].to_vec(),
        spectrum,
    })
}

#[derive(Clone, Debug)]
pub struct Orthonormalized {
    pub basis: Basis,
    /// Input indices dropped for having residual norm under `DROP_TOL`.
    pub dropped: Vec<usize>,
}

/// Modified Gram-Schmidt in input order.
pub fn orthonormalize(vectors: &[Vec<f64>]) -> Result<Orthonormalized> {
    let dim = vectors.first().map_or(0, Vec::len);
    orthonormalize_against(&Basis { dim, vectors: Vec::new() }, vectors)
}

/// Modified Gram-Schmidt of `vectors` against an existing basis and each
/// other. The returned basis holds only the new directions.
pub fn orthonormalize_against(existing: &Basis, vectors: &[Vec<f64>]) -> Result<Orthonormalized> {
    let dim = existing.dim();
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut dropped = Vec::new();
    for (idx, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: v.len() });
        }
        let mut w = v.clone();
        // two passes restore orthogonality lost to cancellation
        for _ in 0..2 {
            for d in existing.vectors().iter().chain(out.iter()) {
                let c = dot(d, &w);
                for (x, y) in w.iter_mut().zip(d) {
                    *x -= c * y;
                }
            }
        }
        let n = norm(&w);
        if n < DROP_TOL {
            dropped.push(idx);
            continue;
        }
        w.iter_mut().for_each(|x| *x /= n);
        out.push(w);
    }
    Ok(Orthonormalized { basis: Basis { dim, vectors: out }, dropped })
}

/// Applies `(I − P)` to every row of `m` (each row is one d-vector).
pub fn complement_apply(basis: &Basis, m: &Matrix) -> Result<Matrix> {
    if basis.is_empty() {
        return Err(Error::Degenerate("empty basis".into()));
    }
    if m.cols() != basis.dim() {
        return Err(Error::DimensionMismatch { expected: basis.dim(), found: m.cols() });
    }
    let mut out = m.clone();
    for i in 0..m.rows() {
        let edited = basis.remove_from(m.row(i));
        out.row_mut(i).copy_from_slice(&edited);
    }
    Ok(out)
}
