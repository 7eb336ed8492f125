//! Exact rational linear algebra on small dense matrices.
//!
//! Everything here operates on `BigRational` scalars so that lattice data,
//! Gram matrices, dual bases and coset computations stay exact.  The sizes
//! involved are tiny (rank + depth rarely exceeds eight), so the algorithms
//! favour clarity over asymptotics: Gauss-Jordan inversion, cofactor-free
//! fraction elimination for determinants, and a column-style Hermite normal
//! form for integer lattices.
//!
//! Contents:
//!   * scalar helpers: `qi`, `qr`, `q_to_f64`, `q_floor`, `q_frac`
//!   * vector helpers: `dot`, `vec_add`, `vec_sub`, `vec_scale`
//!   * `QMat`: dense rational matrix with `mul`, `inverse`, `det`,
//!     `transpose`, block extraction and the Schur complement
//!   * Hermite normal form over the integers: `col_hnf`, `integer_kernel`,
//!     `hnf_basis`, `coset_representatives`
//!   * `enumerate_shifted_ellipsoid`: all points of a shifted integer
//!     lattice inside a positive definite quadric

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};
use thiserror::Error;

/// Exact scalar used throughout the crate.
pub type Q = BigRational;
/// Exact integer used for lattice coordinates.
pub type Z = BigInt;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LinalgError {
    #[error("matrix is singular")]
    Singular,
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
}

// === Scalar helpers ===

/// Rational from an integer.
pub fn qi(n: i64) -> Q {
    Q::from_integer(Z::from(n))
}

/// Rational `n/d`.
pub fn qr(n: i64, d: i64) -> Q {
    Q::new(Z::from(n), Z::from(d))
}

/// Lossy conversion for numeric evaluation.
pub fn q_to_f64(x: &Q) -> f64 {
    x.to_f64().expect("rational out of f64 range")
}

/// Floor as an exact integer.
pub fn q_floor(x: &Q) -> Z {
    x.floor().to_integer()
}

/// Fractional part in `[0, 1)`.
pub fn q_frac(x: &Q) -> Q {
    x - x.floor()
}

/// True when the rational has denominator one.
pub fn q_is_integer(x: &Q) -> bool {
    x.is_integer()
}

// === Vector helpers ===

pub fn dot(a: &[Q], b: &[Q]) -> Q {
    assert_eq!(a.len(), b.len(), "dot product of unequal lengths");
    let mut acc = Q::zero();
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn vec_add(a: &[Q], b: &[Q]) -> Vec<Q> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn vec_sub(a: &[Q], b: &[Q]) -> Vec<Q> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn vec_scale(a: &[Q], s: &Q) -> Vec<Q> {
    a.iter().map(|x| x * s).collect()
}

pub fn vec_neg(a: &[Q]) -> Vec<Q> {
    a.iter().map(|x| -x).collect()
}

pub fn zeros(n: usize) -> Vec<Q> {
    vec![Q::zero(); n]
}

pub fn vec_from_i64(a: &[i64]) -> Vec<Q> {
    a.iter().map(|&x| qi(x)).collect()
}

pub fn vec_is_zero(a: &[Q]) -> bool {
    a.iter().all(|x| x.is_zero())
}

pub fn vec_to_f64(a: &[Q]) -> Vec<f64> {
    a.iter().map(q_to_f64).collect()
}

// === Dense rational matrices ===

/// Dense row-major rational matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QMat {
    rows: usize,
    cols: usize,
    data: Vec<Q>,
}

impl QMat {
    pub fn zero(rows: usize, cols: usize) -> Self {
        QMat { rows, cols, data: vec![Q::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = QMat::zero(n, n);
        for i in 0..n {
            m.set(i, i, Q::one());
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<Q>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        QMat { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    pub fn from_int_rows(rows: &[Vec<i64>]) -> Self {
        QMat::from_rows(rows.iter().map(|r| vec_from_i64(r)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &Q {
        &self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: Q) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> Vec<Q> {
        (0..self.cols).map(|j| self.get(i, j).clone()).collect()
    }

    pub fn col(&self, j: usize) -> Vec<Q> {
        (0..self.rows).map(|i| self.get(i, j).clone()).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<Q>> {
        (0..self.rows).map(|i| self.row(i)).collect()
    }

    pub fn transpose(&self) -> QMat {
        let mut t = QMat::zero(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j).clone());
            }
        }
        t
    }

    pub fn mul(&self, other: &QMat) -> QMat {
        assert_eq!(self.cols, other.rows, "matrix product shape mismatch");
        let mut out = QMat::zero(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a.is_zero() {
                    continue;
                }
                for j in 0..other.cols {
                    let v = out.get(i, j) + a * other.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[Q]) -> Vec<Q> {
        assert_eq!(self.cols, v.len(), "matrix-vector shape mismatch");
        (0..self.rows).map(|i| dot(&self.row(i), v)).collect()
    }

    pub fn add(&self, other: &QMat) -> QMat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        QMat { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &QMat) -> QMat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        QMat { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: &Q) -> QMat {
        QMat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn neg(&self) -> QMat {
        self.scale(&-Q::one())
    }

    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if self.get(i, j) != self.get(j, i) {
                    return false;
                }
            }
        }
        true
    }

    pub fn is_integral(&self) -> bool {
        self.data.iter().all(q_is_integer)
    }

    /// Submatrix picking the given rows and columns in order.
    pub fn submatrix(&self, row_idx: &[usize], col_idx: &[usize]) -> QMat {
        let mut out = QMat::zero(row_idx.len(), col_idx.len());
        for (a, &i) in row_idx.iter().enumerate() {
            for (b, &j) in col_idx.iter().enumerate() {
                out.set(a, b, self.get(i, j).clone());
            }
        }
        out
    }

    /// Block matrix `[[a, b], [c, d]]`.
    pub fn from_blocks(a: &QMat, b: &QMat, c: &QMat, d: &QMat) -> QMat {
        assert_eq!(a.rows, b.rows);
        assert_eq!(c.rows, d.rows);
        assert_eq!(a.cols, c.cols);
        assert_eq!(b.cols, d.cols);
        let mut out = QMat::zero(a.rows + c.rows, a.cols + b.cols);
        for i in 0..a.rows {
            for j in 0..a.cols {
                out.set(i, j, a.get(i, j).clone());
            }
            for j in 0..b.cols {
                out.set(i, a.cols + j, b.get(i, j).clone());
            }
        }
        for i in 0..c.rows {
            for j in 0..c.cols {
                out.set(a.rows + i, j, c.get(i, j).clone());
            }
            for j in 0..d.cols {
                out.set(a.rows + i, a.cols + j, d.get(i, j).clone());
            }
        }
        out
    }

    /// Determinant by rational Gaussian elimination.
    pub fn det(&self) -> Result<Q, LinalgError> {
        if self.rows != self.cols {
            return Err(LinalgError::NotSquare { rows: self.rows, cols: self.cols });
        }
        let n = self.rows;
        if n == 0 {
            return Ok(Q::one());
        }
        let mut m = self.to_rows();
        let mut det = Q::one();
        for col in 0..n {
            let pivot = (col..n).find(|&r| !m[r][col].is_zero());
            let Some(p) = pivot else {
                return Ok(Q::zero());
            };
            if p != col {
                m.swap(p, col);
                det = -det;
            }
            let pv = m[col][col].clone();
            det *= &pv;
            for r in (col + 1)..n {
                if m[r][col].is_zero() {
                    continue;
                }
                let factor = &m[r][col] / &pv;
                for c in col..n {
                    let v = &m[r][c] - &factor * &m[col][c];
                    m[r][c] = v;
                }
            }
        }
        Ok(det)
    }

    /// Inverse by Gauss-Jordan elimination.
    pub fn inverse(&self) -> Result<QMat, LinalgError> {
        if self.rows != self.cols {
            return Err(LinalgError::NotSquare { rows: self.rows, cols: self.cols });
        }
        let n = self.rows;
        let mut m = self.to_rows();
        let mut inv = QMat::identity(n).to_rows();
        for col in 0..n {
            let pivot = (col..n).find(|&r| !m[r][col].is_zero()).ok_or(LinalgError::Singular)?;
            m.swap(pivot, col);
            inv.swap(pivot, col);
            let pv = m[col][col].clone();
            for c in 0..n {
                m[col][c] /= &pv;
                inv[col][c] /= &pv;
            }
            for r in 0..n {
                if r == col || m[r][col].is_zero() {
                    continue;
                }
                let factor = m[r][col].clone();
                for c in 0..n {
                    let v = &m[r][c] - &factor * &m[col][c];
                    m[r][c] = v;
                    let w = &inv[r][c] - &factor * &inv[col][c];
                    inv[r][c] = w;
                }
            }
        }
        Ok(QMat::from_rows(inv))
    }

    /// Solve `self * x = b` for a single right-hand side.
    pub fn solve(&self, b: &[Q]) -> Result<Vec<Q>, LinalgError> {
        Ok(self.inverse()?.mul_vec(b))
    }

    /// Positive definiteness via leading principal minors (symmetric input).
    pub fn is_positive_definite(&self) -> bool {
        if !self.is_symmetric() {
            return false;
        }
        let idx: Vec<usize> = (0..self.rows).collect();
        for k in 1..=self.rows {
            let minor = self.submatrix(&idx[..k], &idx[..k]);
            match minor.det() {
                Ok(d) if d.is_positive() => {}
                _ => return false,
            }
        }
        true
    }

    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        self.to_rows().iter().map(|r| vec_to_f64(r)).collect()
    }
}

/// Schur complement of the trailing block: for `m = [[A, B], [C, D]]` split
/// after row/column `split`, returns `A - B D^{-1} C`.
pub fn schur_complement(m: &QMat, split: usize) -> Result<QMat, LinalgError> {
    if m.rows() != m.cols() {
        return Err(LinalgError::NotSquare { rows: m.rows(), cols: m.cols() });
    }
    if split > m.rows() {
        return Err(LinalgError::DimMismatch(format!(
            "split {} exceeds size {}",
            split,
            m.rows()
        )));
    }
    let top: Vec<usize> = (0..split).collect();
    let bot: Vec<usize> = (split..m.rows()).collect();
    let a = m.submatrix(&top, &top);
    let b = m.submatrix(&top, &bot);
    let c = m.submatrix(&bot, &top);
    let d = m.submatrix(&bot, &bot);
    let d_inv = d.inverse()?;
    Ok(a.sub(&b.mul(&d_inv).mul(&c)))
}

// === Hermite normal form over the integers ===

fn zmat_cols(m: &[Vec<Z>]) -> usize {
    m.first().map_or(0, |r| r.len())
}

/// Column-style HNF: returns `(h, u)` with `mat * u = h`, `u` unimodular and
/// `h` lower column echelon (pivot columns first, then zero columns).
pub fn col_hnf(mat: &[Vec<Z>]) -> (Vec<Vec<Z>>, Vec<Vec<Z>>) {
    let rows = mat.len();
    let cols = zmat_cols(mat);
    let mut h: Vec<Vec<Z>> = mat.to_vec();
    let mut u: Vec<Vec<Z>> = (0..cols)
        .map(|i| (0..cols).map(|j| if i == j { Z::one() } else { Z::zero() }).collect())
        .collect();

    let mut pivot_col = 0usize;
    for r in 0..rows {
        if pivot_col >= cols {
            break;
        }
        // Reduce the row's entries right of the pivot to zero by gcd column ops.
        loop {
            let mut best: Option<usize> = None;
            for j in pivot_col..cols {
                if !h[r][j].is_zero() {
                    best = match best {
                        None => Some(j),
                        Some(b) if h[r][j].abs() < h[r][b].abs() => Some(j),
                        keep => keep,
                    };
                }
            }
            let Some(jmin) = best else {
                break;
            };
            if jmin != pivot_col {
                for row in h.iter_mut() {
                    row.swap(jmin, pivot_col);
                }
                for row in u.iter_mut() {
                    row.swap(jmin, pivot_col);
                }
            }
            let pv = h[r][pivot_col].clone();
            let mut done = true;
            for j in (pivot_col + 1)..cols {
                if h[r][j].is_zero() {
                    continue;
                }
                let q = div_floor_bigint(&h[r][j], &pv);
                if !q.is_zero() {
                    for row in h.iter_mut() {
                        let sub = &row[pivot_col] * &q;
                        row[j] -= sub;
                    }
                    for row in u.iter_mut() {
                        let sub = &row[pivot_col] * &q;
                        row[j] -= sub;
                    }
                }
                if !h[r][j].is_zero() {
                    done = false;
                }
            }
            if done {
                break;
            }
        }
        if h[r][pivot_col].is_zero() {
            continue;
        }
        // Normalise pivot sign and reduce entries left of the pivot.
        if h[r][pivot_col].is_negative() {
            for row in h.iter_mut() {
                row[pivot_col] = -row[pivot_col].clone();
            }
            for row in u.iter_mut() {
                row[pivot_col] = -row[pivot_col].clone();
            }
        }
        let pv = h[r][pivot_col].clone();
        for j in 0..pivot_col {
            let q = div_floor_bigint(&h[r][j], &pv);
            if !q.is_zero() {
                for row in h.iter_mut() {
                    let sub = &row[pivot_col] * &q;
                    row[j] -= sub;
                }
                for row in u.iter_mut() {
                    let sub = &row[pivot_col] * &q;
                    row[j] -= sub;
                }
            }
        }
        pivot_col += 1;
    }
    (h, u)
}

fn div_floor_bigint(a: &Z, b: &Z) -> Z {
    let (q, r) = (a / b, a % b);
    if !r.is_zero() && (r.is_negative() != b.is_negative()) {
        q - Z::one()
    } else {
        q
    }
}

/// Basis (as columns) of the integer kernel `{x : mat x = 0}` of a rational
/// matrix.  The result is saturated: it spans every integer solution.
pub fn integer_kernel(mat: &QMat) -> Vec<Vec<Z>> {
    // Clear denominators row by row; the kernel is unchanged.
    let mut zmat: Vec<Vec<Z>> = Vec::with_capacity(mat.rows());
    for i in 0..mat.rows() {
        let row = mat.row(i);
        let mut lcm = Z::one();
        for x in &row {
            lcm = num::integer::lcm(lcm, x.denom().clone());
        }
        zmat.push(row.iter().map(|x| x.numer() * (&lcm / x.denom())).collect());
    }
    if mat.rows() == 0 {
        // Whole space.
        let n = mat.cols();
        return (0..n)
            .map(|i| (0..n).map(|j| if i == j { Z::one() } else { Z::zero() }).collect())
            .collect();
    }
    let (h, u) = col_hnf(&zmat);
    let cols = zmat_cols(&zmat);
    let mut kernel = Vec::new();
    for j in 0..cols {
        if h.iter().all(|row| row[j].is_zero()) {
            kernel.push(u.iter().map(|row| row[j].clone()).collect());
        }
    }
    kernel
}

/// Canonical lower-triangular HNF basis of the lattice generated by the given
/// integer vectors.  Zero generators are dropped.
pub fn hnf_basis(generators: &[Vec<Z>]) -> Vec<Vec<Z>> {
    if generators.is_empty() {
        return Vec::new();
    }
    let dim = generators[0].len();
    let mat: Vec<Vec<Z>> = (0..dim)
        .map(|i| generators.iter().map(|g| g[i].clone()).collect())
        .collect();
    let (h, _) = col_hnf(&mat);
    let mut basis = Vec::new();
    for j in 0..generators.len() {
        let col: Vec<Z> = h.iter().map(|row| row[j].clone()).collect();
        if col.iter().any(|x| !x.is_zero()) {
            basis.push(col);
        }
    }
    basis
}

/// Canonical representative of `x` modulo the columns of the HNF matrix `h`
/// (square, nonsingular, lower triangular with positive diagonal).
pub fn reduce_mod_hnf(x: &[Z], h: &[Vec<Z>]) -> Vec<Z> {
    let n = x.len();
    let mut v = x.to_vec();
    for i in 0..n {
        let q = div_floor_bigint(&v[i], &h[i][i]);
        if q.is_zero() {
            continue;
        }
        for r in i..n {
            let sub = &h[r][i] * &q;
            v[r] -= sub;
        }
    }
    v
}

/// All coset representatives of `Z^n` modulo the column span of the square
/// integer matrix `cols`, in a deterministic order.
pub fn coset_representatives(cols: &[Vec<Z>]) -> Vec<Vec<Z>> {
    let n = cols.len();
    if n == 0 {
        return vec![Vec::new()];
    }
    let basis = hnf_basis(cols);
    assert_eq!(basis.len(), n, "coset_representatives needs a full-rank span");
    // Columns of the HNF as a row-indexed matrix for reduction.
    let h: Vec<Vec<Z>> = (0..n)
        .map(|i| (0..n).map(|j| basis[j][i].clone()).collect())
        .collect();
    let diag: Vec<i64> = (0..n)
        .map(|i| h[i][i].to_i64().expect("HNF diagonal out of range"))
        .collect();
    let mut reps = Vec::new();
    let mut counter = vec![0i64; n];
    loop {
        let cand: Vec<Z> = counter.iter().map(|&c| Z::from(c)).collect();
        reps.push(reduce_mod_hnf(&cand, &h));
        let mut k = n;
        loop {
            if k == 0 {
                break;
            }
            counter[k - 1] += 1;
            if counter[k - 1] < diag[k - 1] {
                break;
            }
            counter[k - 1] = 0;
            k -= 1;
        }
        if k == 0 {
            break;
        }
    }
    reps.sort();
    reps.dedup();
    reps
}

// === Ellipsoid enumeration ===

/// Decompose a positive definite `g` as sum of squares:
/// `x^T g x = sum_i c_i (x_i + sum_{j>i} m_ij x_j)^2`.
fn squared_completion(g: &QMat) -> Result<Vec<(Q, Vec<Q>)>, LinalgError> {
    let n = g.rows();
    let mut work = g.to_rows();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let c = work[i][i].clone();
        if !c.is_positive() {
            return Err(LinalgError::NotPositiveDefinite);
        }
        let coeffs: Vec<Q> = (i + 1..n).map(|j| &work[i][j] / &c).collect();
        for r in (i + 1)..n {
            for s in (i + 1)..n {
                let v = &work[r][s] - &work[i][r] * &work[i][s] / &c;
                work[r][s] = v;
            }
        }
        out.push((c, coeffs));
    }
    Ok(out)
}

/// Enumerate all `x = shift + n`, `n` integral, with `x^T g x <= bound`,
/// for positive definite `g`.  Deterministic order.
pub fn enumerate_shifted_ellipsoid(
    g: &QMat,
    shift: &[Q],
    bound: &Q,
) -> Result<Vec<Vec<Q>>, LinalgError> {
    let n = g.rows();
    assert_eq!(shift.len(), n);
    if bound.is_negative() {
        return Ok(Vec::new());
    }
    if n == 0 {
        return Ok(vec![Vec::new()]);
    }
    let comp = squared_completion(g)?;
    let mut out = Vec::new();
    let mut x = zeros(n);
    // Process coordinates from the last to the first: the i-th completed
    // square only involves x_i and later coordinates.
    fn recurse(
        level: usize,
        comp: &[(Q, Vec<Q>)],
        shift: &[Q],
        budget: &Q,
        x: &mut Vec<Q>,
        out: &mut Vec<Vec<Q>>,
    ) {
        let i = level - 1;
        let (c, lin) = &comp[i];
        let mut ell = Q::zero();
        for (k, m) in lin.iter().enumerate() {
            ell += m * &x[i + 1 + k];
        }
        // need c * (x_i + ell)^2 <= budget
        let limit = budget / c;
        let center = -(&ell) - &shift[i];
        let r = q_to_f64(&limit).max(0.0).sqrt();
        let c0 = q_to_f64(&center);
        let lo = (c0 - r).floor() as i64 - 1;
        let hi = (c0 + r).ceil() as i64 + 1;
        for t in lo..=hi {
            let xi = &shift[i] + qi(t);
            let term = &xi + &ell;
            let sq = c * &term * &term;
            if &sq > budget {
                continue;
            }
            x[i] = xi;
            if i == 0 {
                out.push(x.clone());
            } else {
                let rem = budget - &sq;
                recurse(i, comp, shift, &rem, x, out);
            }
        }
    }
    recurse(n, &comp, shift, bound, &mut x, &mut out);
    out.sort();
    Ok(out)
}

/// Float variant used by numeric tail sums: integer offsets `k` with
/// `(k + center)^T g (k + center) <= bound`.
pub fn enumerate_ellipsoid_f64(g: &[Vec<f64>], center: &[f64], bound: f64) -> Vec<Vec<i64>> {
    let n = center.len();
    if bound < 0.0 {
        return Vec::new();
    }
    if n == 0 {
        return vec![Vec::new()];
    }
    // Sum-of-squares completion in floats.
    let mut work: Vec<Vec<f64>> = g.to_vec();
    let mut comp: Vec<(f64, Vec<f64>)> = Vec::with_capacity(n);
    for i in 0..n {
        let c = work[i][i];
        assert!(c > 0.0, "enumerate_ellipsoid_f64 needs a positive definite form");
        let coeffs: Vec<f64> = (i + 1..n).map(|j| work[i][j] / c).collect();
        for r in (i + 1)..n {
            for s in (i + 1)..n {
                work[r][s] -= work[i][r] * work[i][s] / c;
            }
        }
        comp.push((c, coeffs));
    }
    let mut out = Vec::new();
    let mut k = vec![0i64; n];
    fn recurse(
        level: usize,
        comp: &[(f64, Vec<f64>)],
        center: &[f64],
        budget: f64,
        k: &mut Vec<i64>,
        out: &mut Vec<Vec<i64>>,
    ) {
        let i = level - 1;
        let (c, lin) = &comp[i];
        let mut ell = 0.0;
        for (t, m) in lin.iter().enumerate() {
            ell += m * (k[i + 1 + t] as f64 + center[i + 1 + t]);
        }
        let r = (budget / c).max(0.0).sqrt() + 1e-9;
        let mid = -ell - center[i];
        let lo = (mid - r).floor() as i64;
        let hi = (mid + r).ceil() as i64;
        for t in lo..=hi {
            let xi = t as f64 + center[i];
            let term = xi + ell;
            let sq = c * term * term;
            if sq > budget {
                continue;
            }
            k[i] = t;
            if i == 0 {
                out.push(k.clone());
            } else {
                recurse(i, comp, center, budget - sq, k, out);
            }
        }
    }
    recurse(n, &comp, center, bound, &mut k, &mut out);
    out.sort();
    out
}
