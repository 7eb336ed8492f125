//! Integral lattices with exact rational arithmetic.
//!
//! A [`Lattice`] is a positive definite even Gram matrix over a fixed basis.
//! A [`DVectorSet`] selects depth vectors inside it and carries the pairing
//! matrices needed everywhere else: the mixed pairings `C` and the Gram `D`
//! of the selected vectors.  [`embed_indefinite`] doubles the lattice into a
//! signature `(N, M)` form, [`c_coefficients`] orthogonalises one subset of
//! depth vectors against the complementary one, and [`glue_vectors`]
//! enumerates the cosets joining the two orthogonal sublattices.  The `A_N`
//! family (Cartan matrices, Weyl reflections, discriminant classes) is
//! provided as the concrete test bed used throughout the crate.

use num::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ratmat::{
    coset_representatives, dot, integer_kernel, q_frac, q_is_integer, qi, vec_add, vec_scale,
    vec_sub, zeros, LinalgError, QMat, Q, Z,
};

pub use crate::ratmat::schur_complement;

/// Coordinate vector in the basis of its owning lattice.
pub type LatticeVector = Vec<Q>;

/// Errors for lattice construction and the derived constructions.
#[derive(Debug, Error)]
pub enum LatticeError {
    #[error("rank must be at least 1")]
    InvalidRank,
    #[error("gram matrix must be square and symmetric")]
    NotSymmetric,
    #[error("gram matrix must be integral with even diagonal")]
    NotEven,
    #[error("gram matrix must be positive definite")]
    NotPositiveDefinite,
    #[error("vector has {got} coordinates, expected {want}")]
    WrongDimension { want: usize, got: usize },
    #[error("depth vectors must have integer coordinates")]
    NonIntegralVector,
    #[error("depth vectors must be linearly independent")]
    DependentVectors,
    #[error("vector does not lie in the span of the depth vectors")]
    OutsideSpan,
    #[error("index sets must partition 0..{depth}: V={v:?}, S={s:?}")]
    BadSubsetSplit { depth: usize, v: Vec<usize>, s: Vec<usize> },
    #[error("simple-root index {index} out of range for rank {rank}")]
    RootIndexOutOfRange { rank: usize, index: usize },
    #[error("glue count {num}/{den} is not the square of an integer")]
    GlueCountNotSquare { num: Z, den: Z },
    #[error("glue count {formula} disagrees with the coset index {index}")]
    GlueCountMismatch { formula: usize, index: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

// === Core types ===

/// Positive definite even lattice described by its Gram matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lattice {
    rank: usize,
    gram: QMat,
    label: Option<String>,
}

impl Lattice {
    /// Validates symmetry, integrality, even diagonal and positive
    /// definiteness before accepting the Gram matrix.
    pub fn new(gram: QMat, label: Option<String>) -> Result<Self, LatticeError> {
        let n = gram.rows();
        if n == 0 {
            return Err(LatticeError::InvalidRank);
        }
        if gram.cols() != n || !gram.is_symmetric() {
            return Err(LatticeError::NotSymmetric);
        }
        if !gram.is_integral() {
            return Err(LatticeError::NotEven);
        }
        for i in 0..n {
            let two = qi(2);
            if !q_is_integer(&(gram.get(i, i) / &two)) {
                return Err(LatticeError::NotEven);
            }
        }
        if !gram.is_positive_definite() {
            return Err(LatticeError::NotPositiveDefinite);
        }
        Ok(Lattice { rank: n, gram, label })
    }

    /// Builds from integer Gram rows.
    pub fn from_int_rows(rows: &[Vec<i64>], label: Option<String>) -> Result<Self, LatticeError> {
        Self::new(QMat::from_int_rows(rows), label)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn gram(&self) -> &QMat {
        &self.gram
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    /// Determinant of the Gram matrix, the order of the discriminant group.
    pub fn det(&self) -> Q {
        self.gram.det().expect("validated square matrix")
    }

    fn check_dim(&self, x: &[Q]) -> Result<(), LatticeError> {
        if x.len() != self.rank {
            return Err(LatticeError::WrongDimension { want: self.rank, got: x.len() });
        }
        Ok(())
    }

    /// Bilinear pairing of two coordinate vectors.
    pub fn bilinear(&self, x: &[Q], y: &[Q]) -> Result<Q, LatticeError> {
        self.check_dim(x)?;
        self.check_dim(y)?;
        Ok(dot(x, &self.gram.mul_vec(y)))
    }

    /// Quadratic value of a coordinate vector.
    pub fn quadratic(&self, x: &[Q]) -> Result<Q, LatticeError> {
        self.bilinear(x, x)
    }

    /// Membership in the lattice itself: integer coordinates.
    pub fn contains(&self, x: &[Q]) -> bool {
        x.len() == self.rank && x.iter().all(q_is_integer)
    }

    /// Membership in the dual lattice: integral pairing with every basis
    /// vector.
    pub fn dual_contains(&self, x: &[Q]) -> bool {
        x.len() == self.rank && self.gram.mul_vec(x).iter().all(q_is_integer)
    }
}

/// Depth vectors `d_1..d_M` inside a lattice, with the pairing matrices that
/// the doubled lattice and the completion terms are built from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DVectorSet {
    coords: QMat,
    c_matrix: QMat,
    d_matrix: QMat,
    d_inverse: QMat,
}

impl DVectorSet {
    /// Validates integrality and independence; `vectors` may be empty.
    pub fn new(lattice: &Lattice, vectors: &[LatticeVector]) -> Result<Self, LatticeError> {
        let n = lattice.rank();
        let m = vectors.len();
        if m > n {
            return Err(LatticeError::DependentVectors);
        }
        let mut coords = QMat::zero(n, m);
        for (r, v) in vectors.iter().enumerate() {
            lattice.check_dim(v)?;
            if !v.iter().all(q_is_integer) {
                return Err(LatticeError::NonIntegralVector);
            }
            for i in 0..n {
                coords.set(i, r, v[i].clone());
            }
        }
        let c_matrix = lattice.gram().mul(&coords);
        let d_matrix = coords.transpose().mul(&c_matrix);
        if m > 0 && !d_matrix.is_positive_definite() {
            return Err(LatticeError::DependentVectors);
        }
        let d_inverse = d_matrix.inverse()?;
        Ok(DVectorSet { coords, c_matrix, d_matrix, d_inverse })
    }

    /// Builds from integer coordinate rows.
    pub fn from_int_rows(lattice: &Lattice, rows: &[Vec<i64>]) -> Result<Self, LatticeError> {
        let vectors: Vec<LatticeVector> =
            rows.iter().map(|r| r.iter().map(|&x| qi(x)).collect()).collect();
        Self::new(lattice, &vectors)
    }

    /// Number of depth vectors.
    pub fn depth(&self) -> usize {
        self.coords.cols()
    }

    /// Ambient rank.
    pub fn rank(&self) -> usize {
        self.coords.rows()
    }

    /// Coordinate matrix with `d_r` as column `r`.
    pub fn coords(&self) -> &QMat {
        &self.coords
    }

    /// The mixed pairing matrix with entries pairing basis vectors against
    /// depth vectors.
    pub fn c_matrix(&self) -> &QMat {
        &self.c_matrix
    }

    /// Gram matrix of the depth vectors.
    pub fn d_matrix(&self) -> &QMat {
        &self.d_matrix
    }

    pub fn d_inverse(&self) -> &QMat {
        &self.d_inverse
    }

    /// Coordinates of the depth vector `d_r`.
    pub fn vector(&self, r: usize) -> LatticeVector {
        self.coords.col(r)
    }

    pub fn vectors(&self) -> Vec<LatticeVector> {
        (0..self.depth()).map(|r| self.vector(r)).collect()
    }

    /// Expands a combination of depth vectors back into lattice coordinates.
    pub fn from_d_coefficients(&self, c: &[Q]) -> LatticeVector {
        assert_eq!(c.len(), self.depth());
        self.coords.mul_vec(c)
    }

    /// Coefficients of `x` over the depth vectors, or an error when `x` is
    /// outside their span.
    pub fn span_coefficients(&self, x: &[Q]) -> Result<Vec<Q>, LatticeError> {
        if x.len() != self.rank() {
            return Err(LatticeError::WrongDimension { want: self.rank(), got: x.len() });
        }
        let pairings = self.c_matrix.transpose().mul_vec(x);
        let coeffs = self.d_inverse.mul_vec(&pairings);
        if self.from_d_coefficients(&coeffs) != x {
            return Err(LatticeError::OutsideSpan);
        }
        Ok(coeffs)
    }
}

// === A_N family ===

/// Tridiagonal `A_N` Cartan matrix as a lattice; determinant `N + 1`.
pub fn cartan_an(n: usize) -> Result<Lattice, LatticeError> {
    if n == 0 {
        return Err(LatticeError::InvalidRank);
    }
    let mut gram = QMat::zero(n, n);
    for i in 0..n {
        gram.set(i, i, qi(2));
        if i + 1 < n {
            gram.set(i, i + 1, qi(-1));
            gram.set(i + 1, i, qi(-1));
        }
    }
    Lattice::new(gram, Some(format!("A{n}")))
}

/// Exact inverse of the `A_N` Cartan matrix, entry `(j, l)` equal to
/// `min(j, l) - jl/(N+1)` for 1-based indices.
pub fn inverse_cartan(n: usize) -> Result<QMat, LatticeError> {
    if n == 0 {
        return Err(LatticeError::InvalidRank);
    }
    let np1 = qi((n + 1) as i64);
    let mut out = QMat::zero(n, n);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = ((i + 1) as i64, (j + 1) as i64);
            out.set(i, j, qi(a.min(b)) - qi(a) * qi(b) / &np1);
        }
    }
    Ok(out)
}

/// Reflection along the simple root with 0-based index `m`, as a matrix
/// acting on coordinate columns.  Involutive and Gram preserving.
pub fn weyl_reflection(n: usize, m: usize) -> Result<QMat, LatticeError> {
    if m >= n {
        return Err(LatticeError::RootIndexOutOfRange { rank: n, index: m });
    }
    let mut s = QMat::identity(n);
    s.set(m, m, qi(-1));
    if m >= 1 {
        s.set(m, m - 1, qi(1));
    }
    if m + 1 < n {
        s.set(m, m + 1, qi(1));
    }
    Ok(s)
}

/// Discriminant-group representatives of `A_N`, canonicalised to `[0, 1)`
/// coordinates.  With `mod_inversion`, one representative per pair under
/// negation is kept.
pub fn conjugacy_classes(n: usize, mod_inversion: bool) -> Result<Vec<LatticeVector>, LatticeError> {
    let generator = inverse_cartan(n)?.col(n - 1);
    let top = if mod_inversion { (n + 1) / 2 } else { n };
    let mut out = Vec::with_capacity(top + 1);
    for j in 0..=top {
        let scaled = vec_scale(&generator, &qi(j as i64));
        out.push(scaled.iter().map(q_frac).collect());
    }
    Ok(out)
}

// === Derived constructions ===

/// Dual basis; `d_r*` pairs to `delta_{rs}` against the depth vectors.
pub fn dual_vectors(ds: &DVectorSet) -> Vec<LatticeVector> {
    let duals = ds.coords().mul(ds.d_inverse());
    (0..ds.depth()).map(|r| duals.col(r)).collect()
}

/// Orthogonal projection onto the span of the depth vectors, in lattice
/// coordinates.  Idempotent; the identity when the span is full.
pub fn projection_matrix(lattice: &Lattice, ds: &DVectorSet) -> QMat {
    let n = lattice.rank();
    if ds.depth() == 0 {
        return QMat::zero(n, n);
    }
    ds.coords().mul(ds.d_inverse()).mul(&ds.c_matrix().transpose())
}

/// Doubled lattice of signature `(N, M)` over the mixed basis, with the
/// change of basis to the orthogonal splitting and the dual null directions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndefiniteEmbedding {
    rank_pos: usize,
    rank_neg: usize,
    ul_gram: QMat,
    ul_gram_inv: QMat,
    g_matrix: QMat,
    g_inverse: QMat,
    split_gram: QMat,
    null_vectors: Vec<Vec<Q>>,
    cr_vectors: Vec<Vec<Q>>,
    cr_prime_vectors: Vec<Vec<Q>>,
    det_value: Q,
}

impl IndefiniteEmbedding {
    /// Positive rank `N`.
    pub fn rank_pos(&self) -> usize {
        self.rank_pos
    }

    /// Negative rank `M`.
    pub fn rank_neg(&self) -> usize {
        self.rank_neg
    }

    /// Gram matrix over the mixed basis, block form `[[A, C], [C^T, 0]]`.
    pub fn ul_gram(&self) -> &QMat {
        &self.ul_gram
    }

    pub fn ul_gram_inv(&self) -> &QMat {
        &self.ul_gram_inv
    }

    /// Columns express the orthogonal-splitting basis in mixed coordinates.
    pub fn g_matrix(&self) -> &QMat {
        &self.g_matrix
    }

    pub fn g_inverse(&self) -> &QMat {
        &self.g_inverse
    }

    /// Block diagonal Gram `A (+) -D` of the orthogonal splitting.
    pub fn split_gram(&self) -> &QMat {
        &self.split_gram
    }

    /// Null directions in splitting coordinates: the image of `d_r` embedded
    /// diagonally in both factors.
    pub fn null_vectors(&self) -> &[Vec<Q>] {
        &self.null_vectors
    }

    /// Dual wall vectors in mixed coordinates.
    pub fn cr_vectors(&self) -> &[Vec<Q>] {
        &self.cr_vectors
    }

    /// Mixed-basis unit vectors in the negative slots.
    pub fn cr_prime_vectors(&self) -> &[Vec<Q>] {
        &self.cr_prime_vectors
    }

    pub fn det_value(&self) -> &Q {
        &self.det_value
    }

    /// Pairing of two mixed-coordinate vectors.
    pub fn ul_bilinear(&self, x: &[Q], y: &[Q]) -> Q {
        dot(x, &self.ul_gram.mul_vec(y))
    }

    pub fn ul_quadratic(&self, x: &[Q]) -> Q {
        self.ul_bilinear(x, x)
    }

    /// Mixed coordinates from splitting coordinates.
    pub fn mixed_from_split(&self, w: &[Q]) -> Vec<Q> {
        self.g_matrix.mul_vec(w)
    }

    /// Splitting coordinates from mixed coordinates.
    pub fn split_from_mixed(&self, w: &[Q]) -> Vec<Q> {
        self.g_inverse.mul_vec(w)
    }
}

/// Builds the signature `(N, M)` doubling of `lattice` along `ds`.
pub fn embed_indefinite(
    lattice: &Lattice,
    ds: &DVectorSet,
) -> Result<IndefiniteEmbedding, LatticeError> {
    let n = lattice.rank();
    let m = ds.depth();
    let a = lattice.gram().clone();
    let c = ds.c_matrix().clone();
    let ul_gram =
        QMat::from_blocks(&a, &c, &c.transpose(), &QMat::zero(m, m));
    let a_inv = a.inverse()?;
    let d_inv = ds.d_inverse().clone();
    let aic = a_inv.mul(&c);
    let top_left = a_inv.sub(&aic.mul(&d_inv).mul(&aic.transpose()));
    let top_right = aic.mul(&d_inv);
    let ul_gram_inv =
        QMat::from_blocks(&top_left, &top_right, &top_right.transpose(), &d_inv.neg());
    let g_matrix = QMat::from_blocks(
        &QMat::identity(n),
        &aic.neg(),
        &QMat::zero(m, n),
        &QMat::identity(m),
    );
    let g_inverse =
        QMat::from_blocks(&QMat::identity(n), &aic, &QMat::zero(m, n), &QMat::identity(m));
    let split_gram =
        QMat::from_blocks(&a, &QMat::zero(n, m), &QMat::zero(m, n), &ds.d_matrix().neg());
    let mut null_vectors = Vec::with_capacity(m);
    let mut cr_vectors = Vec::with_capacity(m);
    let mut cr_prime_vectors = Vec::with_capacity(m);
    for r in 0..m {
        let mut null = ds.coords().col(r);
        let mut unit = zeros(m);
        unit[r] = Q::one();
        null.extend(unit);
        null_vectors.push(null);
        let mut prime = zeros(n + m);
        prime[n + r] = Q::one();
        cr_vectors.push(ul_gram_inv.col(n + r));
        cr_prime_vectors.push(prime);
    }
    let det_value = ul_gram.det()?;
    if det_value.is_zero() {
        return Err(LatticeError::DependentVectors);
    }
    Ok(IndefiniteEmbedding {
        rank_pos: n,
        rank_neg: m,
        ul_gram,
        ul_gram_inv,
        g_matrix,
        g_inverse,
        split_gram,
        null_vectors,
        cr_vectors,
        cr_prime_vectors,
        det_value,
    })
}

// === Subset orthogonalisation ===

/// Result of orthogonalising the `V` depth vectors against the `S` ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CCoefficients {
    pub v_indices: Vec<usize>,
    pub s_indices: Vec<usize>,
    /// Row `i`, column `j` carries the coefficient of `d_{s_i}` in the
    /// projection correcting `d_{v_j}`.
    pub c: QMat,
    /// Per `v_j`, the vector `d_{v_j} + sum_i c[i][j] d_{s_i}` orthogonal to
    /// every `d_s`.
    pub perp_vectors: Vec<LatticeVector>,
}

fn check_split(depth: usize, v: &[usize], s: &[usize]) -> Result<(), LatticeError> {
    let mut seen = vec![false; depth];
    for &i in v.iter().chain(s.iter()) {
        if i >= depth || seen[i] {
            return Err(LatticeError::BadSubsetSplit { depth, v: v.to_vec(), s: s.to_vec() });
        }
        seen[i] = true;
    }
    if seen.iter().any(|&b| !b) {
        return Err(LatticeError::BadSubsetSplit { depth, v: v.to_vec(), s: s.to_vec() });
    }
    Ok(())
}

/// Coefficients making each `d_v` orthogonal to the span of the `d_s`,
/// together with the corrected vectors.
pub fn c_coefficients(
    ds: &DVectorSet,
    v_indices: &[usize],
    s_indices: &[usize],
) -> Result<CCoefficients, LatticeError> {
    check_split(ds.depth(), v_indices, s_indices)?;
    let l = v_indices.len();
    let ordering: Vec<usize> = v_indices.iter().chain(s_indices.iter()).copied().collect();
    let d_perm = ds.d_matrix().submatrix(&ordering, &ordering);
    let d_tilde = schur_complement(&d_perm, l)?;
    let c = ds
        .d_inverse()
        .submatrix(v_indices, s_indices)
        .transpose()
        .mul(&d_tilde);
    let mut perp_vectors = Vec::with_capacity(l);
    for (j, &v) in v_indices.iter().enumerate() {
        let mut vec = ds.vector(v);
        for (i, &s) in s_indices.iter().enumerate() {
            vec = vec_add(&vec, &vec_scale(&ds.vector(s), c.get(i, j)));
        }
        perp_vectors.push(vec);
    }
    Ok(CCoefficients {
        v_indices: v_indices.to_vec(),
        s_indices: s_indices.to_vec(),
        c,
        perp_vectors,
    })
}

// === Glue vectors ===

/// One coset representative joining the orthogonal sublattices, with its
/// parallel and orthogonal components relative to the `S` span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlueVector {
    /// Canonical representative in depth-vector coordinates.
    pub d_coeffs: Vec<Z>,
    /// The same representative in lattice coordinates.
    pub coords: LatticeVector,
    /// Component inside the span of the `S` vectors.
    pub par_coords: LatticeVector,
    /// Component orthogonal to the `S` vectors.
    pub perp_coords: LatticeVector,
    /// Coefficients of the parallel component over the `S` vectors.
    pub par_s_coeffs: Vec<Q>,
    /// Parallel component shifted into the fundamental cell: every `S`
    /// coefficient reduced to `[0, 1)`.  Invariant under changing the coset
    /// representative.
    pub par_reduced: LatticeVector,
}

/// Full glue data for one subset choice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlueData {
    pub s_indices: Vec<usize>,
    pub v_indices: Vec<usize>,
    pub count: usize,
    pub reps: Vec<GlueVector>,
    /// Basis of the orthogonal-complement sublattice in depth coordinates.
    pub lambda_v_basis: Vec<Vec<Z>>,
    /// Gram matrix of that basis.
    pub lambda_v_gram: QMat,
    pub disc_v: Z,
    pub disc_s: Z,
    pub disc_d: Z,
}

fn q_to_z_exact(x: &Q) -> Z {
    assert!(q_is_integer(x), "expected an integer value");
    x.numer().clone()
}

fn integer_sqrt_exact(x: &Z) -> Option<Z> {
    if x.is_negative() {
        return None;
    }
    let root = num::integer::Roots::sqrt(x);
    if &(&root * &root) == x {
        Some(root)
    } else {
        None
    }
}

/// Enumerates the cosets of the depth lattice modulo the orthogonal pair of
/// sublattices spanned by the `S` vectors and by the complement's duals.
pub fn glue_vectors(ds: &DVectorSet, s_indices: &[usize]) -> Result<GlueData, LatticeError> {
    let m = ds.depth();
    let mut v_indices: Vec<usize> = (0..m).filter(|i| !s_indices.contains(i)).collect();
    v_indices.sort_unstable();
    if v_indices.is_empty() {
        return Err(LatticeError::BadSubsetSplit {
            depth: m,
            v: v_indices,
            s: s_indices.to_vec(),
        });
    }
    check_split(m, &v_indices, s_indices)?;

    let all: Vec<usize> = (0..m).collect();
    let d_rows_s = ds.d_matrix().submatrix(s_indices, &all);
    let kernel = integer_kernel(&d_rows_s);
    assert_eq!(kernel.len(), v_indices.len(), "kernel rank must match the complement size");

    let mut kq = QMat::zero(m, kernel.len());
    for (j, col) in kernel.iter().enumerate() {
        for i in 0..m {
            kq.set(i, j, Q::from(col[i].clone()));
        }
    }
    let lambda_v_gram = kq.transpose().mul(ds.d_matrix()).mul(&kq);
    let disc_v = q_to_z_exact(&lambda_v_gram.det()?);
    let disc_s = q_to_z_exact(&ds.d_matrix().submatrix(s_indices, s_indices).det()?);
    let disc_d = q_to_z_exact(&ds.d_matrix().det()?);

    let product = &disc_v * &disc_s;
    if (&product % &disc_d) != Z::zero() {
        return Err(LatticeError::GlueCountNotSquare { num: product, den: disc_d });
    }
    let quotient = &product / &disc_d;
    let Some(count_z) = integer_sqrt_exact(&quotient) else {
        return Err(LatticeError::GlueCountNotSquare { num: product, den: disc_d });
    };
    let count = usize::try_from(&count_z).expect("glue count fits a machine word");

    // Columns of the joint sublattice: unit vectors on S, kernel basis on V.
    let mut joint_cols: Vec<Vec<Z>> = Vec::with_capacity(m);
    for &s in s_indices {
        let mut e = vec![Z::zero(); m];
        e[s] = Z::one();
        joint_cols.push(e);
    }
    joint_cols.extend(kernel.iter().cloned());
    let mut joint_q = QMat::zero(m, m);
    for (j, col) in joint_cols.iter().enumerate() {
        for i in 0..m {
            joint_q.set(i, j, Q::from(col[i].clone()));
        }
    }
    let index = q_to_z_exact(&joint_q.det()?.abs());
    let index = usize::try_from(&index).expect("coset index fits a machine word");
    if index != count {
        return Err(LatticeError::GlueCountMismatch { formula: count, index });
    }

    let d_ss_inv = ds.d_matrix().submatrix(s_indices, s_indices).inverse()?;
    let mut reps = Vec::with_capacity(count);
    for rep in coset_representatives(&joint_cols) {
        let rep_q: Vec<Q> = rep.iter().map(|z| Q::from(z.clone())).collect();
        let coords = ds.from_d_coefficients(&rep_q);
        let pairings = d_rows_s.mul_vec(&rep_q);
        let par_s_coeffs = d_ss_inv.mul_vec(&pairings);
        let mut par_coords = zeros(ds.rank());
        let mut par_reduced = zeros(ds.rank());
        for (i, &s) in s_indices.iter().enumerate() {
            par_coords = vec_add(&par_coords, &vec_scale(&ds.vector(s), &par_s_coeffs[i]));
            par_reduced = vec_add(&par_reduced, &vec_scale(&ds.vector(s), &q_frac(&par_s_coeffs[i])));
        }
        let perp_coords = vec_sub(&coords, &par_coords);
        reps.push(GlueVector {
            d_coeffs: rep,
            coords,
            par_coords,
            perp_coords,
            par_s_coeffs,
            par_reduced,
        });
    }

    Ok(GlueData {
        s_indices: s_indices.to_vec(),
        v_indices,
        count,
        reps,
        lambda_v_basis: kernel,
        lambda_v_gram,
        disc_v,
        disc_s,
        disc_d,
    })
}

// === Serialization ===

/// JSON form of a lattice together with its depth vectors.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeJson {
    pub rank: usize,
    pub gram: Vec<Vec<i64>>,
    #[serde(default)]
    pub dvectors: Vec<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl LatticeJson {
    /// Validates and builds the lattice pair described by this document.
    pub fn build(&self) -> Result<(Lattice, DVectorSet), LatticeError> {
        if self.rank == 0 || self.gram.len() != self.rank {
            return Err(LatticeError::InvalidRank);
        }
        let lattice = Lattice::from_int_rows(&self.gram, self.label.clone())?;
        let ds = DVectorSet::from_int_rows(&lattice, &self.dvectors)?;
        Ok((lattice, ds))
    }

    pub fn from_parts(lattice: &Lattice, ds: &DVectorSet) -> Self {
        let gram = lattice
            .gram()
            .to_rows()
            .iter()
            .map(|row| row.iter().map(|x| x.numer().try_into().expect("entry fits i64")).collect())
            .collect();
        let dvectors = (0..ds.depth())
            .map(|r| {
                ds.vector(r)
                    .iter()
                    .map(|x| x.numer().try_into().expect("entry fits i64"))
                    .collect()
            })
            .collect();
        LatticeJson {
            rank: lattice.rank(),
            gram,
            dvectors,
            label: lattice.label().map(str::to_owned),
        }
    }
}
