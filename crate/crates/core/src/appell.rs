//! Truncated expansions of lattice sums with sign-kernel denominators.
//!
//! The central object pairs a positive definite lattice with a set of
//! distinguished vectors.  Each distinguished vector contributes a geometric
//! denominator to a theta-like sum over a shifted copy of the lattice, and
//! the expansion chamber decides which side of every denominator is summed.
//! All four front ends (`phi`, `phi_plus`, `s_func`, `theta_series`) reduce
//! to one enumeration core working in exact rational arithmetic; `psi_build`
//! produces a rank-`n` root-lattice instance together with an independently
//! expanded series for it, and `verify_identity` checks the shift and
//! symmetry laws of the family coefficient by coefficient.

use crate::fseries::{
    eval_numeric, geometric_expand, series_mul, series_sub, FSeries, FSeriesError,
    MonomialDirection, SeriesEval,
};
use crate::lattice::{
    cartan_an, projection_matrix, weyl_reflection, DVectorSet, Lattice, LatticeError, LatticeJson,
};
use crate::ratmat::{
    dot, enumerate_shifted_ellipsoid, q_floor, q_frac, q_is_integer, qi, qr, vec_add, vec_neg,
    vec_scale, vec_sub, zeros, LinalgError, Q, QMat,
};
use num::{One, Signed, ToPrimitive, Zero};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppellError {
    #[error("{field} must have length {want}, got {got}")]
    WrongLength { field: &'static str, want: usize, got: usize },
    #[error("linear coefficient matrix {field} must be {rows}x{cols}")]
    WrongShape { field: &'static str, rows: usize, cols: usize },
    #[error("constant part of {which} pairs non-integrally with the lattice, the phase would depend on the summation point")]
    PhaseNotConstant { which: &'static str },
    #[error("chamber direction sits on a wall for denominator {index}: offending value {value}")]
    ChamberWall { index: usize, value: Q },
    #[error("kernel threshold for denominator {index} is the integer {value}, the half-space membership is ambiguous")]
    KernelWall { index: usize, value: Q },
    #[error("flat denominator {index} at point {point:?} has no usable grading, the tail never leaves the window")]
    FlatTailUnbounded { index: usize, point: Vec<Q> },
    #[error("offset {0} does not fit in a machine integer")]
    OffsetOverflow(Q),
    #[error("rank {0} is too small for the staircase family, need at least 2")]
    RankTooSmall(usize),
    #[error("identity parameter rejected: {0}")]
    IdentityParam(String),
    #[error("invalid spec data: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Series(#[from] FSeriesError),
}

// ---------------------------------------------------------------------------
// Spec
// ---------------------------------------------------------------------------

/// Full description of one sum of the family.
///
/// The two elliptic arguments are affine in `var_count` formal variables and
/// in tau: `u = u_linear z + u_constant + u_tau_shift tau` and likewise for
/// `v`.  The formal variables are treated as infinitesimally small, so the
/// chamber data enters separately: `a_direction` is the limit of `Im(u)/y`
/// with the `u_tau_shift` part removed, and `v_im_direction` plays the same
/// role for `v`.  All vectors are in basis coordinates of the lattice except
/// `nu`, which is a coefficient vector over the distinguished vectors.
#[derive(Clone, Debug)]
pub struct AppellSpec {
    pub lattice: Lattice,
    pub ds: DVectorSet,
    pub mu: Vec<Q>,
    pub nu: Vec<Q>,
    pub var_count: usize,
    pub u_linear: QMat,
    pub u_constant: Vec<Q>,
    pub v_linear: QMat,
    pub v_constant: Vec<Q>,
    pub a_direction: Vec<Q>,
    pub v_im_direction: Vec<Q>,
    pub u_tau_shift: Vec<Q>,
    pub v_tau_shift: Vec<Q>,
}

impl AppellSpec {
    /// Builds a spec with all elliptic data zero; callers fill in the public
    /// fields they need and the expansion entry points re-validate.
    pub fn new(
        lattice: Lattice,
        ds: DVectorSet,
        mu: Vec<Q>,
        nu: Vec<Q>,
        var_count: usize,
    ) -> Result<Self, AppellError> {
        let n = lattice.rank();
        let spec = AppellSpec {
            u_linear: QMat::zero(n, var_count),
            u_constant: zeros(n),
            v_linear: QMat::zero(n, var_count),
            v_constant: zeros(n),
            a_direction: zeros(n),
            v_im_direction: zeros(n),
            u_tau_shift: zeros(n),
            v_tau_shift: zeros(n),
            lattice,
            ds,
            mu,
            nu,
            var_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rank(&self) -> usize {
        self.lattice.rank()
    }

    pub fn depth(&self) -> usize {
        self.ds.depth()
    }

    /// The twist vector as an element of the ambient lattice span.
    pub fn nu_vector(&self) -> Vec<Q> {
        self.ds.from_d_coefficients(&self.nu)
    }

    /// Coset offset of the summation variable.
    pub fn coset_offset(&self) -> Vec<Q> {
        vec_sub(&self.mu, &self.nu_vector())
    }

    pub fn validate(&self) -> Result<(), AppellError> {
        let n = self.lattice.rank();
        let m = self.ds.depth();
        if self.ds.rank() != n {
            return Err(AppellError::InvalidSpec(
                "distinguished vectors live in a lattice of different rank".into(),
            ));
        }
        let lens: [(&'static str, usize, usize); 8] = [
            ("mu", self.mu.len(), n),
            ("nu", self.nu.len(), m),
            ("u_constant", self.u_constant.len(), n),
            ("v_constant", self.v_constant.len(), n),
            ("a_direction", self.a_direction.len(), n),
            ("v_im_direction", self.v_im_direction.len(), n),
            ("u_tau_shift", self.u_tau_shift.len(), n),
            ("v_tau_shift", self.v_tau_shift.len(), n),
        ];
        for (field, got, want) in lens {
            if got != want {
                return Err(AppellError::WrongLength { field, want, got });
            }
        }
        for (field, mat) in [("u_linear", &self.u_linear), ("v_linear", &self.v_linear)] {
            if mat.rows() != n || mat.cols() != self.var_count {
                return Err(AppellError::WrongShape { field, rows: n, cols: self.var_count });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Phased series
// ---------------------------------------------------------------------------

/// A series together with a global unit-modulus prefactor `e^{2 pi i phase}`.
///
/// Constant data of the elliptic arguments contributes an overall root of
/// unity that the rational grading cannot absorb; it is carried here exactly.
#[derive(Clone, Debug)]
pub struct PhasedSeries {
    pub series: FSeries,
    pub phase: Q,
}

/// First coefficient on which two expansions disagree.
#[derive(Clone, Debug)]
pub struct CoefficientWitness {
    pub q_exp: Q,
    pub w_exps: Vec<Q>,
    pub lhs: Q,
    pub rhs: Q,
    pub lhs_phase: Q,
    pub rhs_phase: Q,
}

impl PhasedSeries {
    pub fn new(series: FSeries, phase: Q) -> Self {
        PhasedSeries { series, phase }.normalized()
    }

    /// Canonical form: phase in `[0, 1/2)`, a sign flip absorbed into the
    /// coefficients, and phase zero for the zero series.
    pub fn normalized(mut self) -> Self {
        if self.series.is_zero() {
            self.phase = Q::zero();
            return self;
        }
        self.phase = q_frac(&self.phase);
        if self.phase >= qr(1, 2) {
            self.phase -= qr(1, 2);
            self.series = self.series.neg();
        }
        self
    }

    /// Multiplies by `coeff e^{2 pi i phase} q^{q_exp} w^{w_exps}`.
    pub fn mul_monomial(&self, q_exp: &Q, w_exps: &[Q], coeff: &Q, phase: &Q) -> Self {
        PhasedSeries {
            series: self.series.mul_monomial(q_exp, w_exps, coeff),
            phase: &self.phase + phase,
        }
        .normalized()
    }

    pub fn eval(&self, tau: Complex64, zs: &[Complex64]) -> Result<SeriesEval, FSeriesError> {
        let base = eval_numeric(&self.series, tau, zs)?;
        let angle = 2.0 * std::f64::consts::PI * crate::ratmat::q_to_f64(&self.phase);
        let rot = Complex64::from_polar(1.0, angle);
        Ok(SeriesEval { value: base.value * rot, tail_estimate: base.tail_estimate })
    }

    /// Compares two expansions inside the common window and reports the first
    /// offending coefficient, or `None` when they agree.  Phases are compared
    /// in canonical form; differing phases make every nonzero coefficient a
    /// mismatch.
    pub fn first_difference(
        &self,
        other: &PhasedSeries,
        up_to_q: &Q,
        up_to_w: &Q,
    ) -> Option<CoefficientWitness> {
        let a = self.clone().normalized();
        let b = other.clone().normalized();
        let in_window = |q: &Q, w: &[Q]| q <= up_to_q && w.iter().all(|x| x.abs() <= *up_to_w);
        let mut keys: std::collections::BTreeSet<(Q, Vec<Q>)> = std::collections::BTreeSet::new();
        for ((q, w), _) in a.series.iter().chain(b.series.iter()) {
            if in_window(q, w) {
                keys.insert((q.clone(), w.clone()));
            }
        }
        let same_phase = a.phase == b.phase;
        for (q, w) in keys {
            let ca = a.series.coeff(&q, &w);
            let cb = b.series.coeff(&q, &w);
            let equal = if same_phase { ca == cb } else { ca.is_zero() && cb.is_zero() };
            if !equal {
                return Some(CoefficientWitness {
                    q_exp: q,
                    w_exps: w,
                    lhs: ca,
                    rhs: cb,
                    lhs_phase: a.phase.clone(),
                    rhs_phase: b.phase.clone(),
                });
            }
        }
        None
    }
}

// ---------------------------------------------------------------------------
// Preparation shared by all kernels
// ---------------------------------------------------------------------------

/// Data distilled from a spec once per expansion run.
struct Prepared {
    n: usize,
    m: usize,
    vv: usize,
    /// Pairing of each distinguished vector with the chamber direction.
    a_vals: Vec<Q>,
    /// Tau-part of each denominator grading.
    b_const: Vec<Q>,
    /// Rows of `C^T`: the k-dependent part of each denominator grading.
    ct_rows: Vec<Vec<Q>>,
    /// Per-variable w step of each denominator.
    omega: Vec<Vec<Q>>,
    /// Per-variable w base as a linear form in k.
    w_rows: Vec<Vec<Q>>,
    /// Per-variable constant w offset from the twist.
    w_nu: Vec<Q>,
    /// Linear form giving the k-dependent part of the q grading.
    q_lin: Vec<Q>,
    /// Constant q offset from the twist.
    q_const: Q,
    phase: Q,
    coset: Vec<Q>,
    nu_alpha: Vec<Q>,
}

fn prepare(spec: &AppellSpec) -> Result<Prepared, AppellError> {
    spec.validate()?;
    let lat = &spec.lattice;
    let n = lat.rank();
    let m = spec.ds.depth();
    let vv = spec.var_count;
    let nu_alpha = spec.nu_vector();
    let coset = vec_sub(&spec.mu, &nu_alpha);

    let av = lat.gram().mul_vec(&spec.v_constant);
    if !av.iter().all(q_is_integer) {
        return Err(AppellError::PhaseNotConstant { which: "v" });
    }
    let ct = spec.ds.c_matrix().transpose();
    let cu = ct.mul_vec(&spec.u_constant);
    if !cu.iter().all(q_is_integer) {
        return Err(AppellError::PhaseNotConstant { which: "u" });
    }

    let mut a_vals = Vec::with_capacity(m);
    let mut b_const = Vec::with_capacity(m);
    let mut ct_rows = Vec::with_capacity(m);
    let mut omega = Vec::with_capacity(m);
    for r in 0..m {
        let d = spec.ds.vector(r);
        let a_r = lat.bilinear(&d, &spec.a_direction)?;
        let b_r = lat.bilinear(&d, &spec.u_tau_shift)?;
        let f = q_frac(&(lat.bilinear(&d, &coset)? + &b_r));
        if f.is_zero() {
            if a_r.is_zero() || a_r.abs() >= Q::one() {
                return Err(AppellError::ChamberWall { index: r, value: a_r });
            }
        } else {
            let window = &f + &a_r;
            if !(window.is_positive() && window < Q::one()) {
                return Err(AppellError::ChamberWall { index: r, value: window });
            }
        }
        let mut om = Vec::with_capacity(vv);
        for a in 0..vv {
            om.push(lat.bilinear(&d, &spec.u_linear.col(a))?);
        }
        a_vals.push(a_r);
        b_const.push(b_r);
        ct_rows.push(ct.row(r));
        omega.push(om);
    }

    let mut w_rows = Vec::with_capacity(vv);
    let mut w_nu = Vec::with_capacity(vv);
    for a in 0..vv {
        w_rows.push(lat.gram().mul_vec(&spec.v_linear.col(a)));
        w_nu.push(lat.bilinear(&spec.u_linear.col(a), &nu_alpha)?);
    }
    let q_lin = lat.gram().mul_vec(&vec_add(&nu_alpha, &spec.v_tau_shift));
    let q_const = lat.bilinear(&nu_alpha, &spec.u_tau_shift)?;
    let phase = q_frac(
        &(lat.bilinear(&spec.v_constant, &coset)? + lat.bilinear(&spec.u_constant, &nu_alpha)?),
    );

    Ok(Prepared {
        n,
        m,
        vv,
        a_vals,
        b_const,
        ct_rows,
        omega,
        w_rows,
        w_nu,
        q_lin,
        q_const,
        phase,
        coset,
        nu_alpha,
    })
}

// ---------------------------------------------------------------------------
// Enumeration core
// ---------------------------------------------------------------------------

/// Bookkeeping for the denominator loops at one lattice point.
struct FactorLoops<'a> {
    order: Vec<usize>,
    signs: &'a [i64],
    b_vals: &'a [Q],
    omega: &'a [Vec<Q>],
    lo: &'a [i64],
    hi: &'a [i64],
    k_offsets: &'a [i64],
    k_weight: i64,
    eps_weight: i64,
    lambda: Option<(Vec<Q>, Q)>,
    /// Minimum q contribution of all loops strictly below each level.
    rem_min: Vec<Q>,
    q_cutoff: Q,
}

impl FactorLoops<'_> {
    fn run(
        &self,
        level: usize,
        q_acc: &Q,
        w_acc: &[Q],
        sign: i64,
        in_k: bool,
        in_eps: bool,
        out: &mut FSeries,
    ) {
        if level == self.order.len() {
            let weight = self.k_weight * i64::from(in_k) + self.eps_weight * i64::from(in_eps);
            if weight != 0 {
                out.add_term(q_acc.clone(), w_acc.to_vec(), qi(weight * sign));
            }
            return;
        }
        let r = self.order[level];
        let forward = self.signs[r] > 0;
        let flat = self.b_vals[r].is_zero();
        let mut x = if forward { self.lo[r] } else { self.hi[r] - 1 };
        loop {
            let xq = qi(x);
            let q_child = q_acc + &xq * &self.b_vals[r];
            if !flat && &q_child + &self.rem_min[level + 1] > self.q_cutoff {
                break;
            }
            let w_child: Vec<Q> =
                w_acc.iter().zip(&self.omega[r]).map(|(w, o)| w + &xq * o).collect();
            if flat {
                let (lam, cap) = self.lambda.as_ref().expect("flat loops carry a grading");
                if &dot(lam, &w_child) > cap {
                    break;
                }
            }
            let ck = in_k && if forward { x >= self.k_offsets[r] } else { x < self.k_offsets[r] };
            let ce = in_eps && if forward { x >= 0 } else { x < 0 };
            if (self.k_weight != 0 && ck) || (self.eps_weight != 0 && ce) {
                let child_sign = if forward { sign } else { -sign };
                self.run(level + 1, &q_child, &w_child, child_sign, ck, ce, out);
            }
            x += if forward { 1 } else { -1 };
        }
    }
}

/// Expands one member of the family.  Every front end is a choice of
/// half-space offsets and membership weights: the plain sum weights the
/// small-variable half-spaces, the folded sum weights the shifted ones, and
/// their difference is the wall-crossing correction.
fn expand_core(
    spec: &AppellSpec,
    pre: &Prepared,
    x_offsets: &[i64],
    k_weight: i64,
    eps_weight: i64,
    q_cutoff: &Q,
    w_window: &Q,
) -> Result<PhasedSeries, AppellError> {
    let mut out = FSeries::zero(pre.vv, q_cutoff.clone(), w_window.clone());
    let mut lo = vec![0i64; pre.m];
    let mut hi = vec![0i64; pre.m];
    for r in 0..pre.m {
        let mut starts = Vec::new();
        if k_weight != 0 {
            starts.push(x_offsets[r]);
        }
        if eps_weight != 0 {
            starts.push(0);
        }
        lo[r] = *starts.iter().min().expect("at least one weight is active");
        hi[r] = *starts.iter().max().expect("at least one weight is active");
    }

    for bits in 0..(1u64 << pre.m) {
        let signs: Vec<i64> =
            (0..pre.m).map(|r| if bits >> r & 1 == 1 { 1 } else { -1 }).collect();
        let x_eff: Vec<Q> =
            (0..pre.m).map(|r| qi(if signs[r] > 0 { lo[r] } else { hi[r] - 1 })).collect();
        let shift_d = spec.ds.coords().mul_vec(&x_eff);
        let t = vec_add(&vec_add(&pre.nu_alpha, &spec.v_tau_shift), &shift_d);
        let c_pat = spec.lattice.bilinear(&vec_add(&pre.nu_alpha, &shift_d), &spec.u_tau_shift)?;
        let bound =
            qi(2) * (q_cutoff - &c_pat) + spec.lattice.quadratic(&t)?;
        let points =
            enumerate_shifted_ellipsoid(spec.lattice.gram(), &vec_add(&pre.coset, &t), &bound)?;

        'point: for x in points {
            let k = vec_sub(&x, &t);
            let mut b_vals = Vec::with_capacity(pre.m);
            for r in 0..pre.m {
                let b = dot(&pre.ct_rows[r], &k) + &pre.b_const[r];
                let s = &b + &pre.a_vals[r];
                if s.is_zero() {
                    return Err(AppellError::ChamberWall { index: r, value: s });
                }
                if (s.is_positive() && signs[r] < 0) || (s.is_negative() && signs[r] > 0) {
                    continue 'point;
                }
                b_vals.push(b);
            }

            let g0 = spec.lattice.quadratic(&k)? * qr(1, 2)
                + dot(&pre.q_lin, &k)
                + &pre.q_const;
            let base_w: Vec<Q> =
                (0..pre.vv).map(|a| dot(&pre.w_rows[a], &k) + &pre.w_nu[a]).collect();

            let mut order: Vec<usize> = (0..pre.m).filter(|r| !b_vals[*r].is_zero()).collect();
            let flats: Vec<usize> = (0..pre.m).filter(|r| b_vals[*r].is_zero()).collect();
            order.extend(flats.iter().copied());

            let lambda = if flats.is_empty() {
                None
            } else {
                let deltas: Vec<Vec<Q>> = flats
                    .iter()
                    .map(|&r| vec_scale(&pre.omega[r], &qi(signs[r])))
                    .collect();
                let mut candidates: Vec<Vec<Q>> = Vec::new();
                for a in 0..pre.vv {
                    let mut e = zeros(pre.vv);
                    e[a] = Q::one();
                    candidates.push(e.clone());
                    candidates.push(vec_neg(&e));
                }
                let mut total = zeros(pre.vv);
                for d in &deltas {
                    total = vec_add(&total, d);
                }
                candidates.push(total);
                candidates.extend(deltas.iter().cloned());
                let lam = candidates
                    .into_iter()
                    .find(|c| deltas.iter().all(|d| dot(c, d).is_positive()));
                match lam {
                    Some(lam) => {
                        let cap = w_window
                            * lam.iter().map(|x| x.abs()).fold(Q::zero(), |acc, x| acc + x);
                        Some((lam, cap))
                    }
                    None => {
                        return Err(AppellError::FlatTailUnbounded {
                            index: flats[0],
                            point: k,
                        })
                    }
                }
            };

            let mut rem_min = vec![Q::zero(); order.len() + 1];
            for level in (0..order.len()).rev() {
                let r = order[level];
                rem_min[level] = &rem_min[level + 1] + &x_eff[r] * &b_vals[r];
            }

            let loops = FactorLoops {
                order,
                signs: &signs,
                b_vals: &b_vals,
                omega: &pre.omega,
                lo: &lo,
                hi: &hi,
                k_offsets: x_offsets,
                k_weight,
                eps_weight,
                lambda,
                rem_min,
                q_cutoff: q_cutoff.clone(),
            };
            loops.run(0, &g0, &base_w, 1, true, true, &mut out);
        }
    }
    Ok(PhasedSeries::new(out, pre.phase.clone()))
}

// ---------------------------------------------------------------------------
// Front ends
// ---------------------------------------------------------------------------

/// Theta series of a shifted lattice with an elliptic grading on `v`.
pub fn theta_series(
    lattice: &Lattice,
    mu: &[Q],
    v_linear: &QMat,
    v_constant: &[Q],
    q_cutoff: &Q,
    w_window: &Q,
) -> Result<PhasedSeries, AppellError> {
    let n = lattice.rank();
    if mu.len() != n {
        return Err(AppellError::WrongLength { field: "mu", want: n, got: mu.len() });
    }
    if v_linear.rows() != n {
        return Err(AppellError::WrongShape { field: "v_linear", rows: n, cols: v_linear.cols() });
    }
    if v_constant.len() != n {
        return Err(AppellError::WrongLength {
            field: "v_constant",
            want: n,
            got: v_constant.len(),
        });
    }
    let av = lattice.gram().mul_vec(v_constant);
    if !av.iter().all(q_is_integer) {
        return Err(AppellError::PhaseNotConstant { which: "v" });
    }
    let vv = v_linear.cols();
    let mut out = FSeries::zero(vv, q_cutoff.clone(), w_window.clone());
    let rows: Vec<Vec<Q>> = (0..vv).map(|a| lattice.gram().mul_vec(&v_linear.col(a))).collect();
    let bound = qi(2) * q_cutoff;
    for k in enumerate_shifted_ellipsoid(lattice.gram(), mu, &bound)? {
        let q = lattice.quadratic(&k)? * qr(1, 2);
        let w: Vec<Q> = rows.iter().map(|row| dot(row, &k)).collect();
        out.add_term(q, w, Q::one());
    }
    let phase = q_frac(&lattice.bilinear(v_constant, mu)?);
    Ok(PhasedSeries::new(out, phase))
}

/// The plain expansion: each denominator summed on the side its grading and
/// the chamber dictate.
pub fn phi(spec: &AppellSpec, q_cutoff: &Q, w_window: &Q) -> Result<PhasedSeries, AppellError> {
    let pre = prepare(spec)?;
    let offsets = vec![0i64; pre.m];
    expand_core(spec, &pre, &offsets, 0, 1, q_cutoff, w_window)
}

/// Per-denominator fold thresholds `nu_r + shift_r`, where the shift compares
/// the imaginary drifts of the two elliptic arguments across the dual basis
/// of the distinguished vectors.
pub fn sigma_shifts(spec: &AppellSpec) -> Result<Vec<Q>, AppellError> {
    spec.validate()?;
    let drift = vec_sub(
        &vec_add(&spec.v_im_direction, &spec.v_tau_shift),
        &vec_add(&spec.a_direction, &spec.u_tau_shift),
    );
    let ctd = spec.ds.c_matrix().transpose().mul_vec(&drift);
    Ok(spec.ds.d_inverse().mul_vec(&ctd))
}

fn fold_floors(spec: &AppellSpec) -> Result<Vec<i64>, AppellError> {
    let shifts = sigma_shifts(spec)?;
    let mut floors = Vec::with_capacity(shifts.len());
    for (r, s) in shifts.iter().enumerate() {
        let c = &spec.nu[r] + s;
        if q_is_integer(&c) {
            return Err(AppellError::KernelWall { index: r, value: c });
        }
        let f = q_floor(&c);
        floors.push(f.to_i64().ok_or_else(|| AppellError::OffsetOverflow(Q::from(f)))?);
    }
    Ok(floors)
}

/// Twist coefficients after folding into the fundamental window; the folded
/// sum equals the plain sum taken at these coefficients.
pub fn nu_tilde(spec: &AppellSpec) -> Result<Vec<Q>, AppellError> {
    let floors = fold_floors(spec)?;
    Ok(spec.nu.iter().zip(&floors).map(|(nu, f)| nu - qi(*f)).collect())
}

/// The folded expansion: every denominator summed across the half-space
/// selected by its fold threshold.  Periodic in the twist data.
pub fn phi_plus(
    spec: &AppellSpec,
    q_cutoff: &Q,
    w_window: &Q,
) -> Result<PhasedSeries, AppellError> {
    let pre = prepare(spec)?;
    let offsets: Vec<i64> = fold_floors(spec)?.iter().map(|f| -f).collect();
    expand_core(spec, &pre, &offsets, 1, 0, q_cutoff, w_window)
}

/// Difference between the folded and the plain expansion: the finite
/// wall-crossing correction, expanded in one pass as a signed double count.
pub fn s_func(spec: &AppellSpec, q_cutoff: &Q, w_window: &Q) -> Result<PhasedSeries, AppellError> {
    let pre = prepare(spec)?;
    let offsets: Vec<i64> = fold_floors(spec)?.iter().map(|f| -f).collect();
    expand_core(spec, &pre, &offsets, 1, -1, q_cutoff, w_window)
}

// ---------------------------------------------------------------------------
// Staircase family on root lattices
// ---------------------------------------------------------------------------

/// Constructs the rank-`n` staircase sum with integer parameters `(a, b)`:
/// returns its direct expansion together with the spec whose plain expansion
/// must reproduce it.  The spec lives on the `A_n` root lattice with the
/// simple roots reflected through the first one as distinguished vectors.
pub fn psi_build(
    n: usize,
    a: i64,
    b: i64,
    q_cutoff: &Q,
    w_window: &Q,
) -> Result<(FSeries, AppellSpec), AppellError> {
    if n < 2 {
        return Err(AppellError::RankTooSmall(n));
    }
    let series = psi_direct(n, a, b, q_cutoff, w_window)?;
    let spec = psi_spec(n, a, b)?;
    Ok((series, spec))
}

/// Direct route: free summation over the first `n` staircase heights with the
/// last one eliminated by the level constraint, each denominator expanded as
/// a plain geometric series on the side its grading dictates.
fn psi_direct(n: usize, a: i64, b: i64, q_cutoff: &Q, w_window: &Q) -> Result<FSeries, AppellError> {
    let np = n + 1;
    let npq = qi(np as i64);
    // Quadratic form of the full height vector.
    let mut gq = QMat::zero(np, np);
    for i in 0..np {
        for j in 0..np {
            let v = if i == j { qr(n as i64, 2 * np as i64) } else { -qr(1, 2 * np as i64) };
            gq.set(i, j, v);
        }
    }
    // Substitution eliminating the last height.
    let mut t_mat = QMat::zero(np, n);
    for i in 0..n {
        t_mat.set(i, i, Q::one());
        t_mat.set(n, i, -Q::one());
    }
    let mut t0 = zeros(np);
    t0[n] = qi(b);
    // Fractional offsets attached to the descents.
    let fr: Vec<Q> = (0..n).map(|idx| q_frac(&(qi(a * (n - idx) as i64) / &npq))).collect();

    let tt = t_mat.transpose();
    let h = tt.mul(&gq).mul(&t_mat);
    let g2 = vec_scale(&tt.mul_vec(&gq.mul_vec(&t0)), &qi(2));
    let mut g_frac = zeros(n);
    let mut c_frac = Q::zero();
    for idx in 0..n {
        let row = vec_sub(&t_mat.row(idx), &t_mat.row(idx + 1));
        g_frac = vec_add(&g_frac, &vec_scale(&row, &fr[idx]));
        c_frac += (&t0[idx] - &t0[idx + 1]) * &fr[idx];
    }
    let c0 = dot(&t0, &gq.mul_vec(&t0)) + &c_frac;
    let g = vec_add(&g2, &g_frac);
    let s = h.solve(&vec_scale(&g, &qr(1, 2)))?;
    let bound = q_cutoff - &c0 + dot(&s, &h.mul_vec(&s));

    let mut out = FSeries::zero(1, q_cutoff.clone(), w_window.clone());
    for x in enumerate_shifted_ellipsoid(&h, &s, &bound)? {
        let free = vec_sub(&x, &s);
        let heights = vec_add(&t_mat.mul_vec(&free), &t0);
        let mut q_base = dot(&heights, &gq.mul_vec(&heights));
        for idx in 0..n {
            q_base += (&heights[idx] - &heights[idx + 1]) * &fr[idx];
        }
        if &q_base > q_cutoff {
            continue;
        }
        let mut w_base = vec_scale(&fr, &Q::one()).iter().fold(Q::zero(), |acc, f| acc + f * qi(4));
        for i in 0..np {
            for j in 0..i {
                w_base += &heights[i] - &heights[j];
            }
        }
        let q_fac = q_cutoff - &q_base;
        let mut steps: Vec<i64> = Vec::with_capacity(n);
        let mut w_big = w_window + w_base.abs();
        for idx in 0..n {
            let m = (&heights[idx] - &heights[idx + 1])
                .to_integer()
                .to_i64()
                .ok_or_else(|| AppellError::OffsetOverflow(heights[idx].clone()))?;
            if m != 0 {
                w_big += qi(4) * (&q_fac / qi(m.abs())) + qi(4);
            }
            steps.push(m);
        }
        let mut acc = FSeries::one(1, q_fac.clone(), w_big.clone());
        for m in steps {
            let dir = if m >= 1 { MonomialDirection::Forward } else { MonomialDirection::Backward };
            let factor = geometric_expand(&qi(m), &[qi(4)], dir, &q_fac, &w_big)?;
            acc = series_mul(&acc, &factor)?;
        }
        for ((qe, we), c) in acc.iter() {
            out.add_term(&q_base + qe, vec![&w_base + &we[0]], c.clone());
        }
    }
    Ok(out)
}

fn psi_spec(n: usize, a: i64, b: i64) -> Result<AppellSpec, AppellError> {
    let np = (n + 1) as i64;
    let lattice = cartan_an(n)?;
    let refl = weyl_reflection(n, 0)?;
    let d_vecs: Vec<Vec<Q>> = (0..n).map(|j| refl.col(j)).collect();
    let ds = DVectorSet::new(&lattice, &d_vecs)?;

    let nu: Vec<Q> = (1..=n as i64).map(|r| q_frac(&qr(-r * a, np))).collect();
    let offset: Vec<Q> = (1..=n as i64).map(|j| qr(-j * b, np)).collect();
    let mu = vec_add(&ds.from_d_coefficients(&nu), &offset);

    let mut u_coef = zeros(n);
    u_coef[0] = qi(2 * (n as i64 - 2));
    for j in 2..=n as i64 {
        u_coef[(j - 1) as usize] = qi(2 * j * (np - j));
    }
    let sigma_coef: Vec<Q> = (1..=n as i64).map(|r| qi(-3 * r * (np - r))).collect();
    let v_coef = vec_add(&u_coef, &ds.coords().mul_vec(&sigma_coef));

    let chamber = qr(-1, 100);
    let mut spec = AppellSpec::new(lattice, ds, mu, nu, 1)?;
    spec.u_linear = QMat::from_rows(u_coef.iter().map(|x| vec![x.clone()]).collect());
    spec.v_linear = QMat::from_rows(v_coef.iter().map(|x| vec![x.clone()]).collect());
    spec.a_direction = vec_scale(&u_coef, &chamber);
    spec.v_im_direction = vec_scale(&v_coef, &chamber);
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Identities
// ---------------------------------------------------------------------------

/// The shift and symmetry laws of the family.  Shift parameters are given in
/// basis coordinates of the lattice; membership in the relevant sublattice or
/// dual is validated before anything is expanded.
#[derive(Clone, Debug)]
pub enum IdentityKind {
    /// Shift of the coset offset by a lattice vector; invisible.
    MuShift { shift: Vec<Q> },
    /// Shift of the twist by a distinguished-span lattice vector, traded for
    /// a tau multiple on `v` and a unit pairing with `u`.
    NuShift { shift: Vec<Q> },
    /// Simultaneous shift of offset and twist by a vector dual to the
    /// distinguished span.
    MuNuShift { shift: Vec<Q> },
    /// Shift of the offset by a dual lattice vector, with the twist picking
    /// up the parallel part.
    MStarShift { shift: Vec<Q> },
    /// Global sign flip of offset and twist against reflected arguments.
    Inversion,
    /// Translation of `u` by a vector dual to the distinguished span.
    UShift { shift: Vec<Q> },
    /// Translation of `v` by a dual lattice vector.
    VShift { shift: Vec<Q> },
    /// Simultaneous tau-translation of both arguments along the
    /// distinguished span.
    UVTauShift { shift: Vec<Q> },
    /// Change of basis by a lattice isometry.
    GInvariance { map: QMat },
}

#[derive(Clone, Debug)]
pub struct IdentityOutcome {
    pub holds: bool,
    pub witness: Option<CoefficientWitness>,
    pub q_compared: Q,
    pub w_compared: Q,
}

/// Exact monomial-with-phase multiplier applied to one side of an identity.
struct Multiplier {
    q: Q,
    w: Vec<Q>,
    coeff: Q,
    phase: Q,
}

impl Multiplier {
    fn neutral(vv: usize) -> Self {
        Multiplier { q: Q::zero(), w: zeros(vv), coeff: Q::one(), phase: Q::zero() }
    }

    fn merge(mut self, other: Multiplier) -> Self {
        self.q += other.q;
        self.w = vec_add(&self.w, &other.w);
        self.coeff *= other.coeff;
        self.phase += other.phase;
        self
    }
}

/// Decomposes `e^{2 pi i B(x, u)}` into grading and phase, with `u` read off
/// the given spec.
fn pairing_with_u(spec: &AppellSpec, x: &[Q]) -> Result<Multiplier, AppellError> {
    let lat = &spec.lattice;
    let mut w = Vec::with_capacity(spec.var_count);
    for a in 0..spec.var_count {
        w.push(lat.bilinear(x, &spec.u_linear.col(a))?);
    }
    Ok(Multiplier {
        q: lat.bilinear(x, &spec.u_tau_shift)?,
        w,
        coeff: Q::one(),
        phase: lat.bilinear(x, &spec.u_constant)?,
    })
}

/// Decomposes `e^{2 pi i B(v, x)}` the same way.
fn pairing_with_v(spec: &AppellSpec, x: &[Q]) -> Result<Multiplier, AppellError> {
    let lat = &spec.lattice;
    let mut w = Vec::with_capacity(spec.var_count);
    for a in 0..spec.var_count {
        w.push(lat.bilinear(&spec.v_linear.col(a), x)?);
    }
    Ok(Multiplier {
        q: lat.bilinear(&spec.v_tau_shift, x)?,
        w,
        coeff: Q::one(),
        phase: lat.bilinear(&spec.v_constant, x)?,
    })
}

fn require_lattice_vector(spec: &AppellSpec, x: &[Q], what: &str) -> Result<(), AppellError> {
    if x.len() != spec.rank() {
        return Err(AppellError::IdentityParam(format!("{what} has the wrong length")));
    }
    if !spec.lattice.contains(x) {
        return Err(AppellError::IdentityParam(format!("{what} is not a lattice vector")));
    }
    Ok(())
}

fn require_dual_vector(spec: &AppellSpec, x: &[Q], what: &str) -> Result<(), AppellError> {
    if x.len() != spec.rank() {
        return Err(AppellError::IdentityParam(format!("{what} has the wrong length")));
    }
    if !spec.lattice.dual_contains(x) {
        return Err(AppellError::IdentityParam(format!("{what} is not a dual lattice vector")));
    }
    Ok(())
}

/// Coefficients over the distinguished vectors, or a parameter error.
fn span_coeffs(spec: &AppellSpec, x: &[Q], what: &str) -> Result<Vec<Q>, AppellError> {
    spec.ds
        .span_coefficients(x)
        .map_err(|_| AppellError::IdentityParam(format!("{what} is outside the distinguished span")))
}

/// Checks one identity by expanding both sides and comparing inside the
/// requested window; the sides are expanded on padded windows so that the
/// exact monomial multiplier cannot push agreement artifacts across the
/// boundary.
pub fn verify_identity(
    kind: &IdentityKind,
    spec: &AppellSpec,
    q_cutoff: &Q,
    w_window: &Q,
) -> Result<IdentityOutcome, AppellError> {
    spec.validate()?;
    let vv = spec.var_count;
    let mut lhs = spec.clone();
    let mut rhs = spec.clone();
    let mut mult = Multiplier::neutral(vv);

    match kind {
        IdentityKind::MuShift { shift } => {
            require_lattice_vector(spec, shift, "offset shift")?;
            lhs.mu = vec_add(&lhs.mu, shift);
        }
        IdentityKind::NuShift { shift } => {
            let t = span_coeffs(spec, shift, "twist shift")?;
            if !t.iter().all(q_is_integer) {
                return Err(AppellError::IdentityParam(
                    "twist shift is not an integer combination of the distinguished vectors"
                        .into(),
                ));
            }
            lhs.nu = vec_add(&lhs.nu, &t);
            rhs.v_tau_shift = vec_add(&rhs.v_tau_shift, shift);
            mult = mult.merge(pairing_with_u(spec, shift)?);
        }
        IdentityKind::MuNuShift { shift } => {
            let t = span_coeffs(spec, shift, "offset-twist shift")?;
            if !spec.ds.d_matrix().mul_vec(&t).iter().all(q_is_integer) {
                return Err(AppellError::IdentityParam(
                    "offset-twist shift does not pair integrally with the distinguished vectors"
                        .into(),
                ));
            }
            lhs.mu = vec_add(&lhs.mu, shift);
            lhs.nu = vec_add(&lhs.nu, &t);
            rhs.v_tau_shift = vec_add(&rhs.v_tau_shift, shift);
            mult = mult.merge(pairing_with_u(spec, shift)?);
        }
        IdentityKind::MStarShift { shift } => {
            require_dual_vector(spec, shift, "dual shift")?;
            let proj = projection_matrix(&spec.lattice, &spec.ds);
            let par = proj.mul_vec(shift);
            let perp = vec_sub(shift, &par);
            let t_par = spec
                .ds
                .d_inverse()
                .mul_vec(&spec.ds.c_matrix().transpose().mul_vec(shift));
            lhs.mu = vec_add(&lhs.mu, shift);
            lhs.nu = vec_add(&lhs.nu, &t_par);
            rhs.v_tau_shift = vec_add(&rhs.v_tau_shift, shift);
            mult = mult.merge(pairing_with_u(spec, &par)?);
            mult = mult.merge(pairing_with_v(spec, &perp)?);
            mult.q += spec.lattice.quadratic(&perp)? * qr(1, 2);
        }
        IdentityKind::Inversion => {
            lhs.mu = vec_neg(&lhs.mu);
            lhs.nu = vec_neg(&lhs.nu);
            let mut sum_d = zeros(spec.rank());
            for r in 0..spec.depth() {
                sum_d = vec_add(&sum_d, &spec.ds.vector(r));
            }
            rhs.u_linear = rhs.u_linear.neg();
            rhs.u_constant = vec_neg(&rhs.u_constant);
            rhs.u_tau_shift = vec_neg(&rhs.u_tau_shift);
            rhs.a_direction = vec_neg(&rhs.a_direction);
            rhs.v_linear = rhs.v_linear.neg();
            rhs.v_constant = vec_neg(&rhs.v_constant);
            rhs.v_im_direction = vec_neg(&rhs.v_im_direction);
            rhs.v_tau_shift = vec_add(&vec_neg(&rhs.v_tau_shift), &sum_d);
            mult = mult.merge(pairing_with_u(spec, &vec_neg(&sum_d))?);
            if spec.depth() % 2 == 1 {
                mult.coeff = -mult.coeff;
            }
        }
        IdentityKind::UShift { shift } => {
            let t = span_coeffs(spec, shift, "u translation")?;
            if !spec.ds.d_matrix().mul_vec(&t).iter().all(q_is_integer) {
                return Err(AppellError::IdentityParam(
                    "u translation does not pair integrally with the distinguished vectors"
                        .into(),
                ));
            }
            lhs.u_constant = vec_add(&lhs.u_constant, shift);
            mult.phase = spec.lattice.bilinear(shift, &spec.nu_vector())?;
        }
        IdentityKind::VShift { shift } => {
            require_dual_vector(spec, shift, "v translation")?;
            lhs.v_constant = vec_add(&lhs.v_constant, shift);
            mult.phase = spec.lattice.bilinear(shift, &spec.coset_offset())?;
        }
        IdentityKind::UVTauShift { shift } => {
            let t = span_coeffs(spec, shift, "tau translation")?;
            if !t.iter().all(q_is_integer) {
                return Err(AppellError::IdentityParam(
                    "tau translation is not an integer combination of the distinguished vectors"
                        .into(),
                ));
            }
            lhs.u_tau_shift = vec_add(&lhs.u_tau_shift, shift);
            lhs.v_tau_shift = vec_add(&lhs.v_tau_shift, shift);
            mult.q = -(spec.lattice.quadratic(shift)? * qr(1, 2));
            mult = mult.merge(pairing_with_v(spec, &vec_neg(shift))?);
        }
        IdentityKind::GInvariance { map } => {
            let n = spec.rank();
            if map.rows() != n || map.cols() != n || !map.is_integral() {
                return Err(AppellError::IdentityParam(
                    "basis map must be a square integral matrix".into(),
                ));
            }
            let pulled = map.transpose().mul(spec.lattice.gram()).mul(map);
            if pulled.to_rows() != spec.lattice.gram().to_rows() {
                return Err(AppellError::IdentityParam(
                    "basis map does not preserve the bilinear form".into(),
                ));
            }
            let mapped: Vec<Vec<Q>> =
                (0..spec.depth()).map(|r| map.mul_vec(&spec.ds.vector(r))).collect();
            rhs.ds = DVectorSet::new(&spec.lattice, &mapped)?;
            rhs.mu = map.mul_vec(&rhs.mu);
            rhs.u_linear = map.mul(&rhs.u_linear);
            rhs.u_constant = map.mul_vec(&rhs.u_constant);
            rhs.u_tau_shift = map.mul_vec(&rhs.u_tau_shift);
            rhs.a_direction = map.mul_vec(&rhs.a_direction);
            rhs.v_linear = map.mul(&rhs.v_linear);
            rhs.v_constant = map.mul_vec(&rhs.v_constant);
            rhs.v_tau_shift = map.mul_vec(&rhs.v_tau_shift);
            rhs.v_im_direction = map.mul_vec(&rhs.v_im_direction);
        }
    }

    let pad_q = mult.q.abs();
    let pad_w = mult.w.iter().map(|x| x.abs()).fold(Q::zero(), |acc, x| acc.max(x));
    let eq = q_cutoff + &pad_q;
    let ew = w_window + &pad_w;
    let left = phi(&lhs, &eq, &ew)?;
    let right = phi(&rhs, &eq, &ew)?.mul_monomial(&mult.q, &mult.w, &mult.coeff, &mult.phase);
    let witness = left.first_difference(&right, q_cutoff, w_window);
    Ok(IdentityOutcome {
        holds: witness.is_none(),
        witness,
        q_compared: q_cutoff.clone(),
        w_compared: w_window.clone(),
    })
}

// ---------------------------------------------------------------------------
// Rank-one closed forms
// ---------------------------------------------------------------------------

/// The classical depth-one family on the integers, normalized so that the
/// quadratic grading is `k^2/2` and the single denominator is `1 - q^k`.
/// These closed forms anchor the general machinery: the rank-one instance of
/// the full expansion must reproduce them after rescaling the grading.
pub mod depth1 {
    use super::*;

    fn coset_range(mu: &Q, nu: &Q, q_cutoff: &Q) -> Vec<Q> {
        let fr = q_frac(mu);
        let radius =
            (crate::ratmat::q_to_f64(&(qi(2) * q_cutoff + nu * nu))).max(0.0).sqrt() + 2.0;
        let center = -crate::ratmat::q_to_f64(nu);
        let lo = (center - radius).floor() as i64;
        let hi = (center + radius).ceil() as i64;
        (lo..=hi)
            .map(|n| &fr + qi(n))
            .filter(|k| (k * k) * qr(1, 2) + k * nu <= *q_cutoff)
            .collect()
    }

    /// Plain expansion: each pole summed on the side fixed by the sign of `k`.
    pub fn phi(mu: &Q, nu: &Q, q_cutoff: &Q) -> Result<FSeries, AppellError> {
        if q_is_integer(mu) {
            return Err(AppellError::KernelWall { index: 0, value: mu.clone() });
        }
        let mut out = FSeries::zero(0, q_cutoff.clone(), Q::zero());
        for k in coset_range(mu, nu, q_cutoff) {
            let base = (&k * &k) * qr(1, 2) + &k * nu;
            if k.is_positive() {
                let mut e = base;
                while &e <= q_cutoff {
                    out.add_term(e.clone(), vec![], Q::one());
                    e += &k;
                }
            } else {
                let mut e = &base - &k;
                while &e <= q_cutoff {
                    out.add_term(e.clone(), vec![], -Q::one());
                    e -= &k;
                }
            }
        }
        Ok(out)
    }

    /// Folded expansion: the twist is reduced to its fractional part first.
    pub fn phi_plus(mu: &Q, nu: &Q, q_cutoff: &Q) -> Result<FSeries, AppellError> {
        phi(mu, &q_frac(nu), q_cutoff)
    }

    /// The wall-crossing correction in closed form: a theta series of the
    /// combined coset times a finite block of negative powers, one per unit
    /// the twist sits away from the fundamental window.
    pub fn s_closed(mu: &Q, nu: &Q, q_cutoff: &Q) -> Result<FSeries, AppellError> {
        let floor = q_floor(nu).to_i64().ok_or_else(|| AppellError::OffsetOverflow(nu.clone()))?;
        let mut out = FSeries::zero(0, q_cutoff.clone(), Q::zero());
        if floor == 0 {
            return Ok(out);
        }
        let mut block: Vec<(Q, Q)> = Vec::new();
        if floor >= 1 {
            let fr = q_frac(nu);
            for m in 0..floor {
                let c = qi(m) + &fr;
                block.push((-(&c * &c) * qr(1, 2), Q::one()));
            }
        } else {
            for m in 0..(-floor) {
                let c = nu + qi(m);
                block.push((-(&c * &c) * qr(1, 2), -Q::one()));
            }
        }
        let extra = block
            .iter()
            .map(|(e, _)| -e.clone())
            .fold(Q::zero(), |acc, x: Q| acc.max(x));
        let theta_cut = q_cutoff + &extra;
        let shift = mu + nu;
        let radius = (crate::ratmat::q_to_f64(&(qi(2) * &theta_cut))).max(0.0).sqrt() + 2.0;
        let fr = q_frac(&shift);
        let lo = (-radius).floor() as i64;
        let hi = radius.ceil() as i64;
        for n in lo..=hi {
            let j = &fr + qi(n);
            let e_theta = (&j * &j) * qr(1, 2);
            if e_theta > theta_cut {
                continue;
            }
            for (e, c) in &block {
                out.add_term(&e_theta + e, vec![], c.clone());
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// JSON interface
// ---------------------------------------------------------------------------

type Pair = [i64; 2];

fn pair_to_q(p: &Pair, what: &str) -> Result<Q, AppellError> {
    if p[1] == 0 {
        return Err(AppellError::InvalidSpec(format!("{what}: zero denominator in {p:?}")));
    }
    Ok(qr(p[0], p[1]))
}

fn q_to_pair(x: &Q, what: &str) -> Result<Pair, AppellError> {
    let n = x.numer().to_i64();
    let d = x.denom().to_i64();
    match (n, d) {
        (Some(n), Some(d)) => Ok([n, d]),
        _ => Err(AppellError::InvalidSpec(format!("{what}: value {x} does not fit the wire format"))),
    }
}

fn pairs_to_qs(ps: &[Pair], what: &str) -> Result<Vec<Q>, AppellError> {
    ps.iter().map(|p| pair_to_q(p, what)).collect()
}

fn qs_to_pairs(xs: &[Q], what: &str) -> Result<Vec<Pair>, AppellError> {
    xs.iter().map(|x| q_to_pair(x, what)).collect()
}

/// Wire format of a spec: rationals are `[numerator, denominator]` pairs,
/// linear coefficients are given column by column, and absent optional
/// fields mean zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppellSpecJson {
    pub lattice: LatticeJson,
    #[serde(default)]
    pub mu: Vec<Pair>,
    #[serde(default)]
    pub nu: Vec<Pair>,
    #[serde(default)]
    pub u_linear: Vec<Vec<Pair>>,
    #[serde(default)]
    pub v_linear: Vec<Vec<Pair>>,
    #[serde(default)]
    pub u_constant: Vec<Pair>,
    #[serde(default)]
    pub v_constant: Vec<Pair>,
    #[serde(default)]
    pub a_direction: Vec<Pair>,
    #[serde(default)]
    pub v_im_direction: Vec<Pair>,
    #[serde(default)]
    pub u_tau_shift: Vec<Pair>,
    #[serde(default)]
    pub v_tau_shift: Vec<Pair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_cutoff: Option<Pair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_window: Option<Pair>,
}

impl AppellSpecJson {
    pub fn build(&self) -> Result<(AppellSpec, Option<Q>, Option<Q>), AppellError> {
        let (lattice, ds) = self.lattice.build()?;
        let n = lattice.rank();
        let m = ds.depth();
        let fill = |ps: &[Pair], len: usize, what: &str| -> Result<Vec<Q>, AppellError> {
            if ps.is_empty() {
                Ok(zeros(len))
            } else {
                pairs_to_qs(ps, what)
            }
        };
        let var_count = self.u_linear.len().max(self.v_linear.len());
        let columns = |cols: &[Vec<Pair>], what: &str| -> Result<QMat, AppellError> {
            let mut mat = QMat::zero(n, var_count);
            for (a, col) in cols.iter().enumerate() {
                let v = pairs_to_qs(col, what)?;
                if v.len() != n {
                    return Err(AppellError::WrongLength { field: "linear column", want: n, got: v.len() });
                }
                for i in 0..n {
                    mat.set(i, a, v[i].clone());
                }
            }
            Ok(mat)
        };
        let mut spec = AppellSpec::new(
            lattice,
            ds,
            fill(&self.mu, n, "mu")?,
            fill(&self.nu, m, "nu")?,
            var_count,
        )?;
        spec.u_linear = columns(&self.u_linear, "u_linear")?;
        spec.v_linear = columns(&self.v_linear, "v_linear")?;
        spec.u_constant = fill(&self.u_constant, n, "u_constant")?;
        spec.v_constant = fill(&self.v_constant, n, "v_constant")?;
        spec.a_direction = fill(&self.a_direction, n, "a_direction")?;
        spec.v_im_direction = fill(&self.v_im_direction, n, "v_im_direction")?;
        spec.u_tau_shift = fill(&self.u_tau_shift, n, "u_tau_shift")?;
        spec.v_tau_shift = fill(&self.v_tau_shift, n, "v_tau_shift")?;
        spec.validate()?;
        let qc = self.q_cutoff.as_ref().map(|p| pair_to_q(p, "q_cutoff")).transpose()?;
        let ww = self.w_window.as_ref().map(|p| pair_to_q(p, "w_window")).transpose()?;
        Ok((spec, qc, ww))
    }

    pub fn from_spec(spec: &AppellSpec) -> Result<Self, AppellError> {
        let cols = |mat: &QMat, what: &str| -> Result<Vec<Vec<Pair>>, AppellError> {
            (0..mat.cols()).map(|a| qs_to_pairs(&mat.col(a), what)).collect()
        };
        Ok(AppellSpecJson {
            lattice: LatticeJson::from_parts(&spec.lattice, &spec.ds),
            mu: qs_to_pairs(&spec.mu, "mu")?,
            nu: qs_to_pairs(&spec.nu, "nu")?,
            u_linear: cols(&spec.u_linear, "u_linear")?,
            v_linear: cols(&spec.v_linear, "v_linear")?,
            u_constant: qs_to_pairs(&spec.u_constant, "u_constant")?,
            v_constant: qs_to_pairs(&spec.v_constant, "v_constant")?,
            a_direction: qs_to_pairs(&spec.a_direction, "a_direction")?,
            v_im_direction: qs_to_pairs(&spec.v_im_direction, "v_im_direction")?,
            u_tau_shift: qs_to_pairs(&spec.u_tau_shift, "u_tau_shift")?,
            v_tau_shift: qs_to_pairs(&spec.v_tau_shift, "v_tau_shift")?,
            q_cutoff: None,
            w_window: None,
        })
    }
}

// ===========================================================================
// Tests
// ===========================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::conjugacy_classes;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn a1() -> Lattice {
        cartan_an(1).unwrap()
    }

    fn a2() -> Lattice {
        cartan_an(2).unwrap()
    }

    fn simple_roots(n: usize) -> Vec<Vec<Q>> {
        (0..n)
            .map(|j| {
                let mut e = zeros(n);
                e[j] = Q::one();
                e
            })
            .collect()
    }

    /// Spec on `A_2` with both simple roots as distinguished vectors and a
    /// single formal variable attached to small integer arguments.
    fn a2_depth2_spec(mu: &[Q], nu: &[Q], t: Q) -> AppellSpec {
        let lat = a2();
        let ds = DVectorSet::new(&lat, &simple_roots(2)).unwrap();
        let duals = crate::lattice::dual_vectors(&ds);
        let mut a_dir = zeros(2);
        for d in &duals {
            a_dir = vec_add(&a_dir, d);
        }
        a_dir = vec_scale(&a_dir, &t);
        let mut spec = AppellSpec::new(lat, ds, mu.to_vec(), nu.to_vec(), 1).unwrap();
        spec.u_linear = QMat::from_rows(vec![vec![qi(1)], vec![qi(-1)]]);
        spec.v_linear = QMat::from_rows(vec![vec![qi(2)], vec![qi(1)]]);
        spec.a_direction = a_dir;
        spec
    }

    /// Literal half-space sum over a box: every denominator step is tried in
    /// a fixed symmetric range and membership is decided by the raw sign
    /// rules.  Slow and structure-free on purpose.
    fn brute_box(
        spec: &AppellSpec,
        k_weight: i64,
        eps_weight: i64,
        with_fold: bool,
        q_cutoff: &Q,
        w_window: &Q,
        k_box: i64,
        x_box: i64,
    ) -> FSeries {
        let lat = &spec.lattice;
        let n = lat.rank();
        let m = spec.ds.depth();
        let nu_alpha = spec.nu_vector();
        let coset = spec.coset_offset();
        let fold = if with_fold {
            fold_floors(spec).unwrap().iter().map(|f| -f).collect()
        } else {
            vec![0i64; m]
        };
        let omega: Vec<Vec<Q>> = (0..m)
            .map(|r| {
                (0..spec.var_count)
                    .map(|a| lat.bilinear(&spec.ds.vector(r), &spec.u_linear.col(a)).unwrap())
                    .collect()
            })
            .collect();
        let mut out = FSeries::zero(spec.var_count, q_cutoff.clone(), w_window.clone());
        let mut idx = vec![-k_box; n];
        'outer: loop {
            let k: Vec<Q> = idx.iter().zip(&coset).map(|(i, c)| qi(*i) + c).collect();
            let mut b_vals = Vec::with_capacity(m);
            let mut signs = Vec::with_capacity(m);
            for r in 0..m {
                let d = spec.ds.vector(r);
                let b = lat.bilinear(&d, &k).unwrap()
                    + lat.bilinear(&d, &spec.u_tau_shift).unwrap();
                let s = &b + lat.bilinear(&d, &spec.a_direction).unwrap();
                signs.push(if s.is_positive() { 1i64 } else { -1i64 });
                b_vals.push(b);
            }
            let g0 = lat.quadratic(&k).unwrap() * qr(1, 2)
                + lat.bilinear(&vec_add(&nu_alpha, &spec.v_tau_shift), &k).unwrap()
                + lat.bilinear(&nu_alpha, &spec.u_tau_shift).unwrap();
            let base_w: Vec<Q> = (0..spec.var_count)
                .map(|a| {
                    lat.bilinear(&spec.v_linear.col(a), &k).unwrap()
                        + lat.bilinear(&spec.u_linear.col(a), &nu_alpha).unwrap()
                })
                .collect();
            let mut xs = vec![-x_box; m];
            'inner: loop {
                let mut weight_k = k_weight != 0;
                let mut weight_e = eps_weight != 0;
                let mut sign = 1i64;
                for r in 0..m {
                    let fwd = signs[r] > 0;
                    weight_k &= if fwd { xs[r] >= fold[r] } else { xs[r] < fold[r] };
                    weight_e &= if fwd { xs[r] >= 0 } else { xs[r] < 0 };
                    if !fwd {
                        sign = -sign;
                    }
                }
                let weight =
                    k_weight * i64::from(weight_k) + eps_weight * i64::from(weight_e);
                if weight != 0 {
                    let mut q = g0.clone();
                    let mut w = base_w.clone();
                    for r in 0..m {
                        q += qi(xs[r]) * &b_vals[r];
                        for a in 0..spec.var_count {
                            w[a] += qi(xs[r]) * &omega[r][a];
                        }
                    }
                    out.add_term(q, w, qi(weight * sign));
                }
                for r in 0..m {
                    xs[r] += 1;
                    if xs[r] <= x_box {
                        continue 'inner;
                    }
                    xs[r] = -x_box;
                }
                break;
            }
            for i in 0..n {
                idx[i] += 1;
                if idx[i] <= k_box {
                    continue 'outer;
                }
                idx[i] = -k_box;
            }
            break;
        }
        out
    }

    fn assert_phased_eq(a: &PhasedSeries, b: &PhasedSeries, q: &Q, w: &Q) {
        if let Some(wit) = a.first_difference(b, q, w) {
            panic!("series differ: {wit:?}");
        }
    }

    // === theta series ===

    #[test]
    fn theta_a1_counts_vectors_by_length() {
        let lat = a1();
        let t = theta_series(&lat, &zeros(1), &QMat::zero(1, 0), &zeros(1), &qi(10), &Q::zero())
            .unwrap();
        assert!(t.phase.is_zero());
        assert_eq!(t.series.coeff(&qi(0), &[]), qi(1));
        assert_eq!(t.series.coeff(&qi(1), &[]), qi(2));
        assert_eq!(t.series.coeff(&qi(4), &[]), qi(2));
        assert_eq!(t.series.coeff(&qi(9), &[]), qi(2));
        assert_eq!(t.series.coeff(&qi(2), &[]), qi(0));
        assert_eq!(t.series.term_count(), 4);
    }

    #[test]
    fn theta_a1_half_coset() {
        let lat = a1();
        let t = theta_series(&lat, &[qr(1, 2)], &QMat::zero(1, 0), &zeros(1), &qi(3), &Q::zero())
            .unwrap();
        assert_eq!(t.series.coeff(&qr(1, 4), &[]), qi(2));
        assert_eq!(t.series.coeff(&qr(9, 4), &[]), qi(2));
        assert_eq!(t.series.term_count(), 2);
    }

    #[test]
    fn theta_a3_counts_roots() {
        let lat = cartan_an(3).unwrap();
        let t = theta_series(&lat, &zeros(3), &QMat::zero(3, 0), &zeros(3), &qi(2), &Q::zero())
            .unwrap();
        assert_eq!(t.series.coeff(&qi(1), &[]), qi(12));
    }

    #[test]
    fn theta_w_grading_splits_the_shell() {
        let lat = a1();
        let v = QMat::from_rows(vec![vec![qi(1)]]);
        let t = theta_series(&lat, &zeros(1), &v, &zeros(1), &qi(4), &qi(10)).unwrap();
        assert_eq!(t.series.coeff(&qi(1), &[qi(2)]), qi(1));
        assert_eq!(t.series.coeff(&qi(1), &[qi(-2)]), qi(1));
        assert_eq!(t.series.coeff(&qi(1), &[qi(0)]), qi(0));
    }

    #[test]
    fn theta_constant_phase_is_folded() {
        let lat = a1();
        let t = theta_series(
            &lat,
            &[qr(1, 2)],
            &QMat::zero(1, 0),
            &[qr(1, 2)],
            &qi(3),
            &Q::zero(),
        )
        .unwrap();
        assert!(t.phase.is_zero());
        assert_eq!(t.series.coeff(&qr(1, 4), &[]), qi(-2));
    }

    #[test]
    fn theta_rejects_non_integral_constant_pairing() {
        let lat = a1();
        let err = theta_series(&lat, &zeros(1), &QMat::zero(1, 0), &[qr(1, 3)], &qi(2), &Q::zero());
        assert!(matches!(err, Err(AppellError::PhaseNotConstant { which: "v" })));
    }

    // === plain expansion ===

    #[test]
    fn phi_without_denominators_is_theta() {
        let lat = a2();
        let ds = DVectorSet::new(&lat, &[]).unwrap();
        let mu = vec![qr(1, 3), qr(1, 5)];
        let mut spec = AppellSpec::new(lat.clone(), ds, mu.clone(), vec![], 2).unwrap();
        let v = QMat::from_rows(vec![vec![qi(1), qi(0)], vec![qi(1), qi(2)]]);
        spec.v_linear = v.clone();
        spec.v_constant = vec![qr(1, 3), qr(2, 3)];
        let got = phi(&spec, &qi(4), &qi(12)).unwrap();
        let want = theta_series(&lat, &mu, &v, &spec.v_constant, &qi(4), &qi(12)).unwrap();
        assert_phased_eq(&got, &want, &qi(4), &qi(12));
    }

    #[test]
    fn phi_matches_literal_box_sum() {
        let mu = [qr(1, 5), qr(1, 7)];
        let nu = [qr(1, 3), qr(-1, 2)];
        let spec = a2_depth2_spec(&mu, &nu, qr(-1, 977));
        let qc = qi(3);
        let ww = qi(8);
        let got = phi(&spec, &qc, &ww).unwrap();
        let want = brute_box(&spec, 0, 1, false, &qc, &ww, 7, 11);
        assert!(got.phase.is_zero());
        if let Some(wit) =
            got.first_difference(&PhasedSeries::new(want, Q::zero()), &qc, &ww)
        {
            panic!("box oracle disagrees: {wit:?}");
        }
    }

    #[test]
    fn phi_flat_denominator_matches_box_sum() {
        // Twist and offset both integral, so the k = 0 term is flat and the
        // tail is graded by w alone.
        let lat = a1();
        let ds = DVectorSet::new(&lat, &simple_roots(1)).unwrap();
        let mut spec = AppellSpec::new(lat, ds, zeros(1), vec![qi(0)], 1).unwrap();
        spec.u_linear = QMat::from_rows(vec![vec![qi(1)]]);
        spec.v_linear = QMat::from_rows(vec![vec![qi(1)]]);
        spec.a_direction = vec![qr(-1, 5)];
        let qc = qi(4);
        let ww = qi(9);
        let got = phi(&spec, &qc, &ww).unwrap();
        let want = brute_box(&spec, 0, 1, false, &qc, &ww, 6, 14);
        if let Some(wit) =
            got.first_difference(&PhasedSeries::new(want, Q::zero()), &qc, &ww)
        {
            panic!("box oracle disagrees: {wit:?}");
        }
    }

    #[test]
    fn phi_matches_factorwise_geometric_route() {
        // Independent route: per lattice point, expand every denominator as a
        // geometric series on an enlarged window and multiply out.  Needs a
        // chamber with no flat denominators.
        let mu = [qr(1, 5), qr(1, 7)];
        let nu = [qr(1, 3), qr(2, 3)];
        let spec = a2_depth2_spec(&mu, &nu, qr(-1, 977));
        let qc = qi(3);
        let ww = qi(8);
        let pre = prepare(&spec).unwrap();
        let mut out = FSeries::zero(1, qc.clone(), ww.clone());
        let t = vec_add(&pre.nu_alpha, &spec.v_tau_shift);
        let bound = qi(2) * &qc + spec.lattice.quadratic(&t).unwrap();
        for x in
            enumerate_shifted_ellipsoid(spec.lattice.gram(), &vec_add(&pre.coset, &t), &bound)
                .unwrap()
        {
            let k = vec_sub(&x, &t);
            let g0 = spec.lattice.quadratic(&k).unwrap() * qr(1, 2)
                + dot(&pre.q_lin, &k)
                + &pre.q_const;
            if &g0 > &qc {
                continue;
            }
            let base_w: Vec<Q> =
                (0..1).map(|a| dot(&pre.w_rows[a], &k) + &pre.w_nu[a]).collect();
            let q_fac = &qc - &g0;
            let mut w_big = &ww + base_w[0].abs();
            let mut factors = Vec::new();
            for r in 0..2 {
                let b = dot(&pre.ct_rows[r], &k) + &pre.b_const[r];
                assert!(!b.is_zero(), "chamber chosen to avoid flat denominators");
                w_big += pre.omega[r][0].abs() * (&q_fac / b.abs() + qi(1));
                factors.push(b);
            }
            let mut acc = FSeries::one(1, q_fac.clone(), w_big.clone());
            for (r, b) in factors.iter().enumerate() {
                let dir = if (b + &pre.a_vals[r]).is_positive() {
                    MonomialDirection::Forward
                } else {
                    MonomialDirection::Backward
                };
                let f = geometric_expand(b, &pre.omega[r], dir, &q_fac, &w_big).unwrap();
                acc = series_mul(&acc, &f).unwrap();
            }
            for ((qe, we), c) in acc.iter() {
                out.add_term(&g0 + qe, vec![&base_w[0] + &we[0]], c.clone());
            }
        }
        let got = phi(&spec, &qc, &ww).unwrap();
        assert!(got.phase.is_zero());
        if let Some(wit) =
            got.first_difference(&PhasedSeries::new(out, Q::zero()), &qc, &ww)
        {
            panic!("factorwise route disagrees: {wit:?}");
        }
    }

    /// Rank-one instance on gram `[[2]]`: exponents double those of the
    /// classical normalization, giving a strict term bijection.
    fn depth1_via_general(mu_d: &Q, nu: &Q, q_cutoff: &Q) -> FSeries {
        let lat = a1();
        let ds = DVectorSet::new(&lat, &simple_roots(1)).unwrap();
        let mu_alpha = mu_d + nu;
        let mut spec = AppellSpec::new(lat, ds, vec![mu_alpha], vec![nu.clone()], 0).unwrap();
        spec.a_direction = vec![qr(-1, 5)];
        spec.v_im_direction = zeros(1);
        let doubled = qi(2) * q_cutoff;
        let got = phi(&spec, &doubled, &Q::zero()).unwrap();
        assert!(got.phase.is_zero());
        let mut halved = FSeries::zero(0, q_cutoff.clone(), Q::zero());
        for ((q, _), c) in got.series.iter() {
            halved.add_term(q * qr(1, 2), vec![], c.clone());
        }
        halved
    }

    #[test]
    fn phi_rank_one_reduces_to_classical_family() {
        for (mu_d, nu) in
            [(qr(1, 3), qi(2)), (qr(1, 2), qi(-3)), (qr(1, 4), qr(5, 4)), (qr(2, 7), qr(-1, 3))]
        {
            let got = depth1_via_general(&mu_d, &nu, &qi(8));
            let want = depth1::phi(&mu_d, &nu, &qi(8)).unwrap();
            assert!(
                series_sub(&got, &want).unwrap().is_zero(),
                "mismatch at mu={mu_d} nu={nu}"
            );
        }
    }

    // === folded expansion and wall crossing ===

    fn random_a2_spec(rng: &mut StdRng) -> AppellSpec {
        let dens = [3i64, 5, 7];
        let mu = [
            qr(rng.gen_range(1..5), dens[rng.gen_range(0..3usize)]),
            qr(rng.gen_range(1..5), dens[rng.gen_range(0..3usize)]),
        ];
        let nu = [
            qr(rng.gen_range(-8..8), 4),
            qr(rng.gen_range(-8..8), 4),
        ];
        let t = if rng.gen_bool(0.5) { qr(-1, 977) } else { qr(1, 977) };
        a2_depth2_spec(&mu, &nu, t)
    }

    #[test]
    fn folded_expansion_equals_plain_at_folded_twist() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..4 {
            let spec = random_a2_spec(&mut rng);
            let folded = nu_tilde(&spec).unwrap();
            let shifts = sigma_shifts(&spec).unwrap();
            for (f, s) in folded.iter().zip(&shifts) {
                let window = f + s;
                assert!(window.is_positive() && window < Q::one());
            }
            let mut at_folded = spec.clone();
            at_folded.nu = folded;
            let qc = qi(2);
            let ww = qi(6);
            let got = phi_plus(&spec, &qc, &ww).unwrap();
            let want = phi(&at_folded, &qc, &ww).unwrap();
            assert_phased_eq(&got, &want, &qc, &ww);
        }
    }

    #[test]
    fn folded_expansion_is_periodic() {
        let mut rng = StdRng::seed_from_u64(12);
        let spec = random_a2_spec(&mut rng);
        let qc = qi(2);
        let ww = qi(6);
        let base = phi_plus(&spec, &qc, &ww).unwrap();
        let mut shifted = spec.clone();
        shifted.mu = vec_add(&shifted.mu, &[qi(2), qi(-1)]);
        let ell = [qi(3), qi(0)];
        shifted.nu = vec_add(&shifted.nu, &ell);
        let got = phi_plus(&shifted, &qc, &ww).unwrap();
        assert_phased_eq(&got, &base, &qc, &ww);
    }

    #[test]
    fn correction_is_difference_of_folded_and_plain() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..3 {
            let spec = random_a2_spec(&mut rng);
            let qc = qi(2);
            let ww = qi(6);
            let s = s_func(&spec, &qc, &ww).unwrap();
            let plus = phi_plus(&spec, &qc, &ww).unwrap();
            let plain = phi(&spec, &qc, &ww).unwrap();
            assert_eq!(plus.phase, plain.phase);
            let diff =
                PhasedSeries::new(series_sub(&plus.series, &plain.series).unwrap(), plus.phase);
            assert_phased_eq(&s, &diff, &qc, &ww);
        }
    }

    #[test]
    fn correction_vanishes_in_fundamental_window() {
        for nu in [[qi(0), qr(1, 3)], [qr(9, 10), qr(1, 2)]] {
            let spec = a2_depth2_spec(&[qr(1, 5), qr(1, 7)], &nu, qr(-1, 977));
            let s = s_func(&spec, &qi(3), &qi(8)).unwrap();
            assert!(s.series.is_zero(), "expected no correction for nu={nu:?}");
        }
        let spec = a2_depth2_spec(&[qr(1, 5), qr(1, 7)], &[qi(2), qr(1, 3)], qr(-1, 977));
        let s = s_func(&spec, &qi(3), &qi(8)).unwrap();
        assert!(!s.series.is_zero());
    }

    #[test]
    fn correction_matches_closed_form_in_rank_one() {
        for (mu_d, nu) in [(qr(1, 3), qi(2)), (qr(1, 2), qi(-3)), (qr(1, 4), qr(5, 4))] {
            let lat = a1();
            let ds = DVectorSet::new(&lat, &simple_roots(1)).unwrap();
            let mu_alpha = &mu_d + &nu;
            let mut spec = AppellSpec::new(lat, ds, vec![mu_alpha], vec![nu.clone()], 0).unwrap();
            spec.a_direction = vec![qr(-1, 5)];
            let qc = qi(10);
            let got = s_func(&spec, &(qi(2) * &qc), &Q::zero()).unwrap();
            assert!(got.phase.is_zero());
            let mut halved = FSeries::zero(0, qc.clone(), Q::zero());
            for ((q, _), c) in got.series.iter() {
                halved.add_term(q * qr(1, 2), vec![], c.clone());
            }
            let want = depth1::s_closed(&mu_d, &nu, &qc).unwrap();
            assert!(
                series_sub(&halved, &want).unwrap().is_zero(),
                "mismatch at mu={mu_d} nu={nu}"
            );
        }
    }

    #[test]
    fn depth1_closed_form_matches_direct_difference() {
        for (mu, nu) in [(qr(1, 3), qi(2)), (qr(1, 2), qi(-3)), (qr(1, 4), qr(5, 4))] {
            let qc = qi(20);
            let plus = depth1::phi_plus(&mu, &nu, &qc).unwrap();
            let plain = depth1::phi(&mu, &nu, &qc).unwrap();
            let want = depth1::s_closed(&mu, &nu, &qc).unwrap();
            let diff = series_sub(&plus, &plain).unwrap();
            assert!(series_sub(&diff, &want).unwrap().is_zero(), "mismatch at mu={mu} nu={nu}");
        }
    }

    #[test]
    fn twist_factors_out_through_tau_translation() {
        // The twist can be traded for a tau translation of v and a unit
        // pairing with u.
        let spec = a2_depth2_spec(&[qr(1, 5), qr(1, 7)], &[qr(1, 3), qr(-3, 4)], qr(-1, 977));
        let qc = qi(3);
        let ww = qi(8);
        let lhs = phi(&spec, &qc, &ww).unwrap();
        let nu_alpha = spec.nu_vector();
        let mut reduced = spec.clone();
        reduced.mu = spec.coset_offset();
        reduced.nu = zeros(2);
        reduced.v_tau_shift = nu_alpha.clone();
        let mult = pairing_with_u(&spec, &nu_alpha).unwrap();
        let pad_q = mult.q.abs();
        let pad_w = mult.w.iter().map(|x| x.abs()).fold(Q::zero(), |a, x| a.max(x));
        let rhs = phi(&reduced, &(&qc + &pad_q), &(&ww + &pad_w))
            .unwrap()
            .mul_monomial(&mult.q, &mult.w, &mult.coeff, &mult.phase);
        assert!(lhs.first_difference(&rhs, &qc, &ww).is_none());
    }

    // === identities ===

    fn dual_basis_vector(lat: &Lattice, j: usize) -> Vec<Q> {
        let mut e = zeros(lat.rank());
        e[j] = Q::one();
        lat.gram().inverse().unwrap().mul_vec(&e)
    }

    #[test]
    fn all_identities_hold_on_a_fixed_spec() {
        let spec = a2_depth2_spec(&[qr(1, 5), qr(1, 7)], &[qr(1, 3), qr(-1, 2)], qr(-1, 977));
        let lat = spec.lattice.clone();
        let dstar1 = {
            let duals = crate::lattice::dual_vectors(&spec.ds);
            duals[0].clone()
        };
        let kinds: Vec<(&str, IdentityKind)> = vec![
            ("mu", IdentityKind::MuShift { shift: vec![qi(1), qi(-2)] }),
            ("nu", IdentityKind::NuShift { shift: vec![qi(1), qi(1)] }),
            ("munu", IdentityKind::MuNuShift { shift: dstar1.clone() }),
            ("mstar", IdentityKind::MStarShift { shift: dual_basis_vector(&lat, 0) }),
            ("inv", IdentityKind::Inversion),
            ("u", IdentityKind::UShift { shift: dstar1 }),
            ("v", IdentityKind::VShift { shift: dual_basis_vector(&lat, 1) }),
            ("uvtau", IdentityKind::UVTauShift { shift: vec![qi(1), qi(0)] }),
            ("g", IdentityKind::GInvariance { map: weyl_reflection(2, 1).unwrap() }),
        ];
        for (label, kind) in kinds {
            let out = verify_identity(&kind, &spec, &qi(3), &qi(6)).unwrap();
            assert!(out.holds, "identity {label} fails: {:?}", out.witness);
        }
    }

    #[test]
    fn identities_hold_on_random_specs() {
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..2 {
            let spec = random_a2_spec(&mut rng);
            let lat = spec.lattice.clone();
            let duals = crate::lattice::dual_vectors(&spec.ds);
            let kinds = [
                IdentityKind::NuShift {
                    shift: vec![qi(rng.gen_range(-2..3)), qi(rng.gen_range(-2..3))],
                },
                IdentityKind::MStarShift { shift: dual_basis_vector(&lat, 0) },
                IdentityKind::Inversion,
                IdentityKind::UVTauShift { shift: vec![qi(0), qi(1)] },
                IdentityKind::UShift { shift: duals[1].clone() },
            ];
            for kind in kinds {
                let out = verify_identity(&kind, &spec, &qi(2), &qi(5)).unwrap();
                assert!(out.holds, "{kind:?} fails: {:?}", out.witness);
            }
        }
    }

    #[test]
    fn ginvariance_on_rank_three() {
        let lat = cartan_an(3).unwrap();
        let ds = DVectorSet::new(&lat, &simple_roots(3)).unwrap();
        let duals = crate::lattice::dual_vectors(&ds);
        let mut a_dir = zeros(3);
        for d in &duals {
            a_dir = vec_add(&a_dir, d);
        }
        let mut spec = AppellSpec::new(
            lat,
            ds,
            vec![qr(1, 5), qr(1, 7), qr(2, 5)],
            vec![qr(1, 3), qr(1, 2), qr(-1, 4)],
            1,
        )
        .unwrap();
        spec.u_linear = QMat::from_rows(vec![vec![qi(1)], vec![qi(0)], vec![qi(-1)]]);
        spec.v_linear = QMat::from_rows(vec![vec![qi(1)], vec![qi(1)], vec![qi(1)]]);
        spec.a_direction = vec_scale(&a_dir, &qr(-1, 977));
        let kind = IdentityKind::GInvariance { map: weyl_reflection(3, 1).unwrap() };
        let out = verify_identity(&kind, &spec, &qi(2), &qi(5)).unwrap();
        assert!(out.holds, "{:?}", out.witness);
    }

    #[test]
    fn identity_parameters_are_validated() {
        let spec = a2_depth2_spec(&[qr(1, 5), qr(1, 7)], &[qr(1, 3), qr(-1, 2)], qr(-1, 977));
        let bad = [
            IdentityKind::MuShift { shift: vec![qr(1, 2), qi(0)] },
            IdentityKind::NuShift { shift: vec![qr(1, 3), qi(0)] },
            IdentityKind::VShift { shift: vec![qr(1, 5), qi(0)] },
            IdentityKind::GInvariance { map: QMat::from_int_rows(&[vec![1, 1], vec![0, 1]]) },
        ];
        for kind in bad {
            let got = verify_identity(&kind, &spec, &qi(1), &qi(2));
            assert!(
                matches!(got, Err(AppellError::IdentityParam(_))),
                "expected rejection for {kind:?}"
            );
        }
    }

    #[test]
    fn witness_reporting_pinpoints_first_mismatch() {
        let mut a = FSeries::zero(1, qi(3), qi(4));
        a.add_term(qi(1), vec![qi(0)], qi(2));
        a.add_term(qi(2), vec![qi(1)], qi(5));
        let mut b = a.clone();
        b.add_term(qi(2), vec![qi(1)], qi(1));
        let pa = PhasedSeries::new(a, Q::zero());
        let pb = PhasedSeries::new(b, Q::zero());
        let wit = pa.first_difference(&pb, &qi(3), &qi(4)).unwrap();
        assert_eq!(wit.q_exp, qi(2));
        assert_eq!(wit.lhs, qi(5));
        assert_eq!(wit.rhs, qi(6));
        assert!(pa.first_difference(&pb, &qr(3, 2), &qi(4)).is_none());
    }

    #[test]
    fn phase_normalization_folds_half_turns() {
        let mut s = FSeries::zero(0, qi(2), Q::zero());
        s.add_term(qi(1), vec![], qi(3));
        let p = PhasedSeries::new(s.clone(), qr(7, 4));
        assert_eq!(p.phase, qr(1, 4));
        assert_eq!(p.series.coeff(&qi(1), &[]), qi(-3));
        let z = PhasedSeries::new(FSeries::zero(0, qi(2), Q::zero()), qr(1, 3));
        assert!(z.phase.is_zero());
        let same = PhasedSeries::new(s.clone(), qr(1, 2));
        let neg = PhasedSeries::new(s.neg(), Q::zero());
        assert!(same.first_difference(&neg, &qi(2), &Q::zero()).is_none());
    }

    // === staircase family ===

    #[test]
    fn staircase_direct_route_matches_spec_expansion_rank_two() {
        for (a, b) in [(0i64, 0i64), (1, 0), (0, 2), (2, 3)] {
            let qc = qi(2);
            let ww = qi(12);
            let (direct, spec) = psi_build(2, a, b, &qc, &ww).unwrap();
            let via_spec = phi(&spec, &qc, &ww).unwrap();
            assert!(via_spec.phase.is_zero());
            let diff = series_sub(&direct, &via_spec.series).unwrap();
            assert!(diff.is_zero(), "routes disagree for (a, b) = ({a}, {b}): {diff:?}");
        }
    }

    #[test]
    fn staircase_spec_has_expected_shape() {
        for n in [2usize, 3, 4] {
            let (_, spec) = psi_build(n, 1, 1, &Q::zero(), &Q::zero()).unwrap();
            for r in 0..n {
                let d = spec.ds.vector(r);
                assert_eq!(
                    spec.lattice.bilinear(&d, &spec.u_linear.col(0)).unwrap(),
                    qi(4),
                    "u pairs with every distinguished vector at strength four"
                );
            }
            let coset = spec.coset_offset();
            for (j, c) in coset.iter().enumerate() {
                let want = qr(-(j as i64 + 1), n as i64 + 1);
                assert!(q_is_integer(&(c - &want)), "coset component {j} drifts");
            }
        }
    }

    #[test]
    fn staircase_rank_three_matches_box_sum() {
        let qc = qi(1);
        let ww = qi(8);
        let (direct, spec) = psi_build(3, 0, 0, &qc, &ww).unwrap();
        let want = brute_box(&spec, 0, 1, false, &qc, &ww, 2, 7);
        let got = PhasedSeries::new(direct, Q::zero());
        if let Some(wit) = got.first_difference(&PhasedSeries::new(want, Q::zero()), &qc, &ww) {
            panic!("box oracle disagrees: {wit:?}");
        }
    }

    #[test]
    fn staircase_rejects_rank_one() {
        assert!(matches!(psi_build(1, 0, 0, &qi(1), &qi(1)), Err(AppellError::RankTooSmall(1))));
    }

    // === error surfaces ===

    #[test]
    fn chamber_wall_is_rejected() {
        let mut spec = a2_depth2_spec(&[qr(1, 5), qr(1, 7)], &[qi(0), qi(0)], qr(-1, 977));
        spec.a_direction = zeros(2);
        let fr = q_frac(
            &spec
                .lattice
                .bilinear(&spec.ds.vector(0), &spec.coset_offset())
                .unwrap(),
        );
        assert!(!fr.is_zero());
        spec.a_direction = vec_scale(&crate::lattice::dual_vectors(&spec.ds)[0], &-fr);
        let got = phi(&spec, &qi(1), &qi(2));
        assert!(matches!(got, Err(AppellError::ChamberWall { index: 0, .. })));
    }

    #[test]
    fn flat_wall_needs_nonzero_chamber_component() {
        let lat = a1();
        let ds = DVectorSet::new(&lat, &simple_roots(1)).unwrap();
        let spec = AppellSpec::new(lat, ds, zeros(1), vec![qi(0)], 0).unwrap();
        let got = phi(&spec, &qi(1), &Q::zero());
        assert!(matches!(got, Err(AppellError::ChamberWall { index: 0, .. })));
    }

    #[test]
    fn flat_tail_without_w_grading_is_rejected() {
        let lat = a1();
        let ds = DVectorSet::new(&lat, &simple_roots(1)).unwrap();
        let mut spec = AppellSpec::new(lat, ds, zeros(1), vec![qi(0)], 0).unwrap();
        spec.a_direction = vec![qr(-1, 5)];
        let got = phi(&spec, &qi(1), &Q::zero());
        assert!(matches!(got, Err(AppellError::FlatTailUnbounded { index: 0, .. })));
    }

    #[test]
    fn kernel_wall_is_rejected() {
        let mut spec = a2_depth2_spec(&[qr(1, 5), qr(1, 7)], &[qi(0), qi(0)], qr(-1, 977));
        let shifts = sigma_shifts(&spec).unwrap();
        spec.nu = vec![Q::one() - &shifts[0], qr(1, 3)];
        let got = phi_plus(&spec, &qi(1), &qi(2));
        assert!(matches!(got, Err(AppellError::KernelWall { index: 0, .. })));
    }

    #[test]
    fn non_constant_phase_is_rejected() {
        let mut spec = a2_depth2_spec(&[qr(1, 5), qr(1, 7)], &[qi(0), qi(0)], qr(-1, 977));
        spec.u_constant = vec![qr(1, 3), qi(0)];
        let got = phi(&spec, &qi(1), &qi(2));
        assert!(matches!(got, Err(AppellError::PhaseNotConstant { which: "u" })));
        let mut spec2 = a2_depth2_spec(&[qr(1, 5), qr(1, 7)], &[qi(0), qi(0)], qr(-1, 977));
        spec2.v_constant = vec![qr(1, 5), qi(0)];
        let got2 = phi(&spec2, &qi(1), &qi(2));
        assert!(matches!(got2, Err(AppellError::PhaseNotConstant { which: "v" })));
    }

    // === wire format ===

    #[test]
    fn spec_json_round_trips() {
        let spec = a2_depth2_spec(&[qr(1, 5), qr(1, 7)], &[qr(1, 3), qr(-1, 2)], qr(-1, 977));
        let wire = AppellSpecJson::from_spec(&spec).unwrap();
        let text = serde_json::to_string_pretty(&wire).unwrap();
        let parsed: AppellSpecJson = serde_json::from_str(&text).unwrap();
        let (rebuilt, qc, ww) = parsed.build().unwrap();
        assert!(qc.is_none() && ww.is_none());
        let a = phi(&spec, &qi(2), &qi(5)).unwrap();
        let b = phi(&rebuilt, &qi(2), &qi(5)).unwrap();
        assert_phased_eq(&a, &b, &qi(2), &qi(5));
    }

    #[test]
    fn spec_json_rejects_unknown_fields_and_bad_rationals() {
        let bad_field = r#"{"lattice": {"rank": 1, "gram": [[2]]}, "frobnicate": 1}"#;
        assert!(serde_json::from_str::<AppellSpecJson>(bad_field).is_err());
        let bad_rational = r#"{"lattice": {"rank": 1, "gram": [[2]]}, "mu": [[1, 0]]}"#;
        let parsed: AppellSpecJson = serde_json::from_str(bad_rational).unwrap();
        assert!(matches!(parsed.build(), Err(AppellError::InvalidSpec(_))));
    }

    // === conjugacy data interplay ===

    #[test]
    fn theta_splits_over_conjugacy_classes() {
        // Summing the theta series over all classes of the discriminant group
        // reproduces the theta series of the dual lattice restricted to the
        // same grading, here checked through the total vector count at the
        // lowest shell of A_2.
        let lat = a2();
        let classes = conjugacy_classes(2, false).unwrap();
        assert_eq!(classes.len(), 3);
        let mut total = Q::zero();
        for mu in &classes {
            let t = theta_series(&lat, mu, &QMat::zero(2, 0), &zeros(2), &qr(1, 3), &Q::zero())
                .unwrap();
            total += t.series.coeff(&qr(1, 3), &[]);
        }
        assert_eq!(total, qi(6), "six dual vectors of squared length 2/3");
    }
}
