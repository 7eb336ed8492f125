//! Exact truncated series in `q` with monomial elliptic-variable factors.
//!
//! An [`FSeries`] stores finitely many terms `c * q^e * w_1^{f_1} ... w_V^{f_V}`
//! with rational exponents and rational coefficients, truncated to `qExp <=
//! qCutoff` and `|wExp_a| <= wWindow` per variable.  Arithmetic is exact and
//! re-truncates; [`geometric_expand`] produces the two one-sided expansions
//! of `1/(1 - X)` for a monomial `X`; [`eval_numeric`] turns a series into a
//! complex number at a point in the upper half plane, with a crude estimate
//! of the discarded tail.

use std::collections::BTreeMap;

use num::complex::Complex64;
use num::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ratmat::{q_to_f64, Q, Z};

/// Errors for series construction, arithmetic and evaluation.
#[derive(Debug, Error)]
pub enum FSeriesError {
    #[error("series shapes differ: {0}")]
    ShapeMismatch(String),
    #[error("expansion direction does not increase the grading")]
    NonIncreasingDirection,
    #[error("evaluation requires Im(tau) > 0")]
    TauNotInUpperHalfPlane,
    #[error("expected {want} elliptic variables, got {got}")]
    WrongVariableCount { want: usize, got: usize },
    #[error("invalid serialized series: {0}")]
    BadSerialization(String),
}

/// Which one-sided expansion of `1/(1 - X)` to take.
///
/// `Forward` sums `X^n` for `n >= 0`; `Backward` rewrites `1/(1 - X)` as
/// `-X^{-1}/(1 - X^{-1})` and sums `-X^{-n}` for `n >= 1`.  A direction is
/// legal only when successive terms strictly increase the truncation grading.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MonomialDirection {
    Forward,
    Backward,
}

impl MonomialDirection {
    pub fn sign(self) -> i64 {
        match self {
            MonomialDirection::Forward => 1,
            MonomialDirection::Backward => -1,
        }
    }
}

/// Truncated series with exact rational data.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FSeries {
    var_count: usize,
    q_cutoff: Q,
    w_window: Q,
    terms: BTreeMap<(Q, Vec<Q>), Q>,
}

impl FSeries {
    pub fn zero(var_count: usize, q_cutoff: Q, w_window: Q) -> Self {
        FSeries { var_count, q_cutoff, w_window, terms: BTreeMap::new() }
    }

    pub fn constant(var_count: usize, q_cutoff: Q, w_window: Q, value: Q) -> Self {
        let mut s = Self::zero(var_count, q_cutoff, w_window);
        s.add_term(Q::zero(), vec![Q::zero(); var_count], value);
        s
    }

    pub fn one(var_count: usize, q_cutoff: Q, w_window: Q) -> Self {
        Self::constant(var_count, q_cutoff, w_window, Q::one())
    }

    pub fn monomial(
        var_count: usize,
        q_cutoff: Q,
        w_window: Q,
        q_exp: Q,
        w_exps: Vec<Q>,
        coeff: Q,
    ) -> Self {
        let mut s = Self::zero(var_count, q_cutoff, w_window);
        s.add_term(q_exp, w_exps, coeff);
        s
    }

    pub fn var_count(&self) -> usize {
        self.var_count
    }

    pub fn q_cutoff(&self) -> &Q {
        &self.q_cutoff
    }

    pub fn w_window(&self) -> &Q {
        &self.w_window
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(Q, Vec<Q>), &Q)> {
        self.terms.iter()
    }

    /// Coefficient of one monomial, zero when absent.
    pub fn coeff(&self, q_exp: &Q, w_exps: &[Q]) -> Q {
        self.terms
            .get(&(q_exp.clone(), w_exps.to_vec()))
            .cloned()
            .unwrap_or_else(Q::zero)
    }

    /// Largest retained `q` exponent.
    pub fn max_q_exp(&self) -> Option<Q> {
        self.terms.keys().map(|(q, _)| q.clone()).max()
    }

    fn in_window(&self, q_exp: &Q, w_exps: &[Q]) -> bool {
        q_exp <= &self.q_cutoff && w_exps.iter().all(|w| w.abs() <= self.w_window)
    }

    /// Accumulates one term, silently dropping contributions outside the
    /// truncation window and never storing zero coefficients.
    pub fn add_term(&mut self, q_exp: Q, w_exps: Vec<Q>, coeff: Q) {
        assert_eq!(w_exps.len(), self.var_count, "wrong number of elliptic exponents");
        if coeff.is_zero() || !self.in_window(&q_exp, &w_exps) {
            return;
        }
        let key = (q_exp, w_exps);
        if let Some(entry) = self.terms.get_mut(&key) {
            *entry += coeff;
            if entry.is_zero() {
                self.terms.remove(&key);
            }
        } else {
            self.terms.insert(key, coeff);
        }
    }

    pub fn neg(&self) -> Self {
        let mut out = self.clone();
        for v in out.terms.values_mut() {
            *v = -v.clone();
        }
        out
    }

    pub fn scale(&self, factor: &Q) -> Self {
        if factor.is_zero() {
            return Self::zero(self.var_count, self.q_cutoff.clone(), self.w_window.clone());
        }
        let mut out = self.clone();
        for v in out.terms.values_mut() {
            *v *= factor;
        }
        out
    }

    /// Multiplies by a single monomial, re-truncating.
    pub fn mul_monomial(&self, q_exp: &Q, w_exps: &[Q], coeff: &Q) -> Self {
        assert_eq!(w_exps.len(), self.var_count);
        let mut out = Self::zero(self.var_count, self.q_cutoff.clone(), self.w_window.clone());
        for ((q, w), c) in &self.terms {
            let nw: Vec<Q> = w.iter().zip(w_exps).map(|(a, b)| a + b).collect();
            out.add_term(q + q_exp, nw, c * coeff);
        }
        out
    }

    /// Shrinks the truncation window; never extends it, so the operation is
    /// idempotent.
    pub fn truncate(&self, q_cutoff: &Q, w_window: &Q) -> Self {
        let qc = self.q_cutoff.clone().min(q_cutoff.clone());
        let ww = self.w_window.clone().min(w_window.clone());
        let mut out = FSeries {
            var_count: self.var_count,
            q_cutoff: qc,
            w_window: ww,
            terms: BTreeMap::new(),
        };
        for ((q, w), c) in &self.terms {
            out.add_term(q.clone(), w.clone(), c.clone());
        }
        out
    }
}

fn check_shapes(a: &FSeries, b: &FSeries) -> Result<(), FSeriesError> {
    if a.var_count != b.var_count {
        return Err(FSeriesError::ShapeMismatch(format!(
            "variable counts {} and {}",
            a.var_count, b.var_count
        )));
    }
    if a.q_cutoff != b.q_cutoff || a.w_window != b.w_window {
        return Err(FSeriesError::ShapeMismatch("cutoffs differ".into()));
    }
    Ok(())
}

/// Exact sum of two compatible series.
pub fn series_add(a: &FSeries, b: &FSeries) -> Result<FSeries, FSeriesError> {
    check_shapes(a, b)?;
    let mut out = a.clone();
    for ((q, w), c) in &b.terms {
        out.add_term(q.clone(), w.clone(), c.clone());
    }
    Ok(out)
}

/// Exact difference of two compatible series.
pub fn series_sub(a: &FSeries, b: &FSeries) -> Result<FSeries, FSeriesError> {
    series_add(a, &b.neg())
}

/// Exact product of two compatible series, re-truncated.
pub fn series_mul(a: &FSeries, b: &FSeries) -> Result<FSeries, FSeriesError> {
    check_shapes(a, b)?;
    let mut out = FSeries::zero(a.var_count, a.q_cutoff.clone(), a.w_window.clone());
    for ((qa, wa), ca) in &a.terms {
        for ((qb, wb), cb) in &b.terms {
            let w: Vec<Q> = wa.iter().zip(wb).map(|(x, y)| x + y).collect();
            out.add_term(qa + qb, w, ca * cb);
        }
    }
    Ok(out)
}

/// Coefficientwise equality below the stated window.
pub fn series_equal(a: &FSeries, b: &FSeries, up_to_q: &Q, up_to_w: &Q) -> bool {
    if a.var_count != b.var_count {
        return false;
    }
    let within = |q: &Q, w: &[Q]| q <= up_to_q && w.iter().all(|x| x.abs() <= *up_to_w);
    let fa = a.terms.iter().filter(|((q, w), _)| within(q, w));
    let fb = b.terms.iter().filter(|((q, w), _)| within(q, w));
    fa.eq(fb)
}

/// Expands `1/(1 - X)` for the monomial `X = q^{qExp} w^{wExps}` in the given
/// direction, truncated to the window.  The direction must increase the
/// q-grading; a flat monomial (qExp = 0) may be expanded either way provided
/// it carries some w-content, since the symmetric w-window then cuts the tail.
pub fn geometric_expand(
    q_exp: &Q,
    w_exps: &[Q],
    direction: MonomialDirection,
    q_cutoff: &Q,
    w_window: &Q,
) -> Result<FSeries, FSeriesError> {
    let sign = direction.sign();
    let signed_q = q_exp * Q::from(Z::from(sign));
    let legal =
        signed_q.is_positive() || (q_exp.is_zero() && w_exps.iter().any(|x| !x.is_zero()));
    if !legal {
        return Err(FSeriesError::NonIncreasingDirection);
    }
    let mut out = FSeries::zero(w_exps.len(), q_cutoff.clone(), w_window.clone());
    let (start, coeff) = match direction {
        MonomialDirection::Forward => (0i64, Q::one()),
        MonomialDirection::Backward => (1i64, -Q::one()),
    };
    let mut n = start;
    loop {
        let power = Q::from(Z::from(n * sign));
        let q = q_exp * &power;
        let w: Vec<Q> = w_exps.iter().map(|x| x * &power).collect();
        if !out.in_window(&q, &w) {
            break;
        }
        out.add_term(q, w, coeff.clone());
        n += 1;
    }
    Ok(out)
}

/// Value of a series at one numeric point, with a tail estimate.
#[derive(Clone, Copy, Debug)]
pub struct SeriesEval {
    pub value: Complex64,
    /// Heuristic scale of the discarded terms: the largest retained term
    /// amplitude times the geometric factor at the cutoff grade.
    pub tail_estimate: f64,
}

/// Evaluates at `q = e^{2 pi i tau}`, `w_a = e^{2 pi i z_a}`.
pub fn eval_numeric(
    a: &FSeries,
    tau: Complex64,
    zs: &[Complex64],
) -> Result<SeriesEval, FSeriesError> {
    if tau.im <= 0.0 {
        return Err(FSeriesError::TauNotInUpperHalfPlane);
    }
    if zs.len() != a.var_count {
        return Err(FSeriesError::WrongVariableCount { want: a.var_count, got: zs.len() });
    }
    let two_pi_i = Complex64::new(0.0, 2.0 * std::f64::consts::PI);
    let mut value = Complex64::new(0.0, 0.0);
    let mut amp_max: f64 = 0.0;
    for ((q, w), c) in &a.terms {
        let mut exponent = tau * q_to_f64(q);
        for (z, e) in zs.iter().zip(w) {
            exponent += z * q_to_f64(e);
        }
        let factor = (two_pi_i * exponent).exp();
        let cf = q_to_f64(c);
        value += factor * cf;
        amp_max = amp_max.max((factor * cf).norm());
    }
    let rho = (-2.0 * std::f64::consts::PI * tau.im).exp();
    let scale = if a.terms.is_empty() { 1.0 } else { amp_max };
    let tail_estimate = scale * rho.powf(q_to_f64(&a.q_cutoff)).min(f64::MAX) / (1.0 - rho);
    Ok(SeriesEval { value, tail_estimate })
}

// === Serialization ===

fn q_to_pair(x: &Q) -> Result<[i128; 2], FSeriesError> {
    let n = i128::try_from(x.numer())
        .map_err(|_| FSeriesError::BadSerialization("numerator too large".into()))?;
    let d = i128::try_from(x.denom())
        .map_err(|_| FSeriesError::BadSerialization("denominator too large".into()))?;
    Ok([n, d])
}

fn pair_to_q(p: &[i128; 2]) -> Result<Q, FSeriesError> {
    if p[1] == 0 {
        return Err(FSeriesError::BadSerialization("zero denominator".into()));
    }
    Ok(Q::new(Z::from(p[0]), Z::from(p[1])))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermJson {
    q: [i128; 2],
    w: Vec<[i128; 2]>,
    c: [i128; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FSeriesJson {
    vars: usize,
    qcut: [i128; 2],
    wwin: [i128; 2],
    terms: Vec<TermJson>,
}

impl FSeries {
    /// Serializes with terms in canonical `(qExp, wExps)` order.
    pub fn to_json(&self) -> Result<String, FSeriesError> {
        let mut terms = Vec::with_capacity(self.terms.len());
        for ((q, w), c) in &self.terms {
            let w: Result<Vec<[i128; 2]>, _> = w.iter().map(q_to_pair).collect();
            terms.push(TermJson { q: q_to_pair(q)?, w: w?, c: q_to_pair(c)? });
        }
        let doc = FSeriesJson {
            vars: self.var_count,
            qcut: q_to_pair(&self.q_cutoff)?,
            wwin: q_to_pair(&self.w_window)?,
            terms,
        };
        serde_json::to_string(&doc).map_err(|e| FSeriesError::BadSerialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, FSeriesError> {
        let doc: FSeriesJson =
            serde_json::from_str(text).map_err(|e| FSeriesError::BadSerialization(e.to_string()))?;
        let mut out =
            FSeries::zero(doc.vars, pair_to_q(&doc.qcut)?, pair_to_q(&doc.wwin)?);
        for term in &doc.terms {
            if term.w.len() != doc.vars {
                return Err(FSeriesError::BadSerialization(
                    "term variable count mismatch".into(),
                ));
            }
            let w: Result<Vec<Q>, _> = term.w.iter().map(pair_to_q).collect();
            out.add_term(pair_to_q(&term.q)?, w?, pair_to_q(&term.c)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratmat::{qi, qr};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sparse_random(rng: &mut ChaCha8Rng, vars: usize, qcut: i64, wwin: i64) -> FSeries {
        let mut s = FSeries::zero(vars, qi(qcut), qi(wwin));
        for _ in 0..8 {
            let q = qr(rng.gen_range(-4..=2 * qcut), rng.gen_range(1..=3));
            let w: Vec<Q> =
                (0..vars).map(|_| qr(rng.gen_range(-wwin..=wwin), rng.gen_range(1..=2))).collect();
            s.add_term(q, w, qi(rng.gen_range(-3..=3)));
        }
        s
    }

    /// Random series whose exponents are all non-negative, so that dropped
    /// products can never fall back inside the window.
    fn sparse_random_nonneg(rng: &mut ChaCha8Rng, vars: usize, qcut: i64, wwin: i64) -> FSeries {
        let mut s = FSeries::zero(vars, qi(qcut), qi(wwin));
        for _ in 0..8 {
            let q = qr(rng.gen_range(0..=2 * qcut), rng.gen_range(1..=3));
            let w: Vec<Q> =
                (0..vars).map(|_| qr(rng.gen_range(0..=wwin), rng.gen_range(1..=2))).collect();
            s.add_term(q, w, qi(rng.gen_range(-3..=3)));
        }
        s
    }

    // === Arithmetic ===

    #[test]
    fn product_of_conjugate_binomials() {
        let one = FSeries::one(0, qi(4), qi(0));
        let q = FSeries::monomial(0, qi(4), qi(0), qi(1), vec![], qi(1));
        let a = series_add(&one, &q).unwrap();
        let b = series_sub(&one, &q).unwrap();
        let prod = series_mul(&a, &b).unwrap();
        let mut want = FSeries::one(0, qi(4), qi(0));
        want.add_term(qi(2), vec![], qi(-1));
        assert_eq!(prod, want);
    }

    #[test]
    fn additive_identity_and_shape_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = sparse_random(&mut rng, 2, 6, 8);
        let zero = FSeries::zero(2, qi(6), qi(8));
        assert_eq!(series_add(&a, &zero).unwrap(), a);
        let other = FSeries::zero(1, qi(6), qi(8));
        assert!(series_add(&a, &other).is_err());
        let shifted = FSeries::zero(2, qi(5), qi(8));
        assert!(series_mul(&a, &shifted).is_err());
    }

    #[test]
    fn ring_axioms_on_random_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..6 {
            let a = sparse_random(&mut rng, 2, 6, 8);
            let b = sparse_random(&mut rng, 2, 6, 8);
            let c = sparse_random(&mut rng, 2, 6, 8);
            assert_eq!(series_add(&a, &b).unwrap(), series_add(&b, &a).unwrap());
            assert_eq!(series_mul(&a, &b).unwrap(), series_mul(&b, &a).unwrap());
            let lhs = series_mul(&a, &series_add(&b, &c).unwrap()).unwrap();
            let rhs =
                series_add(&series_mul(&a, &b).unwrap(), &series_mul(&a, &c).unwrap()).unwrap();
            assert_eq!(lhs, rhs);

            // Associativity holds exactly when the dropped monomials form an
            // ideal, which non-negative exponents guarantee.
            let a = sparse_random_nonneg(&mut rng, 2, 6, 8);
            let b = sparse_random_nonneg(&mut rng, 2, 6, 8);
            let c = sparse_random_nonneg(&mut rng, 2, 6, 8);
            let ab_c = series_mul(&series_mul(&a, &b).unwrap(), &c).unwrap();
            let a_bc = series_mul(&a, &series_mul(&b, &c).unwrap()).unwrap();
            assert_eq!(ab_c, a_bc);
        }
    }

    #[test]
    fn truncation_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let a = sparse_random(&mut rng, 2, 6, 8);
        let t = a.truncate(&qi(3), &qi(4));
        assert_eq!(t, t.truncate(&qi(3), &qi(4)));
        assert_eq!(t, t.truncate(&qi(10), &qi(10)));
        for ((q, w), _) in t.iter() {
            assert!(q <= &qi(3));
            assert!(w.iter().all(|x| x.abs() <= qi(4)));
        }
    }

    // === Geometric expansion ===

    #[test]
    fn forward_expansion_of_q() {
        let e = geometric_expand(&qi(1), &[], MonomialDirection::Forward, &qi(5), &qi(0)).unwrap();
        for n in 0..=5 {
            assert_eq!(e.coeff(&qi(n), &[]), qi(1));
        }
        assert_eq!(e.term_count(), 6);
    }

    #[test]
    fn backward_expansion_of_negative_power() {
        // X = q^{-1} w^2 expanded away from the origin.
        let e = geometric_expand(
            &qi(-1),
            &[qi(2)],
            MonomialDirection::Backward,
            &qi(3),
            &qi(10),
        )
        .unwrap();
        for n in 1..=3 {
            assert_eq!(e.coeff(&qi(n), &[qi(-2 * n)]), qi(-1));
        }
        assert_eq!(e.term_count(), 3);
        assert!(geometric_expand(&qi(-1), &[qi(2)], MonomialDirection::Forward, &qi(3), &qi(10))
            .is_err());
    }

    #[test]
    fn flat_expansion_within_window() {
        let e =
            geometric_expand(&qi(0), &[qi(2)], MonomialDirection::Forward, &qi(5), &qi(7)).unwrap();
        assert_eq!(e.term_count(), 4);
        for n in 0..=3 {
            assert_eq!(e.coeff(&qi(0), &[qi(2 * n)]), qi(1));
        }
        // Flat monomials expand in either direction: the window bounds them.
        let b =
            geometric_expand(&qi(0), &[qi(2)], MonomialDirection::Backward, &qi(5), &qi(7))
                .unwrap();
        assert_eq!(b.term_count(), 3);
        for n in 1..=3 {
            assert_eq!(b.coeff(&qi(0), &[qi(-2 * n)]), qi(-1));
        }
        // A bare constant has no grade to move along in either direction.
        assert!(geometric_expand(&qi(0), &[], MonomialDirection::Forward, &qi(5), &qi(0)).is_err());
        assert!(
            geometric_expand(&qi(0), &[qi(0)], MonomialDirection::Backward, &qi(5), &qi(9))
                .is_err()
        );
    }

    #[test]
    fn expansion_inverts_one_minus_x() {
        // For each legal case, (1 - X) times the expansion telescopes to 1
        // plus a single defect at the far end of the window.
        let cases: Vec<(Q, Vec<Q>, MonomialDirection)> = vec![
            (qi(1), vec![qi(0)], MonomialDirection::Forward),
            (qr(1, 2), vec![qi(-3)], MonomialDirection::Forward),
            (qi(-1), vec![qi(2)], MonomialDirection::Backward),
            (qi(0), vec![qi(1)], MonomialDirection::Forward),
            (qi(0), vec![qi(-1)], MonomialDirection::Backward),
            (qi(0), vec![qi(1)], MonomialDirection::Backward),
            (qi(0), vec![qi(-1)], MonomialDirection::Forward),
        ];
        for (q, w, dir) in cases {
            let qcut = qi(6);
            let wwin = qi(9);
            let e = geometric_expand(&q, &w, dir, &qcut, &wwin).unwrap();
            let mut one_minus_x = FSeries::one(w.len(), qcut.clone(), wwin.clone());
            one_minus_x.add_term(q.clone(), w.clone(), qi(-1));
            let prod = series_mul(&one_minus_x, &e).unwrap();
            let one = FSeries::one(w.len(), qcut.clone(), wwin.clone());
            // Compare strictly inside the window, one monomial step short of
            // the boundary where the telescoping defect lives.
            let margin_q = &qcut - q.abs();
            let margin_w = &wwin - w.iter().map(|x| x.abs()).fold(Q::zero(), |a, b| a.max(b));
            assert!(series_equal(&prod, &one, &margin_q, &margin_w), "case {q} {w:?} {dir:?}");
        }
    }

    // === Equality and evaluation ===

    #[test]
    fn equality_ignores_terms_beyond_window() {
        let mut a = FSeries::one(0, qi(8), qi(0));
        a.add_term(qi(1), vec![], qi(1));
        let mut b = a.clone();
        b.add_term(qi(6), vec![], qi(5));
        assert!(series_equal(&a, &b, &qi(5), &qi(0)));
        assert!(!series_equal(&a, &b, &qi(6), &qi(0)));
        assert!(series_equal(&a, &a, a.q_cutoff(), a.w_window()));
    }

    #[test]
    fn numeric_evaluation_basics() {
        let one = FSeries::one(0, qi(4), qi(0));
        let tau = Complex64::new(0.0, 1.0);
        let v = eval_numeric(&one, tau, &[]).unwrap();
        assert!((v.value - Complex64::new(1.0, 0.0)).norm() < 1e-15);

        let q = FSeries::monomial(0, qi(4), qi(0), qi(1), vec![], qi(1));
        let vq = eval_numeric(&q, tau, &[]).unwrap();
        assert!((vq.value.re - (-2.0 * std::f64::consts::PI).exp()).abs() < 1e-18);
        assert!(vq.value.im.abs() < 1e-18);

        assert!(eval_numeric(&one, Complex64::new(1.0, 0.0), &[]).is_err());
        assert!(eval_numeric(&one, tau, &[Complex64::new(0.0, 0.0)]).is_err());
    }

    #[test]
    fn theta_like_series_matches_direct_summation() {
        // Rank-one theta series with Gram [[2]]: sum over integers of q^{k^2}.
        let cutoff = 100;
        let mut theta = FSeries::zero(0, qi(cutoff), qi(0));
        let mut k = 0i64;
        while k * k <= cutoff {
            theta.add_term(qi(k * k), vec![], qi(if k == 0 { 1 } else { 2 }));
            k += 1;
        }
        let tau = Complex64::new(0.0, 1.0);
        let eval = eval_numeric(&theta, tau, &[]).unwrap();
        let mut direct = Complex64::new(0.0, 0.0);
        for k in -50i64..=50 {
            let e = 2.0 * std::f64::consts::PI * (k * k) as f64;
            direct += (Complex64::new(0.0, e) * tau).exp();
        }
        assert!((eval.value - direct).norm() < 1e-12);
        assert!(eval.tail_estimate < 1e-200);
    }

    #[test]
    fn evaluation_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let a = sparse_random(&mut rng, 2, 6, 8);
        let b = sparse_random(&mut rng, 2, 6, 8);
        let tau = Complex64::new(0.31, 0.9);
        let zs = [Complex64::new(0.11, 0.05), Complex64::new(-0.2, 0.02)];
        let sum = series_add(&a, &b).unwrap();
        let va = eval_numeric(&a, tau, &zs).unwrap().value;
        let vb = eval_numeric(&b, tau, &zs).unwrap().value;
        let vs = eval_numeric(&sum, tau, &zs).unwrap().value;
        assert!((vs - (va + vb)).norm() < 1e-12);
    }

    // === Serialization ===

    #[test]
    fn json_round_trip_is_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let a = sparse_random(&mut rng, 2, 6, 8);
        let text = a.to_json().unwrap();
        let back = FSeries::from_json(&text).unwrap();
        assert_eq!(a, back);
        assert_eq!(text, back.to_json().unwrap());

        let mut tiny = FSeries::zero(1, qi(2), qi(3));
        tiny.add_term(qr(1, 2), vec![qi(-1)], qi(2));
        assert_eq!(
            tiny.to_json().unwrap(),
            "{\"vars\":1,\"qcut\":[2,1],\"wwin\":[3,1],\"terms\":[{\"q\":[1,2],\"w\":[[-1,1]],\"c\":[2,1]}]}"
        );
        assert!(FSeries::from_json("{\"vars\":1,\"qcut\":[2,1],\"wwin\":[3,1],\"terms\":[],\"x\":0}").is_err());
    }
}
