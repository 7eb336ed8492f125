//! Numerical evaluation of boosted sign integrals against Gaussian weights.
//!
//! Two families are computed for depths one to three: the smoothed sign
//! products `e_p` (bounded, saturating to sign products far from the walls)
//! and their complements `m_p` (Gaussian-decaying shifted-contour integrals).
//! The decomposition `e_via_m` rebuilds the former from the latter over
//! subset splits and is the main cross-check between the two quadratures.
//!
//! The defining integrals come in two sign conventions: on a plane where the
//! ambient form is negative definite the Gaussian is `e^{pi Q}`, and on a
//! positive definite plane it is `e^{-pi Q}`.  Both are accepted; internally
//! everything is reduced to the positive convention, where a Cholesky frame
//! turns the integrals into nested one-dimensional ones with exact innermost
//! layers (error function intervals for `e_p`, a Faddeeva evaluation for
//! `m_p`).

use crate::lattice::{Lattice, LatticeError};
use crate::ratmat::{q_to_f64, LinalgError, Q, QMat};
use num_complex::Complex64;
use once_cell::sync::Lazy;
use std::collections::BTreeMap;
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ErrfunError {
    #[error("depth {0} outside the supported range 1..=3")]
    DepthOutOfRange(usize),
    #[error("{field} must have length {want}, got {got}")]
    WrongLength { field: &'static str, want: usize, got: usize },
    #[error("the span of the direction vectors is neither positive nor negative definite")]
    SpanNotDefinite,
    #[error("contour component {index} is too close to the pole: {value:e}")]
    NearSingularContour { index: usize, value: f64 },
    #[error("quadrature did not converge: estimate {estimate:e}")]
    QuadratureDidNotConverge { estimate: f64 },
    #[error("no special value is defined for {0}")]
    UnsupportedSpecialValue(&'static str),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// One evaluation target: `P` direction vectors inside an ambient rational
/// quadratic space, and the real argument vector.
#[derive(Clone, Debug)]
pub struct ErrSpec {
    pub gram: QMat,
    pub c_vectors: Vec<Vec<Q>>,
    pub x: Vec<f64>,
}

impl ErrSpec {
    pub fn new(gram: QMat, c_vectors: Vec<Vec<Q>>, x: Vec<f64>) -> Result<Self, ErrfunError> {
        let n = gram.rows();
        let p = c_vectors.len();
        if !(1..=3).contains(&p) {
            return Err(ErrfunError::DepthOutOfRange(p));
        }
        if x.len() != n {
            return Err(ErrfunError::WrongLength { field: "x", want: n, got: x.len() });
        }
        for c in &c_vectors {
            if c.len() != n {
                return Err(ErrfunError::WrongLength {
                    field: "c_vector",
                    want: n,
                    got: c.len(),
                });
            }
        }
        let spec = ErrSpec { gram, c_vectors, x };
        spec.direction_gram()?;
        Ok(spec)
    }

    pub fn depth(&self) -> usize {
        self.c_vectors.len()
    }

    /// Gram matrix of the direction vectors, with a definiteness check.
    fn direction_gram(&self) -> Result<(QMat, bool), ErrfunError> {
        let p = self.depth();
        let mut g = QMat::zero(p, p);
        for i in 0..p {
            let gc = self.gram.mul_vec(&self.c_vectors[i]);
            for j in 0..p {
                g.set(i, j, crate::ratmat::dot(&gc, &self.c_vectors[j]));
            }
        }
        if g.is_positive_definite() {
            Ok((g, false))
        } else if g.neg().is_positive_definite() {
            Ok((g, true))
        } else {
            Err(ErrfunError::SpanNotDefinite)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QuadratureConfig {
    /// Half-width of every one-dimensional window in Gaussian units.
    pub radius: f64,
    /// Gauss-Legendre order per panel.
    pub points_per_dim: usize,
    /// Floor for the reported error estimate; estimates above ten times this
    /// value are treated as nonconvergence.
    pub tol_floor: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig { radius: 6.0, points_per_dim: 40, tol_floor: 1e-9 }
    }
}

/// A value together with its truncation-plus-refinement error estimate.
#[derive(Clone, Copy, Debug)]
pub struct ErrValue {
    pub value: f64,
    pub estimate: f64,
}

/// Positive-convention data: a positive definite direction Gram and the
/// pairings of the argument with the direction vectors.
struct Frame {
    g: Vec<Vec<f64>>,
    m: Vec<f64>,
}

impl Frame {
    fn from_spec(spec: &ErrSpec) -> Result<(Frame, bool), ErrfunError> {
        let (gc, flipped) = spec.direction_gram()?;
        let p = spec.depth();
        let sign = if flipped { -1.0 } else { 1.0 };
        let mut g = vec![vec![0.0; p]; p];
        for i in 0..p {
            for j in 0..p {
                g[i][j] = sign * q_to_f64(gc.get(i, j));
            }
        }
        let gx: Vec<f64> = (0..spec.gram.rows())
            .map(|i| {
                (0..spec.gram.rows())
                    .map(|j| q_to_f64(spec.gram.get(i, j)) * spec.x[j])
                    .sum()
            })
            .collect();
        let m: Vec<f64> = spec
            .c_vectors
            .iter()
            .map(|c| sign * c.iter().zip(&gx).map(|(ci, v)| q_to_f64(ci) * v).sum::<f64>())
            .collect();
        Ok((Frame { g, m }, flipped))
    }

    fn sub(&self, idx: &[usize]) -> Frame {
        let g = idx
            .iter()
            .map(|&i| idx.iter().map(|&j| self.g[i][j]).collect())
            .collect();
        let m = idx.iter().map(|&i| self.m[i]).collect();
        Frame { g, m }
    }
}

// ---------------------------------------------------------------------------
// Small dense helpers
// ---------------------------------------------------------------------------

fn cholesky(g: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = g.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = g[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                l[i][j] = s.max(0.0).sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    l
}

fn solve_dense(g: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = g.len();
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = g[i].clone();
            row.push(b[i]);
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        let d = a[col][col];
        for row in 0..n {
            if row != col {
                let f = a[row][col] / d;
                for k in col..=n {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

// ---------------------------------------------------------------------------
// Quadrature primitives
// ---------------------------------------------------------------------------

static GL_CACHE: Lazy<Mutex<BTreeMap<usize, (Vec<f64>, Vec<f64>)>>> =
    Lazy::new(|| Mutex::new(BTreeMap::new()));

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
fn gl_rule(order: usize) -> (Vec<f64>, Vec<f64>) {
    if let Some(rule) = GL_CACHE.lock().unwrap().get(&order) {
        return rule.clone();
    }
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for k in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p2) / (k as f64 + 1.0);
            }
            let dp = n as f64 * (x * p0 - p1) / (x * x - 1.0);
            let dx = p0 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, 0.0);
        for k in 0..n {
            let p2 = p1;
            p1 = p0;
            p0 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p2) / (k as f64 + 1.0);
        }
        let dp = n as f64 * (x * p0 - p1) / (x * x - 1.0);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    GL_CACHE.lock().unwrap().insert(order, (nodes.clone(), weights.clone()));
    (nodes, weights)
}

/// Integrates over `[lo, hi]` split at the interior breakpoints.
fn panel_integrate<F: FnMut(f64) -> f64>(
    lo: f64,
    hi: f64,
    breaks: &[f64],
    order: usize,
    mut f: F,
) -> f64 {
    let mut cuts: Vec<f64> = vec![lo];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|b| *b > lo && *b < hi).collect();
    inner.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.extend(inner);
    cuts.push(hi);
    let (nodes, weights) = gl_rule(order);
    let mut total = 0.0;
    for pair in cuts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        for (x, w) in nodes.iter().zip(&weights) {
            total += w * half * f(mid + half * x);
        }
    }
    total
}

fn panel_integrate_complex<F: FnMut(f64) -> Complex64>(
    lo: f64,
    hi: f64,
    order: usize,
    mut f: F,
) -> Complex64 {
    let (nodes, weights) = gl_rule(order);
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut total = Complex64::new(0.0, 0.0);
    if half <= 0.0 {
        return total;
    }
    for (x, w) in nodes.iter().zip(&weights) {
        total += f(mid + half * x) * (w * half);
    }
    total
}

// ---------------------------------------------------------------------------
// Faddeeva function
// ---------------------------------------------------------------------------

const FADDEEVA_TERMS: usize = 64;

/// Rational-approximation coefficients on the unit disc, computed once from
/// samples of the Gaussian along the real line.
static FADDEEVA_COEFFS: Lazy<(f64, Vec<f64>)> = Lazy::new(|| {
    let n = FADDEEVA_TERMS;
    let m = 2 * n;
    let m2 = 2 * m;
    let l = ((n as f64) / std::f64::consts::SQRT_2).sqrt();
    let mut f = vec![0.0; m2];
    for k in (-(m as i64) + 1)..(m as i64) {
        let theta = k as f64 * std::f64::consts::PI / m as f64;
        let t = l * (theta / 2.0).tan();
        f[(k + m as i64) as usize] = (-t * t).exp() * (l * l + t * t);
    }
    let mut a = vec![0.0; n + 1];
    for (coef_n, coef) in a.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (slot, fk) in f.iter().enumerate() {
            let k = slot as i64 - m as i64;
            acc += fk * (std::f64::consts::PI * coef_n as f64 * k as f64 / m as f64).cos();
        }
        *coef = acc / m2 as f64;
    }
    (l, a[1..].to_vec())
});

/// Scaled complementary error function `w(z) = e^{-z^2} erfc(-iz)` for
/// `Im z >= 0`.
fn faddeeva_upper(z: Complex64) -> Complex64 {
    let (l, coeffs) = &*FADDEEVA_COEFFS;
    let lz = Complex64::new(*l, 0.0) - Complex64::new(0.0, 1.0) * z;
    let big_z = (Complex64::new(*l, 0.0) + Complex64::new(0.0, 1.0) * z) / lz;
    let mut p = Complex64::new(0.0, 0.0);
    for c in coeffs.iter().rev() {
        p = p * big_z + c;
    }
    2.0 * p / (lz * lz) + Complex64::new(1.0 / std::f64::consts::PI.sqrt(), 0.0) / lz
}

fn faddeeva(z: Complex64) -> Complex64 {
    if z.im >= 0.0 {
        faddeeva_upper(z)
    } else {
        // w(conj z) = conj(w(z)) fails across the branch-free plane; instead
        // use J-symmetry at the call sites.  Fall back to the reflection
        // formula w(z) = 2 e^{-z^2} - w(-z).
        2.0 * (-z * z).exp() - faddeeva_upper(-z)
    }
}

/// The Gaussian pole integral `J(z0) = \int e^{-t^2} / (t - z0) dt`.
fn gaussian_pole_integral(z0: Complex64) -> Complex64 {
    if z0.im > 0.0 {
        Complex64::new(0.0, std::f64::consts::PI) * faddeeva_upper(z0)
    } else {
        (Complex64::new(0.0, std::f64::consts::PI) * faddeeva_upper(z0.conj())).conj()
    }
}

/// Error function computed through the Faddeeva evaluation, accurate to
/// near machine precision in absolute terms.
fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x > 27.0 {
        return 1.0;
    }
    1.0 - (-x * x).exp() * faddeeva_upper(Complex64::new(0.0, x)).re
}

fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x > 27.0 {
        return 0.0;
    }
    (-x * x).exp() * faddeeva_upper(Complex64::new(0.0, x)).re
}

/// Scaled complementary error function `e^{x^2} erfc(x)` for `x >= 0`,
/// stable at arguments where `erfc` itself underflows.
pub(crate) fn erfcx(x: f64) -> f64 {
    faddeeva_upper(Complex64::new(0.0, x)).re
}

// ---------------------------------------------------------------------------
// The bounded family
// ---------------------------------------------------------------------------

/// Core quadrature in the positive convention: nested panels over a Cholesky
/// frame, with the innermost coordinate integrated exactly against the sign
/// flip.
fn e_core(frame: &Frame, radius: f64, order: usize) -> f64 {
    let p = frame.g.len();
    let l = cholesky(&frame.g);
    let sp = std::f64::consts::PI.sqrt();
    // Factor j reads sgn(m_j + (L w)_j / sqrt(pi)); row j touches w_1..w_j.
    let lam: Vec<Vec<f64>> = (0..p).map(|j| (0..p).map(|k| l[j][k] / sp).collect()).collect();
    let norm = std::f64::consts::PI.powf(-(p as f64) / 2.0);

    let exact_inner = |c: f64, b: f64| -> f64 {
        // \int sgn(b w + c) e^{-w^2} dw with b > 0.
        debug_assert!(b > 0.0);
        -sp * erf(-c / b)
    };

    match p {
        1 => {
            let kink = -frame.m[0] / lam[0][0];
            norm * panel_integrate(-radius, radius, &[kink], order, |w| {
                (frame.m[0] + lam[0][0] * w).signum() * (-w * w).exp()
            })
        }
        2 => {
            let kink = -frame.m[0] / lam[0][0];
            norm * panel_integrate(-radius, radius, &[kink], order, |w1| {
                let s1 = (frame.m[0] + lam[0][0] * w1).signum();
                let c2 = frame.m[1] + lam[1][0] * w1;
                s1 * (-w1 * w1).exp() * exact_inner(c2, lam[1][1])
            })
        }
        3 => {
            let kink1 = -frame.m[0] / lam[0][0];
            norm * panel_integrate(-radius, radius, &[kink1], order, |w1| {
                let s1 = (frame.m[0] + lam[0][0] * w1).signum();
                let kink2 = -(frame.m[1] + lam[1][0] * w1) / lam[1][1];
                let middle = panel_integrate(-radius, radius, &[kink2], order, |w2| {
                    let s2 = (frame.m[1] + lam[1][0] * w1 + lam[1][1] * w2).signum();
                    let c3 = frame.m[2] + lam[2][0] * w1 + lam[2][1] * w2;
                    s2 * (-w2 * w2).exp() * exact_inner(c3, lam[2][2])
                });
                s1 * (-w1 * w1).exp() * middle
            })
        }
        _ => unreachable!("depth validated at spec construction"),
    }
}

fn with_estimate<F: Fn(usize) -> f64>(
    cfg: &QuadratureConfig,
    eval: F,
) -> Result<ErrValue, ErrfunError> {
    let coarse = eval(cfg.points_per_dim);
    let fine = eval(cfg.points_per_dim + 12);
    let estimate = (fine - coarse).abs().max(cfg.tol_floor);
    if estimate > 10.0 * cfg.tol_floor {
        return Err(ErrfunError::QuadratureDidNotConverge { estimate });
    }
    Ok(ErrValue { value: fine, estimate })
}

/// The bounded sign integral.  Accepts both sign conventions; the value is
/// always in `[-1, 1]`.
pub fn e_p(spec: &ErrSpec, cfg: &QuadratureConfig) -> Result<ErrValue, ErrfunError> {
    let (frame, _flipped) = Frame::from_spec(spec)?;
    with_estimate(cfg, |order| e_core(&frame, cfg.radius, order))
}

// ---------------------------------------------------------------------------
// The decaying family
// ---------------------------------------------------------------------------

const CONTOUR_GUARD: f64 = 1e-6;

/// Shifted-contour integral in the positive convention, without the
/// `(i/pi)^P e^{-pi Q(x_par)}` prefactor.  The innermost coordinate is a
/// Faddeeva evaluation; outer coordinates use an arctangent substitution that
/// resolves the pole scale exactly.
fn m_core_integral(g: &[Vec<f64>], pole: &[f64], radius: f64, order: usize) -> Complex64 {
    let p = g.len();
    let pi = std::f64::consts::PI;
    match p {
        1 => {
            let z0 = (pi * g[0][0]).sqrt() * Complex64::new(0.0, pole[0]);
            gaussian_pole_integral(z0)
        }
        2 => {
            let s1 = g[0][0] - g[0][1] * g[0][1] / g[1][1];
            let w1 = radius / (pi * s1).sqrt();
            let inner_scale = (pi * g[1][1]).sqrt();
            lorentz_integral(0.0, w1, pole[0], order, |xi1| {
                let q = g[0][1] * xi1;
                let z0 = inner_scale * Complex64::new(q / g[1][1], pole[1]);
                let arg = -pi * s1 * xi1 * xi1;
                Complex64::new(arg.exp(), 0.0) * gaussian_pole_integral(z0)
            })
        }
        3 => {
            // Marginal precision of the first coordinate after the other
            // two are integrated out.
            let s1 = {
                let det_sub = g[1][1] * g[2][2] - g[1][2] * g[2][1];
                let det = g[0][0] * det_sub - g[0][1] * (g[0][1] * g[2][2] - g[0][2] * g[1][2])
                    + g[0][2] * (g[0][1] * g[1][2] - g[0][2] * g[1][1]);
                det / det_sub
            };
            let w1 = radius / (pi * s1).sqrt();
            let a2 = g[1][1] - g[1][2] * g[1][2] / g[2][2];
            let inner_scale = (pi * g[2][2]).sqrt();
            lorentz_integral(0.0, w1, pole[0], order, |xi1| {
                let b2 = (g[0][1] - g[0][2] * g[1][2] / g[2][2]) * xi1;
                let c2 = -b2 / a2;
                let w2 = radius / (pi * a2).sqrt();
                lorentz_integral(c2, w2, pole[1], order, |xi2| {
                    let q3 = g[0][2] * xi1 + g[1][2] * xi2;
                    let z0 = inner_scale * Complex64::new(q3 / g[2][2], pole[2]);
                    let arg = -pi
                        * (g[0][0] * xi1 * xi1
                            + 2.0 * g[0][1] * xi1 * xi2
                            + g[1][1] * xi2 * xi2)
                        + pi * q3 * q3 / g[2][2];
                    Complex64::new(arg.exp(), 0.0) * gaussian_pole_integral(z0)
                })
            })
        }
        _ => unreachable!("depth validated at spec construction"),
    }
}

/// Integrates `h(xi) / (xi - i p)` over `[center - width, center + width]`.
/// Near the pole scale the substitution `xi = |p| tan(theta)` spreads the
/// Lorentzian peak evenly; outside it, geometrically graded plain panels
/// follow the pole's power-law decay out to the Gaussian scale of `h`.
fn lorentz_integral<F: FnMut(f64) -> Complex64>(
    center: f64,
    width: f64,
    pole: f64,
    order: usize,
    mut h: F,
) -> Complex64 {
    let ap = pole.abs();
    let lo = center - width;
    let hi = center + width;
    let core = 30.0 * ap;
    let mut edges: Vec<f64> = vec![lo, hi];
    for t in [center, 0.0, -core, core] {
        if t > lo && t < hi {
            edges.push(t);
        }
    }
    let mut step = core;
    while step < hi.max(-lo) && step.is_finite() {
        step *= 2.0;
        for s in [step, -step] {
            if s > lo && s < hi {
                edges.push(s);
            }
        }
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup();
    let mut total = Complex64::new(0.0, 0.0);
    for pair in edges.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b <= a {
            continue;
        }
        if a >= -core && b <= core {
            let ta = (a / ap).atan();
            let tb = (b / ap).atan();
            total += panel_integrate_complex(ta, tb, order, |theta| {
                let xi = ap * theta.tan();
                h(xi) * Complex64::new(xi, pole) / ap
            });
        } else {
            total += panel_integrate_complex(a, b, order, |xi| {
                h(xi) * Complex64::new(xi, pole) / (xi * xi + ap * ap)
            });
        }
    }
    total
}

fn m_core(frame: &Frame, cfg: &QuadratureConfig) -> Result<ErrValue, ErrfunError> {
    let p = frame.g.len();
    let pi = std::f64::consts::PI;
    if frame.m.iter().all(|v| *v == 0.0) {
        return match p {
            1 => Ok(ErrValue { value: 0.0, estimate: 0.0 }),
            2 => m2_zero(frame, cfg),
            _ => Err(ErrfunError::UnsupportedSpecialValue(
                "depth-three complement at a vanishing argument",
            )),
        };
    }
    let pole = solve_dense(&frame.g, &frame.m);
    for (index, v) in pole.iter().enumerate() {
        if v.abs() < CONTOUR_GUARD {
            return Err(ErrfunError::NearSingularContour { index, value: *v });
        }
    }
    if p == 1 {
        let u = frame.m[0] / frame.g[0][0].sqrt();
        let value = -u.signum() * erfc(pi.sqrt() * u.abs());
        return Ok(ErrValue { value, estimate: 1e-15 });
    }
    let gauss = (-pi * frame.m.iter().zip(&pole).map(|(m, p)| m * p).sum::<f64>()).exp();
    let prefactor = Complex64::new(0.0, 1.0 / pi).powu(p as u32) * gauss;
    let eval = |order: usize| prefactor * m_core_integral(&frame.g, &pole, cfg.radius, order);
    let coarse = eval(cfg.points_per_dim);
    let fine = eval(cfg.points_per_dim + 12);
    let estimate = ((fine - coarse).norm() + fine.im.abs()).max(cfg.tol_floor);
    if estimate > 10.0 * cfg.tol_floor {
        return Err(ErrfunError::QuadratureDidNotConverge { estimate });
    }
    Ok(ErrValue { value: fine.re, estimate })
}

/// Special value at a vanishing argument for depth two: the principal-value
/// prescription collapses to a regular one-dimensional integral.
fn m2_zero(frame: &Frame, cfg: &QuadratureConfig) -> Result<ErrValue, ErrfunError> {
    let pi = std::f64::consts::PI;
    let (g11, g12, g22) = (frame.g[0][0], frame.g[0][1], frame.g[1][1]);
    let delta = g11 * g22 - g12 * g12;
    let decay = pi * delta / g22;
    let c = pi.sqrt() * g12 / g22.sqrt();
    let width = cfg.radius / decay.sqrt();
    let eval = |order: usize| {
        panel_integrate(-width, width, &[0.0], order, |xi| {
            let wval = faddeeva_upper(Complex64::new(c * xi, 0.0)).im;
            let ratio = if xi == 0.0 { 2.0 * c / pi.sqrt() } else { wval / xi };
            (-decay * xi * xi).exp() * ratio
        }) / pi
    };
    let coarse = eval(cfg.points_per_dim);
    let fine = eval(cfg.points_per_dim + 12);
    let estimate = (fine - coarse).abs().max(cfg.tol_floor);
    if estimate > 10.0 * cfg.tol_floor {
        return Err(ErrfunError::QuadratureDidNotConverge { estimate });
    }
    Ok(ErrValue { value: fine, estimate })
}

/// The Gaussian-decaying complement, in the sign convention of the spec's
/// ambient form: negative definite direction spans use the literal
/// `(1/(pi i))^P` normalization, which differs from the positive convention
/// by `(-1)^P`.
pub fn m_p(spec: &ErrSpec, cfg: &QuadratureConfig) -> Result<ErrValue, ErrfunError> {
    let (frame, flipped) = Frame::from_spec(spec)?;
    let mut out = m_core(&frame, cfg)?;
    if flipped && spec.depth() % 2 == 1 {
        out.value = -out.value;
    }
    Ok(out)
}

/// Rebuilds the bounded integral from the decaying family: a sum over subset
/// splits of complement values times sign products of orthogonalized
/// pairings.  Always assembled in the positive convention so that it is
/// directly comparable with `e_p`.
pub fn e_via_m(spec: &ErrSpec, cfg: &QuadratureConfig) -> Result<ErrValue, ErrfunError> {
    let (frame, _flipped) = Frame::from_spec(spec)?;
    let p = spec.depth();
    let mut value = 0.0;
    let mut estimate = 0.0;
    for bits in 0..(1u32 << p) {
        let v_set: Vec<usize> = (0..p).filter(|j| bits >> j & 1 == 1).collect();
        let w_set: Vec<usize> = (0..p).filter(|j| bits >> j & 1 == 0).collect();
        let mut sign_product = 1.0;
        for &w in &w_set {
            let perp = if v_set.is_empty() {
                frame.m[w]
            } else {
                let gvv: Vec<Vec<f64>> = v_set
                    .iter()
                    .map(|&i| v_set.iter().map(|&j| frame.g[i][j]).collect())
                    .collect();
                let gvw: Vec<f64> = v_set.iter().map(|&i| frame.g[i][w]).collect();
                let gamma = solve_dense(&gvv, &gvw);
                frame.m[w]
                    - gamma.iter().zip(&v_set).map(|(c, &i)| c * frame.m[i]).sum::<f64>()
            };
            sign_product *= perp.signum();
        }
        if v_set.is_empty() {
            value += sign_product;
        } else {
            let m_val = m_core(&frame.sub(&v_set), cfg)?;
            value += m_val.value * sign_product;
            estimate += m_val.estimate;
        }
    }
    Ok(ErrValue { value, estimate: estimate.max(cfg.tol_floor) })
}

/// Builds the positive-convention spec for direction vectors dual to a
/// distinguished set, evaluated at a point of the ambient positive lattice.
pub fn reduce_to_positive(
    lattice: &Lattice,
    duals: &[Vec<Q>],
    x: &[f64],
) -> Result<ErrSpec, ErrfunError> {
    ErrSpec::new(lattice.gram().clone(), duals.to_vec(), x.to_vec())
}

// ===========================================================================
// Tests
// ===========================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{cartan_an, dual_vectors, embed_indefinite, DVectorSet};
    use crate::ratmat::{qi, qr, zeros};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn cfg() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    fn pos_spec(g: Vec<Vec<f64>>, m_target: Vec<f64>) -> ErrSpec {
        // Realizes a frame directly: ambient gram is the direction gram
        // (rationalized), c-vectors the unit basis, x chosen so the
        // pairings hit the requested values.
        let p = g.len();
        let gq = QMat::from_rows(
            g.iter()
                .map(|row| row.iter().map(|v| qr((v * 840.0).round() as i64, 840)).collect())
                .collect(),
        );
        let gf: Vec<Vec<f64>> =
            (0..p).map(|i| (0..p).map(|j| q_to_f64(gq.get(i, j))).collect()).collect();
        let x = solve_dense(&gf, &m_target);
        let cs = (0..p)
            .map(|j| {
                let mut e = zeros(p);
                e[j] = qi(1);
                e
            })
            .collect();
        ErrSpec::new(gq, cs, x).unwrap()
    }

    // === special function plumbing ===

    #[test]
    fn faddeeva_matches_reference_values() {
        let w0 = faddeeva_upper(Complex64::new(0.0, 0.0));
        assert!((w0.re - 1.0).abs() < 1e-13 && w0.im.abs() < 1e-13);
        // w(ix) = e^{x^2} erfc(x), high-precision reference values.
        let table = [
            (0.1, 0.896456979969126642),
            (0.5, 0.615690344192925875),
            (1.0, 0.427583576155807004),
            (2.0, 0.255395676310505744),
            (5.0, 0.110704637733068626),
        ];
        for (x, want) in table {
            let w = faddeeva_upper(Complex64::new(0.0, x));
            assert!(
                (w.re - want).abs() < 1e-13,
                "w(i{x}) = {} vs {want}",
                w.re
            );
            assert!(w.im.abs() < 1e-13);
        }
        // Dawson integral through the imaginary part on the real axis.
        let dawson_half = 0.5 * std::f64::consts::PI.sqrt()
            * faddeeva_upper(Complex64::new(0.5, 0.0)).im;
        assert!((dawson_half - 0.42443638350202229593).abs() < 1e-13);
        let z = Complex64::new(1.3, -0.7);
        let via_reflection = faddeeva(z);
        let direct = 2.0 * (-z * z).exp() - faddeeva_upper(-z);
        assert!((via_reflection - direct).norm() < 1e-13);
        // The derived error function against textbook values.
        assert!((erf(0.5) - 0.520499877813046538).abs() < 1e-14);
        assert!((erfc(1.0) - 0.157299207050285131).abs() < 1e-14);
        assert!((erf(-0.25) + erf(0.25)).abs() < 1e-16);
    }

    #[test]
    fn quadrature_rule_is_exact_on_polynomials() {
        let (nodes, weights) = gl_rule(12);
        for k in [0usize, 2, 4, 10, 22] {
            let got: f64 =
                nodes.iter().zip(&weights).map(|(x, w)| w * x.powi(k as i32)).sum();
            let want = 2.0 / (k as f64 + 1.0);
            assert!((got - want).abs() < 1e-13, "degree {k}: {got} vs {want}");
        }
        let gauss = panel_integrate(-6.0, 6.0, &[0.0], 40, |x| (-x * x).exp());
        assert!((gauss - std::f64::consts::PI.sqrt()).abs() < 1e-13);
    }

    // === the bounded family ===

    #[test]
    fn depth_one_matches_the_error_function() {
        let pi = std::f64::consts::PI;
        for m in [-1.7f64, -0.3, 0.2, 1.1, 3.0] {
            let spec = pos_spec(vec![vec![2.0]], vec![m]);
            let got = e_p(&spec, &cfg()).unwrap();
            let want = erf(pi.sqrt() * m / 2.0f64.sqrt());
            assert!((got.value - want).abs() < 1e-10, "m={m}: {} vs {want}", got.value);
        }
    }

    #[test]
    fn depth_one_saturates_to_the_sign() {
        let spec = pos_spec(vec![vec![1.0]], vec![4.0]);
        let got = e_p(&spec, &cfg()).unwrap();
        assert!((got.value - 1.0).abs() < 1e-10);
        let spec = pos_spec(vec![vec![1.0]], vec![-4.0]);
        let got = e_p(&spec, &cfg()).unwrap();
        assert!((got.value + 1.0).abs() < 1e-10);
    }

    #[test]
    fn odd_depths_are_odd_in_the_argument() {
        let g3 = vec![
            vec![2.0, 0.5, 0.3],
            vec![0.5, 1.5, -0.4],
            vec![0.3, -0.4, 1.8],
        ];
        for m in [vec![0.7, -0.4, 0.9], vec![1.3, 0.2, -0.5]] {
            let plus = e_p(&pos_spec(g3.clone(), m.clone()), &cfg()).unwrap();
            let minus =
                e_p(&pos_spec(g3.clone(), m.iter().map(|v| -v).collect()), &cfg()).unwrap();
            assert!((plus.value + minus.value).abs() < 1e-9);
            assert!(plus.value.abs() <= 1.0 + 1e-12);
        }
        for m in [0.9f64, 2.1] {
            let plus = e_p(&pos_spec(vec![vec![1.0]], vec![m]), &cfg()).unwrap();
            let minus = e_p(&pos_spec(vec![vec![1.0]], vec![-m]), &cfg()).unwrap();
            assert!((plus.value + minus.value).abs() < 1e-11);
        }
    }

    #[test]
    fn mixed_signature_span_is_rejected() {
        let gram = QMat::from_int_rows(&[vec![1, 0], vec![0, -1]]);
        let cs = vec![vec![qi(1), qi(0)], vec![qi(0), qi(1)]];
        assert!(matches!(
            ErrSpec::new(gram, cs, vec![0.0, 0.0]),
            Err(ErrfunError::SpanNotDefinite)
        ));
    }

    // === the decaying family ===

    #[test]
    fn depth_one_complement_closes_the_decomposition() {
        for m in [-2.3f64, -0.8, 0.4, 1.9] {
            let spec = pos_spec(vec![vec![1.5]], vec![m]);
            let e = e_p(&spec, &cfg()).unwrap();
            let mm = m_p(&spec, &cfg()).unwrap();
            let diff = (e.value - m.signum()) - mm.value;
            assert!(diff.abs() < 1e-10, "m={m}: residual {diff:e}");
        }
    }

    #[test]
    fn complement_decays_along_rays() {
        let g = vec![vec![1.0, 0.4], vec![0.4, 1.2]];
        let base = [0.5, 0.35];
        let mut last = f64::INFINITY;
        for lambda in [1.0f64, 2.0, 4.0, 8.0] {
            let m: Vec<f64> = base.iter().map(|v| v * lambda).collect();
            let got = m_p(&pos_spec(g.clone(), m), &cfg()).unwrap();
            assert!(got.value.abs() < last + 1e-12, "no decay at lambda={lambda}");
            last = got.value.abs();
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn vanishing_argument_depth_two_matches_the_arctangent() {
        let pi = std::f64::consts::PI;
        for g12 in [0.0f64, 0.3, -0.45, 0.6, -0.8] {
            let g = vec![vec![1.0, g12], vec![g12, 1.0]];
            let alpha = g12 / (1.0 - g12 * g12).sqrt();
            let spec = pos_spec(g, vec![0.0, 0.0]);
            let got = m_p(&spec, &cfg()).unwrap();
            let want = 2.0 / pi * alpha.atan();
            assert!(
                (got.value - want).abs() < 1e-6,
                "g12={g12}: {} vs {want}",
                got.value
            );
        }
    }

    #[test]
    fn near_singular_contours_are_rejected() {
        let spec = pos_spec(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1e-8, 0.7]);
        assert!(matches!(
            m_p(&spec, &cfg()),
            Err(ErrfunError::NearSingularContour { index: 0, .. })
        ));
        let zero3 = pos_spec(
            vec![
                vec![1.0, 0.2, 0.1],
                vec![0.2, 1.0, 0.3],
                vec![0.1, 0.3, 1.0],
            ],
            vec![0.0, 0.0, 0.0],
        );
        assert!(matches!(
            m_p(&zero3, &cfg()),
            Err(ErrfunError::UnsupportedSpecialValue(_))
        ));
    }

    // === the decomposition ===

    #[test]
    fn decomposition_rebuilds_depth_two() {
        let mut rng = StdRng::seed_from_u64(31);
        let g = vec![vec![1.0, 0.45], vec![0.45, 1.3]];
        for _ in 0..6 {
            let m = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            if m.iter().any(|v: &f64| v.abs() < 0.05) {
                continue;
            }
            let spec = pos_spec(g.clone(), m.clone());
            let direct = e_p(&spec, &cfg()).unwrap();
            let assembled = e_via_m(&spec, &cfg()).unwrap();
            assert!(
                (direct.value - assembled.value).abs() < 1e-7,
                "m={m:?}: {} vs {}",
                direct.value,
                assembled.value
            );
        }
    }

    #[test]
    fn decomposition_rebuilds_depth_three() {
        let g = vec![
            vec![1.0, 0.3, 0.2],
            vec![0.3, 1.1, 0.25],
            vec![0.2, 0.25, 0.9],
        ];
        for m in [vec![0.6, -0.8, 0.5], vec![1.1, 0.7, -0.9]] {
            let spec = pos_spec(g.clone(), m.clone());
            let direct = e_p(&spec, &cfg()).unwrap();
            let assembled = e_via_m(&spec, &cfg()).unwrap();
            assert!(
                (direct.value - assembled.value).abs() < 1e-6,
                "m={m:?}: {} vs {}",
                direct.value,
                assembled.value
            );
        }
    }

    #[test]
    fn far_from_walls_only_signs_survive() {
        let g = vec![vec![1.0, 0.3], vec![0.3, 1.1]];
        let m = vec![5.0, -6.0];
        let spec = pos_spec(g, m.clone());
        let e = e_p(&spec, &cfg()).unwrap();
        let product: f64 = m.iter().map(|v| v.signum()).product();
        assert!((e.value - product).abs() < 1e-10);
        let assembled = e_via_m(&spec, &cfg()).unwrap();
        assert!((assembled.value - product).abs() < 1e-10);
    }

    // === reduction from the split signature ===

    #[test]
    fn reduction_flips_norms_and_preserves_values() {
        let lat = cartan_an(2).unwrap();
        let ds = DVectorSet::new(
            &lat,
            &[vec![qi(1), qi(0)], vec![qi(0), qi(1)]],
        )
        .unwrap();
        let emb = embed_indefinite(&lat, &ds).unwrap();
        let duals = dual_vectors(&ds);
        // Dual-vector norms are the negatives of the embedded direction
        // norms.
        for r in 0..2 {
            assert_eq!(emb.ul_quadratic(&emb.cr_vectors()[r]), qr(-2, 3));
            assert_eq!(lat.quadratic(&duals[r]).unwrap(), qr(2, 3));
        }

        let mut rng = StdRng::seed_from_u64(32);
        for _ in 0..4 {
            let x_down = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            if x_down.iter().any(|v: &f64| v.abs() < 0.05) {
                continue;
            }
            // Indefinite side: the embedded directions pair with the split
            // vector only through its lower block.
            let x_full = vec![0.3, -0.9, x_down[0], x_down[1]];
            let indef = ErrSpec::new(
                emb.ul_gram().clone(),
                emb.cr_vectors().to_vec(),
                x_full.clone(),
            )
            .unwrap();
            // Positive side: map the plane coordinates through the duals.
            let gc = indef.direction_gram().unwrap().0;
            let gcf: Vec<Vec<f64>> =
                (0..2).map(|i| (0..2).map(|j| q_to_f64(gc.get(i, j))).collect()).collect();
            let m_down: Vec<f64> = (0..2)
                .map(|r| {
                    let row = emb.ul_gram().mul_vec(&emb.cr_vectors()[r]);
                    row.iter().map(q_to_f64).zip(&x_full).map(|(a, b)| a * b).sum()
                })
                .collect();
            let plane = solve_dense(&gcf, &m_down);
            let mut x_pos = vec![0.0, 0.0];
            for (coef, dual) in plane.iter().zip(&duals) {
                for (xi, di) in x_pos.iter_mut().zip(dual) {
                    *xi += coef * q_to_f64(di);
                }
            }
            let pos = reduce_to_positive(&lat, &duals, &x_pos).unwrap();
            let a = e_p(&indef, &cfg()).unwrap();
            let b = e_p(&pos, &cfg()).unwrap();
            assert!(
                (a.value - b.value).abs() < 1e-8,
                "split {x_down:?}: {} vs {}",
                a.value,
                b.value
            );
        }
    }
}
