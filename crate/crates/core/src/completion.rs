//! Non-holomorphic completion of the Appell sums and its two computable
//! routes.
//!
//! The direct route sums a sign-corrected kernel over the doubled lattice:
//! each denominator direction contributes a boosted error function, and the
//! difference against the pure sign product decays fast enough to truncate.
//! The structural route assembles the same correction from lower-depth
//! pieces: for every proper subset of the distinguished vectors, a positive
//! definite sum of Fourier-type error functions (the `R` factor) multiplies
//! a lower-depth folded expansion, glued over the finite coset group of the
//! orthogonal splitting.  Agreement of the two routes at generic points is
//! the main internal consistency check; modular transformation residuals
//! probe the completion property itself.

use std::collections::BTreeMap;

use num::{Signed, ToPrimitive, Zero};
use num_complex::Complex64;
use thiserror::Error;

use crate::appell::{
    phi, phi_plus, sigma_shifts, theta_series, AppellError, AppellSpec,
};
use crate::errfun::{e_p, erfcx, m_p, ErrSpec, ErrfunError, QuadratureConfig};
use crate::fseries::FSeriesError;
use crate::lattice::{
    c_coefficients, dual_vectors, embed_indefinite, glue_vectors, projection_matrix,
    CCoefficients, DVectorSet, GlueData, IndefiniteEmbedding, LatticeError,
};
use crate::ratmat::{
    dot, enumerate_ellipsoid_f64, q_frac, q_to_f64, qi, qr, vec_add, vec_sub, vec_to_f64, zeros,
    LinalgError, QMat, Q,
};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
const PI: f64 = std::f64::consts::PI;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum CompletionError {
    #[error("tau must lie in the upper half plane, got imaginary part {y}")]
    TauNotInUpperHalfPlane { y: f64 },
    #[error("numeric point sits on or too close to the kernel wall for direction {index} (distance {distance:.3e})")]
    PointOnWall { index: usize, distance: f64 },
    #[error("numeric point lies in a different chamber than the spec for direction {index}: spec floor {spec_floor}, point floor {point_floor}")]
    ChamberMismatch { index: usize, spec_floor: i64, point_floor: i64 },
    #[error("matrix [[{a},{b}],[{c},{d}]] does not have determinant one")]
    NotUnimodular { a: i64, b: i64, c: i64, d: i64 },
    #[error("transformed tau denominator has modulus {modulus:.3e}, below the safe threshold")]
    SmallDenominator { modulus: f64 },
    #[error("summation region for {what} exceeded {cells} cells in one direction")]
    EnumerationOverflow { what: &'static str, cells: usize },
    #[error(
        "completion routes disagree by {difference:.3e} (allowed {allowed:.3e}); \
         largest structural term: level {level}, kept subset {subset:?}, glue class {glue}, \
         value {value_re:.6e}{value_im:+.6e}i"
    )]
    RoutesDisagree {
        difference: f64,
        allowed: f64,
        level: usize,
        subset: Vec<usize>,
        glue: usize,
        value_re: f64,
        value_im: f64,
    },
    #[error("value does not fit in a machine integer: {0}")]
    PeriodOverflow(Q),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Appell(#[from] AppellError),
    #[error(transparent)]
    Errfun(#[from] ErrfunError),
    #[error(transparent)]
    Series(#[from] FSeriesError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

// ---------------------------------------------------------------------------
// Numeric points and elliptic data
// ---------------------------------------------------------------------------

/// One evaluation point for the numeric routes: a modular variable, values
/// for the formal elliptic variables, series windows for the folded factors,
/// and the target accuracy of the lattice sums.
#[derive(Clone, Debug)]
pub struct NumericPoint {
    pub tau: Complex64,
    pub zs: Vec<Complex64>,
    pub q_cutoff: Q,
    pub w_window: Q,
    pub tol: f64,
}

fn qmat_mul_cvec(m: &QMat, v: &[Complex64]) -> Vec<Complex64> {
    (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| v[j] * q_to_f64(m.get(i, j))).sum())
        .collect()
}

fn cvec_add(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn cvec_sub(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn qvec_to_cvec(v: &[Q]) -> Vec<Complex64> {
    v.iter().map(|x| Complex64::new(q_to_f64(x), 0.0)).collect()
}

fn complex_pairing(gram_f: &[Vec<f64>], x: &[f64], z: &[Complex64]) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for (i, row) in gram_f.iter().enumerate() {
        let mut r = Complex64::new(0.0, 0.0);
        for (j, g) in row.iter().enumerate() {
            r += z[j] * *g;
        }
        acc += r * x[i];
    }
    acc
}

fn real_quadratic(gram_f: &[Vec<f64>], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, row) in gram_f.iter().enumerate() {
        let mut r = 0.0;
        for (j, g) in row.iter().enumerate() {
            r += g * x[j];
        }
        acc += r * x[i];
    }
    acc
}

fn solve_f64(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        for r in col + 1..n {
            if m[r][col].abs() > m[piv][col].abs() {
                piv = r;
            }
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for r in 0..n {
            if r != col && m[r][col] != 0.0 {
                let f = m[r][col] / m[col][col];
                for c in col..n {
                    let v = m[col][c];
                    m[r][c] -= f * v;
                }
                let v = rhs[col];
                rhs[r] -= f * v;
            }
        }
    }
    (0..n).map(|i| rhs[i] / m[i][i]).collect()
}

/// Value of the first elliptic argument at a point.
pub fn u_value(spec: &AppellSpec, tau: Complex64, zs: &[Complex64]) -> Vec<Complex64> {
    let mut u = qmat_mul_cvec(&spec.u_linear, zs);
    u = cvec_add(&u, &qvec_to_cvec(&spec.u_constant));
    let shift: Vec<Complex64> = spec.u_tau_shift.iter().map(|x| tau * q_to_f64(x)).collect();
    cvec_add(&u, &shift)
}

/// Value of the second elliptic argument at a point.
pub fn v_value(spec: &AppellSpec, tau: Complex64, zs: &[Complex64]) -> Vec<Complex64> {
    let mut v = qmat_mul_cvec(&spec.v_linear, zs);
    v = cvec_add(&v, &qvec_to_cvec(&spec.v_constant));
    let shift: Vec<Complex64> = spec.v_tau_shift.iter().map(|x| tau * q_to_f64(x)).collect();
    cvec_add(&v, &shift)
}

// ---------------------------------------------------------------------------
// Kernel context: the doubled lattice at one numeric point
// ---------------------------------------------------------------------------

/// Cached data for sums over the doubled lattice at a fixed point: the
/// embedding, the split coset offset, the combined elliptic vector and its
/// imaginary drift, and float copies of everything the inner loop touches.
struct KernelContext {
    n: usize,
    m: usize,
    /// Coset offset, upper block then lower block.
    mu_top: Vec<f64>,
    mu_bot: Vec<f64>,
    /// The combined elliptic vector paired through the doubled Gram matrix.
    uz: Vec<Complex64>,
    /// Imaginary drift of the combined vector divided by `y`, per block.
    abar_top: Vec<f64>,
    abar_bot: Vec<f64>,
    y: f64,
    tau: Complex64,
    gram_f: Vec<Vec<f64>>,
    ula_f: Vec<Vec<f64>>,
    /// Pairings of each distinguished vector with the basis, as floats.
    ct_f: Vec<Vec<f64>>,
    /// Inverse depth Gram as floats, and its diagonal for quick envelopes.
    dinv_f: Vec<Vec<f64>>,
    dinv_diag: Vec<f64>,
    /// Largest depth-vector norm, for enumeration slack.
    d_norm_max: f64,
    /// Distinguished vectors and their duals in lattice coordinates.
    d_vecs: Vec<Vec<Q>>,
    duals: Vec<Vec<Q>>,
    gram: QMat,
    quad: QuadratureConfig,
}

impl KernelContext {
    fn new(
        spec: &AppellSpec,
        tau: Complex64,
        u: &[Complex64],
        v: &[Complex64],
    ) -> Result<Self, CompletionError> {
        spec.validate()?;
        let y = tau.im;
        if y <= 0.0 {
            return Err(CompletionError::TauNotInUpperHalfPlane { y });
        }
        let n = spec.rank();
        let m = spec.depth();
        let emb: IndefiniteEmbedding = embed_indefinite(&spec.lattice, &spec.ds)?;
        let proj = projection_matrix(&spec.lattice, &spec.ds);

        let u_minus_v = cvec_sub(u, v);
        // Upper block: v plus the span component of u - v.
        let rho = cvec_add(v, &qmat_mul_cvec(&proj, &u_minus_v));
        // Lower block: dual coefficients of v - u over the distinguished set.
        let ct = spec.ds.c_matrix().transpose();
        let sigma_low =
            qmat_mul_cvec(spec.ds.d_inverse(), &qmat_mul_cvec(&ct, &cvec_sub(v, u)));
        let mut zbar: Vec<Complex64> = rho.clone();
        zbar.extend(sigma_low.iter().copied());

        let offset = spec.coset_offset();
        let ula_f = emb.ul_gram().to_f64_rows();
        let uz: Vec<Complex64> = (0..n + m)
            .map(|i| (0..n + m).map(|j| zbar[j] * ula_f[i][j]).sum::<Complex64>())
            .collect();
        let abar: Vec<f64> = zbar.iter().map(|z| z.im / y).collect();
        let dinv_diag: Vec<f64> =
            (0..m).map(|r| q_to_f64(spec.ds.d_inverse().get(r, r))).collect();
        let d_norm_max = (0..m)
            .map(|r| q_to_f64(spec.ds.d_matrix().get(r, r)).abs())
            .fold(0.0_f64, f64::max);

        Ok(KernelContext {
            n,
            m,
            mu_top: vec_to_f64(&offset),
            mu_bot: vec_to_f64(&spec.nu),
            uz,
            abar_top: abar[..n].to_vec(),
            abar_bot: abar[n..].to_vec(),
            y,
            tau,
            gram_f: spec.lattice.gram().to_f64_rows(),
            ula_f,
            ct_f: (0..m).map(|r| vec_to_f64(&spec.ds.c_matrix().col(r))).collect(),
            dinv_f: spec.ds.d_inverse().to_f64_rows(),
            dinv_diag,
            d_norm_max,
            d_vecs: spec.ds.vectors(),
            duals: dual_vectors(&spec.ds),
            gram: spec.lattice.gram().clone(),
            quad: QuadratureConfig::default(),
        })
    }

    /// Checks that every denominator direction is genuinely off its wall and
    /// that the point selects the same half spaces as the spec's chamber
    /// data.
    fn check_chamber(&self, spec: &AppellSpec) -> Result<(), CompletionError> {
        let shifts = sigma_shifts(spec)?;
        for r in 0..self.m {
            let c_spec = q_to_f64(&(&spec.nu[r] + &shifts[r]));
            let c_point = q_to_f64(&spec.nu[r]) + self.abar_bot[r];
            let dist = (c_point - c_point.round()).abs();
            if dist < 1e-9 {
                return Err(CompletionError::PointOnWall { index: r, distance: dist });
            }
            let spec_floor = c_spec.floor() as i64;
            let point_floor = c_point.floor() as i64;
            if spec_floor != point_floor {
                return Err(CompletionError::ChamberMismatch {
                    index: r,
                    spec_floor,
                    point_floor,
                });
            }
        }
        Ok(())
    }

    fn abar_full(&self) -> Vec<f64> {
        let mut a = self.abar_top.clone();
        a.extend(self.abar_bot.iter());
        a
    }

    /// Value of one summand without the kernel weight: the `q` power of half
    /// the doubled norm times the pairing phase with the combined vector.
    fn term_value(&self, kvec: &[f64]) -> Complex64 {
        let quad = real_quadratic(&self.ula_f, kvec);
        let mut pairing = Complex64::new(0.0, 0.0);
        for (x, w) in kvec.iter().zip(&self.uz) {
            pairing += w * *x;
        }
        (Complex64::i() * (PI * quad * self.tau + TWO_PI * pairing)).exp()
    }

    /// Log magnitude of a summand relative to the drift factor, for the
    /// shifted vector `w = k + abar`.
    fn log_magnitude(&self, wvec: &[f64], abar_norm: f64) -> f64 {
        -PI * self.y * (real_quadratic(&self.ula_f, wvec) - abar_norm)
    }

    /// Unit-modulus phase of a summand: its full exponent with the known
    /// log magnitude subtracted, so huge magnitudes never materialize.
    fn term_phase(&self, kvec: &[f64], logmag: f64) -> Complex64 {
        let quad = real_quadratic(&self.ula_f, kvec);
        let mut pairing = Complex64::new(0.0, 0.0);
        for (x, w) in kvec.iter().zip(&self.uz) {
            pairing += w * *x;
        }
        (Complex64::i() * (PI * quad * self.tau + TWO_PI * pairing) - logmag).exp()
    }
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Lower-block ranges
// ---------------------------------------------------------------------------

/// How a lower-block direction behaves inside a kernel sum.
#[derive(Clone, Copy)]
enum DirKind {
    /// A half-space indicator: the growing side is annihilated, so it only
    /// needs a fixed cushion of cells around the wall.
    HalfSpace,
    /// An error-function bracket: linear decay on one side, cancellation at
    /// a Gaussian rate against linear growth on the other.
    Bracket,
    /// A decaying error function: Gaussian suppression on both sides.
    Gaussian,
}

const MAX_CELLS: usize = 100_000;
const CUSHION: f64 = 6.0;

/// Magnitude headroom, in nats above the skip floor, beyond which a bracket
/// evaluated by quadrature would be dominated by float noise.
const NOISE_LOG: f64 = 32.0;

/// Walks one lower-block direction outward from zero until the summand
/// bound drops below the budget, returning the inclusive cell range.
fn direction_range(
    kind: DirKind,
    off: f64,
    slope: f64,
    gauss: f64,
    budget: f64,
) -> Result<(i64, i64), CompletionError> {
    let alive = |b: f64| -> bool {
        let lin = -slope * b;
        match kind {
            DirKind::HalfSpace => {
                if lin <= 0.0 {
                    lin > -budget
                } else {
                    b.abs() < CUSHION
                }
            }
            DirKind::Bracket => {
                if lin <= 0.0 {
                    lin > -budget
                } else {
                    lin - gauss * b * b > -budget
                }
            }
            DirKind::Gaussian => lin - gauss * b * b > -budget,
        }
    };
    let mut hi = 1i64;
    let mut steps = 0usize;
    while alive(hi as f64 + off) {
        hi += 1;
        steps += 1;
        if steps > MAX_CELLS {
            return Err(CompletionError::EnumerationOverflow {
                what: "lower block",
                cells: steps,
            });
        }
    }
    let mut lo = -1i64;
    steps = 0;
    while alive(lo as f64 + off) {
        lo -= 1;
        steps += 1;
        if steps > MAX_CELLS {
            return Err(CompletionError::EnumerationOverflow {
                what: "lower block",
                cells: steps,
            });
        }
    }
    Ok((lo, hi))
}

/// Advances a lexicographic odometer over the box `[lo, hi]`.  Returns
/// `false` when the box is exhausted.
fn advance(idx: &mut [i64], lo: &[i64], hi: &[i64]) -> bool {
    for r in (0..idx.len()).rev() {
        if idx[r] < hi[r] {
            idx[r] += 1;
            for s in r + 1..idx.len() {
                idx[s] = lo[s];
            }
            return true;
        }
    }
    false
}

/// Radius of the upper-block ball: quadratic decay must beat the budget even
/// after the lower block contributes its best linear gain and, for bracket
/// kernels, its Gaussian peaks.
fn top_radius(ctx: &KernelContext, budget: f64, bracket: bool) -> f64 {
    let base = budget / (PI * ctx.y);
    let m = ctx.m as f64;
    let slack = 4.0 * m * ctx.d_norm_max.sqrt() * base.sqrt() + 8.0 * m * m * ctx.d_norm_max + 4.0;
    if bracket {
        4.0 * base + slack
    } else {
        base + slack
    }
}

// ---------------------------------------------------------------------------
// Shared enumeration over the doubled lattice
// ---------------------------------------------------------------------------

/// Which weight the doubled-lattice sum carries.
enum KernelMode {
    /// Folded sum: product of paired half-space signs.
    PhiPlus,
    /// Completion remainder: error-function brackets against sign products.
    Remainder,
}

struct MixedSum {
    value: Complex64,
    bound: f64,
}

type EpCache = BTreeMap<(u32, Vec<i64>), (f64, f64)>;

/// Enumerates the doubled lattice as an upper-block ellipsoid times
/// per-direction lower-block ranges, weighting every summand that survives
/// the magnitude screen by the requested kernel.
fn mixed_sum(
    ctx: &KernelContext,
    mode: &KernelMode,
    tol: f64,
) -> Result<MixedSum, CompletionError> {
    let y = ctx.y;
    let m = ctx.m;
    let abar = ctx.abar_full();
    let abar_norm = real_quadratic(&ctx.ula_f, &abar);
    let budget = (1.0 / tol).ln() + PI * y * abar_norm.abs() + 6.0;
    let bracket = matches!(mode, KernelMode::Remainder);

    let r_top = top_radius(ctx, budget, bracket);
    let center_top: Vec<f64> =
        ctx.mu_top.iter().zip(&ctx.abar_top).map(|(a, b)| a + b).collect();
    let tops = enumerate_ellipsoid_f64(&ctx.gram_f, &center_top, r_top);

    let mut value = Complex64::new(0.0, 0.0);
    let mut bound = (tops.len() as f64).max(1.0) * (-budget - 2.0_f64).exp() * 8.0;
    let ln_skip = (tol / 1024.0).ln();
    let root = (2.0 * y).sqrt();
    let mut cache: EpCache = BTreeMap::new();

    for top in &tops {
        let t: Vec<f64> =
            top.iter().zip(&center_top).map(|(ni, c)| *ni as f64 + c).collect();
        let g: Vec<f64> = (0..m)
            .map(|r| ctx.ct_f[r].iter().zip(&t).map(|(a, b)| a * b).sum())
            .collect();
        let base = -PI * y * (real_quadratic(&ctx.gram_f, &t) - abar_norm);

        // Skip the whole upper-block point when no lower-block cell can
        // bring it back above the budget.
        let mut best = base;
        if bracket {
            for r in 0..m {
                best += PI * y * g[r] * g[r] * ctx.dinv_diag[r].abs();
            }
        }
        if best < -budget - 2.0 {
            bound += base.exp();
            continue;
        }

        let mut lo = vec![0i64; m];
        let mut hi = vec![0i64; m];
        for r in 0..m {
            let kind = if bracket { DirKind::Bracket } else { DirKind::HalfSpace };
            let off = ctx.mu_bot[r] + ctx.abar_bot[r];
            let slope = 2.0 * PI * y * g[r];
            let gauss = PI * y / ctx.dinv_diag[r].abs().max(1e-12);
            let (l, h) = direction_range(kind, off, slope, gauss, budget + 2.0)?;
            lo[r] = l;
            hi[r] = h;
        }

        let mut idx = lo.clone();
        loop {
            let b: Vec<f64> = (0..m)
                .map(|r| idx[r] as f64 + ctx.mu_bot[r] + ctx.abar_bot[r])
                .collect();
            let mut w = t.clone();
            w.extend(b.iter());
            let logmag = ctx.log_magnitude(&w, abar_norm);
            if logmag > -budget - 2.0 {
                match mode {
                    KernelMode::PhiPlus => {
                        let weight = phi_plus_kernel(&b, &g);
                        if weight != 0.0 {
                            let kvec: Vec<f64> =
                                w.iter().zip(&abar).map(|(x, a)| x - a).collect();
                            value += ctx.term_value(&kvec) * weight;
                        }
                    }
                    KernelMode::Remainder => {
                        // The joint Gaussian suppression along the growing
                        // directions bounds the true summand; the magnitude
                        // alone can overflow and is never exponentiated
                        // before this screen.
                        let growth: Vec<usize> =
                            (0..m).filter(|&r| b[r] * g[r] < 0.0).collect();
                        let joint = joint_suppression(ctx, &growth, &b);
                        let true_log = logmag - joint;
                        if true_log < ln_skip {
                            bound += 8.0 * true_log.exp();
                        } else {
                            // Deeply saturated directions leave the kernel
                            // as pure sign factors, with an exponentially
                            // small banked error each.
                            let mut sign_factor = 1.0_f64;
                            let mut active: Vec<usize> = Vec::new();
                            for r in 0..m {
                                let sat = TWO_PI * y * b[r] * b[r]
                                    / ctx.dinv_diag[r].abs().max(1e-12);
                                if logmag - sat < ln_skip {
                                    bound += (logmag - sat).exp();
                                    sign_factor *= 0.5 * (sgn(b[r]) + sgn(g[r]));
                                } else {
                                    active.push(r);
                                }
                            }
                            if sign_factor != 0.0 && !active.is_empty() {
                                if active.len() == 1 {
                                    // One wall: the bracket is a signed
                                    // complementary error function, taken
                                    // in log space so growth-side
                                    // magnitudes never cancel numerically.
                                    let r = active[0];
                                    let u_hat = root * b[r]
                                        / ctx.dinv_diag[r].abs().max(1e-12).sqrt();
                                    let xe = PI.sqrt() * u_hat.abs();
                                    let amp_log = logmag - xe * xe + erfcx(xe).ln();
                                    if amp_log > ln_skip {
                                        let kvec: Vec<f64> = w
                                            .iter()
                                            .zip(&abar)
                                            .map(|(x, a)| x - a)
                                            .collect();
                                        let phase = ctx.term_phase(&kvec, logmag);
                                        let weight = -sgn(u_hat) * 0.5 * sign_factor;
                                        value += phase * weight * amp_log.exp();
                                        bound += amp_log.exp() * 1e-12;
                                    } else {
                                        bound += amp_log.exp();
                                    }
                                } else if logmag > ln_skip + NOISE_LOG {
                                    // Quadrature noise would swamp the
                                    // bracket at this magnitude; the screen
                                    // bound covers what is dropped.
                                    bound += 8.0 * true_log.exp();
                                } else {
                                    let mag = logmag.exp();
                                    let (w_act, werr) = active_remainder(
                                        ctx, &idx, &b, &g, &active, &mut cache,
                                    )?;
                                    let weight = sign_factor * w_act;
                                    if weight != 0.0 {
                                        let kvec: Vec<f64> = w
                                            .iter()
                                            .zip(&abar)
                                            .map(|(x, a)| x - a)
                                            .collect();
                                        value += ctx.term_value(&kvec) * weight;
                                    }
                                    bound += werr * mag;
                                }
                            }
                        }
                    }
                }
            } else {
                bound += (-budget - 2.0_f64).exp();
            }
            if m == 0 || !advance(&mut idx, &lo, &hi) {
                break;
            }
        }
    }
    Ok(MixedSum { value, bound })
}

/// Folded-sum weight: the product of paired half-space signs, halved once
/// per direction.
fn phi_plus_kernel(b: &[f64], g: &[f64]) -> f64 {
    let mut k = 1.0;
    for (br, gr) in b.iter().zip(g) {
        let f = sgn(*br) + sgn(*gr);
        if f == 0.0 {
            return 0.0;
        }
        k *= 0.5 * f;
    }
    k
}

/// Exponent of the joint Gaussian suppression of the bracket along the
/// named directions: the wall pairings conjugated through the inverse of
/// the dual Gram block.
fn joint_suppression(ctx: &KernelContext, dirs: &[usize], b: &[f64]) -> f64 {
    match dirs.len() {
        0 => 0.0,
        1 => {
            let r = dirs[0];
            TWO_PI * ctx.y * b[r] * b[r] / ctx.dinv_diag[r].abs().max(1e-12)
        }
        _ => {
            let sub: Vec<Vec<f64>> = dirs
                .iter()
                .map(|&r| dirs.iter().map(|&q| ctx.dinv_f[r][q]).collect())
                .collect();
            let rhs: Vec<f64> = dirs.iter().map(|&r| b[r]).collect();
            let x = solve_f64(&sub, &rhs);
            TWO_PI * ctx.y * rhs.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>()
        }
    }
}

/// Remainder weight restricted to the active directions: over every
/// nonempty subset of them, the boosted error function of the wall pairings
/// against the plain sign product, times the wall signs of the
/// complementary active directions.
fn active_remainder(
    ctx: &KernelContext,
    idx: &[i64],
    b: &[f64],
    g: &[f64],
    active: &[usize],
    cache: &mut EpCache,
) -> Result<(f64, f64), CompletionError> {
    let a_len = active.len();
    let root = (2.0 * ctx.y).sqrt();
    let scale = (2.0_f64).powi(-(a_len as i32));
    let mut weight = 0.0_f64;
    let mut werr = 0.0_f64;
    for amask in 1u32..(1 << a_len) {
        let subset: Vec<usize> = active
            .iter()
            .enumerate()
            .filter(|(pos, _)| amask & (1 << pos) != 0)
            .map(|(_, &r)| r)
            .collect();
        let mut spectator = 1.0;
        for (pos, &r) in active.iter().enumerate() {
            if amask & (1 << pos) == 0 {
                spectator *= sgn(g[r]);
            }
        }
        if spectator == 0.0 {
            continue;
        }
        let signs: f64 = subset.iter().map(|&r| sgn(b[r])).product();
        let full_mask: u32 = subset.iter().map(|&r| 1u32 << r).sum();
        let key: Vec<i64> = subset.iter().map(|&r| idx[r]).collect();
        let (e_val, e_err) = match cache.get(&(full_mask, key.clone())) {
            Some(&(v, e)) => (v, e),
            None => {
                let pairings: Vec<f64> = subset.iter().map(|&r| root * b[r]).collect();
                let out = boosted_error(ctx, &subset, &pairings)?;
                cache.insert((full_mask, key), (out.0, out.1));
                out
            }
        };
        weight += scale * (e_val - signs) * spectator;
        werr += scale * e_err;
    }
    Ok((weight, werr))
}

/// Boosted error function of the wall pairings, computed in the positive
/// frame: the pairings are lifted through the dual Gram block so that their
/// sign pattern survives the reduction.
fn boosted_error(
    ctx: &KernelContext,
    subset: &[usize],
    pairings: &[f64],
) -> Result<(f64, f64), CompletionError> {
    let p = subset.len();
    let mut gsub = vec![vec![0.0_f64; p]; p];
    for (a, &ra) in subset.iter().enumerate() {
        for (c, &rb) in subset.iter().enumerate() {
            gsub[a][c] = q_to_f64(&dot(&ctx.duals[ra], &ctx.gram.mul_vec(&ctx.duals[rb])));
        }
    }
    let plane = solve_f64(&gsub, pairings);
    let mut x_pos = vec![0.0_f64; ctx.n];
    for (coef, &r) in plane.iter().zip(subset) {
        for (xi, di) in x_pos.iter_mut().zip(&ctx.duals[r]) {
            *xi += coef * q_to_f64(di);
        }
    }
    let duals_sel: Vec<Vec<Q>> = subset.iter().map(|&r| ctx.duals[r].clone()).collect();
    let spec = ErrSpec::new(ctx.gram.clone(), duals_sel, x_pos)?;
    let out = e_p(&spec, &ctx.quad)?;
    Ok((out.value, out.estimate))
}

// ---------------------------------------------------------------------------
// Direct route
// ---------------------------------------------------------------------------

/// A numeric lattice-sum value together with an accumulated error bound.
#[derive(Clone, Copy, Debug)]
pub struct RValue {
    pub value: Complex64,
    pub bound: f64,
}

/// Folded sum evaluated through its sign kernel over the doubled lattice.
pub fn phi_plus_numeric(
    spec: &AppellSpec,
    point: &NumericPoint,
) -> Result<RValue, CompletionError> {
    let u = u_value(spec, point.tau, &point.zs);
    let v = v_value(spec, point.tau, &point.zs);
    let ctx = KernelContext::new(spec, point.tau, &u, &v)?;
    ctx.check_chamber(spec)?;
    let out = mixed_sum(&ctx, &KernelMode::PhiPlus, point.tol)?;
    Ok(RValue { value: out.value, bound: out.bound })
}

/// Completion remainder evaluated directly: the error-function bracket
/// summed over the doubled lattice.
pub fn r_direct(spec: &AppellSpec, point: &NumericPoint) -> Result<RValue, CompletionError> {
    let u = u_value(spec, point.tau, &point.zs);
    let v = v_value(spec, point.tau, &point.zs);
    let ctx = KernelContext::new(spec, point.tau, &u, &v)?;
    ctx.check_chamber(spec)?;
    let out = mixed_sum(&ctx, &KernelMode::Remainder, point.tol)?;
    Ok(RValue { value: out.value, bound: out.bound })
}

fn kernel_pair_numeric(
    spec: &AppellSpec,
    tau: Complex64,
    u: &[Complex64],
    v: &[Complex64],
    tol: f64,
) -> Result<RValue, CompletionError> {
    let ctx = KernelContext::new(spec, tau, u, v)?;
    let plus = mixed_sum(&ctx, &KernelMode::PhiPlus, tol)?;
    let rem = mixed_sum(&ctx, &KernelMode::Remainder, tol)?;
    Ok(RValue { value: plus.value + rem.value, bound: plus.bound + rem.bound })
}

/// Completed sum at raw elliptic vectors, entirely through the kernel
/// route.  Both sides of a modular comparison go through this evaluator, so
/// the identity transformation cancels exactly.
pub fn phi_hat_numeric(
    spec: &AppellSpec,
    tau: Complex64,
    u: &[Complex64],
    v: &[Complex64],
    tol: f64,
) -> Result<RValue, CompletionError> {
    kernel_pair_numeric(spec, tau, u, v, tol)
}

// ---------------------------------------------------------------------------
// Structural route: R factors over the orthogonal-complement lattice
// ---------------------------------------------------------------------------

/// Positive definite data for one `R` factor: the saturated sublattice
/// orthogonal to the kept subset, the dual vectors entering the Fourier-type
/// error function, and the coset offset of the sum.
#[derive(Clone, Debug)]
pub struct RFactorSpec {
    /// Ambient Gram matrix.
    pub gram: QMat,
    /// Basis of the summation lattice, in ambient coordinates.
    pub basis: Vec<Vec<Q>>,
    /// Gram matrix of `basis`.
    pub basis_gram: QMat,
    /// Dual vectors of the dropped directions, in ambient coordinates.
    pub duals: Vec<Vec<Q>>,
    /// Coset offset in `basis` coordinates.
    pub offset: Vec<Q>,
}

impl RFactorSpec {
    /// Builds the factor data for one glue class.  `nu_perp` is the
    /// orthogonal part of the twist, in ambient coordinates.
    pub fn new(
        spec: &AppellSpec,
        glue: &GlueData,
        glue_index: usize,
        nu_perp: &[Q],
    ) -> Result<Self, CompletionError> {
        let basis: Vec<Vec<Q>> = glue
            .lambda_v_basis
            .iter()
            .map(|coeffs| {
                let qcoeffs: Vec<Q> = coeffs.iter().map(|z| Q::from(z.clone())).collect();
                spec.ds.from_d_coefficients(&qcoeffs)
            })
            .collect();
        let basis_gram = glue.lambda_v_gram.clone();
        let duals: Vec<Vec<Q>> = {
            let all = dual_vectors(&spec.ds);
            glue.v_indices.iter().map(|&v| all[v].clone()).collect()
        };
        let shift = vec_add(&glue.reps[glue_index].perp_coords, nu_perp);
        let rhs: Vec<Q> =
            basis.iter().map(|bv| dot(bv, &spec.lattice.gram().mul_vec(&shift))).collect();
        let offset = basis_gram.solve(&rhs)?;
        Ok(RFactorSpec {
            gram: spec.lattice.gram().clone(),
            basis,
            basis_gram,
            duals,
            offset,
        })
    }
}

/// Evaluates one `R` factor: a sum of Fourier-type error functions over the
/// positive definite complement lattice, weighted by inverse powers of `q`
/// and the pairing phase with `sigma`.
pub fn r_factor(
    rspec: &RFactorSpec,
    tau: Complex64,
    sigma: &[Complex64],
    tol: f64,
) -> Result<RValue, CompletionError> {
    let y = tau.im;
    if y <= 0.0 {
        return Err(CompletionError::TauNotInUpperHalfPlane { y });
    }
    let quad = QuadratureConfig::default();
    let gram_b = rspec.basis_gram.to_f64_rows();
    let gram_amb = rspec.gram.to_f64_rows();
    let n = rspec.gram.rows();

    // Drift of the Gaussian centre, in basis coordinates.
    let sig_im: Vec<f64> = sigma.iter().map(|s| s.im / y).collect();
    let rhs: Vec<f64> = rspec
        .basis
        .iter()
        .map(|bv| {
            let bf = vec_to_f64(bv);
            let mut acc = 0.0;
            for (i, row) in gram_amb.iter().enumerate() {
                let mut r = 0.0;
                for (j, gg) in row.iter().enumerate() {
                    r += gg * sig_im[j];
                }
                acc += bf[i] * r;
            }
            acc
        })
        .collect();
    let drift = solve_f64(&gram_b, &rhs);
    let drift_norm = real_quadratic(&gram_b, &drift);

    let budget = (1.0 / tol).ln() + 4.0;
    let bound_r = 2.0 * budget / (PI * y) + 4.0 * drift_norm + 4.0;
    let off_f = vec_to_f64(&rspec.offset);
    let center: Vec<f64> = off_f.iter().zip(&drift).map(|(o, s)| o - s).collect();
    let points = enumerate_ellipsoid_f64(&gram_b, &center, bound_r);

    // Pairings of sigma with the basis vectors, for the phase.
    let sig_pair: Vec<Complex64> = rspec
        .basis
        .iter()
        .map(|bv| complex_pairing(&gram_amb, &vec_to_f64(bv), sigma))
        .collect();

    let root = (2.0 * y).sqrt();
    let mut value = Complex64::new(0.0, 0.0);
    let mut bound = (points.len() as f64).max(1.0) * (-PI * y * bound_r * 0.25).exp() * 4.0;
    for pt in &points {
        let coords: Vec<Q> =
            pt.iter().zip(&rspec.offset).map(|(ni, o)| qi(*ni) + o).collect();
        let coords_f = vec_to_f64(&coords);
        // Ambient argument: the lattice point minus the drift, boosted.
        let mut x_arg = vec![0.0_f64; n];
        for (c, bv) in coords_f.iter().zip(&rspec.basis) {
            for (xi, bi) in x_arg.iter_mut().zip(&vec_to_f64(bv)) {
                *xi += c * bi;
            }
        }
        for (xi, s) in x_arg.iter_mut().zip(&sig_im) {
            *xi = root * (*xi - s);
        }
        let espec = ErrSpec::new(rspec.gram.clone(), rspec.duals.clone(), x_arg)?;
        let mval = m_p(&espec, &quad)?;
        if mval.value == 0.0 && mval.estimate == 0.0 {
            continue;
        }
        // Inverse q power with an exact rational exponent.
        let mut norm_k = Q::zero();
        for (i, ci) in coords.iter().enumerate() {
            for (j, cj) in coords.iter().enumerate() {
                norm_k += ci * cj * rspec.basis_gram.get(i, j);
            }
        }
        let phase: Complex64 =
            coords_f.iter().zip(&sig_pair).map(|(c, s)| s * *c).sum();
        let factor =
            (Complex64::i() * (-PI * q_to_f64(&norm_k) * tau + TWO_PI * phase)).exp();
        value += factor * mval.value;
        bound += mval.estimate * factor.norm();
    }
    Ok(RValue { value, bound })
}

// ---------------------------------------------------------------------------
// Completion terms and the structural assembly
// ---------------------------------------------------------------------------

/// One term of the structural route: the level, the kept subset, one glue
/// class, the `R` factor data, and the lower-depth folded factor.
#[derive(Clone, Debug)]
pub struct CompletionTerm {
    /// Number of dropped directions.
    pub level: usize,
    /// Kept subset, as indices into the distinguished set.
    pub subset: Vec<usize>,
    /// Dropped directions, the complement of `subset`.
    pub dropped: Vec<usize>,
    /// Glue class index.
    pub glue: usize,
    /// Total number of glue classes for this subset.
    pub glue_count: usize,
    pub r_spec: RFactorSpec,
    /// Lower-depth spec whose folded expansion multiplies the factor.
    pub phi_factor: AppellSpec,
}

fn subset_gram(spec: &AppellSpec, s_indices: &[usize]) -> QMat {
    let dsub: Vec<Vec<Q>> = s_indices.iter().map(|&s| spec.ds.vector(s)).collect();
    QMat::from_rows(
        dsub.iter()
            .map(|a| dsub.iter().map(|b| dot(a, &spec.lattice.gram().mul_vec(b))).collect())
            .collect(),
    )
}

/// Coefficients of the span projection of `x` over the vectors named by
/// `s_indices`.
fn span_coeffs(
    spec: &AppellSpec,
    s_indices: &[usize],
    x: &[Q],
) -> Result<Vec<Q>, CompletionError> {
    if s_indices.is_empty() {
        return Ok(Vec::new());
    }
    let gram_sub = subset_gram(spec, s_indices);
    let rhs: Vec<Q> = s_indices
        .iter()
        .map(|&s| dot(&spec.ds.vector(s), &spec.lattice.gram().mul_vec(x)))
        .collect();
    Ok(gram_sub.solve(&rhs)?)
}

/// Orthogonal projection of `x` onto the span of the named subset, in
/// ambient coordinates.
fn project_span(
    spec: &AppellSpec,
    s_indices: &[usize],
    x: &[Q],
) -> Result<Vec<Q>, CompletionError> {
    let coeffs = span_coeffs(spec, s_indices, x)?;
    let mut out = zeros(spec.rank());
    for (c, &s) in coeffs.iter().zip(s_indices) {
        let d = spec.ds.vector(s);
        for (o, di) in out.iter_mut().zip(&d) {
            *o += c * di;
        }
    }
    Ok(out)
}

fn sub_spec(
    spec: &AppellSpec,
    s_indices: &[usize],
    glue: &GlueData,
    glue_index: usize,
) -> Result<AppellSpec, CompletionError> {
    let d_sub: Vec<Vec<Q>> = s_indices.iter().map(|&s| spec.ds.vector(s)).collect();
    let ds = DVectorSet::new(&spec.lattice, &d_sub)?;

    // Twist of the factor: the glue class's parallel part plus the parallel
    // part of the ambient twist, as coefficients over the kept directions.
    let nu_vec = spec.nu_vector();
    let par_coeffs = span_coeffs(spec, s_indices, &nu_vec)?;
    let nu_coeffs: Vec<Q> = glue.reps[glue_index]
        .par_s_coeffs
        .iter()
        .zip(&par_coeffs)
        .map(|(a, b)| q_frac(&(a + b)))
        .collect();

    let mut sub =
        AppellSpec::new(spec.lattice.clone(), ds, spec.mu.clone(), nu_coeffs, spec.var_count)?;
    // Project the first elliptic argument onto the kept span; the second
    // argument and its chamber data are carried unchanged.
    let n = spec.rank();
    let mut u_lin = QMat::zero(n, spec.var_count);
    for j in 0..spec.var_count {
        let col = project_span(spec, s_indices, &spec.u_linear.col(j))?;
        for (i, entry) in col.into_iter().enumerate() {
            u_lin.set(i, j, entry);
        }
    }
    sub.u_linear = u_lin;
    sub.u_constant = project_span(spec, s_indices, &spec.u_constant)?;
    sub.u_tau_shift = project_span(spec, s_indices, &spec.u_tau_shift)?;
    sub.a_direction = project_span(spec, s_indices, &spec.a_direction)?;
    sub.v_linear = spec.v_linear.clone();
    sub.v_constant = spec.v_constant.clone();
    sub.v_tau_shift = spec.v_tau_shift.clone();
    sub.v_im_direction = spec.v_im_direction.clone();
    Ok(sub)
}

fn enumerate_subsets(m: usize, size: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, m: usize, size: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, size, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    let mut cur = Vec::new();
    rec(0, m, size, &mut cur, &mut out);
    out
}

/// Enumerates every structural term of the completion: all proper subsets of
/// the distinguished set and all glue classes of the induced splitting, in a
/// fixed deterministic order.
pub fn completion_terms(spec: &AppellSpec) -> Result<Vec<CompletionTerm>, CompletionError> {
    spec.validate()?;
    let m = spec.depth();
    let nu_vec = spec.nu_vector();
    let mut terms = Vec::new();
    for level in 1..=m {
        for subset in enumerate_subsets(m, m - level) {
            let dropped: Vec<usize> = (0..m).filter(|r| !subset.contains(r)).collect();
            let glue = glue_vectors(&spec.ds, &subset)?;
            let nu_par = project_span(spec, &subset, &nu_vec)?;
            let nu_perp = vec_sub(&nu_vec, &nu_par);
            for g in 0..glue.count {
                let r_spec = RFactorSpec::new(spec, &glue, g, &nu_perp)?;
                let phi_factor = sub_spec(spec, &subset, &glue, g)?;
                terms.push(CompletionTerm {
                    level,
                    subset: subset.clone(),
                    dropped: dropped.clone(),
                    glue: g,
                    glue_count: glue.count,
                    r_spec,
                    phi_factor,
                });
            }
        }
    }
    Ok(terms)
}

fn factor_eval(
    factor: &AppellSpec,
    point: &NumericPoint,
) -> Result<(Complex64, f64), CompletionError> {
    let series = if factor.depth() == 0 {
        theta_series(
            &factor.lattice,
            &factor.coset_offset(),
            &factor.v_linear,
            &factor.v_constant,
            &point.q_cutoff,
            &point.w_window,
        )?
    } else {
        phi_plus(factor, &point.q_cutoff, &point.w_window)?
    };
    let out = series.eval(point.tau, &point.zs)?;
    Ok((out.value, out.tail_estimate))
}

/// Component of `u - v` orthogonal to the kept subset, at a numeric point.
fn sigma_perp(
    spec: &AppellSpec,
    subset: &[usize],
    tau: Complex64,
    zs: &[Complex64],
) -> Result<Vec<Complex64>, CompletionError> {
    let u = u_value(spec, tau, zs);
    let v = v_value(spec, tau, zs);
    let diff = cvec_sub(&u, &v);
    if subset.is_empty() {
        return Ok(diff);
    }
    let gram_sub_f = subset_gram(spec, subset).to_f64_rows();
    let gram_amb = spec.lattice.gram().to_f64_rows();
    let dsub: Vec<Vec<f64>> =
        subset.iter().map(|&s| vec_to_f64(&spec.ds.vector(s))).collect();
    let pair: Vec<Complex64> =
        dsub.iter().map(|d| complex_pairing(&gram_amb, d, &diff)).collect();
    let c_re = solve_f64(&gram_sub_f, &pair.iter().map(|p| p.re).collect::<Vec<_>>());
    let c_im = solve_f64(&gram_sub_f, &pair.iter().map(|p| p.im).collect::<Vec<_>>());
    let mut out = diff;
    for ((cr, ci), d) in c_re.iter().zip(&c_im).zip(&dsub) {
        for (o, di) in out.iter_mut().zip(d) {
            *o -= Complex64::new(*cr, *ci) * *di;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// The completed sum with both routes
// ---------------------------------------------------------------------------

/// Per-term report of the structural route.
#[derive(Clone, Debug)]
pub struct TermReport {
    pub level: usize,
    pub subset: Vec<usize>,
    pub glue: usize,
    pub r_value: Complex64,
    pub phi_value: Complex64,
    /// Contribution to the completed sum, normalisation included.
    pub value: Complex64,
    pub bound: f64,
}

/// The completed sum at one point: the folded part, the structural terms,
/// both route totals, and the observed route difference.
#[derive(Clone, Debug)]
pub struct PhiHatValue {
    pub phi_plus: Complex64,
    pub terms: Vec<TermReport>,
    pub structural: Complex64,
    pub direct: Complex64,
    pub remainder_direct: Complex64,
    pub bound: f64,
    pub route_difference: f64,
}

/// Evaluates the completed sum along both routes and cross-checks them.
/// A disagreement beyond the combined tolerance is an error naming the
/// largest structural term.
pub fn phi_hat(spec: &AppellSpec, point: &NumericPoint) -> Result<PhiHatValue, CompletionError> {
    let plus_series = phi_plus(spec, &point.q_cutoff, &point.w_window)?;
    let plus = plus_series.eval(point.tau, &point.zs)?;
    let mut bound = plus.tail_estimate;

    let mut terms = Vec::new();
    let mut structural_rest = Complex64::new(0.0, 0.0);
    for term in completion_terms(spec)? {
        let sigma = sigma_perp(spec, &term.subset, point.tau, &point.zs)?;
        let r_val = r_factor(&term.r_spec, point.tau, &sigma, point.tol)?;
        let (phi_val, phi_tail) = factor_eval(&term.phi_factor, point)?;
        let norm = (2.0_f64).powi(-(term.level as i32));
        let value = r_val.value * phi_val * norm;
        let term_bound = norm
            * (r_val.bound * phi_val.norm()
                + r_val.value.norm() * phi_tail
                + r_val.bound * phi_tail);
        structural_rest += value;
        bound += term_bound;
        terms.push(TermReport {
            level: term.level,
            subset: term.subset.clone(),
            glue: term.glue,
            r_value: r_val.value,
            phi_value: phi_val,
            value,
            bound: term_bound,
        });
    }

    let direct_rem = r_direct(spec, point)?;
    bound += direct_rem.bound;

    let structural = plus.value + structural_rest;
    let direct = plus.value + direct_rem.value;
    let route_difference = (structural - direct).norm();
    let scale = structural.norm().max(direct.norm()).max(1.0);
    let allowed = point.tol + 50.0 * bound + 1e-10 * scale;
    if route_difference > allowed {
        let worst = terms.iter().max_by(|a, b| a.value.norm().total_cmp(&b.value.norm()));
        let (level, subset, glue, vr, vi) = match worst {
            Some(t) => (t.level, t.subset.clone(), t.glue, t.value.re, t.value.im),
            None => (0, Vec::new(), 0, 0.0, 0.0),
        };
        return Err(CompletionError::RoutesDisagree {
            difference: route_difference,
            allowed,
            level,
            subset,
            glue,
            value_re: vr,
            value_im: vi,
        });
    }

    Ok(PhiHatValue {
        phi_plus: plus.value,
        terms,
        structural,
        direct,
        remainder_direct: direct_rem.value,
        bound,
        route_difference,
    })
}

// ---------------------------------------------------------------------------
// Modular transformation residuals
// ---------------------------------------------------------------------------

/// Four times the product of the lattice and depth Gram determinants, in
/// absolute value.  Transformations congruent to the identity at this level
/// preserve the coset data of every spec on the lattice.
pub fn safe_level(spec: &AppellSpec) -> Result<i64, CompletionError> {
    let prod = (spec.lattice.det() * spec.ds.d_matrix().det()?).abs();
    let val = prod
        .to_integer()
        .to_i64()
        .ok_or_else(|| CompletionError::PeriodOverflow(prod.clone()))?;
    Ok(4 * val.abs())
}

/// Smallest positive integer whose translation leaves every `q` exponent and
/// pairing phase of the doubled sum invariant.
pub fn tau_period(spec: &AppellSpec) -> Result<i64, CompletionError> {
    spec.validate()?;
    let emb = embed_indefinite(&spec.lattice, &spec.ds)?;
    let mut mu_ul: Vec<Q> = spec.coset_offset();
    mu_ul.extend(spec.nu.iter().cloned());
    let q_half = emb.ul_quadratic(&mu_ul) * qr(1, 2);
    let pair = emb.ul_gram().mul_vec(&mu_ul);
    let mut lcm: i64 = denom_i64(&q_half)?;
    for p in &pair {
        lcm = lcm_i64(lcm, denom_i64(p)?);
    }
    Ok(lcm)
}

fn denom_i64(x: &Q) -> Result<i64, CompletionError> {
    x.denom().to_i64().ok_or_else(|| CompletionError::PeriodOverflow(x.clone()))
}

fn lcm_i64(a: i64, b: i64) -> i64 {
    let g = gcd_i64(a, b);
    (a / g) * b
}

fn gcd_i64(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a.max(1)
}

/// Relative residual of the half-integral-weight transformation law under a
/// unimodular integer matrix `[[a, b], [c, d]]`.  Both sides are evaluated
/// with the same kernel evaluator, so the identity matrix returns exactly
/// zero.  The square root takes the principal branch.
pub fn modular_residual(
    spec: &AppellSpec,
    point: &NumericPoint,
    gamma: [[i64; 2]; 2],
) -> Result<f64, CompletionError> {
    let [[a, b], [c, d]] = gamma;
    if a * d - b * c != 1 {
        return Err(CompletionError::NotUnimodular { a, b, c, d });
    }
    let tau = point.tau;
    let denom = tau * c as f64 + d as f64;
    if denom.norm() < 1e-6 {
        return Err(CompletionError::SmallDenominator { modulus: denom.norm() });
    }
    let tau_g = (tau * a as f64 + b as f64) / denom;

    let u = u_value(spec, tau, &point.zs);
    let v = v_value(spec, tau, &point.zs);
    let u_g: Vec<Complex64> = u.iter().map(|x| x / denom).collect();
    let v_g: Vec<Complex64> = v.iter().map(|x| x / denom).collect();

    let base = kernel_pair_numeric(spec, tau, &u, &v, point.tol)?;
    let image = kernel_pair_numeric(spec, tau_g, &u_g, &v_g, point.tol)?;

    let weight = (spec.depth() + spec.rank()) as i32;
    let mult = denom.sqrt().powi(weight);
    let gram_amb = spec.lattice.gram().to_f64_rows();
    let mut qu = Complex64::new(0.0, 0.0);
    let mut buv = Complex64::new(0.0, 0.0);
    for (i, row) in gram_amb.iter().enumerate() {
        for (j, gg) in row.iter().enumerate() {
            qu += u[i] * u[j] * *gg;
            buv += u[i] * v[j] * *gg;
        }
    }
    let phase = (-Complex64::i() * PI * (c as f64) / denom * (qu - buv * 2.0)).exp();
    let predicted = mult * phase * base.value;
    let scale = base.value.norm().max(1e-300);
    Ok((image.value - predicted).norm() / scale)
}

// ---------------------------------------------------------------------------
// Rank-three staircase decomposition check
// ---------------------------------------------------------------------------

/// Expected data and observed results for one subset case of the rank-three
/// staircase decomposition.
#[derive(Clone, Debug)]
pub struct A3Case {
    pub level: usize,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub glue_count: usize,
    pub glue_count_expected: usize,
    pub par_set_matches: bool,
    pub folded_equals_plain: bool,
    pub kernel_sum: Complex64,
    pub structural_sum: Complex64,
    pub gap: f64,
}

/// Results of the decomposition check on the rank-three staircase spec: the
/// per-case table, the complement-lattice comparison of the deepest level,
/// and the exact pairing identity of the elliptic data.
#[derive(Clone, Debug)]
pub struct A3Report {
    pub cases: Vec<A3Case>,
    pub deepest_gram_matches: bool,
    pub pairing_constant: bool,
    pub max_gap: f64,
}

struct A3Expected {
    kept: &'static [usize],
    dropped: &'static [usize],
    count: usize,
    par_set: &'static [[(i64, i64); 3]],
}

const A3_TABLE: &[A3Expected] = &[
    A3Expected {
        kept: &[1, 2],
        dropped: &[0],
        count: 3,
        par_set: &[
            [(0, 1), (0, 1), (0, 1)],
            [(1, 3), (1, 3), (2, 3)],
            [(2, 3), (2, 3), (1, 3)],
        ],
    },
    A3Expected {
        kept: &[0, 2],
        dropped: &[1],
        count: 2,
        par_set: &[[(0, 1), (0, 1), (0, 1)], [(-1, 2), (0, 1), (1, 2)]],
    },
    A3Expected {
        kept: &[0, 1],
        dropped: &[2],
        count: 3,
        par_set: &[
            [(0, 1), (0, 1), (0, 1)],
            [(-1, 3), (1, 3), (0, 1)],
            [(1, 3), (2, 3), (0, 1)],
        ],
    },
    A3Expected {
        kept: &[0],
        dropped: &[1, 2],
        count: 2,
        par_set: &[[(0, 1), (0, 1), (0, 1)], [(-1, 2), (0, 1), (0, 1)]],
    },
    A3Expected {
        kept: &[1],
        dropped: &[0, 2],
        count: 2,
        par_set: &[[(0, 1), (0, 1), (0, 1)], [(1, 2), (1, 2), (0, 1)]],
    },
    A3Expected {
        kept: &[2],
        dropped: &[0, 1],
        count: 2,
        par_set: &[[(0, 1), (0, 1), (0, 1)], [(0, 1), (0, 1), (1, 2)]],
    },
    A3Expected {
        kept: &[],
        dropped: &[0, 1, 2],
        count: 1,
        par_set: &[[(0, 1), (0, 1), (0, 1)]],
    },
];

/// Kernel weight of one subset case: the Fourier-type error function on the
/// dropped directions times paired half-space signs with shifted thresholds
/// on the kept ones.
fn a3_case_kernel(cc: &CCoefficients, b: &[f64], g: &[f64], m_cached: (f64, f64)) -> (f64, f64) {
    let mut kept_factor = 1.0_f64;
    for (i, &s) in cc.s_indices.iter().enumerate() {
        let mut xt = b[s];
        for (j, &v) in cc.v_indices.iter().enumerate() {
            xt -= q_to_f64(cc.c.get(i, j)) * b[v];
        }
        let f = sgn(g[s]) + sgn(xt);
        if f == 0.0 {
            return (0.0, 0.0);
        }
        kept_factor *= 0.5 * f;
    }
    (m_cached.0 * kept_factor, m_cached.1 * kept_factor.abs())
}

fn a3_kernel_sum(
    ctx: &KernelContext,
    cc: &CCoefficients,
    tol: f64,
) -> Result<RValue, CompletionError> {
    let y = ctx.y;
    let m = ctx.m;
    let abar = ctx.abar_full();
    let abar_norm = real_quadratic(&ctx.ula_f, &abar);
    let budget = (1.0 / tol).ln() + PI * y * abar_norm.abs() + 6.0;
    let r_top = top_radius(ctx, budget, true);
    let center_top: Vec<f64> =
        ctx.mu_top.iter().zip(&ctx.abar_top).map(|(a, b)| a + b).collect();
    let tops = enumerate_ellipsoid_f64(&ctx.gram_f, &center_top, r_top);
    let root = (2.0 * y).sqrt();

    let mut value = Complex64::new(0.0, 0.0);
    let mut bound = (tops.len() as f64).max(1.0) * (-budget - 2.0_f64).exp() * 8.0;
    let ln_skip = (tol / 1024.0).ln();
    let trace: f64 = cc.v_indices.iter().map(|&v| ctx.dinv_diag[v].abs()).sum();
    let mut cache: BTreeMap<Vec<i64>, (f64, f64)> = BTreeMap::new();

    for top in &tops {
        let t: Vec<f64> =
            top.iter().zip(&center_top).map(|(ni, c)| *ni as f64 + c).collect();
        let g: Vec<f64> = (0..m)
            .map(|r| ctx.ct_f[r].iter().zip(&t).map(|(a, b)| a * b).sum())
            .collect();
        let base = -PI * y * (real_quadratic(&ctx.gram_f, &t) - abar_norm);
        let mut best = base;
        for &v in &cc.v_indices {
            best += PI * y * g[v] * g[v] * ctx.dinv_diag[v].abs();
        }
        if best < -budget - 2.0 {
            bound += base.exp();
            continue;
        }

        let mut lo = vec![0i64; m];
        let mut hi = vec![0i64; m];
        for r in 0..m {
            let kind =
                if cc.v_indices.contains(&r) { DirKind::Gaussian } else { DirKind::HalfSpace };
            let off = ctx.mu_bot[r] + ctx.abar_bot[r];
            let slope = 2.0 * PI * y * g[r];
            let gauss = PI * y / ctx.dinv_diag[r].abs().max(1e-12);
            let (l, h) = direction_range(kind, off, slope, gauss, budget + 2.0)?;
            lo[r] = l;
            hi[r] = h;
        }

        let mut idx = lo.clone();
        loop {
            let b: Vec<f64> = (0..m)
                .map(|r| idx[r] as f64 + ctx.mu_bot[r] + ctx.abar_bot[r])
                .collect();
            let mut w = t.clone();
            w.extend(b.iter());
            let logmag = ctx.log_magnitude(&w, abar_norm);
            if logmag > -budget - 2.0 {
                // Trace-normalized Gaussian falloff of the dropped-direction
                // factor, a provable underestimate of its true decay; the
                // raw magnitude is not exponentiated before this screen.
                let norm_b: f64 = cc.v_indices.iter().map(|&v| b[v] * b[v]).sum();
                let screen = TWO_PI * y * norm_b / trace.max(1e-12);
                let true_log = logmag - screen;
                if true_log >= ln_skip && logmag < 600.0 {
                    let mag = logmag.exp();
                    let key: Vec<i64> = cc.v_indices.iter().map(|&v| idx[v]).collect();
                    let m_val = match cache.get(&key) {
                        Some(&cached) => cached,
                        None => {
                            let mut x_arg = vec![0.0_f64; ctx.n];
                            for &v in &cc.v_indices {
                                let dv = vec_to_f64(&ctx.d_vecs[v]);
                                for (xi, di) in x_arg.iter_mut().zip(&dv) {
                                    *xi += root * b[v] * di;
                                }
                            }
                            let duals_sel: Vec<Vec<Q>> =
                                cc.v_indices.iter().map(|&v| ctx.duals[v].clone()).collect();
                            let espec = ErrSpec::new(ctx.gram.clone(), duals_sel, x_arg)?;
                            let out = m_p(&espec, &ctx.quad)?;
                            cache.insert(key, (out.value, out.estimate));
                            (out.value, out.estimate)
                        }
                    };
                    let (weight, werr) = a3_case_kernel(cc, &b, &g, m_val);
                    if weight != 0.0 || werr != 0.0 {
                        let kvec: Vec<f64> =
                            w.iter().zip(&abar).map(|(x, a)| x - a).collect();
                        value += ctx.term_value(&kvec) * weight;
                        bound += werr * mag;
                    }
                } else {
                    bound += 4.0 * true_log.exp();
                }
            } else {
                bound += (-budget - 2.0_f64).exp();
            }
            if !advance(&mut idx, &lo, &hi) {
                break;
            }
        }
    }
    Ok(RValue { value, bound })
}

/// Runs the decomposition table of the rank-three staircase spec at one
/// point: glue data against the expected table, folded-equals-plain checks
/// for every factor, kernel sums of every subset case against the glued
/// factor products, and the exact identities of the deepest level.
pub fn a3_decomposition_check(point: &NumericPoint) -> Result<A3Report, CompletionError> {
    let (_, spec) = crate::appell::psi_build(3, 0, 0, &qi(1), &qi(1))?;
    let u = u_value(&spec, point.tau, &point.zs);
    let v = v_value(&spec, point.tau, &point.zs);
    let ctx = KernelContext::new(&spec, point.tau, &u, &v)?;
    ctx.check_chamber(&spec)?;

    let nu_vec = spec.nu_vector();
    let mut cases = Vec::new();
    let mut max_gap = 0.0_f64;
    for expected in A3_TABLE {
        let glue = glue_vectors(&spec.ds, expected.kept)?;
        let par_expected: Vec<Vec<Q>> = expected
            .par_set
            .iter()
            .map(|v| v.iter().map(|(num, den)| qr(*num, *den)).collect())
            .collect();
        let mut par_got: Vec<Vec<Q>> =
            glue.reps.iter().map(|r| r.par_reduced.clone()).collect();
        let mut par_want = par_expected;
        par_got.sort();
        par_want.sort();
        let par_set_matches = par_got == par_want;

        // Folded expansion equals the plain one for every glued factor.
        let mut folded_equals_plain = true;
        for gi in 0..glue.count {
            let sub = sub_spec(&spec, expected.kept, &glue, gi)?;
            if sub.depth() == 0 {
                continue;
            }
            let folded = phi_plus(&sub, &point.q_cutoff, &point.w_window)?;
            let plain = phi(&sub, &point.q_cutoff, &point.w_window)?;
            if folded.first_difference(&plain, &point.q_cutoff, &point.w_window).is_some() {
                folded_equals_plain = false;
            }
        }

        // Kernel sum of the case against the glued factor products.
        let cc = c_coefficients(&spec.ds, expected.dropped, expected.kept)?;
        let kernel = a3_kernel_sum(&ctx, &cc, point.tol)?;
        let nu_par = project_span(&spec, expected.kept, &nu_vec)?;
        let nu_perp = vec_sub(&nu_vec, &nu_par);
        let sigma = sigma_perp(&spec, expected.kept, point.tau, &point.zs)?;
        let mut structural = Complex64::new(0.0, 0.0);
        for gi in 0..glue.count {
            let r_spec = RFactorSpec::new(&spec, &glue, gi, &nu_perp)?;
            let r_val = r_factor(&r_spec, point.tau, &sigma, point.tol)?;
            let sub = sub_spec(&spec, expected.kept, &glue, gi)?;
            let (phi_val, _) = factor_eval(&sub, point)?;
            structural += r_val.value * phi_val;
        }
        let gap = (kernel.value - structural).norm()
            / kernel.value.norm().max(structural.norm()).max(1e-30);
        max_gap = max_gap.max(gap);
        cases.push(A3Case {
            level: expected.dropped.len(),
            kept: expected.kept.to_vec(),
            dropped: expected.dropped.to_vec(),
            glue_count: glue.count,
            glue_count_expected: expected.count,
            par_set_matches,
            folded_equals_plain,
            kernel_sum: kernel.value,
            structural_sum: structural,
            gap,
        });
    }

    // Deepest level: the complement lattice is the whole distinguished span,
    // and the elliptic difference pairs identically with every distinguished
    // vector.
    let glue_all = glue_vectors(&spec.ds, &[])?;
    let deepest_gram_matches = glue_all.lambda_v_gram == *spec.ds.d_matrix();
    let diff_coef: Vec<Q> = (0..spec.rank())
        .map(|i| spec.u_linear.get(i, 0) - spec.v_linear.get(i, 0))
        .collect();
    let pairs: Vec<Q> = (0..spec.depth())
        .map(|r| dot(&spec.ds.vector(r), &spec.lattice.gram().mul_vec(&diff_coef)))
        .collect();
    let pairing_constant = pairs.windows(2).all(|w| w[0] == w[1]);

    Ok(A3Report { cases, deepest_gram_matches, pairing_constant, max_gap })
}

// ---------------------------------------------------------------------------
// Deterministic ordering helpers for reporting
// ---------------------------------------------------------------------------

/// Stable key of a structural term for sorted output.
pub fn term_key(t: &TermReport) -> (usize, Vec<usize>, usize) {
    (t.level, t.subset.clone(), t.glue)
}

/// Groups term reports by level for summary output.
pub fn terms_by_level(terms: &[TermReport]) -> BTreeMap<usize, Vec<&TermReport>> {
    let mut out: BTreeMap<usize, Vec<&TermReport>> = BTreeMap::new();
    for t in terms {
        out.entry(t.level).or_default().push(t);
    }
    out
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
