//! The mean-value functionals M_r, N_r, and Q_r.
//!
//! For a ball `Omega_r(x)` and kernel `K = <A grad Gamma, grad Gamma> / Gamma^2`:
//!
//! ```text
//! M_r(u)(x) = (1/r) integral over Omega_r(x) of u K
//! N_r(g)(x) = (1/r) integral_0^r [ integral over Omega_rho(x) of (Gamma - 1/rho) g ] d rho
//! Q_r(x)    = N_r(1)(x)
//! ```
//!
//! Swapping the rho and space integrals collapses N_r to a single region
//! integral with the weight `w_r = r Gamma - 1 - ln(r Gamma)`; that Fubini
//! reduction is the production path, with the double integral kept as a slow
//! reference oracle. The weight is computed from `x = ln(r Gamma)` as
//! `expm1(x) - x`, which stays relatively accurate as the weight vanishes at
//! the ball boundary.
//!
//! All functionals for one `(center, r)` are evaluated on one shared sample
//! set (identical seed and chart), so differences such as the mean-value
//! residual `u - M_r(u) + N_r(Lu)` benefit from correlated error
//! cancellation. A lag slab `tau < delta` at the ball apex is excluded and
//! accounted for by analytic tail bounds added to the standard errors
//! (flagged `singular_region_excluded`); without the exclusion the kernel
//! integrand has unbounded variance.

use crate::error::{Error, Result};
use crate::field::SmoothField;
use crate::geometry::{BallChart, LBall, TimeLogMap};
use crate::linalg;
use crate::operator::LpOperator;
use crate::quadrature::{self, IntegralEstimate, QuadratureConfig, BATCHES};

/// Joint evaluation of the functionals on one shared sample set.
#[derive(Clone, Debug)]
pub struct BallFunctionals {
    /// M_r(u) for each supplied field, in order.
    pub m: Vec<IntegralEstimate>,
    /// M_r(1).
    pub m_one: IntegralEstimate,
    /// N_r(g) for each supplied field, in order.
    pub n: Vec<IntegralEstimate>,
    /// Q_r = N_r(1).
    pub q: IntegralEstimate,
    /// Interleaved-batch re-estimates (per functional, in the order
    /// m..., m_one, n..., q) for correlated quotient error propagation.
    pub batches: BatchTable,
}

#[derive(Clone, Debug)]
pub struct BatchTable {
    pub m: Vec<[f64; BATCHES]>,
    pub m_one: [f64; BATCHES],
    pub n: Vec<[f64; BATCHES]>,
    pub q: [f64; BATCHES],
}

/// Kernel-weighted surface-type mean `M_r(u)(x)`, normalized so that
/// `M_r(1) = 1`.
pub fn surface_mean_m(
    u: &SmoothField,
    ball: &LBall<'_>,
    config: &QuadratureConfig,
) -> Result<IntegralEstimate> {
    let out = evaluate_functionals(ball, &[u.clone()], &[], config)?;
    Ok(out.m.into_iter().next().expect("one field supplied"))
}

/// Volume-type functional `N_r(g)(x)` via the Fubini-reduced weight
/// `w_r = r Gamma - 1 - ln(r Gamma)` (production path).
pub fn volume_functional_n(
    g: &SmoothField,
    ball: &LBall<'_>,
    config: &QuadratureConfig,
) -> Result<IntegralEstimate> {
    let out = evaluate_functionals(ball, &[], &[g.clone()], config)?;
    Ok(out.n.into_iter().next().expect("one field supplied"))
}

/// `Q_r(x) = N_r(1)(x)`. Errors when the estimate is not positive beyond
/// three standard errors: a nonpositive normalizer breaks the asymptotic
/// average quotient.
pub fn q_r(ball: &LBall<'_>, config: &QuadratureConfig) -> Result<IntegralEstimate> {
    let out = evaluate_functionals(ball, &[], &[], config)?;
    let q = out.q;
    if q.value <= 3.0 * q.stderr {
        return Err(Error::NonPositiveQr {
            value: q.value,
            stderr: q.stderr,
        });
    }
    Ok(q)
}

/// Evaluate `M_r(u_i)`, `M_r(1)`, `N_r(g_j)`, and `Q_r` on one shared,
/// deterministic sample set over the ball chart.
pub fn evaluate_functionals(
    ball: &LBall<'_>,
    m_fields: &[SmoothField],
    n_fields: &[SmoothField],
    config: &QuadratureConfig,
) -> Result<BallFunctionals> {
    let chart = ball.chart();
    let domain = chart.domain();
    let inv_r = 1.0 / ball.radius;

    // Integrand layout: m_fields..., M(1), n_fields..., Q.
    let km = m_fields.len();
    let kn = n_fields.len();
    let total = km + 1 + kn + 1;

    let integrands: Vec<Box<dyn Fn(&[f64]) -> f64 + Sync>> = (0..total)
        .map(|idx| make_integrand(idx, km, m_fields, n_fields, &chart, inv_r))
        .collect();
    let refs: Vec<&(dyn Fn(&[f64]) -> f64 + Sync)> =
        integrands.iter().map(|b| b.as_ref()).collect();

    let sweep = quadrature::sweep(&refs, None, &domain, config)?;

    // Apex tail bounds: the excluded slab tau < delta contributes at most
    //   (sup |u| / r) * integral_0^delta I_K(tau) d tau   to M_r(u),
    //   sup |g| * delta                                   to N_r(g),
    // where I_K is the slice integral of the kernel (closed form below).
    let kernel_tail = kernel_apex_tail(ball.op, ball.radius, chart.delta) * inv_r;
    let mass_tail = chart.delta;

    // sup over the ball of |field|, estimated from the shared sample sweep.
    let sup_abs = |field: &SmoothField| -> f64 {
        let mut sup: f64 = 0.0;
        let probes = 4096;
        for k in 0..probes {
            let mut q = Vec::with_capacity(domain.dim());
            // Low-discrepancy-ish deterministic probe lattice.
            let mut h = (k as u64).wrapping_mul(0x9E3779B97F4A7C15);
            for d in 0..domain.dim() {
                h ^= h >> 29;
                h = h.wrapping_mul(0xBF58476D1CE4E5B9);
                h ^= h >> 32;
                let frac = (h >> 11) as f64 / (1u64 << 53) as f64;
                q.push(domain.lo[d] + (domain.hi[d] - domain.lo[d]) * frac);
            }
            if let Some(p) = chart.map(&q) {
                sup = sup.max(field.value(&p.zeta).abs());
            }
        }
        sup
    };

    let mut estimates = sweep.estimates;
    let mut batches = sweep.batch_values;
    for (idx, est) in estimates.iter_mut().enumerate() {
        let tail = if idx < km {
            kernel_tail * sup_abs(&m_fields[idx])
        } else if idx == km {
            kernel_tail
        } else if idx < km + 1 + kn {
            mass_tail * sup_abs(&n_fields[idx - km - 1])
        } else {
            mass_tail
        };
        est.stderr += tail;
        est.flags.singular_region_excluded = true;
    }

    let q_batches = batches.pop().expect("q batch row");
    let n_batches = batches.split_off(km + 1);
    let m_one_batches = batches.pop().expect("m_one batch row");
    let q = estimates.pop().expect("q estimate");
    let n = estimates.split_off(km + 1);
    let m_one = estimates.pop().expect("m_one estimate");

    Ok(BallFunctionals {
        m: estimates,
        m_one,
        n,
        q,
        batches: BatchTable {
            m: batches,
            m_one: m_one_batches,
            n: n_batches,
            q: q_batches,
        },
    })
}

#[allow(clippy::borrowed_box)]
fn make_integrand<'a>(
    idx: usize,
    km: usize,
    m_fields: &'a [SmoothField],
    n_fields: &'a [SmoothField],
    chart: &'a BallChart<'a>,
    inv_r: f64,
) -> Box<dyn Fn(&[f64]) -> f64 + Sync + 'a> {
    let kn = n_fields.len();
    if idx < km {
        let field = &m_fields[idx];
        Box::new(move |q| match chart.map(q) {
            Some(p) => inv_r * field.value(&p.zeta) * p.kernel * p.jac,
            None => 0.0,
        })
    } else if idx == km {
        Box::new(move |q| match chart.map(q) {
            Some(p) => inv_r * p.kernel * p.jac,
            None => 0.0,
        })
    } else if idx < km + 1 + kn {
        let field = &n_fields[idx - km - 1];
        Box::new(move |q| match chart.map(q) {
            Some(p) => {
                let x = p.beta * (1.0 - p.w2);
                inv_r * field.value(&p.zeta) * (x.exp_m1() - x) * p.jac
            }
            None => 0.0,
        })
    } else {
        Box::new(move |q| match chart.map(q) {
            Some(p) => {
                let x = p.beta * (1.0 - p.w2);
                inv_r * (x.exp_m1() - x) * p.jac
            }
            None => 0.0,
        })
    }
}

/// Upper bound on `integral_0^delta I_K(tau) d tau` where
/// `I_K(tau) = sqrt(det C) tr(A0 C^-1) V_n (2 beta)^{(n+2)/2} / (n+2)`
/// is the exact kernel integral over the ball slice at lag tau.
///
/// Monotonicity in tau (det C up, C^-1 down, beta down) gives a rigorous
/// per-interval bound on a dyadic decomposition of (0, delta].
pub(crate) fn kernel_apex_tail(op: &LpOperator, r: f64, delta: f64) -> f64 {
    let n = op.spatial_dim();
    let unit_ball_vol = match n {
        1 => 2.0,
        2 => std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI / 3.0,
        _ => {
            // pi^(n/2) / Gamma(n/2 + 1) via the product recurrence
            let mut v = 1.0;
            for k in 1..=n {
                v *= match k % 2 {
                    0 => 2.0 * std::f64::consts::PI / k as f64,
                    _ => 2.0 / k as f64,
                };
            }
            v
        }
    };
    let mut total = 0.0;
    let mut hi = delta;
    for _ in 0..200 {
        let lo = hi * 0.5;
        let beta_hi = op.level_beta(lo, r); // beta decreasing: sup on [lo, hi]
        if beta_hi <= 0.0 {
            break;
        }
        let frame_hi = op.frame(hi);
        let frame_lo = op.frame(lo);
        let bound = frame_hi.det().max(0.0).sqrt()
            * frame_lo.tr_a0_inv(op.a0())
            * unit_ball_vol
            * (2.0 * beta_hi).powf((n as f64 + 2.0) / 2.0)
            / (n as f64 + 2.0)
            * (hi - lo);
        total += bound;
        if bound < 1e-18 * total.max(1e-300) || lo < 1e-290 {
            break;
        }
        hi = lo;
    }
    total
}

/// Slow reference for `N_r(g)`: the direct double integral, outer 64-point
/// Gauss-Legendre in rho on [0, r], inner region integrals over
/// `Omega_rho(x)` with independent substreams per rho node. Oracle only.
pub fn volume_functional_n_reference(
    g: &SmoothField,
    ball: &LBall<'_>,
    config: &QuadratureConfig,
) -> Result<IntegralEstimate> {
    let op = ball.op;
    let x = ball.center.as_slice();
    let (rho_nodes, rho_weights) = linalg::gauss_legendre_on(64, 0.0, ball.radius);

    let mut value = 0.0;
    let mut var = 0.0;
    let mut samples = 0u64;
    let mut flags = crate::quadrature::EstimateFlags::default();
    for (k, (&rho, &wk)) in rho_nodes.iter().zip(&rho_weights).enumerate() {
        let inner_ball = LBall::new(op, ball.center.clone(), rho)?;
        let (bbox, fallback) = inner_ball.box_info();
        flags.fallback_box |= fallback;
        let delta = inner_ball.tau_max() * crate::geometry::POLE_EXCLUSION_FRACTION;
        let map = match TimeLogMap::new(&bbox, ball.center.time(), delta) {
            Some(m) => m,
            None => continue,
        };
        let threshold = -rho.ln();
        let integrand = |q: &[f64]| {
            let (zeta, jac) = map.map(q);
            let lg = op.log_gamma(x, &zeta);
            if lg <= threshold {
                return 0.0;
            }
            (lg.exp() - 1.0 / rho) * g.value(&zeta) * jac
        };
        let indicator = |q: &[f64]| {
            let (zeta, _) = map.map(q);
            op.log_gamma(x, &zeta) > threshold
        };
        let node_config = QuadratureConfig {
            seed: splitmix(config.seed ^ (k as u64 + 1)),
            ..config.clone()
        };
        let est = quadrature::integrate_region(integrand, indicator, &map.domain(), &node_config)?;
        value += wk * est.value;
        var += (wk * est.stderr).powi(2);
        samples += est.samples;
    }
    value /= ball.radius;
    let mut stderr = var.sqrt() / ball.radius;
    // Excluded apex slabs: |inner integrand| <= Gamma |g|, and the kernel
    // mass of a lag slab is at most its thickness.
    let chart = ball.chart();
    let sup_g = sample_sup_abs(g, ball);
    stderr += sup_g * chart.delta;
    flags.singular_region_excluded = true;
    Ok(IntegralEstimate {
        value,
        stderr,
        samples,
        flags,
    })
}

fn sample_sup_abs(field: &SmoothField, ball: &LBall<'_>) -> f64 {
    let chart = ball.chart();
    let domain = chart.domain();
    let mut sup: f64 = 0.0;
    for k in 0..2048u64 {
        let mut h = k.wrapping_mul(0x9E3779B97F4A7C15);
        let mut q = Vec::with_capacity(domain.dim());
        for d in 0..domain.dim() {
            h ^= h >> 29;
            h = h.wrapping_mul(0xBF58476D1CE4E5B9);
            h ^= h >> 32;
            let frac = (h >> 11) as f64 / (1u64 << 53) as f64;
            q.push(domain.lo[d] + (domain.hi[d] - domain.lo[d]) * frac);
        }
        if let Some(p) = chart.map(&q) {
            sup = sup.max(field.value(&p.zeta).abs());
        }
    }
    sup
}

pub(crate) fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58476D1CE4E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}
