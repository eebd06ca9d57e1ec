//! The operator family: coefficients, fundamental solutions, gradients,
//! and adjoints.
//!
//! Every built-in model is a constant-coefficient evolution operator
//!
//! ```text
//! L = sum a0_ij d_i d_j + <B xi, grad_xi> - d_t
//! ```
//!
//! on `R^(n+1)` (spatial variables `xi`, time last), whose fundamental
//! solution is the Gaussian transition kernel
//!
//! ```text
//! Gamma(z, zeta) = N( spatial(zeta); exp(tau B) spatial(z), C(tau) ),
//! C(tau) = integral_0^tau exp(sB) 2 A0 exp(sB)^T ds,   tau = time(z) - time(zeta),
//! ```
//!
//! and zero for `tau <= 0`. The kernel is specified constructively through
//! the covariance integral rather than as a trusted closed form; model
//! construction runs mass, Chapman-Kolmogorov, and caloricity self-checks
//! before an operator is handed out. Gamma is evaluated in log-space
//! internally and exponentiated at operation boundaries.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SmoothField;
use crate::linalg;
use crate::point::SpaceTimePoint;

const LOG_2PI: f64 = 1.8378770664093453; // ln(2 pi)

/// Anisotropic dilation metadata: per-axis integer weights (time last) and
/// the homogeneity degree of Gamma under the dilation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dilation {
    pub weights: Vec<u32>,
    pub gamma_degree: f64,
}

impl Dilation {
    /// Apply the dilation `delta_lambda` to a point.
    pub fn apply(&self, lambda: f64, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.weights)
            .map(|(c, w)| lambda.powi(*w as i32) * c)
            .collect()
    }

    /// Homogeneous dimension: the sum of the weights.
    pub fn homogeneous_dim(&self) -> u32 {
        self.weights.iter().sum()
    }
}

/// Kernel evaluation strategy, selected at construction.
#[derive(Clone, Debug)]
enum KernelKind {
    /// B = 0, A0 = I: Gauss-Weierstrass kernel, C(tau) = 2 tau I.
    IsotropicHeat,
    /// n = 2, A0 = diag(1,0), B = [[0,0],[1,0]]: closed-form covariance.
    Kolmogorov1d,
    /// Nilpotent drift: exp(sB) and C(tau) are exact polynomials.
    NilpotentPoly {
        b_powers: Vec<DMatrix<f64>>,
        /// C(tau) = sum_p tau^(p+1) * cov_poly[p]
        cov_poly: Vec<DMatrix<f64>>,
    },
    /// General drift: matrix exponentials and panelised Gauss-Legendre
    /// quadrature for the covariance integral.
    General,
    /// Negative-control fixture: heat-like kernel with covariance evaluated
    /// at lag tau^power. Mass stays 1; the semigroup property breaks.
    CorruptHeat { power: f64 },
}

/// An operator instance: coefficients, fundamental solution, scaling metadata.
///
/// Immutable after construction; all evaluation operations are pure and safe
/// to call from any number of threads.
#[derive(Clone, Debug)]
pub struct LpOperator {
    id: String,
    spatial_dim: usize,
    a0: DMatrix<f64>,
    drift_matrix: DMatrix<f64>,
    kind: KernelKind,
    dilation: Option<Dilation>,
}

/// Summary row for the model registry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub total_dim: usize,
    pub spatial_dim: usize,
}

/// Built-in model ids, in stable registry order.
pub const BUILTIN_MODEL_IDS: [&str; 3] = ["heat_1d", "heat_2d", "kolmogorov_1d"];

/// List the registered models with their dimensions. Ordering is stable
/// across runs.
pub fn list_models() -> Vec<ModelInfo> {
    BUILTIN_MODEL_IDS
        .iter()
        .map(|id| {
            let op = model_by_id(id).expect("built-in model constructs");
            ModelInfo {
                id: op.id().to_string(),
                total_dim: op.total_dim(),
                spatial_dim: op.spatial_dim(),
            }
        })
        .collect()
}

/// Look up a built-in model by id.
pub fn model_by_id(id: &str) -> Result<LpOperator> {
    match id {
        "heat_1d" => LpOperator::heat(1),
        "heat_2d" => LpOperator::heat(2),
        "kolmogorov_1d" => LpOperator::kolmogorov_1d(),
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

impl LpOperator {
    /// The classical heat operator in `n` spatial dimensions.
    pub fn heat(n: usize) -> Result<Self> {
        let mut weights: Vec<u32> = vec![1; n];
        weights.push(2);
        make_lp_operator(
            &format!("heat_{n}d"),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
            Some(Dilation {
                weights,
                gamma_degree: -(n as f64),
            }),
        )
    }

    /// The Kolmogorov operator `d_vv + v d_x - d_t` on R^3 with coordinates
    /// (v, x, t).
    pub fn kolmogorov_1d() -> Result<Self> {
        make_lp_operator(
            "kolmogorov_1d",
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]),
            Some(Dilation {
                weights: vec![1, 3, 2],
                gamma_degree: -4.0,
            }),
        )
    }

    /// Negative-control fixture: a deliberately corrupted heat-like kernel
    /// whose covariance uses lag tau^1.25. Mass normalization still holds,
    /// but Chapman-Kolmogorov and caloricity fail. Bypasses the build-time
    /// self-checks on purpose.
    pub fn corrupted_heat_fixture() -> Self {
        Self {
            id: "corrupt_heat_fixture".into(),
            spatial_dim: 1,
            a0: DMatrix::identity(1, 1),
            drift_matrix: DMatrix::zeros(1, 1),
            kind: KernelKind::CorruptHeat { power: 1.25 },
            dilation: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn spatial_dim(&self) -> usize {
        self.spatial_dim
    }

    pub fn total_dim(&self) -> usize {
        self.spatial_dim + 1
    }

    pub fn dilation(&self) -> Option<&Dilation> {
        self.dilation.as_ref()
    }

    /// The full N x N coefficient matrix A(z): A0 embedded in the spatial
    /// block, zero time row and column. Constant in z for this family.
    pub fn coeff_matrix(&self, _z: &[f64]) -> DMatrix<f64> {
        let nn = self.total_dim();
        let mut a = DMatrix::zeros(nn, nn);
        a.view_mut((0, 0), (self.spatial_dim, self.spatial_dim))
            .copy_from(&self.a0);
        a
    }

    /// Drift vector b(z) = (B xi, -1).
    pub fn drift(&self, z: &[f64]) -> Vec<f64> {
        let n = self.spatial_dim;
        let mut b = vec![0.0; n + 1];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.drift_matrix[(i, j)] * z[j];
            }
            b[i] = acc;
        }
        b[n] = -1.0;
        b
    }

    pub fn a0(&self) -> &DMatrix<f64> {
        &self.a0
    }

    pub fn drift_matrix(&self) -> &DMatrix<f64> {
        &self.drift_matrix
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.total_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.total_dim(),
                got: z.len(),
            });
        }
        Ok(())
    }

    /// exp(tau B) applied to a spatial vector.
    pub(crate) fn flow(&self, tau: f64, xi: &[f64]) -> Vec<f64> {
        match &self.kind {
            KernelKind::IsotropicHeat | KernelKind::CorruptHeat { .. } => xi.to_vec(),
            KernelKind::Kolmogorov1d => vec![xi[0], xi[1] + tau * xi[0]],
            KernelKind::NilpotentPoly { b_powers, .. } => {
                let n = self.spatial_dim;
                let mut out = vec![0.0; n];
                let mut factor = 1.0;
                for (k, bp) in b_powers.iter().enumerate() {
                    if k > 0 {
                        factor *= tau / k as f64;
                    }
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += bp[(i, j)] * xi[j];
                        }
                        out[i] += factor * acc;
                    }
                }
                out
            }
            KernelKind::General => {
                let e = linalg::matrix_exp(&(&self.drift_matrix * tau));
                (0..self.spatial_dim)
                    .map(|i| (0..self.spatial_dim).map(|j| e[(i, j)] * xi[j]).sum())
                    .collect()
            }
        }
    }

    /// Per-lag covariance data used by kernel evaluation and ball geometry.
    pub(crate) fn frame(&self, tau: f64) -> LagFrame {
        debug_assert!(tau > 0.0);
        match &self.kind {
            KernelKind::IsotropicHeat => LagFrame::Iso {
                n: self.spatial_dim,
                c: 2.0 * tau,
            },
            KernelKind::CorruptHeat { power } => LagFrame::Iso {
                n: self.spatial_dim,
                c: 2.0 * tau.powf(*power),
            },
            KernelKind::Kolmogorov1d => {
                let c00 = 2.0 * tau;
                let c01 = tau * tau;
                let c11 = 2.0 / 3.0 * tau * tau * tau;
                LagFrame::Two {
                    c00,
                    c01,
                    c11,
                    det: c00 * c11 - c01 * c01,
                }
            }
            KernelKind::NilpotentPoly { cov_poly, .. } => {
                let n = self.spatial_dim;
                let mut c = DMatrix::zeros(n, n);
                let mut tp = tau;
                for term in cov_poly {
                    c += term * tp;
                    tp *= tau;
                }
                LagFrame::general(c)
            }
            KernelKind::General => LagFrame::general(self.cov_by_quadrature(tau)),
        }
    }

    /// C(tau) by panelised Gauss-Legendre quadrature of exp(sB) 2A0 exp(sB)^T.
    fn cov_by_quadrature(&self, tau: f64) -> DMatrix<f64> {
        let n = self.spatial_dim;
        let bnorm = self
            .drift_matrix
            .row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let panels = ((tau * bnorm).ceil() as usize).max(1);
        let mut c = DMatrix::zeros(n, n);
        let two_a0 = &self.a0 * 2.0;
        for p in 0..panels {
            let a = tau * p as f64 / panels as f64;
            let b = tau * (p + 1) as f64 / panels as f64;
            let (nodes, weights) = linalg::gauss_legendre_on(24, a, b);
            for (s, w) in nodes.iter().zip(&weights) {
                let e = linalg::matrix_exp(&(&self.drift_matrix * *s));
                c += (&e * &two_a0 * e.transpose()) * *w;
            }
        }
        c
    }

    /// d C / d tau = exp(tau B) 2 A0 exp(tau B)^T.
    fn cov_derivative(&self, tau: f64) -> DMatrix<f64> {
        match &self.kind {
            KernelKind::CorruptHeat { power } => {
                DMatrix::identity(self.spatial_dim, self.spatial_dim)
                    * (2.0 * power * tau.powf(power - 1.0))
            }
            _ => {
                let e = match &self.kind {
                    KernelKind::IsotropicHeat => DMatrix::identity(self.spatial_dim, self.spatial_dim),
                    KernelKind::Kolmogorov1d => {
                        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, tau, 1.0])
                    }
                    _ => linalg::matrix_exp(&(&self.drift_matrix * tau)),
                };
                &e * (&self.a0 * 2.0) * e.transpose()
            }
        }
    }

    /// log Gamma(z, zeta); `-inf` when time(zeta) >= time(z).
    pub fn log_gamma(&self, z: &[f64], zeta: &[f64]) -> f64 {
        let n = self.spatial_dim;
        let tau = z[n] - zeta[n];
        if tau <= 0.0 {
            return f64::NEG_INFINITY;
        }
        match &self.kind {
            KernelKind::IsotropicHeat => {
                let mut d2 = 0.0;
                for i in 0..n {
                    let d = zeta[i] - z[i];
                    d2 += d * d;
                }
                -0.5 * n as f64 * (4.0 * std::f64::consts::PI * tau).ln() - d2 / (4.0 * tau)
            }
            KernelKind::CorruptHeat { power } => {
                let te = tau.powf(*power);
                let mut d2 = 0.0;
                for i in 0..n {
                    let d = zeta[i] - z[i];
                    d2 += d * d;
                }
                -0.5 * n as f64 * (4.0 * std::f64::consts::PI * te).ln() - d2 / (4.0 * te)
            }
            KernelKind::Kolmogorov1d => {
                let u0 = zeta[0] - z[0];
                let u1 = zeta[1] - z[1] - tau * z[0];
                // C^{-1} = [[2/tau, -3/tau^2], [-3/tau^2, 6/tau^3]]
                let quad =
                    2.0 * u0 * u0 / tau - 6.0 * u0 * u1 / (tau * tau) + 6.0 * u1 * u1 / (tau * tau * tau);
                let logdet = 4.0 * tau.ln() - 3f64.ln();
                -LOG_2PI - 0.5 * logdet - 0.5 * quad
            }
            _ => {
                let frame = self.frame(tau);
                let mean = self.flow(tau, &z[..n]);
                let u: Vec<f64> = (0..n).map(|i| zeta[i] - mean[i]).collect();
                -0.5 * n as f64 * LOG_2PI - 0.5 * frame.logdet() - 0.5 * frame.inv_quad(&u)
            }
        }
    }

    /// Evaluate the fundamental solution Gamma(z, zeta).
    ///
    /// Errors on dimension mismatch and at the pole z == zeta; returns 0 on
    /// the complement of the support (time(zeta) >= time(z)).
    pub fn eval_gamma(&self, z: &SpaceTimePoint, zeta: &SpaceTimePoint) -> Result<f64> {
        self.check_dim(z.as_slice())?;
        self.check_dim(zeta.as_slice())?;
        if z == zeta {
            return Err(Error::PoleEvaluation);
        }
        Ok(self.log_gamma(z.as_slice(), zeta.as_slice()).exp())
    }

    /// d log Gamma / d tau at fixed offset data (internal helper for the
    /// time component of the second-slot gradient).
    fn dlog_gamma_dtau(&self, tau: f64, z: &[f64], zeta: &[f64]) -> f64 {
        let n = self.spatial_dim;
        let frame = self.frame(tau);
        let mean = self.flow(tau, &z[..n]);
        let u: Vec<f64> = (0..n).map(|i| zeta[i] - mean[i]).collect();
        let cprime = self.cov_derivative(tau);
        let cinv_u = frame.inv_vec(&u);
        // -1/2 tr(C^-1 C') + 1/2 u^T C^-1 C' C^-1 u - udot^T C^-1 u,
        // udot = -B exp(tau B) xi.
        let mut tr = 0.0;
        for i in 0..n {
            let ei: Vec<f64> = (0..n).map(|j| cprime[(j, i)]).collect();
            tr += frame.inv_vec(&ei)[i];
        }
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += cinv_u[i] * cprime[(i, j)] * cinv_u[j];
            }
        }
        let mut udot = vec![0.0; n];
        match &self.kind {
            KernelKind::IsotropicHeat | KernelKind::CorruptHeat { .. } => {}
            _ => {
                for i in 0..n {
                    for j in 0..n {
                        udot[i] -= self.drift_matrix[(i, j)] * mean[j];
                    }
                }
            }
        }
        let cross: f64 = udot.iter().zip(&cinv_u).map(|(a, b)| a * b).sum();
        -0.5 * tr + 0.5 * quad - cross
    }

    /// Analytic gradient of Gamma(z, .) in its second argument.
    ///
    /// Returns the zero vector on the complement of the support and an error
    /// at the pole.
    pub fn eval_grad_gamma_second(
        &self,
        z: &SpaceTimePoint,
        zeta: &SpaceTimePoint,
    ) -> Result<Vec<f64>> {
        self.check_dim(z.as_slice())?;
        self.check_dim(zeta.as_slice())?;
        if z == zeta {
            return Err(Error::PoleEvaluation);
        }
        let n = self.spatial_dim;
        let tau = z.as_slice()[n] - zeta.as_slice()[n];
        if tau <= 0.0 {
            return Ok(vec![0.0; n + 1]);
        }
        let gamma = self.log_gamma(z.as_slice(), zeta.as_slice()).exp();
        let frame = self.frame(tau);
        let mean = self.flow(tau, &z.as_slice()[..n]);
        let u: Vec<f64> = (0..n).map(|i| zeta.as_slice()[i] - mean[i]).collect();
        let cinv_u = frame.inv_vec(&u);
        let mut grad = vec![0.0; n + 1];
        for i in 0..n {
            grad[i] = -gamma * cinv_u[i];
        }
        // d/d t' = -d/d tau.
        grad[n] = -gamma * self.dlog_gamma_dtau(tau, z.as_slice(), zeta.as_slice());
        Ok(grad)
    }

    /// The mean-value kernel K(z, zeta) = <A grad_zeta Gamma, grad_zeta Gamma> / Gamma^2.
    ///
    /// The Gamma factors cancel analytically: K = <A0 C^-1 u, C^-1 u>, so the
    /// kernel is computable deep inside the ball where Gamma itself would
    /// overflow. Errors outside the support where the kernel is undefined.
    pub fn eval_mv_kernel(&self, z: &SpaceTimePoint, zeta: &SpaceTimePoint) -> Result<f64> {
        self.check_dim(z.as_slice())?;
        self.check_dim(zeta.as_slice())?;
        if z == zeta {
            return Err(Error::PoleEvaluation);
        }
        let n = self.spatial_dim;
        let tau = z.as_slice()[n] - zeta.as_slice()[n];
        if tau <= 0.0 {
            return Err(Error::OutsideSupport);
        }
        let frame = self.frame(tau);
        let mean = self.flow(tau, &z.as_slice()[..n]);
        let u: Vec<f64> = (0..n).map(|i| zeta.as_slice()[i] - mean[i]).collect();
        let g = frame.inv_vec(&u);
        Ok(self.a0_quad(&g))
    }

    /// <A0 g, g> for a spatial vector g.
    pub(crate) fn a0_quad(&self, g: &[f64]) -> f64 {
        match &self.kind {
            KernelKind::IsotropicHeat | KernelKind::CorruptHeat { .. } => {
                g.iter().map(|v| v * v).sum()
            }
            KernelKind::Kolmogorov1d => g[0] * g[0],
            _ => {
                let n = self.spatial_dim;
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        acc += g[i] * self.a0[(i, j)] * g[j];
                    }
                }
                acc
            }
        }
    }

    /// Apply L to a C^2 field at z:
    /// `L u = sum a0_ij d_ij u + <b(z), grad u>` (constant A, divergence form
    /// coincides with non-divergence form).
    pub fn apply_operator(&self, u: &SmoothField, z: &SpaceTimePoint) -> Result<f64> {
        self.check_dim(z.as_slice())?;
        let grad = u.gradient_at(z.as_slice())?;
        let hess = u.hessian_at(z.as_slice())?;
        let n = self.spatial_dim;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += self.a0[(i, j)] * hess[(i, j)];
            }
        }
        let b = self.drift(z.as_slice());
        for (bi, gi) in b.iter().zip(&grad) {
            acc += bi * gi;
        }
        Ok(acc)
    }

    /// Apply the formal adjoint:
    /// `L* phi = sum a0_ij d_ij phi - div(b) phi - <b, grad phi>`,
    /// with div(b) = tr(B) for this family.
    pub fn apply_adjoint(&self, phi: &SmoothField, z: &SpaceTimePoint) -> Result<f64> {
        self.check_dim(z.as_slice())?;
        let grad = phi.gradient_at(z.as_slice())?;
        let hess = phi.hessian_at(z.as_slice())?;
        let n = self.spatial_dim;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += self.a0[(i, j)] * hess[(i, j)];
            }
        }
        let b = self.drift(z.as_slice());
        for (bi, gi) in b.iter().zip(&grad) {
            acc -= bi * gi;
        }
        acc -= self.drift_matrix.trace() * phi.value(z.as_slice());
        Ok(acc)
    }

    /// sup over zeta-space of log Gamma at lag tau.
    pub(crate) fn sup_log_gamma(&self, tau: f64) -> f64 {
        let n = self.spatial_dim as f64;
        -0.5 * n * LOG_2PI - 0.5 * self.frame(tau).logdet()
    }

    /// Largest lag at which the L-ball of radius r is nonempty:
    /// sup_eta Gamma(., lag tau) = 1/r. det C is increasing in tau, so the
    /// equation has a unique root found by bisection (closed forms for the
    /// heat family).
    pub(crate) fn tau_max(&self, r: f64) -> f64 {
        debug_assert!(r > 0.0);
        let n = self.spatial_dim as f64;
        match &self.kind {
            KernelKind::IsotropicHeat => {
                r.powf(2.0 / n) / (4.0 * std::f64::consts::PI)
            }
            KernelKind::CorruptHeat { power } => {
                (r.powf(2.0 / n) / (4.0 * std::f64::consts::PI)).powf(1.0 / power)
            }
            KernelKind::Kolmogorov1d => (r * 3f64.sqrt() / (2.0 * std::f64::consts::PI)).sqrt(),
            _ => {
                let target = -r.ln();
                let mut hi = 1.0;
                let mut lo = 1.0;
                while self.sup_log_gamma(hi) > target {
                    hi *= 2.0;
                    if hi > 1e12 {
                        break;
                    }
                }
                while self.sup_log_gamma(lo) <= target {
                    lo *= 0.5;
                    if lo < 1e-300 {
                        break;
                    }
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.sup_log_gamma(mid) > target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    /// Level margin beta(tau, r) = ln r + sup log Gamma(tau). The slice of
    /// the L-ball at lag tau is the ellipsoid { u^T C^-1 u < 2 beta }.
    pub(crate) fn level_beta(&self, tau: f64, r: f64) -> f64 {
        r.ln() + self.sup_log_gamma(tau)
    }

    /// Whether the Gaussian-level-set box construction is certified for this
    /// model. Models with non-nilpotent drift fall back to the sampled
    /// expansion search.
    pub(crate) fn has_analytic_box(&self) -> bool {
        !matches!(self.kind, KernelKind::General)
    }
}

/// Per-lag covariance frame: determinant, inverse, and square-root actions.
/// Closed forms for 1 and 2 spatial dimensions, nalgebra beyond.
pub(crate) enum LagFrame {
    Iso {
        n: usize,
        c: f64,
    },
    Two {
        c00: f64,
        c01: f64,
        c11: f64,
        det: f64,
    },
    Gen {
        c: DMatrix<f64>,
        inv: DMatrix<f64>,
        det: f64,
        sqrt: DMatrix<f64>,
        inv_sqrt: DMatrix<f64>,
    },
}

impl LagFrame {
    fn general(c: DMatrix<f64>) -> Self {
        let n = c.nrows();
        if n == 1 {
            return LagFrame::Iso { n: 1, c: c[(0, 0)] };
        }
        if n == 2 {
            return LagFrame::Two {
                c00: c[(0, 0)],
                c01: c[(0, 1)],
                c11: c[(1, 1)],
                det: linalg::spd_det(&c),
            };
        }
        let det = linalg::spd_det(&c);
        let inv = linalg::spd_inverse(&c).unwrap_or_else(|| DMatrix::zeros(n, n));
        let sqrt = linalg::spd_sqrt(&c);
        let inv_sqrt = linalg::spd_inverse(&sqrt).unwrap_or_else(|| DMatrix::zeros(n, n));
        LagFrame::Gen {
            c,
            inv,
            det,
            sqrt,
            inv_sqrt,
        }
    }

    pub fn det(&self) -> f64 {
        match self {
            LagFrame::Iso { n, c } => c.powi(*n as i32),
            LagFrame::Two { det, .. } => *det,
            LagFrame::Gen { det, .. } => *det,
        }
    }

    pub fn logdet(&self) -> f64 {
        match self {
            LagFrame::Iso { n, c } => *n as f64 * c.ln(),
            _ => self.det().ln(),
        }
    }

    /// u^T C^-1 u.
    pub fn inv_quad(&self, u: &[f64]) -> f64 {
        match self {
            LagFrame::Iso { c, .. } => u.iter().map(|v| v * v).sum::<f64>() / c,
            LagFrame::Two { c00, c01, c11, det } => {
                (c11 * u[0] * u[0] - 2.0 * c01 * u[0] * u[1] + c00 * u[1] * u[1]) / det
            }
            LagFrame::Gen { inv, .. } => {
                let n = u.len();
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        acc += u[i] * inv[(i, j)] * u[j];
                    }
                }
                acc
            }
        }
    }

    /// C^-1 u.
    pub fn inv_vec(&self, u: &[f64]) -> Vec<f64> {
        match self {
            LagFrame::Iso { c, .. } => u.iter().map(|v| v / c).collect(),
            LagFrame::Two { c00, c01, c11, det } => vec![
                (c11 * u[0] - c01 * u[1]) / det,
                (-c01 * u[0] + c00 * u[1]) / det,
            ],
            LagFrame::Gen { inv, .. } => mat_vec(inv, u),
        }
    }

    /// S w where S is the symmetric square root of C.
    pub fn sqrt_vec(&self, w: &[f64]) -> Vec<f64> {
        match self {
            LagFrame::Iso { c, .. } => {
                let s = c.sqrt();
                w.iter().map(|v| v * s).collect()
            }
            LagFrame::Two { c00, c01, c11, det } => {
                let s = det.max(0.0).sqrt();
                let denom = (c00 + c11 + 2.0 * s).sqrt();
                vec![
                    ((c00 + s) * w[0] + c01 * w[1]) / denom,
                    (c01 * w[0] + (c11 + s) * w[1]) / denom,
                ]
            }
            LagFrame::Gen { sqrt, .. } => mat_vec(sqrt, w),
        }
    }

    /// S^-1 w.
    pub fn inv_sqrt_vec(&self, w: &[f64]) -> Vec<f64> {
        match self {
            LagFrame::Iso { c, .. } => {
                let s = c.sqrt();
                w.iter().map(|v| v / s).collect()
            }
            LagFrame::Two { c00, c01, c11, det } => {
                let s = det.max(0.0).sqrt();
                let denom = (c00 + c11 + 2.0 * s).sqrt();
                // inverse of (C + s I)/denom: det((C + sI)/denom) = ... use 2x2 inverse.
                let a = (c00 + s) / denom;
                let b = c01 / denom;
                let d = (c11 + s) / denom;
                let dd = a * d - b * b;
                vec![(d * w[0] - b * w[1]) / dd, (-b * w[0] + a * w[1]) / dd]
            }
            LagFrame::Gen { inv_sqrt, .. } => mat_vec(inv_sqrt, w),
        }
    }

    /// Diagonal entry C_ii (per-axis marginal variance).
    pub fn diag(&self, i: usize) -> f64 {
        match self {
            LagFrame::Iso { c, .. } => *c,
            LagFrame::Two { c00, c11, .. } => {
                if i == 0 {
                    *c00
                } else {
                    *c11
                }
            }
            LagFrame::Gen { c, .. } => c[(i, i)],
        }
    }

    /// tr(A0 C^-1), used by the apex tail bound of the mean-value kernel.
    pub fn tr_a0_inv(&self, a0: &DMatrix<f64>) -> f64 {
        match self {
            LagFrame::Iso { n, c } => (0..*n).map(|i| a0[(i, i)]).sum::<f64>() / c,
            LagFrame::Two { c00, c01, c11, det } => {
                // (A0 C^-1)_00 + (A0 C^-1)_11 with C^-1 closed form.
                let i00 = c11 / det;
                let i01 = -c01 / det;
                let i11 = c00 / det;
                a0[(0, 0)] * i00 + a0[(0, 1)] * i01 + a0[(1, 0)] * i01 + a0[(1, 1)] * i11
            }
            LagFrame::Gen { inv, .. } => {
                let n = inv.nrows();
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        acc += a0[(i, j)] * inv[(j, i)];
                    }
                }
                acc
            }
        }
    }
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum())
        .collect()
}

/// Build an operator from a constant PSD diffusion matrix A0 and a linear
/// drift matrix B.
///
/// The fundamental solution is constructed from the covariance integral, not
/// trusted as a closed form: the model is rejected if C(tau) is singular for
/// tau > 0, and must pass mass-normalization, Chapman-Kolmogorov, and
/// caloricity self-checks before it is returned.
pub fn make_lp_operator(
    id: &str,
    a0: DMatrix<f64>,
    drift: DMatrix<f64>,
    dilation: Option<Dilation>,
) -> Result<LpOperator> {
    let n = a0.nrows();
    if a0.ncols() != n || drift.nrows() != n || drift.ncols() != n {
        return Err(Error::OperatorRejected(
            "A0 and B must be square matrices of the same size".into(),
        ));
    }
    if let Some(d) = &dilation {
        if d.weights.len() != n + 1 {
            return Err(Error::OperatorRejected(
                "dilation weights must cover every axis including time".into(),
            ));
        }
    }
    let asym = (&a0 - a0.transpose()).abs().max();
    if asym > 1e-12 {
        return Err(Error::OperatorRejected("A0 is not symmetric".into()));
    }
    let eigs = a0.clone().symmetric_eigen().eigenvalues;
    if eigs.iter().any(|l| *l < -1e-12) {
        return Err(Error::OperatorRejected(
            "A0 is not positive semidefinite".into(),
        ));
    }
    if a0[(0, 0)] <= 0.0 {
        return Err(Error::OperatorRejected("(A0)_11 must be positive".into()));
    }

    let kind = classify(&a0, &drift);
    let op = LpOperator {
        id: id.to_string(),
        spatial_dim: n,
        a0,
        drift_matrix: drift,
        kind,
        dilation,
    };

    // Hypoellipticity in this representation: C(tau) nonsingular for tau > 0.
    for tau in [1e-3, 1e-2, 0.1, 0.5, 1.0, 4.0] {
        let det = op.frame(tau).det();
        if !(det.is_finite() && det > 0.0) {
            return Err(Error::OperatorRejected(format!(
                "covariance C(tau) is singular at tau = {tau}; \
                 operator is not hypoelliptic in this representation"
            )));
        }
    }

    kernel_build_checks(&op)?;
    Ok(op)
}

fn classify(a0: &DMatrix<f64>, drift: &DMatrix<f64>) -> KernelKind {
    let n = a0.nrows();
    let is_zero_drift = drift.iter().all(|v| *v == 0.0);
    let is_identity = (0..n).all(|i| {
        (0..n).all(|j| {
            let want = if i == j { 1.0 } else { 0.0 };
            a0[(i, j)] == want
        })
    });
    if is_zero_drift && is_identity {
        return KernelKind::IsotropicHeat;
    }
    if n == 2
        && a0[(0, 0)] == 1.0
        && a0[(0, 1)] == 0.0
        && a0[(1, 0)] == 0.0
        && a0[(1, 1)] == 0.0
        && drift[(0, 0)] == 0.0
        && drift[(0, 1)] == 0.0
        && drift[(1, 0)] == 1.0
        && drift[(1, 1)] == 0.0
    {
        return KernelKind::Kolmogorov1d;
    }
    // Nilpotency scan: B^k = 0 for some k <= n.
    let scale = drift.abs().max().max(1.0);
    let mut powers = vec![DMatrix::identity(n, n)];
    let mut current = DMatrix::identity(n, n);
    for k in 1..=n {
        current = &current * drift;
        if current.abs().max() < 1e-14 * scale.powi(k as i32) {
            // C(tau) = sum over (k,l): tau^(k+l+1) / ((k+l+1) k! l!) B^k 2A0 (B^l)^T.
            let deg = powers.len();
            let mut cov_poly: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); 2 * deg - 1];
            let mut fact = vec![1.0f64];
            for k in 1..deg {
                fact.push(fact[k - 1] * k as f64);
            }
            for (k, bk) in powers.iter().enumerate() {
                for (l, bl) in powers.iter().enumerate() {
                    let p = k + l; // power tau^(p+1)
                    let coeff = 1.0 / ((p as f64 + 1.0) * fact[k] * fact[l]);
                    let term = bk * (a0 * 2.0) * bl.transpose() * coeff;
                    cov_poly[p] += term;
                }
            }
            return KernelKind::NilpotentPoly {
                b_powers: powers,
                cov_poly,
            };
        }
        powers.push(current.clone());
    }
    KernelKind::General
}

/// Build-time kernel self-checks: mass normalization, Chapman-Kolmogorov,
/// and finite-difference caloricity, all against dense tensor quadrature.
fn kernel_build_checks(op: &LpOperator) -> Result<()> {
    let n = op.spatial_dim;
    // Per-panel node counts; composite rules use 6 panels per axis.
    let nodes_per_axis: usize = match n {
        1 => 24,
        2 => 16,
        3 => 8,
        _ => 6,
    };

    // Mass: integral of Gamma over a +-10 sigma box at lag 0.5 equals 1.
    let tau = 0.5;
    let xi = vec![0.3; n];
    let mut z = xi.clone();
    z.push(tau);
    let mass = tensor_gauss_mass(op, &z, tau, nodes_per_axis);
    if (mass - 1.0).abs() > 1e-6 {
        return Err(Error::OperatorRejected(format!(
            "mass normalization failed: integral Gamma = {mass} at tau = {tau}"
        )));
    }

    // Chapman-Kolmogorov at lags 0.3 + 0.2. The product of the two kernels
    // is much narrower than either factor, so it needs a denser rule.
    let ck_err = chapman_kolmogorov_residual(op, 0.3, 0.2, nodes_per_axis * 2);
    if ck_err > 1e-6 {
        return Err(Error::OperatorRejected(format!(
            "Chapman-Kolmogorov failed: relative error {ck_err}"
        )));
    }

    // L Gamma(., zeta) = 0 away from the pole, by finite differences.
    let res = caloricity_residual(op, 0.5);
    if res > 1e-5 {
        return Err(Error::OperatorRejected(format!(
            "kernel is not L-caloric in its first slot: relative residual {res}"
        )));
    }
    Ok(())
}

/// Composite Gauss-Legendre axis: `panels` panels of `nodes` points each.
fn composite_axis(nodes: usize, panels: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::with_capacity(nodes * panels);
    let mut ws = Vec::with_capacity(nodes * panels);
    for p in 0..panels {
        let lo = a + (b - a) * p as f64 / panels as f64;
        let hi = a + (b - a) * (p + 1) as f64 / panels as f64;
        let (x, w) = linalg::gauss_legendre_on(nodes, lo, hi);
        xs.extend(x);
        ws.extend(w);
    }
    (xs, ws)
}

/// Tensor Gauss-Legendre integral of Gamma(z, .) over the spatial slice at
/// lag tau, on a +-8 sigma box around the flowed mean.
fn tensor_gauss_mass(op: &LpOperator, z: &[f64], tau: f64, nodes: usize) -> f64 {
    let n = op.spatial_dim;
    let frame = op.frame(tau);
    let mean = op.flow(tau, &z[..n]);
    let mut axes = Vec::with_capacity(n);
    for i in 0..n {
        let sigma = frame.diag(i).sqrt();
        axes.push(composite_axis(
            nodes,
            6,
            mean[i] - 8.0 * sigma,
            mean[i] + 8.0 * sigma,
        ));
    }
    let nodes = nodes * 6;
    let t_zeta = z[n] - tau;
    let mut total = 0.0;
    let mut idx = vec![0usize; n];
    let mut zeta = vec![0.0; n + 1];
    zeta[n] = t_zeta;
    loop {
        let mut w = 1.0;
        for d in 0..n {
            zeta[d] = axes[d].0[idx[d]];
            w *= axes[d].1[idx[d]];
        }
        total += w * op.log_gamma(z, &zeta).exp();
        let mut d = 0;
        loop {
            if d == n {
                return total;
            }
            idx[d] += 1;
            if idx[d] < nodes {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// Relative Chapman-Kolmogorov residual at a probe configuration.
pub(crate) fn chapman_kolmogorov_residual(
    op: &LpOperator,
    lag1: f64,
    lag2: f64,
    nodes: usize,
) -> f64 {
    let n = op.spatial_dim;
    let x: Vec<f64> = (0..n).map(|i| 0.2 - 0.1 * i as f64).collect();
    let xi_end: Vec<f64> = (0..n).map(|i| -0.15 + 0.05 * i as f64).collect();
    let t = 1.0;
    let t_mid = t - lag1;
    let t_end = t_mid - lag2;

    let mut z = x.clone();
    z.push(t);
    let mut zeta_end = xi_end.clone();
    zeta_end.push(t_end);

    let frame1 = op.frame(lag1);
    let mean1 = op.flow(lag1, &x);
    let mut axes = Vec::with_capacity(n);
    for i in 0..n {
        let sigma = frame1.diag(i).sqrt();
        axes.push(composite_axis(
            nodes,
            6,
            mean1[i] - 10.0 * sigma,
            mean1[i] + 10.0 * sigma,
        ));
    }
    let nodes = nodes * 6;
    let mut total = 0.0;
    let mut idx = vec![0usize; n];
    let mut mid = vec![0.0; n + 1];
    mid[n] = t_mid;
    'outer: loop {
        let mut w = 1.0;
        for d in 0..n {
            mid[d] = axes[d].0[idx[d]];
            w *= axes[d].1[idx[d]];
        }
        let lg = op.log_gamma(&z, &mid) + op.log_gamma(&mid, &zeta_end);
        total += w * lg.exp();
        let mut d = 0;
        loop {
            if d == n {
                break 'outer;
            }
            idx[d] += 1;
            if idx[d] < nodes {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
    let direct = op.log_gamma(&z, &zeta_end).exp();
    ((total - direct) / direct).abs()
}

/// Relative finite-difference residual of L applied to Gamma(., zeta) in the
/// first slot, at a probe point with the given lag.
pub(crate) fn caloricity_residual(op: &LpOperator, lag: f64) -> f64 {
    let n = op.spatial_dim;
    let mut zeta = vec![0.0; n + 1];
    for (i, v) in zeta.iter_mut().enumerate().take(n) {
        *v = 0.05 * (i as f64 + 1.0);
    }
    let mut probe = vec![0.0; n + 1];
    for (i, v) in probe.iter_mut().enumerate().take(n) {
        *v = 0.1 + 0.2 * i as f64;
    }
    probe[n] = zeta[n] + lag;

    let opc = op.clone();
    let zeta_c = zeta.clone();
    let field = SmoothField::new("gamma_first_slot", move |z| {
        opc.log_gamma(z, &zeta_c).exp()
    });
    let z = SpaceTimePoint::from(probe.clone());
    let lu = op.apply_operator(&field, &z).expect("probe evaluation");

    // Scale: sum of absolute term magnitudes at the probe.
    let grad = field.gradient_at(&probe).unwrap();
    let hess = field.hessian_at(&probe).unwrap();
    let b = op.drift(&probe);
    let mut scale = 0.0;
    for i in 0..n {
        for j in 0..n {
            scale += (op.a0[(i, j)] * hess[(i, j)]).abs();
        }
    }
    for (bi, gi) in b.iter().zip(&grad) {
        scale += (bi * gi).abs();
    }
    lu.abs() / scale.max(1e-300)
}
