//! Scalar fields: C^2 test data with optional analytic derivatives, and
//! compactly supported source terms.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::BoundingBox;

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type HessFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// A scalar field with optional analytic gradient and Hessian.
///
/// When derivatives are absent they are recovered with central finite
/// differences at step `h = 1e-4 * (1 + |z|)` plus one Richardson
/// refinement, unless the fallback has been disabled.
#[derive(Clone)]
pub struct SmoothField {
    name: String,
    value: ValueFn,
    gradient: Option<GradFn>,
    hessian: Option<HessFn>,
    pub support_box: Option<BoundingBox>,
    fd_fallback: bool,
}

impl fmt::Debug for SmoothField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothField")
            .field("name", &self.name)
            .field("has_gradient", &self.gradient.is_some())
            .field("has_hessian", &self.hessian.is_some())
            .finish()
    }
}

impl SmoothField {
    pub fn new(name: impl Into<String>, value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
            gradient: None,
            hessian: None,
            support_box: None,
            fd_fallback: true,
        }
    }

    pub fn with_gradient(
        mut self,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    pub fn with_hessian(
        mut self,
        hessian: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.hessian = Some(Arc::new(hessian));
        self
    }

    pub fn with_support_box(mut self, support: BoundingBox) -> Self {
        self.support_box = Some(support);
        self
    }

    /// Disable the finite-difference fallback; derivative requests then fail
    /// unless analytic derivatives were supplied.
    pub fn without_fd_fallback(mut self) -> Self {
        self.fd_fallback = false;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        (self.value)(z)
    }

    pub fn gradient_at(&self, z: &[f64]) -> Result<Vec<f64>> {
        if let Some(g) = &self.gradient {
            return Ok(g(z));
        }
        if !self.fd_fallback {
            return Err(Error::MissingDerivatives);
        }
        Ok(self.fd_gradient(z))
    }

    pub fn hessian_at(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        if let Some(h) = &self.hessian {
            return Ok(h(z));
        }
        if !self.fd_fallback {
            return Err(Error::MissingDerivatives);
        }
        Ok(self.fd_hessian(z))
    }

    fn fd_step(z: &[f64]) -> f64 {
        let norm = z.iter().map(|c| c * c).sum::<f64>().sqrt();
        1e-4 * (1.0 + norm)
    }

    /// Central differences with one Richardson refinement.
    fn fd_gradient(&self, z: &[f64]) -> Vec<f64> {
        let h = Self::fd_step(z);
        let mut out = vec![0.0; z.len()];
        let mut p = z.to_vec();
        for d in 0..z.len() {
            let coarse = self.central_diff(&mut p, z, d, h);
            let fine = self.central_diff(&mut p, z, d, 0.5 * h);
            out[d] = (4.0 * fine - coarse) / 3.0;
        }
        out
    }

    fn central_diff(&self, p: &mut [f64], z: &[f64], d: usize, h: f64) -> f64 {
        p.copy_from_slice(z);
        p[d] = z[d] + h;
        let fp = (self.value)(p);
        p[d] = z[d] - h;
        let fm = (self.value)(p);
        p[d] = z[d];
        (fp - fm) / (2.0 * h)
    }

    fn fd_hessian(&self, z: &[f64]) -> DMatrix<f64> {
        let h = Self::fd_step(z);
        let n = z.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let coarse = self.second_diff(z, i, j, h);
                let fine = self.second_diff(z, i, j, 0.5 * h);
                let v = (4.0 * fine - coarse) / 3.0;
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    fn second_diff(&self, z: &[f64], i: usize, j: usize, h: f64) -> f64 {
        let mut p = z.to_vec();
        if i == j {
            let f0 = (self.value)(&p);
            p[i] = z[i] + h;
            let fp = (self.value)(&p);
            p[i] = z[i] - h;
            let fm = (self.value)(&p);
            (fp - 2.0 * f0 + fm) / (h * h)
        } else {
            let mut eval = |si: f64, sj: f64| {
                p[i] = z[i] + si * h;
                p[j] = z[j] + sj * h;
                let v = (self.value)(&p);
                p[i] = z[i];
                p[j] = z[j];
                v
            };
            (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * h * h)
        }
    }
}

/// Shape of a built-in compactly supported source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceShape {
    /// C-infinity bump `a * exp(1 - 1/(1 - |q|^2))` on the ellipsoid inscribed
    /// in the support box (q = box-normalized coordinates).
    Bump,
    /// Continuous but non-smooth pyramid `a * max(0, 1 - max_i |q_i|)`.
    Tent,
}

/// A compactly supported continuous source term f with a mandatory support box.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SourceField {
    pub shape: SourceShape,
    pub amplitude: f64,
    pub support_box: BoundingBox,
}

impl SourceField {
    pub fn bump(amplitude: f64, support_box: BoundingBox) -> Self {
        Self {
            shape: SourceShape::Bump,
            amplitude,
            support_box,
        }
    }

    pub fn tent(amplitude: f64, support_box: BoundingBox) -> Self {
        Self {
            shape: SourceShape::Tent,
            amplitude,
            support_box,
        }
    }

    /// Box-normalized coordinates: q_i in [-1, 1] on the support box.
    fn normalized(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.support_box.lo.iter().zip(&self.support_box.hi))
            .map(|(x, (l, h))| (2.0 * x - l - h) / (h - l))
            .collect()
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        let q = self.normalized(z);
        match self.shape {
            SourceShape::Bump => {
                let rho2: f64 = q.iter().map(|v| v * v).sum();
                if rho2 >= 1.0 {
                    0.0
                } else {
                    self.amplitude * (1.0 - 1.0 / (1.0 - rho2)).exp()
                }
            }
            SourceShape::Tent => {
                let linf = q.iter().map(|v| v.abs()).fold(0.0, f64::max);
                self.amplitude * (1.0 - linf).max(0.0)
            }
        }
    }

    /// Supremum of |f|, attained at the support-box center.
    pub fn sup_abs(&self) -> f64 {
        self.amplitude.abs()
    }

    pub fn as_smooth_field(&self) -> SmoothField {
        let this = self.clone();
        let mut field = SmoothField::new(format!("{:?}", self.shape), move |z| this.value(z))
            .with_support_box(self.support_box.clone());
        if self.shape == SourceShape::Bump {
            let g = self.clone();
            let h = self.clone();
            field = field
                .with_gradient(move |z| g.bump_gradient(z))
                .with_hessian(move |z| h.bump_hessian(z));
        }
        field
    }

    fn bump_gradient(&self, z: &[f64]) -> Vec<f64> {
        let q = self.normalized(z);
        let rho2: f64 = q.iter().map(|v| v * v).sum();
        if rho2 >= 1.0 {
            return vec![0.0; z.len()];
        }
        let phi = self.amplitude * (1.0 - 1.0 / (1.0 - rho2)).exp();
        let s = 1.0 / (1.0 - rho2);
        let widths = self.support_box.widths();
        q.iter()
            .zip(&widths)
            .map(|(qi, w)| {
                // d q_i / d z_i = 2 / w
                -2.0 * qi * phi * s * s * (2.0 / w)
            })
            .collect()
    }

    fn bump_hessian(&self, z: &[f64]) -> DMatrix<f64> {
        let n = z.len();
        let q = self.normalized(z);
        let rho2: f64 = q.iter().map(|v| v * v).sum();
        let mut out = DMatrix::zeros(n, n);
        if rho2 >= 1.0 {
            return out;
        }
        let phi = self.amplitude * (1.0 - 1.0 / (1.0 - rho2)).exp();
        let s = 1.0 / (1.0 - rho2);
        let widths = self.support_box.widths();
        for i in 0..n {
            for j in 0..n {
                let delta = if i == j { 1.0 } else { 0.0 };
                let d2q = -2.0 * delta * s * s + 4.0 * q[i] * q[j] * s.powi(4)
                    - 8.0 * q[i] * q[j] * s.powi(3);
                out[(i, j)] = phi * d2q * (2.0 / widths[i]) * (2.0 / widths[j]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fd_gradient_matches_polynomial() {
        let f = SmoothField::new("poly", |z| z[0] * z[0] * z[1] + 3.0 * z[1]);
        let g = f.gradient_at(&[1.5, -2.0]).unwrap();
        assert_relative_eq!(g[0], 2.0 * 1.5 * -2.0, max_relative = 1e-7);
        assert_relative_eq!(g[1], 1.5 * 1.5 + 3.0, max_relative = 1e-7);
        let h = f.hessian_at(&[1.5, -2.0]).unwrap();
        assert_relative_eq!(h[(0, 0)], -4.0, max_relative = 1e-5);
        assert_relative_eq!(h[(0, 1)], 3.0, max_relative = 1e-5);
    }

    #[test]
    fn disabled_fallback_errors() {
        let f = SmoothField::new("v", |z| z[0]).without_fd_fallback();
        assert!(f.gradient_at(&[0.0]).is_err());
        let g = SmoothField::new("v", |z| z[0])
            .with_gradient(|_| vec![1.0])
            .without_fd_fallback();
        assert!(g.gradient_at(&[0.0]).is_ok());
        assert!(g.hessian_at(&[0.0]).is_err());
    }

    /// Supplied analytic derivatives must agree with central finite
    /// differences at random probe points (relative tolerance 1e-4).
    #[test]
    fn bump_derivatives_match_finite_differences() {
        let support = BoundingBox::new(vec![-1.0, -1.0], vec![1.0, 0.0]).unwrap();
        let f = SourceField::bump(2.0, support);
        let field = f.as_smooth_field();
        let fd_only = SmoothField::new("fd", {
            let f = f.clone();
            move |z| f.value(z)
        });
        let probes = [
            [0.2, -0.5],
            [-0.4, -0.3],
            [0.55, -0.72],
            [0.0, -0.5],
            [0.31, -0.11],
        ];
        for p in probes {
            let ga = field.gradient_at(&p).unwrap();
            let gf = fd_only.gradient_at(&p).unwrap();
            for (a, b) in ga.iter().zip(&gf) {
                assert_relative_eq!(a, b, max_relative = 1e-4, epsilon = 1e-8);
            }
            let ha = field.hessian_at(&p).unwrap();
            let hf = fd_only.hessian_at(&p).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    assert_relative_eq!(
                        ha[(i, j)],
                        hf[(i, j)],
                        max_relative = 1e-4,
                        epsilon = 1e-6
                    );
                }
            }
        }
    }

    #[test]
    fn sources_vanish_outside_support_box() {
        let support = BoundingBox::new(vec![-1.0, -1.0], vec![1.0, 0.0]).unwrap();
        for f in [
            SourceField::bump(1.0, support.clone()),
            SourceField::tent(1.0, support.clone()),
        ] {
            // Shell of points on and outside the box boundary.
            for p in [[1.0, -0.5], [-1.0, 0.0], [0.0, 0.1], [1.5, -0.5], [0.0, -1.0]] {
                assert_eq!(f.value(&p), 0.0, "{:?} at {:?}", f.shape, p);
            }
            assert_eq!(f.value(&support.center()), f.amplitude);
        }
    }

    #[test]
    fn tent_is_continuous_at_kink() {
        let support = BoundingBox::new(vec![-1.0], vec![1.0]).unwrap();
        let f = SourceField::tent(1.0, support);
        let eps = 1e-9;
        assert!((f.value(&[0.5 + eps]) - f.value(&[0.5 - eps])).abs() < 1e-8);
    }
}
