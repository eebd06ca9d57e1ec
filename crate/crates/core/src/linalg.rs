//! Small dense linear-algebra helpers for the covariance machinery.
//!
//! The built-in models have 1 or 2 spatial dimensions, so the hot paths use
//! closed forms; anything larger falls back to nalgebra factorizations.

use nalgebra::DMatrix;

/// Determinant of a symmetric positive (semi)definite matrix.
pub fn spd_det(m: &DMatrix<f64>) -> f64 {
    match m.nrows() {
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        _ => m.clone().cholesky().map_or(0.0, |c| {
            let l = c.l();
            let mut d = 1.0;
            for i in 0..l.nrows() {
                d *= l[(i, i)] * l[(i, i)];
            }
            d
        }),
    }
}

/// Inverse of a symmetric positive definite matrix. Returns `None` when the
/// matrix is numerically singular.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    match m.nrows() {
        1 => {
            let a = m[(0, 0)];
            (a > 0.0).then(|| DMatrix::from_element(1, 1, 1.0 / a))
        }
        2 => {
            let det = spd_det(m);
            if det <= 0.0 {
                return None;
            }
            Some(DMatrix::from_row_slice(
                2,
                2,
                &[
                    m[(1, 1)] / det,
                    -m[(0, 1)] / det,
                    -m[(1, 0)] / det,
                    m[(0, 0)] / det,
                ],
            ))
        }
        _ => m.clone().cholesky().map(|c| c.inverse()),
    }
}

/// Symmetric square root of a symmetric positive semidefinite matrix.
pub fn spd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    match m.nrows() {
        1 => DMatrix::from_element(1, 1, m[(0, 0)].max(0.0).sqrt()),
        2 => {
            // S = (C + sqrt(det) I) / sqrt(trace + 2 sqrt(det))
            let det = spd_det(m).max(0.0);
            let s = det.sqrt();
            let trace = m[(0, 0)] + m[(1, 1)];
            let denom = (trace + 2.0 * s).sqrt();
            if denom == 0.0 {
                return DMatrix::zeros(2, 2);
            }
            let mut out = m.clone();
            out[(0, 0)] += s;
            out[(1, 1)] += s;
            out / denom
        }
        _ => {
            let eig = m.clone().symmetric_eigen();
            let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
        }
    }
}

/// Matrix exponential by scaling and squaring with a Taylor series.
/// Adequate for the small drift matrices used here.
pub fn matrix_exp(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = m.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scaled = m / 2f64.powi(squarings as i32);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-like initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        nodes[n - 1 - i] = x;
        weights[n - 1 - i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Gauss-Legendre rule mapped to [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let (xs, ws) = gauss_legendre(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (
        xs.iter().map(|x| mid + half * x).collect(),
        ws.iter().map(|w| w * half).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spd_helpers_2x2() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let inv = spd_inverse(&m).unwrap();
        let prod = &m * &inv;
        assert_relative_eq!(prod[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(prod[(1, 0)], 0.0, epsilon = 1e-12);
        let s = spd_sqrt(&m);
        let back = &s * &s;
        assert_relative_eq!(back[(0, 0)], m[(0, 0)], epsilon = 1e-12);
        assert_relative_eq!(back[(0, 1)], m[(0, 1)], epsilon = 1e-12);
        assert_relative_eq!(spd_det(&m), 1.75, epsilon = 1e-14);
    }

    #[test]
    fn spd_helpers_3x3_match_nalgebra() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.2, 1.0, 3.0, 0.1, 0.2, 0.1, 2.0]);
        let s = spd_sqrt(&m);
        let back = &s * &s;
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(back[(i, j)], m[(i, j)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn matrix_exp_nilpotent() {
        // B = [[0,0],[1,0]] gives exp(tB) = I + tB exactly.
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let e = matrix_exp(&(b * 0.7));
        assert_relative_eq!(e[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(e[(1, 0)], 0.7, epsilon = 1e-14);
        assert_relative_eq!(e[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn matrix_exp_scalar() {
        let m = DMatrix::from_element(1, 1, -2.0);
        let e = matrix_exp(&m);
        assert_relative_eq!(e[(0, 0)], (-2.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        // An n-point rule is exact through degree 2n-1.
        let (xs, ws) = gauss_legendre_on(8, 0.0, 2.0);
        for k in 0..16 {
            let num: f64 = xs
                .iter()
                .zip(&ws)
                .map(|(x, w)| w * x.powi(k as i32))
                .sum();
            let exact = 2f64.powi(k as i32 + 1) / (k as f64 + 1.0);
            assert_relative_eq!(num, exact, max_relative = 1e-12);
        }
    }

    #[test]
    fn gauss_legendre_64_weights_sum_to_interval() {
        let (_, ws) = gauss_legendre_on(64, 0.0, 1.0);
        let total: f64 = ws.iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-13);
    }
}
