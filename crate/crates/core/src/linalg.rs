//! Two-dimensional vector and symmetric-matrix helpers.

use serde::{Deserialize, Serialize};

pub const DIM: usize = 2;

pub type Vec2 = [f64; DIM];

#[inline]
pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
pub fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

#[inline]
pub fn is_finite(a: Vec2) -> bool {
    a[0].is_finite() && a[1].is_finite()
}

/// Row-major 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([[1.0, 0.0], [0.0, 1.0]]);

    pub fn diag(a: f64, b: f64) -> Self {
        Mat2([[a, 0.0], [0.0, b]])
    }

    pub fn scaled_identity(s: f64) -> Self {
        Mat2::diag(s, s)
    }

    pub fn is_symmetric(&self) -> bool {
        let m = self.0;
        (m[0][1] - m[1][0]).abs() <= 1e-12 * (1.0 + m[0][1].abs().max(m[1][0].abs()))
    }

    pub fn add_identity(&self, s: f64) -> Self {
        let m = self.0;
        Mat2([[m[0][0] + s, m[0][1]], [m[1][0], m[1][1] + s]])
    }

    pub fn det(&self) -> f64 {
        let m = self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn mul_vec(&self, v: Vec2) -> Vec2 {
        let m = self.0;
        [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
    }

    /// Lower Cholesky factor, `None` unless symmetric positive definite.
    pub fn cholesky(&self) -> Option<Mat2> {
        if !self.is_symmetric() {
            return None;
        }
        let m = self.0;
        if !(m[0][0] > 0.0) {
            return None;
        }
        let l00 = m[0][0].sqrt();
        let l10 = m[1][0] / l00;
        let rest = m[1][1] - l10 * l10;
        if !(rest > 0.0) {
            return None;
        }
        Some(Mat2([[l00, 0.0], [l10, rest.sqrt()]]))
    }

    pub fn inverse(&self) -> Mat2 {
        let m = self.0;
        let d = self.det();
        Mat2([[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]])
    }
}

/// Precomputed Gaussian `N(mean, cov)` for repeated density evaluations.
#[derive(Debug, Clone, Copy)]
pub struct Gaussian {
    pub mean: Vec2,
    pub precision: Mat2,
    pub log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: Vec2, cov: Mat2) -> Self {
        let log_norm = -(DIM as f64) * 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * cov.det().ln();
        Gaussian {
            mean,
            precision: cov.inverse(),
            log_norm,
        }
    }

    pub fn log_pdf(&self, x: Vec2) -> f64 {
        let d = sub(x, self.mean);
        let q = self.precision.mul_vec(d);
        self.log_norm - 0.5 * (d[0] * q[0] + d[1] * q[1])
    }

    /// Gradient of the log density: `-precision * (x - mean)`.
    pub fn grad_log_pdf(&self, x: Vec2) -> Vec2 {
        scale(self.precision.mul_vec(sub(x, self.mean)), -1.0)
    }
}

pub fn mahalanobis(x: Vec2, mean: Vec2, cov: &Mat2) -> f64 {
    let d = sub(x, mean);
    let q = cov.inverse().mul_vec(d);
    (d[0] * q[0] + d[1] * q[1]).sqrt()
}

/// `log(sum(exp(v)))` evaluated stably.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_rejects_indefinite_and_asymmetric() {
        assert!(Mat2([[1.0, 2.0], [2.0, 1.0]]).cholesky().is_none());
        assert!(Mat2([[1.0, 0.1], [0.0, 1.0]]).cholesky().is_none());
        assert!(Mat2([[0.0, 0.0], [0.0, 1.0]]).cholesky().is_none());
        let l = Mat2([[4.0, 2.0], [2.0, 3.0]]).cholesky().unwrap();
        assert_eq!(l.0, [[2.0, 0.0], [1.0, 2f64.sqrt()]]);
    }

    #[test]
    fn gaussian_log_pdf_standard() {
        let g = Gaussian::new([0.0, 0.0], Mat2::IDENTITY);
        let expect = -(2.0 * std::f64::consts::PI).ln() - 0.5 * 2.0;
        assert!((g.log_pdf([1.0, 1.0]) - expect).abs() < 1e-14);
        assert_eq!(g.grad_log_pdf([1.0, -2.0]), [-1.0, 2.0]);
    }

    #[test]
    fn log_sum_exp_large_values() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
