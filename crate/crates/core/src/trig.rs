//! Finite Fourier series with period 1.
//!
//! Coefficients are stored sparsely by harmonic index `q`, representing
//! `Σ_q c_q e^{2πiqx}`. Products and derivatives stay finite, which is what
//! keeps the Galerkin assembly and the first-order reduction exact.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use faer::Mat;
use num_complex::Complex64;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

fn harmonic(q: i64, x: f64) -> Complex64 {
    Complex64::from_polar(1.0, TAU * q as f64 * x)
}

/// Scalar trigonometric polynomial.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrigPoly {
    coeffs: BTreeMap<i64, Complex64>,
}

impl TrigPoly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: Complex64) -> Self {
        Self::from_coeffs([(0, c)])
    }

    pub fn from_coeffs(coeffs: impl IntoIterator<Item = (i64, Complex64)>) -> Self {
        let mut out = Self::zero();
        for (q, c) in coeffs {
            *out.coeffs.entry(q).or_insert(ZERO) += c;
        }
        out.prune();
        out
    }

    fn prune(&mut self) {
        self.coeffs.retain(|_, c| *c != ZERO);
    }

    pub fn coeff(&self, q: i64) -> Complex64 {
        self.coeffs.get(&q).copied().unwrap_or(ZERO)
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, Complex64)> + '_ {
        self.coeffs.iter().map(|(&q, &c)| (q, c))
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// `∫₀¹ p(x) dx`.
    pub fn mean(&self) -> Complex64 {
        self.coeff(0)
    }

    /// Largest `|q|` with a nonzero coefficient.
    pub fn bandwidth(&self) -> usize {
        self.coeffs.keys().map(|q| q.unsigned_abs() as usize).max().unwrap_or(0)
    }

    pub fn eval(&self, x: f64) -> Complex64 {
        self.iter().map(|(q, c)| c * harmonic(q, x)).sum()
    }

    pub fn derivative(&self) -> Self {
        Self::from_coeffs(
            self.iter().map(|(q, c)| (q, c * Complex64::new(0.0, TAU * q as f64))),
        )
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self::from_coeffs(self.iter().map(|(q, c)| (q, c * s)))
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_coeffs(self.iter().chain(other.iter()))
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = BTreeMap::new();
        for (q1, c1) in self.iter() {
            for (q2, c2) in other.iter() {
                *out.entry(q1 + q2).or_insert(ZERO) += c1 * c2;
            }
        }
        Self::from_coeffs(out)
    }
}

/// `m × m` matrix-valued trigonometric polynomial.
#[derive(Clone, Debug, PartialEq)]
pub struct MatTrigPoly {
    dim: usize,
    coeffs: BTreeMap<i64, Mat<Complex64>>,
}

impl MatTrigPoly {
    pub fn zero(dim: usize) -> Self {
        Self { dim, coeffs: BTreeMap::new() }
    }

    pub fn constant(c: Mat<Complex64>) -> Self {
        let dim = c.nrows();
        let mut out = Self::zero(dim);
        out.add_coeff(0, c.as_ref());
        out
    }

    /// `p(x) I_m`.
    pub fn scalar_identity(p: &TrigPoly, dim: usize) -> Self {
        let mut out = Self::zero(dim);
        for (q, c) in p.iter() {
            out.add_coeff(q, (Mat::<Complex64>::identity(dim, dim) * faer::Scale(c)).as_ref());
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn add_coeff(&mut self, q: i64, c: faer::MatRef<'_, Complex64>) {
        assert_eq!((c.nrows(), c.ncols()), (self.dim, self.dim), "coefficient shape mismatch");
        let entry = self.coeffs.entry(q).or_insert_with(|| Mat::zeros(self.dim, self.dim));
        *entry += c;
        if entry.norm_max() == 0.0 {
            self.coeffs.remove(&q);
        }
    }

    pub fn coeff(&self, q: i64) -> Option<&Mat<Complex64>> {
        self.coeffs.get(&q)
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, &Mat<Complex64>)> + '_ {
        self.coeffs.iter().map(|(&q, c)| (q, c))
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn mean(&self) -> Mat<Complex64> {
        self.coeff(0).cloned().unwrap_or_else(|| Mat::zeros(self.dim, self.dim))
    }

    pub fn bandwidth(&self) -> usize {
        self.coeffs.keys().map(|q| q.unsigned_abs() as usize).max().unwrap_or(0)
    }

    pub fn eval(&self, x: f64) -> Mat<Complex64> {
        let mut out = Mat::zeros(self.dim, self.dim);
        for (q, c) in self.iter() {
            out += c * faer::Scale(harmonic(q, x));
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (q, c) in other.iter() {
            out.add_coeff(q, c.as_ref());
        }
        out
    }

    /// Product with a scalar trigonometric polynomial.
    pub fn mul_scalar(&self, p: &TrigPoly) -> Self {
        let mut out = Self::zero(self.dim);
        for (q1, c1) in self.iter() {
            for (q2, c2) in p.iter() {
                out.add_coeff(q1 + q2, (c1 * faer::Scale(c2)).as_ref());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn product_and_derivative_match_pointwise() {
        let p = TrigPoly::from_coeffs([(-1, c(0.5, 0.0)), (0, c(1.0, 2.0)), (2, c(0.0, -0.3))]);
        let q = TrigPoly::from_coeffs([(1, c(1.5, 0.1)), (-2, c(0.2, 0.2))]);
        let pq = p.mul(&q);
        let dp = p.derivative();
        for i in 0..17 {
            let x = i as f64 / 17.0 + 0.013;
            assert!((pq.eval(x) - p.eval(x) * q.eval(x)).norm() < 1e-13);
            let h = 1e-5;
            let fd = (p.eval(x + h) - p.eval(x - h)) / (2.0 * h);
            assert!((dp.eval(x) - fd).norm() < 1e-7);
        }
        assert_eq!(pq.bandwidth(), 3);
    }

    #[test]
    fn cancellation_prunes_coefficients() {
        let p = TrigPoly::from_coeffs([(3, c(1.0, 0.0))]);
        let sum = p.add(&p.scale(c(-1.0, 0.0)));
        assert!(sum.is_zero());
        assert_eq!(sum.bandwidth(), 0);
    }

    #[test]
    fn mean_of_nonconstant_harmonics_is_zero() {
        let mut b = Mat::<Complex64>::zeros(2, 2);
        b[(0, 1)] = c(1.0, 0.0);
        let mut p = MatTrigPoly::constant(Mat::from_fn(2, 2, |i, j| if i == j { c(1.0 + 3.0 * i as f64, 0.0) } else { c(0.0, 0.0) }));
        p.add_coeff(1, (&b * faer::Scale(c(0.1, 0.0))).as_ref());
        let mean = p.mean();
        assert_eq!(mean[(0, 0)], c(1.0, 0.0));
        assert_eq!(mean[(1, 1)], c(4.0, 0.0));
        assert_eq!(mean[(0, 1)], c(0.0, 0.0));
        // uniform-grid average reproduces the mean exactly once N > 2 * bandwidth
        let n = 5;
        let mut avg = Mat::<Complex64>::zeros(2, 2);
        for i in 0..n {
            avg += p.eval(i as f64 / n as f64) * faer::Scale(c(1.0 / n as f64, 0.0));
        }
        assert!((avg - mean).norm_max() < 1e-15);
    }
}
