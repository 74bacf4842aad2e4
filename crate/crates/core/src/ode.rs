//! Dormand–Prince 5(4) integrator for complex linear systems.

use num_complex::Complex64;

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the 5th and embedded 4th order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

pub const MAX_STEPS: usize = 1_000_000;

#[derive(Clone, Debug)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    /// Sum of accepted local error estimates, in absolute units.
    pub est_error: f64,
}

/// Integrate `y' = f(x, y)` from `x0` to `x1` with a PI step controller.
///
/// The local error is measured in the max norm relative to
/// `max(1, ‖y‖_max)`, which suits fundamental matrices whose entries grow
/// exponentially with `|λ|^{1/n}`.
pub fn integrate<F>(f: F, x0: f64, x1: f64, y0: Vec<Complex64>, tol: f64, label: &str) -> Result<(Vec<Complex64>, OdeStats)>
where
    F: Fn(f64, &[Complex64], &mut [Complex64]),
{
    let n = y0.len();
    let zero = Complex64::new(0.0, 0.0);
    let mut y = y0;
    let mut k: Vec<Vec<Complex64>> = (0..7).map(|_| vec![zero; n]).collect();
    let mut tmp = vec![zero; n];
    let mut y_new = vec![zero; n];
    let mut x = x0;
    let span = x1 - x0;
    let mut h = initial_step(&f, x0, &y, span, tol, &mut k);
    let mut stats = OdeStats { accepted: 0, rejected: 0, est_error: 0.0 };
    let mut err_prev = 1e-4f64;
    f(x, &y, &mut k[0]);
    let mut steps = 0usize;
    while x < x1 {
        steps += 1;
        if steps > MAX_STEPS || h < 1e-14 * span.abs().max(1.0) {
            return Err(Error::IntegratorStall { x, step: h, lambda: label.to_string() });
        }
        if x + h > x1 {
            h = x1 - x;
        }
        stage(&mut tmp, &y, h, &[(A21, &k[0])]);
        f(x + C2 * h, &tmp, &mut k[1]);
        stage(&mut tmp, &y, h, &[(A31, &k[0]), (A32, &k[1])]);
        f(x + C3 * h, &tmp, &mut k[2]);
        stage(&mut tmp, &y, h, &[(A41, &k[0]), (A42, &k[1]), (A43, &k[2])]);
        f(x + C4 * h, &tmp, &mut k[3]);
        stage(&mut tmp, &y, h, &[(A51, &k[0]), (A52, &k[1]), (A53, &k[2]), (A54, &k[3])]);
        f(x + C5 * h, &tmp, &mut k[4]);
        stage(&mut tmp, &y, h, &[(A61, &k[0]), (A62, &k[1]), (A63, &k[2]), (A64, &k[3]), (A65, &k[4])]);
        f(x + h, &tmp, &mut k[5]);
        stage(&mut y_new, &y, h, &[(B1, &k[0]), (B3, &k[2]), (B4, &k[3]), (B5, &k[4]), (B6, &k[5])]);
        f(x + h, &y_new, &mut k[6]);

        let scale = y.iter().chain(y_new.iter()).map(|v| v.norm()).fold(1.0f64, f64::max);
        let mut err_abs = 0.0f64;
        for i in 0..n {
            let e = h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
            err_abs = err_abs.max(e.norm());
        }
        let err = err_abs / (tol * scale);
        if err <= 1.0 {
            x += h;
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            stats.accepted += 1;
            stats.est_error += err_abs;
            let fac = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.7 / 5.0) * err_prev.powf(0.4 / 5.0) };
            h *= fac.clamp(0.2, 5.0);
            err_prev = err.max(1e-4);
        } else {
            stats.rejected += 1;
            let fac = if err.is_finite() { 0.9 * err.powf(-1.0 / 5.0) } else { 0.1 };
            h *= fac.clamp(0.1, 0.9);
        }
    }
    Ok((y, stats))
}

fn stage(out: &mut [Complex64], y: &[Complex64], h: f64, terms: &[(f64, &Vec<Complex64>)]) {
    for i in 0..out.len() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (a, k) in terms {
            acc += *a * k[i];
        }
        out[i] = y[i] + h * acc;
    }
}

fn initial_step<F>(f: &F, x0: f64, y0: &[Complex64], span: f64, tol: f64, k: &mut [Vec<Complex64>]) -> f64
where
    F: Fn(f64, &[Complex64], &mut [Complex64]),
{
    f(x0, y0, &mut k[0]);
    let d0 = y0.iter().map(|v| v.norm()).fold(1.0f64, f64::max);
    let d1 = k[0].iter().map(|v| v.norm()).fold(0.0f64, f64::max);
    let h = if d1 < 1e-12 { 1e-2 } else { 0.01 * d0 / d1 };
    (h * tol.powf(0.2) / 1e-2f64.powf(0.2)).clamp(1e-10, span.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator() {
        let w = 7.3;
        let f = |_x: f64, y: &[Complex64], dy: &mut [Complex64]| {
            dy[0] = y[1];
            dy[1] = -w * w * y[0];
        };
        let y0 = vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)];
        let (y, stats) = integrate(f, 0.0, 1.0, y0, 1e-12, "test").unwrap();
        assert!((y[0].re - w.cos()).abs() < 1e-10);
        assert!((y[1].re + w * w.sin()).abs() < 1e-9);
        assert!(stats.accepted > 10);
    }

    #[test]
    fn complex_exponential_growth() {
        let a = Complex64::new(20.0, 35.0);
        let f = |_x: f64, y: &[Complex64], dy: &mut [Complex64]| dy[0] = a * y[0];
        let (y, _) = integrate(f, 0.0, 1.0, vec![Complex64::new(1.0, 0.0)], 1e-12, "test").unwrap();
        let exact = a.exp();
        assert!((y[0] - exact).norm() / exact.norm() < 1e-9);
    }

    #[test]
    fn stall_on_impossible_tolerance() {
        let f = |_x: f64, y: &[Complex64], dy: &mut [Complex64]| dy[0] = Complex64::new(0.0, 1e9) * y[0];
        let r = integrate(f, 0.0, 1.0, vec![Complex64::new(1.0, 0.0)], 1e-13, "big");
        assert!(matches!(r, Err(Error::IntegratorStall { .. })));
    }
}
