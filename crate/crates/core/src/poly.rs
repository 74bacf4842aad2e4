//! Dense complex polynomials in ascending-power storage.

use faer::Mat;
use num_complex::Complex64;

use crate::error::Result;
use crate::linalg;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// `Π (z - r_i)`, coefficients ascending.
pub fn from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut c = vec![ONE];
    for &r in roots {
        let mut next = vec![ZERO; c.len() + 1];
        for (i, &a) in c.iter().enumerate() {
            next[i + 1] += a;
            next[i] -= a * r;
        }
        c = next;
    }
    c
}

pub fn eval(c: &[Complex64], z: Complex64) -> Complex64 {
    c.iter().rev().fold(ZERO, |acc, &a| acc * z + a)
}

pub fn derivative(c: &[Complex64]) -> Vec<Complex64> {
    c.iter().enumerate().skip(1).map(|(i, &a)| a * i as f64).collect()
}

/// Roots by eigenvalues of the companion matrix; exact leading zeros are
/// trimmed first.
pub fn roots(c: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut deg = c.len().saturating_sub(1);
    while deg > 0 && c[deg] == ZERO {
        deg -= 1;
    }
    if deg == 0 {
        return Ok(Vec::new());
    }
    let lead = c[deg];
    let comp = Mat::from_fn(deg, deg, |i, j| {
        if i == 0 {
            -c[deg - 1 - j] / lead
        } else if i == j + 1 {
            ONE
        } else {
            ZERO
        }
    });
    linalg::eigenvalues(comp.as_ref())
}

/// Sylvester-matrix resultant of `a` (degree `p`) and `b` (degree `q`),
/// treating the stored lengths as the formal degrees.
pub fn resultant(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    let p = a.len() - 1;
    let q = b.len() - 1;
    if p == 0 {
        return pow(a[0], q);
    }
    if q == 0 {
        return pow(b[0], p);
    }
    let n = p + q;
    let mut s = Mat::<Complex64>::zeros(n, n);
    // Rows hold descending coefficients shifted right.
    for r in 0..q {
        for i in 0..=p {
            s[(r, r + i)] = a[p - i];
        }
    }
    for r in 0..p {
        for i in 0..=q {
            s[(q + r, r + i)] = b[q - i];
        }
    }
    linalg::det(s.as_ref())
}

fn pow(z: Complex64, e: usize) -> Complex64 {
    (0..e).fold(ONE, |acc, _| acc * z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn roots_round_trip() {
        let r = vec![c(1.0, 0.5), c(-2.0, 0.0), c(0.3, -1.1), c(0.0, 2.0)];
        let p = from_roots(&r);
        assert_eq!(p.len(), 5);
        assert!((p[4] - c(1.0, 0.0)).norm() < 1e-15);
        let mut got = roots(&p).unwrap();
        for z in &r {
            assert!(eval(&p, *z).norm() < 1e-12);
            let (i, d) = got.iter().enumerate().map(|(i, w)| (i, (w - z).norm())).min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
            assert!(d < 1e-10);
            got.remove(i);
        }
    }

    #[test]
    fn resultant_matches_root_product() {
        // Res(a, b) = lead(a)^q Π b(r_i) for monic-scaled a.
        let ra = [c(1.0, 0.0), c(0.5, 0.5), c(-1.0, 2.0)];
        let a: Vec<_> = from_roots(&ra).into_iter().map(|x| x * c(2.0, 0.0)).collect();
        let b = vec![c(0.3, 0.0), c(-1.0, 0.2), c(1.5, 0.0)];
        let q = b.len() - 1;
        let oracle = pow(c(2.0, 0.0), q) * ra.iter().map(|&r| eval(&b, r)).product::<Complex64>();
        assert!((resultant(&a, &b) - oracle).norm() < 1e-10 * oracle.norm());
    }

    #[test]
    fn resultant_vanishes_on_common_root() {
        let a = from_roots(&[c(1.0, 0.0), c(2.0, 0.0)]);
        let b = from_roots(&[c(2.0, 0.0)]);
        assert!(resultant(&a, &b).norm() < 1e-12);
    }
}
