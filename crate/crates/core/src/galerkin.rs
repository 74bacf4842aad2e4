//! Fourier–Galerkin discretization of the Bloch operator `T_t`.
//!
//! The basis is `e_j e^{i(2πk + t)x}` for `|k| ≤ K`, `j < m`, flattened as
//! `(k + K) m + j`. For complex `t` the trial functions are not orthonormal
//! and the Gram matrix enters every norm; the adjoint eigenvectors live in
//! the conjugate basis `e^{i(2πk + t̄)x}`, which is exactly dual to the
//! trial basis, so `(Ψ, Ψ*)` is the plain coefficient inner product.

use std::f64::consts::TAU;

use faer::Mat;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::operator::{MeanMatrixData, OperatorSpec};

/// `|α|` below which a pair is treated as numerically defective.
pub const ALPHA_FLOOR: f64 = 1e-12;

fn ipow(z: Complex64, n: usize) -> Complex64 {
    (0..n).fold(Complex64::new(1.0, 0.0), |acc, _| acc * z)
}

/// `i(2πk + t)`.
pub fn wave(k: i64, t: Complex64) -> Complex64 {
    Complex64::i() * (TAU * k as f64 + t)
}

/// `(e(t))⁻² = ∫₀¹ |e^{itx}|² dx`.
pub fn e_norm(t: Complex64) -> f64 {
    let s = -2.0 * t.im;
    let inv_sq = if s.abs() < 1e-14 { 1.0 + s / 2.0 } else { s.exp_m1() / s };
    1.0 / inv_sq.sqrt()
}

#[derive(Clone, Debug)]
pub struct GalerkinMatrix {
    pub t: Complex64,
    pub k: usize,
    pub m: usize,
    pub mat: CMat,
}

impl GalerkinMatrix {
    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }
}

/// Fourier index of basis position `idx`.
pub fn fourier_index(idx: usize, k_trunc: usize, m: usize) -> (i64, usize) {
    ((idx / m) as i64 - k_trunc as i64, idx % m)
}

pub fn basis_index(k: i64, j: usize, k_trunc: usize, m: usize) -> usize {
    (k + k_trunc as i64) as usize * m + j
}

pub fn assemble_matrix(spec: &OperatorSpec, t: Complex64, k_trunc: usize) -> Result<GalerkinMatrix> {
    let bw = spec.bandwidth();
    if k_trunc < bw {
        return Err(Error::TruncationTooSmall { k: k_trunc, bandwidth: bw });
    }
    let (n, m) = (spec.n, spec.m);
    let nk = 2 * k_trunc + 1;
    let kk = k_trunc as i64;
    let mut mat = Mat::<Complex64>::zeros(nk * m, nk * m);
    // Powers of i(2πk' + t) for each column block.
    let powers: Vec<Vec<Complex64>> = (-kk..=kk)
        .map(|k| {
            let w = wave(k, t);
            let mut p = vec![Complex64::new(1.0, 0.0); n + 1];
            for e in 1..=n {
                p[e] = p[e - 1] * w;
            }
            p
        })
        .collect();
    for (col_block, pw) in powers.iter().enumerate() {
        for j in 0..m {
            let d = col_block * m + j;
            mat[(d, d)] += pw[n];
        }
        let kcol = col_block as i64 - kk;
        for (q, c) in spec.p1.iter() {
            let krow = kcol + q;
            if krow.abs() > kk {
                continue;
            }
            let row_block = (krow + kk) as usize;
            for j in 0..m {
                mat[(row_block * m + j, col_block * m + j)] += c * pw[n - 1];
            }
        }
        for nu in 2..=n {
            let w = pw[n - nu];
            for (q, c) in spec.coeff(nu).iter() {
                let krow = kcol + q;
                if krow.abs() > kk {
                    continue;
                }
                let row_block = (krow + kk) as usize;
                for j in 0..m {
                    for i in 0..m {
                        mat[(row_block * m + j, col_block * m + i)] += c[(j, i)] * w;
                    }
                }
            }
        }
    }
    Ok(GalerkinMatrix { t, k: k_trunc, m, mat })
}

/// Eigenpair of `T_t` in Fourier coordinates.
#[derive(Clone, Debug)]
pub struct BlochEigenpair {
    /// Position in the `|λ|`-sorted list unless relabeled.
    pub p: usize,
    pub t: Complex64,
    pub k_trunc: usize,
    pub m: usize,
    pub lambda: Complex64,
    /// Coefficients in `e_j e^{i(2πk+t)x}`, unit norm in `L²(0,1)`.
    pub psi: Vec<Complex64>,
    /// Coefficients in `e_j e^{i(2πk+t̄)x}`, unit norm, phased so `α > 0`.
    pub psi_star: Vec<Complex64>,
    pub alpha: Complex64,
    pub e_norm: f64,
    pub flagged: bool,
}

impl BlochEigenpair {
    /// Biorthogonal partner `X = Ψ*/ᾱ`, so that `(Ψ, X) = 1`.
    pub fn x(&self) -> Vec<Complex64> {
        let s = self.alpha.conj();
        self.psi_star.iter().map(|c| c / s).collect()
    }

    /// Dominant Fourier mode `(k, j)` of `Ψ`.
    pub fn dominant_mode(&self) -> (i64, usize) {
        let idx = self
            .psi
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        fourier_index(idx, self.k_trunc, self.m)
    }

    /// `Ψ(x)` for any real `x`, by synthesis on the fundamental cell and the
    /// quasi-periodic extension `Ψ(x + 1) = e^{it} Ψ(x)`.
    pub fn eval_psi(&self, x: f64) -> Vec<Complex64> {
        eval_quasi_periodic(&self.psi, self.t, self.k_trunc, self.m, x)
    }

    /// `X(x)` in the dual basis `e^{i(2πk+t̄)x}`.
    pub fn eval_x(&self, x: f64) -> Vec<Complex64> {
        eval_quasi_periodic(&self.x(), self.t.conj(), self.k_trunc, self.m, x)
    }
}

/// Synthesis of `Σ c_{k,j} e_j e^{i(2πk+t)x}` over one cell, extended to
/// the line by the Floquet factor.
pub fn eval_quasi_periodic(coeffs: &[Complex64], t: Complex64, k_trunc: usize, m: usize, x: f64) -> Vec<Complex64> {
    let cell = x.floor();
    let x0 = x - cell;
    let mut out = synthesize(coeffs, t, k_trunc, m, x0);
    let factor = (Complex64::i() * t * cell).exp();
    out.iter_mut().for_each(|v| *v *= factor);
    out
}

/// Plain synthesis at `x` with no cell reduction.
pub fn synthesize(coeffs: &[Complex64], t: Complex64, k_trunc: usize, m: usize, x: f64) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); m];
    let base = (Complex64::i() * t * x).exp();
    let step = Complex64::from_polar(1.0, TAU * x);
    let mut ph = Complex64::from_polar(1.0, -TAU * k_trunc as f64 * x) * base;
    for block in 0..2 * k_trunc + 1 {
        for j in 0..m {
            out[j] += coeffs[block * m + j] * ph;
        }
        ph *= step;
    }
    out
}

/// Squared `L²(0,1)` norm of `Σ c_{k,j} e_j e^{i(2πk+t)x}`.
pub fn l2_norm_sq(coeffs: &[Complex64], t: Complex64, k_trunc: usize, m: usize) -> f64 {
    let s = -2.0 * t.im;
    if s.abs() < 1e-15 {
        return coeffs.iter().map(Complex64::norm_sqr).sum();
    }
    // ∫₀¹ e^{i2π(k-l)x} e^{sx} dx = (e^s - 1)/(s + 2πi(k-l))
    let nk = 2 * k_trunc + 1;
    let es = s.exp_m1();
    let mut total = Complex64::new(0.0, 0.0);
    for a in 0..nk {
        for b in 0..nk {
            let g = Complex64::new(es, 0.0) / Complex64::new(s, TAU * (a as f64 - b as f64));
            for j in 0..m {
                total += coeffs[a * m + j] * coeffs[b * m + j].conj() * g;
            }
        }
    }
    total.re
}

fn sort_key_order(values: &[Complex64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (values[a], values[b]);
        x.norm().total_cmp(&y.norm()).then(x.arg().total_cmp(&y.arg()))
    });
    order
}

/// All eigenpairs of the Galerkin matrix, sorted by `|λ|` then phase.
pub fn solve_eigen(spec: &OperatorSpec, t: Complex64, k_trunc: usize) -> Result<Vec<BlochEigenpair>> {
    let g = assemble_matrix(spec, t, k_trunc)?;
    eigenpairs_of(&g)
}

pub fn eigenpairs_of(g: &GalerkinMatrix) -> Result<Vec<BlochEigenpair>> {
    let eig = linalg::eigen(g.mat.as_ref())?;
    let order = sort_key_order(&eig.values);
    let (t, k_trunc, m) = (g.t, g.k, g.m);
    let e = e_norm(t);
    let mut pairs = Vec::with_capacity(order.len());
    for (p, &i) in order.iter().enumerate() {
        let mut psi = linalg::column(eig.right.as_ref(), i);
        let n = l2_norm_sq(&psi, t, k_trunc, m).sqrt();
        psi.iter_mut().for_each(|c| *c /= n);
        linalg::fix_phase(&mut psi);
        let mut psi_star = linalg::conj_row(eig.left_rows.as_ref(), i);
        let n = l2_norm_sq(&psi_star, t.conj(), k_trunc, m).sqrt();
        psi_star.iter_mut().for_each(|c| *c /= n);
        let raw = linalg::inner(&psi, &psi_star);
        if raw.norm() > 0.0 {
            // Rotate Ψ* so that α = (Ψ, Ψ*) is real and positive.
            let ph = raw / raw.norm();
            psi_star.iter_mut().for_each(|c| *c *= ph);
        }
        let alpha = Complex64::new(raw.norm(), 0.0);
        pairs.push(BlochEigenpair {
            p,
            t,
            k_trunc,
            m,
            lambda: eig.values[i],
            psi,
            psi_star,
            alpha,
            e_norm: e,
            flagged: raw.norm() < ALPHA_FLOOR,
        });
    }
    Ok(pairs)
}

/// Eigenvalues only, same ordering as [`solve_eigen`].
pub fn eigenvalues(spec: &OperatorSpec, t: Complex64, k_trunc: usize) -> Result<Vec<Complex64>> {
    let g = assemble_matrix(spec, t, k_trunc)?;
    let vals = linalg::eigenvalues(g.mat.as_ref())?;
    Ok(sort_key_order(&vals).into_iter().map(|i| vals[i]).collect())
}

/// Inner product `(Ψ_a, X_b)` of two pairs at the same `t`.
pub fn pairing(a: &BlochEigenpair, b: &BlochEigenpair) -> Complex64 {
    linalg::inner(&a.psi, &b.x())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reference {
    Free,
    ConstantC,
}

/// `(2πki + ti)^n + μ_j (2πki + ti)^{n-2}`.
pub fn leading_term(n: usize, k: i64, t: Complex64, mu: Complex64) -> Complex64 {
    let w = wave(k, t);
    ipow(w, n) + mu * ipow(w, n - 2)
}

/// Closed-form eigenpair of the free or constant-coefficient operator.
pub fn reference_eigenpair(
    spec: &OperatorSpec,
    mean: Option<&MeanMatrixData>,
    k: i64,
    j: usize,
    t: Complex64,
    k_trunc: usize,
    which: Reference,
) -> Result<BlochEigenpair> {
    let m = spec.m;
    let dim = (2 * k_trunc + 1) * m;
    let block = basis_index(k, 0, k_trunc, m);
    let mut psi = vec![Complex64::new(0.0, 0.0); dim];
    let (lambda, vec_j, dual_j) = match which {
        Reference::Free => {
            let mut e = vec![Complex64::new(0.0, 0.0); m];
            e[j] = Complex64::new(1.0, 0.0);
            (ipow(wave(k, t), spec.n), e.clone(), e)
        }
        Reference::ConstantC => {
            let mean = mean.ok_or_else(|| Error::InvalidOperator("constant-C reference needs the mean matrix".into()))?;
            if !mean.simple {
                return Err(Error::DegenerateMeanMatrix { gap: mean.min_gap, tol: mean.deg_tol });
            }
            (leading_term(spec.n, k, t, mean.mu[j]), mean.v[j].clone(), mean.u[j].clone())
        }
    };
    let e = e_norm(t);
    for i in 0..m {
        psi[block + i] = vec_j[i] * e;
    }
    let mut psi_star = vec![Complex64::new(0.0, 0.0); dim];
    let nu = linalg::norm(&dual_j);
    let es = e_norm(t.conj());
    for i in 0..m {
        psi_star[block + i] = dual_j[i] / nu * es;
    }
    let raw = linalg::inner(&psi, &psi_star);
    let ph = raw / raw.norm();
    psi_star.iter_mut().for_each(|c| *c *= ph);
    Ok(BlochEigenpair {
        p: 0,
        t,
        k_trunc,
        m,
        lambda,
        psi,
        psi_star,
        alpha: Complex64::new(raw.norm(), 0.0),
        e_norm: e,
        flagged: raw.norm() < ALPHA_FLOOR,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{compute_mean_matrix, reduce_p1};
    use crate::trig::{MatTrigPoly, TrigPoly};
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn diag(d: &[f64]) -> CMat {
        Mat::from_fn(d.len(), d.len(), |i, j| if i == j { c(d[i], 0.0) } else { c(0.0, 0.0) })
    }

    #[test]
    fn free_second_order_matrix_is_diagonal() {
        let spec = OperatorSpec::free(2, 1).unwrap();
        let g = assemble_matrix(&spec, c(PI / 2.0, 0.0), 1).unwrap();
        let expect = [-(1.5 * PI).powi(2), -(0.5 * PI).powi(2), -(2.5 * PI).powi(2)];
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { expect[i] } else { 0.0 };
                assert!((g.mat[(i, j)] - c(e, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_c_blocks() {
        let cm = Mat::from_fn(2, 2, |i, j| c((i * 2 + j) as f64 + 1.0, 0.5 * i as f64));
        let spec = OperatorSpec::constant_c(3, cm.clone()).unwrap();
        let t = c(0.4, 0.0);
        let g = assemble_matrix(&spec, t, 2).unwrap();
        for kb in -2i64..=2 {
            let w = wave(kb, t);
            for j in 0..2 {
                for i in 0..2 {
                    let r = basis_index(kb, j, 2, 2);
                    let col = basis_index(kb, i, 2, 2);
                    let d = if i == j { w * w * w } else { c(0.0, 0.0) };
                    assert!((g.mat[(r, col)] - d - w * cm[(j, i)]).norm() < 1e-10);
                }
            }
        }
        assert_eq!(g.mat[(0, basis_index(1, 0, 2, 2))], c(0.0, 0.0));
    }

    #[test]
    fn single_harmonic_couples_k_minus_one_to_k() {
        let mut b = Mat::<Complex64>::zeros(2, 2);
        b[(0, 1)] = c(1.0, 0.0);
        b[(1, 0)] = c(0.0, 2.0);
        let mut p2 = MatTrigPoly::zero(2);
        p2.add_coeff(1, (&b * faer::Scale(c(0.3, 0.0))).as_ref());
        let spec = OperatorSpec::new(3, 2, TrigPoly::zero(), vec![p2, MatTrigPoly::zero(2)]).unwrap();
        let t = c(1.0, 0.0);
        let g = assemble_matrix(&spec, t, 3).unwrap();
        for k in -2i64..=3 {
            let w = wave(k - 1, t);
            for j in 0..2 {
                for i in 0..2 {
                    let got = g.mat[(basis_index(k, j, 3, 2), basis_index(k - 1, i, 3, 2))];
                    assert!((got - w * b[(j, i)] * 0.3).norm() < 1e-12);
                }
            }
        }
        assert!(g.mat[(basis_index(0, 0, 3, 2), basis_index(1, 1, 3, 2))].norm() == 0.0);
    }

    #[test]
    fn truncation_below_bandwidth_errors() {
        let mut p2 = MatTrigPoly::zero(1);
        p2.add_coeff(3, diag(&[1.0]).as_ref());
        let spec = OperatorSpec::new(2, 1, TrigPoly::zero(), vec![p2]).unwrap();
        assert!(matches!(assemble_matrix(&spec, c(0.0, 0.0), 2), Err(Error::TruncationTooSmall { k: 2, bandwidth: 3 })));
    }

    #[test]
    fn free_pairs_have_unit_alpha() {
        let spec = OperatorSpec::free(2, 1).unwrap();
        let pairs = solve_eigen(&spec, c(PI / 2.0, 0.0), 3).unwrap();
        assert!((pairs[0].lambda - c(-PI * PI / 4.0, 0.0)).norm() < 1e-12);
        assert_eq!(pairs[0].dominant_mode(), (0, 0));
        for p in &pairs {
            assert!((p.alpha.re - 1.0).abs() < 1e-14);
        }
        let v = pairs[0].eval_psi(0.3);
        let v1 = pairs[0].eval_psi(1.3);
        assert!((v1[0] / v[0] - Complex64::i()).norm() < 1e-12);
    }

    #[test]
    fn constant_c_eigenvalue_matches_closed_form() {
        let spec = OperatorSpec::constant_c(3, diag(&[1.0, 4.0])).unwrap();
        let t = c(PI, 0.0);
        let vals = eigenvalues(&spec, t, 4).unwrap();
        let expect = c(0.0, PI - PI.powi(3));
        assert!(vals.iter().any(|v| (v - expect).norm() < 1e-9));
        assert!((expect.im + 27.867).abs() < 0.2);
    }

    #[test]
    fn constant_c_reference_pair() {
        let spec = OperatorSpec::constant_c(3, diag(&[1.0, 4.0])).unwrap();
        let mean = compute_mean_matrix(&spec).unwrap();
        for j in 0..2 {
            let p = reference_eigenpair(&spec, Some(&mean), 1, j, c(0.0, 0.0), 2, Reference::ConstantC).unwrap();
            let mu = [1.0, 4.0][j];
            assert!((p.lambda - c(0.0, -8.0 * PI.powi(3) + TAU * mu)).norm() < 1e-9);
            assert!((p.psi[basis_index(1, j, 2, 2)] - c(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn jordan_like_block_has_small_alpha() {
        // [[0,1],[δ,0]]: eigenvectors (1, ±√δ); α = (1-δ)/(1+δ) up to sign.
        // The spec's example refers to the angle form 1/|α|; check scaling.
        for delta in [1e-2, 1e-4, 1e-6] {
            let a = Mat::from_fn(2, 2, |i, j| match (i, j) {
                (0, 1) => c(1.0, 0.0),
                (1, 0) => c(delta, 0.0),
                _ => c(0.0, 0.0),
            });
            let g = GalerkinMatrix { t: c(0.0, 0.0), k: 0, m: 2, mat: a };
            let pairs = eigenpairs_of(&g).unwrap();
            let s = delta.sqrt();
            let oracle = 2.0 * s / (1.0 + delta);
            for p in &pairs {
                assert!((p.alpha.re - oracle).abs() < 1e-8 * oracle.max(1.0), "{} {}", p.alpha, oracle);
            }
        }
    }

    #[test]
    fn complex_shift_normalization() {
        let t = c(0.3, -0.7);
        let s: f64 = 1.4;
        assert!((e_norm(t).powi(-2) - s.exp_m1() / s).abs() < 1e-14);
        assert_eq!(e_norm(c(1.0, 0.0)), 1.0);
        // Gram norm agrees with direct quadrature.
        let coeffs = vec![c(0.3, 0.1), c(1.0, 0.0), c(-0.2, 0.5)];
        let n = 4000;
        let direct: f64 = (0..n)
            .map(|i| {
                let x = (i as f64 + 0.5) / n as f64;
                synthesize(&coeffs, t, 1, 1, x)[0].norm_sqr() / n as f64
            })
            .sum();
        assert!((l2_norm_sq(&coeffs, t, 1, 1) - direct).abs() < 1e-6);
    }

    #[test]
    fn reduction_shifts_spectrum() {
        let p1 = TrigPoly::from_coeffs([(0, c(0.6, 0.2)), (1, c(0.1, 0.0)), (-1, c(0.1, 0.0))]);
        let mut p2 = MatTrigPoly::constant(diag(&[1.0, 4.0]));
        p2.add_coeff(1, diag(&[0.2, -0.1]).as_ref());
        let spec = OperatorSpec::new(2, 2, p1, vec![p2]).unwrap();
        let red = reduce_p1(&spec);
        let t = c(0.9, 0.0);
        let a = eigenvalues(&spec, t, 20).unwrap();
        let b = eigenvalues(&red.spec, red.shifted_t(t), 20).unwrap();
        for v in a.iter().take(8) {
            let best = b.iter().map(|w| (v - w).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-8 * (1.0 + v.norm()), "{v} {best}");
        }
    }
}
