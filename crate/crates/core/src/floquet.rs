//! Independent path to the spectrum through the monodromy matrix.
//!
//! `M(λ)` is the value at `x = 1` of the fundamental matrix of the first-order
//! companion system. Eigenvalues of `T_t` are the `λ` with `e^{it} ∈ σ(M(λ))`.
//! Multiple eigenvalues are zeros of the resultant, in `z = e^{it}`, of
//! `χ(z, λ) = det(zI - M(λ))` and `∂_λ χ(z, λ)`.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};

use faer::Mat;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::Result;
use crate::linalg::{self, CMat};
use crate::ode;
use crate::operator::OperatorSpec;
use crate::poly;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const UNIT_CIRCLE_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct MonodromyResult {
    pub lambda: Complex64,
    pub m: CMat,
    pub tol: f64,
    pub est_error: f64,
    pub steps: usize,
}

impl MonodromyResult {
    pub fn norm(&self) -> f64 {
        self.m.norm_l2()
    }
}

/// Fundamental matrix at `x = 1` of the companion system for
/// `y⁽ⁿ⁾ + p₁ y⁽ⁿ⁻¹⁾ + Σ P_ν y⁽ⁿ⁻ᵛ⁾ = λ y`.
pub fn monodromy(spec: &OperatorSpec, lambda: Complex64, tol: f64) -> Result<MonodromyResult> {
    propagator(spec, lambda, 0.0, 1.0, tol)
}

/// Propagator of the companion system from `x0` to `x1`.
pub fn propagator(spec: &OperatorSpec, lambda: Complex64, x0: f64, x1: f64, tol: f64) -> Result<MonodromyResult> {
    let (n, m) = (spec.n, spec.m);
    let d = n * m;
    let mut y0 = vec![Complex64::new(0.0, 0.0); d * d];
    for i in 0..d {
        y0[i * d + i] = Complex64::new(1.0, 0.0);
    }
    // Rows of the last block row of A(x): coefficient blocks for y^(s), s < n.
    let rhs = |x: f64, u: &[Complex64], du: &mut [Complex64]| {
        // u is row-major d×d; du = A(x) u.
        for r in 0..(n - 1) * m {
            let src = r + m;
            du[r * d..(r + 1) * d].copy_from_slice(&u[src * d..(src + 1) * d]);
        }
        let mut blocks: Vec<CMat> = Vec::with_capacity(n);
        // blocks[s] multiplies y^(s).
        for s in 0..n {
            let nu = n - s;
            let mut b = if nu >= 2 {
                spec.coeff(nu).eval(x) * faer::Scale(Complex64::new(-1.0, 0.0))
            } else {
                Mat::from_fn(m, m, |i, j| if i == j { -spec.p1.eval(x) } else { Complex64::new(0.0, 0.0) })
            };
            if s == 0 {
                for i in 0..m {
                    b[(i, i)] += lambda;
                }
            }
            blocks.push(b);
        }
        for j in 0..m {
            let row = (n - 1) * m + j;
            let out = &mut du[row * d..(row + 1) * d];
            out.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for (s, b) in blocks.iter().enumerate() {
                for i in 0..m {
                    let coef = b[(j, i)];
                    if coef == Complex64::new(0.0, 0.0) {
                        continue;
                    }
                    let src = s * m + i;
                    for c in 0..d {
                        out[c] += coef * u[src * d + c];
                    }
                }
            }
        }
    };
    let label = format!("{lambda}");
    let (u, stats) = ode::integrate(rhs, x0, x1, y0, tol, &label)?;
    let mat = Mat::from_fn(d, d, |i, j| u[i * d + j]);
    Ok(MonodromyResult { lambda, m: mat, tol, est_error: stats.est_error, steps: stats.accepted })
}

/// Multiple-shooting consistency of `(λ, t)`: `σ_min / σ_max` of the
/// block-cyclic matrix whose null vectors are the segment traces of a
/// solution with `y(1) = e^{it} y(0)`. Short segments keep every block
/// well scaled, so this stays meaningful where `det(M - e^{it}I)` is
/// swamped by `‖M‖`.
pub fn shooting_residual(spec: &OperatorSpec, lambda: Complex64, t: f64, segments: usize, tol: f64) -> Result<f64> {
    let n_seg = segments.max(1);
    let d = spec.n * spec.m;
    let size = n_seg * d;
    let mut big = CMat::zeros(size, size);
    let z = Complex64::from_polar(1.0, t);
    for s in 0..n_seg {
        let a = s as f64 / n_seg as f64;
        let b = (s + 1) as f64 / n_seg as f64;
        let prop = propagator(spec, lambda, a, b, tol)?;
        let next = (s + 1) % n_seg;
        for i in 0..d {
            for j in 0..d {
                big[(s * d + i, s * d + j)] = -prop.m[(i, j)];
            }
            big[(s * d + i, next * d + i)] += if next == 0 { z } else { Complex64::new(1.0, 0.0) };
        }
    }
    let sv = linalg::singular_values(big.as_ref())?;
    let hi = sv.iter().cloned().fold(0.0, f64::max);
    let lo = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(if hi > 0.0 { lo / hi } else { 0.0 })
}

/// Segment count giving `O(1)` growth per segment at `λ`.
pub fn shooting_segments(n: usize, lambda: Complex64) -> usize {
    (lambda.norm().max(1.0).powf(1.0 / n as f64)).ceil() as usize
}

/// `det(M(λ) - e^{it} I)`, computed directly by LU.
pub fn char_det(spec: &OperatorSpec, lambda: Complex64, t: f64, tol: f64) -> Result<Complex64> {
    let mono = monodromy(spec, lambda, tol)?;
    Ok(char_det_from(&mono.m, t))
}

pub fn char_det_from(m: &CMat, t: f64) -> Complex64 {
    let z = Complex64::from_polar(1.0, t);
    let d = m.nrows();
    let shifted = Mat::from_fn(d, d, |i, j| if i == j { m[(i, j)] - z } else { m[(i, j)] });
    linalg::det(shifted.as_ref())
}

/// `χ(z) = det(zI - M(λ))`, ascending powers of `z`, monic.
///
/// The characteristic determinant equals `(-1)^{nm} χ(e^{it})`. Its constant
/// term is `(-1)^{nm} det M = (-1)^{nm} exp(-m ∫₀¹ p₁)`.
#[derive(Clone, Debug)]
pub struct CharPoly {
    pub lambda: Complex64,
    pub coeffs: Vec<Complex64>,
}

impl CharPoly {
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn eval_z(&self, z: Complex64) -> Complex64 {
        poly::eval(&self.coeffs, z)
    }

    /// `det(M - e^{it} I)` via the coefficients.
    pub fn char_det(&self, t: f64) -> Complex64 {
        let sign = if self.degree() % 2 == 0 { 1.0 } else { -1.0 };
        self.eval_z(Complex64::from_polar(1.0, t)) * sign
    }

    pub fn constant_term(&self) -> Complex64 {
        self.coeffs[0]
    }
}

pub fn char_poly_from(m: &CMat, lambda: Complex64) -> Result<CharPoly> {
    let mu = linalg::eigenvalues(m.as_ref())?;
    Ok(CharPoly { lambda, coeffs: poly::from_roots(&mu) })
}

pub fn char_poly_coeffs(spec: &OperatorSpec, lambda: Complex64, tol: f64) -> Result<CharPoly> {
    let mono = monodromy(spec, lambda, tol)?;
    char_poly_from(&mono.m, lambda)
}

/// `det M` predicted by Liouville's formula.
pub fn expected_det(spec: &OperatorSpec) -> Complex64 {
    (-(spec.m as f64) * spec.p1.mean()).exp()
}

/// Floquet multipliers `e^{it}` of `M(λ)` mapped to quasimomenta, keeping
/// those on the unit circle.
pub fn quasimomenta(m: &CMat, unit_tol: f64) -> Result<Vec<f64>> {
    let mu = linalg::eigenvalues(m.as_ref())?;
    Ok(unit_circle_t(&mu, unit_tol))
}

/// `t = -i Log z ∈ (-π, π]` for roots within `unit_tol` of the unit circle.
pub fn unit_circle_t(roots: &[Complex64], unit_tol: f64) -> Vec<f64> {
    let mut out: Vec<f64> = roots
        .iter()
        .filter(|z| (z.norm() - 1.0).abs() < unit_tol)
        .map(|z| wrap_t(z.arg()))
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Map an angle to `(-π, π]`.
pub fn wrap_t(t: f64) -> f64 {
    if t > -PI && t <= PI {
        return t;
    }
    let mut w = (t + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w += TAU;
    }
    w
}

/// Scale on which `χ`'s coefficients vary in `λ`: `n max(1,|λ|)^{1-1/n}`.
pub fn lambda_scale(n: usize, lambda: Complex64) -> f64 {
    n as f64 * lambda.norm().max(1.0).powf(1.0 - 1.0 / n as f64)
}

/// Taylor model of the coefficient vector of `χ` on a disk, built from
/// trapezoid sampling on a circle of radius `rho` about `center`. Only
/// evaluated within `rho / 4`, where the truncation error is of order
/// `4^{-nodes}`.
#[derive(Clone, Debug)]
pub struct LocalCharModel {
    pub center: Complex64,
    pub rho: f64,
    /// `taylor[d][i]`: coefficient of `(λ - center)^d` in the `z^i` coefficient.
    taylor: Vec<Vec<Complex64>>,
}

pub const MODEL_NODES: usize = 32;

impl LocalCharModel {
    pub fn build(spec: &OperatorSpec, center: Complex64, rho: f64, tol: f64) -> Result<Self> {
        let nodes = MODEL_NODES;
        let d = spec.n * spec.m;
        let samples: Vec<Vec<Complex64>> = (0..nodes)
            .map(|l| {
                let w = Complex64::from_polar(rho, TAU * l as f64 / nodes as f64);
                char_poly_coeffs(spec, center + w, tol).map(|c| c.coeffs)
            })
            .collect::<Result<_>>()?;
        let mut taylor = vec![vec![Complex64::new(0.0, 0.0); d + 1]; nodes];
        for (deg, row) in taylor.iter_mut().enumerate() {
            let scale = rho.powi(deg as i32) * nodes as f64;
            for (l, s) in samples.iter().enumerate() {
                let ph = Complex64::from_polar(1.0, -TAU * (deg * l) as f64 / nodes as f64);
                for i in 0..=d {
                    row[i] += s[i] * ph;
                }
            }
            row.iter_mut().for_each(|v| *v /= scale);
        }
        Ok(Self { center, rho, taylor })
    }

    pub fn contains(&self, lambda: Complex64) -> bool {
        (lambda - self.center).norm() <= self.rho / 4.0 * (1.0 + 1e-12)
    }

    /// Coefficients of `χ(·, λ)` and of `∂_λ χ(·, λ)`.
    pub fn eval(&self, lambda: Complex64) -> (Vec<Complex64>, Vec<Complex64>) {
        let h = lambda - self.center;
        let len = self.taylor[0].len();
        let mut c = vec![Complex64::new(0.0, 0.0); len];
        let mut dc = vec![Complex64::new(0.0, 0.0); len];
        for deg in (0..self.taylor.len()).rev() {
            for i in 0..len {
                dc[i] = dc[i] * h + c[i];
                c[i] = c[i] * h + self.taylor[deg][i];
            }
        }
        (c, dc)
    }

    /// `Res_z(χ, ∂_λχ / z)`. Both the leading and the constant coefficient of
    /// `χ` are independent of `λ`, so `∂_λχ` has degree `nm - 1` and vanishes
    /// at `z = 0`; dividing by `z` removes the spurious common root there.
    pub fn resultant(&self, lambda: Complex64) -> Complex64 {
        let (c, dc) = self.eval(lambda);
        let d = c.len() - 1;
        if d < 2 {
            return dc[0];
        }
        let q: Vec<Complex64> = dc[1..d].to_vec();
        poly::resultant(&c, &q)
    }
}

/// Rectangle `[re_lo, re_hi] × [im_lo, im_hi]` in the `λ` plane.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Region {
    pub re: (f64, f64),
    pub im: (f64, f64),
}

impl Region {
    pub fn covering(points: &[Complex64], pad: f64) -> Self {
        let (mut a, mut b, mut c, mut d) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            a = a.min(p.re);
            b = b.max(p.re);
            c = c.min(p.im);
            d = d.max(p.im);
        }
        let pr = (b - a) * pad + 1.0;
        let pi = (d - c) * pad + 1.0;
        Self { re: (a - pr, b + pr), im: (c - pi, d + pi) }
    }

    pub fn contains(&self, z: Complex64) -> bool {
        z.re >= self.re.0 && z.re <= self.re.1 && z.im >= self.im.0 && z.im <= self.im.1
    }
}

/// Resultant evaluator that caches Taylor models on a multiscale tiling.
pub struct ResultantField<'a> {
    spec: &'a OperatorSpec,
    tol: f64,
    models: HashMap<(i32, i64, i64), LocalCharModel>,
}

impl<'a> ResultantField<'a> {
    pub fn new(spec: &'a OperatorSpec, tol: f64) -> Self {
        Self { spec, tol, models: HashMap::new() }
    }

    fn model_for(&mut self, lambda: Complex64) -> Result<&LocalCharModel> {
        // Tile side 2^level, chosen so that the circumscribed disk of the tile
        // (radius side/√2) sits within a quarter of the sampling radius.
        let target = 0.5 * lambda_scale(self.spec.n, lambda) / (2.0 * std::f64::consts::SQRT_2);
        let level = target.log2().floor() as i32;
        let side = 2f64.powi(level);
        let key = (level, (lambda.re / side).floor() as i64, (lambda.im / side).floor() as i64);
        if !self.models.contains_key(&key) {
            let center = Complex64::new((key.1 as f64 + 0.5) * side, (key.2 as f64 + 0.5) * side);
            let rho = side * 2.0 * std::f64::consts::SQRT_2;
            let model = LocalCharModel::build(self.spec, center, rho, self.tol)?;
            self.models.insert(key, model);
        }
        Ok(&self.models[&key])
    }

    pub fn resultant(&mut self, lambda: Complex64) -> Result<Complex64> {
        Ok(self.model_for(lambda)?.resultant(lambda))
    }

    pub fn char_coeffs(&mut self, lambda: Complex64) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
        Ok(self.model_for(lambda)?.eval(lambda))
    }

    /// Newton iteration on `R / R'`, which converges quadratically also at
    /// zeros of higher multiplicity.
    pub fn polish(&mut self, seed: Complex64, refine_tol: f64) -> Result<Option<Complex64>> {
        let mut lam = seed;
        let scale = lambda_scale(self.spec.n, seed);
        for _ in 0..60 {
            let h = 1e-3 * self.model_for(lam)?.rho;
            let model = self.model_for(lam)?.clone();
            // Derivatives from a 6-point circle rule inside the model disk.
            let k = 6;
            let mut r = [Complex64::new(0.0, 0.0); 3];
            let f0 = model.resultant(lam);
            for j in 0..k {
                let w = Complex64::from_polar(1.0, TAU * j as f64 / k as f64);
                let v = model.resultant(lam + w * h);
                r[1] += v * w.conj();
                r[2] += v * w.conj() * w.conj();
            }
            let d1 = r[1] / (k as f64 * h);
            let d2 = r[2] * 2.0 / (k as f64 * h * h);
            if f0 == Complex64::new(0.0, 0.0) {
                return Ok(Some(lam));
            }
            let denom = d1 * d1 - f0 * d2;
            if denom.norm() == 0.0 || !denom.is_finite() {
                return Ok(None);
            }
            let step = f0 * d1 / denom;
            let step = if step.norm() > model.rho / 4.0 { step * (model.rho / 4.0 / step.norm()) } else { step };
            lam -= step;
            if (lam - seed).norm() > 4.0 * scale {
                return Ok(None);
            }
            if step.norm() < refine_tol * (1.0 + lam.norm()) {
                return Ok(Some(lam));
            }
        }
        Ok(None)
    }
}

/// Multiple eigenvalues in a region with their quasimomentum sets.
#[derive(Clone, Debug, Default, Serialize)]
pub struct DegeneracyCatalog {
    pub a: Vec<Complex64>,
    pub sets: Vec<Vec<f64>>,
    /// Candidates rejected during refinement, with the reason.
    pub dropped: Vec<(Complex64, String)>,
}

impl DegeneracyCatalog {
    pub fn union(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.sets.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        all
    }
}

/// `A(a) = {t ∈ (-π, π] : e^{it} is a Floquet multiplier of M(a)}`.
///
/// Multipliers closer than `cluster_tol` are averaged first; a double root
/// splits by `O(√ε)` under rounding while its mean stays accurate.
pub fn degenerate_set(spec: &OperatorSpec, a: Complex64, tol: f64) -> Result<(Vec<f64>, Vec<Complex64>)> {
    let mono = monodromy(spec, a, tol)?;
    let mu = linalg::eigenvalues(mono.m.as_ref())?;
    let clustered = cluster(&mu, 1e-5);
    Ok((unit_circle_t(&clustered, UNIT_CIRCLE_TOL), clustered))
}

fn cluster(roots: &[Complex64], tol: f64) -> Vec<Complex64> {
    let mut used = vec![false; roots.len()];
    let mut out = Vec::new();
    for i in 0..roots.len() {
        if used[i] {
            continue;
        }
        let mut group = vec![roots[i]];
        used[i] = true;
        for j in i + 1..roots.len() {
            if !used[j] && (roots[j] - roots[i]).norm() < tol * (1.0 + roots[i].norm()) {
                used[j] = true;
                group.push(roots[j]);
            }
        }
        out.push(group.iter().sum::<Complex64>() / group.len() as f64);
    }
    out
}

/// Accept a polished zero of the resultant if the shared root of `χ` and
/// `∂_λχ` is a unit-modulus multiplier, so the multiple eigenvalue lies on
/// the real-`t` spectrum.
fn double_root(field: &mut ResultantField<'_>, a: Complex64) -> Result<Option<Complex64>> {
    let (c, dc) = field.char_coeffs(a)?;
    let rts = poly::roots(&c)?;
    let d = c.len() - 1;
    let q: Vec<Complex64> = if d >= 2 { dc[1..d].to_vec() } else { dc[..1].to_vec() };
    let qscale = q.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
    let best = rts
        .iter()
        .map(|&z| (z, poly::eval(&q, z).norm() / (qscale * z.norm().max(1.0).powi(q.len() as i32))))
        .min_by(|x, y| x.1.total_cmp(&y.1));
    Ok(best.map(|(z, _)| z))
}

/// Locate multiple eigenvalues in `region` by a grid scan of `|R|` followed
/// by Newton polishing, plus optional extra seeds.
pub fn resultant_scan(
    spec: &OperatorSpec,
    region: Region,
    grid: (usize, usize),
    seeds: &[Complex64],
    refine_tol: f64,
    tol: f64,
) -> Result<DegeneracyCatalog> {
    let mut field = ResultantField::new(spec, tol);
    let (nx, ny) = grid;
    let mut vals = vec![vec![0.0f64; ny]; nx];
    let px = |i: usize| region.re.0 + (region.re.1 - region.re.0) * i as f64 / (nx - 1).max(1) as f64;
    let py = |j: usize| region.im.0 + (region.im.1 - region.im.0) * j as f64 / (ny - 1).max(1) as f64;
    for (i, row) in vals.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = field.resultant(Complex64::new(px(i), py(j)))?.norm().ln();
        }
    }
    let mut candidates: Vec<Complex64> = seeds.to_vec();
    for i in 0..nx {
        for j in 0..ny {
            let v = vals[i][j];
            let mut is_min = true;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    if a < 0 || b < 0 || a >= nx as i64 || b >= ny as i64 {
                        continue;
                    }
                    if vals[a as usize][b as usize] < v {
                        is_min = false;
                    }
                }
            }
            if is_min {
                candidates.push(Complex64::new(px(i), py(j)));
            }
        }
    }
    let mut cat = DegeneracyCatalog::default();
    for seed in candidates {
        let Some(a) = field.polish(seed, refine_tol)? else {
            cat.dropped.push((seed, "refinement diverged".into()));
            continue;
        };
        if !region.contains(a) {
            continue;
        }
        if cat.a.iter().any(|b| (a - b).norm() < 1e-6 * (1.0 + a.norm())) {
            continue;
        }
        match double_root(&mut field, a)? {
            Some(z) if (z.norm() - 1.0).abs() < UNIT_CIRCLE_TOL => {
                let (set, _) = degenerate_set(spec, a, tol)?;
                cat.a.push(a);
                cat.sets.push(set);
            }
            Some(z) => cat.dropped.push((a, format!("double multiplier off the unit circle (|z| = {:.6})", z.norm()))),
            None => cat.dropped.push((a, "no double multiplier".into())),
        }
    }
    let mut order: Vec<usize> = (0..cat.a.len()).collect();
    order.sort_by(|&i, &j| cat.a[i].re.total_cmp(&cat.a[j].re).then(cat.a[i].im.total_cmp(&cat.a[j].im)));
    cat.a = order.iter().map(|&i| cat.a[i]).collect();
    cat.sets = order.iter().map(|&i| cat.sets[i].clone()).collect();
    Ok(cat)
}
