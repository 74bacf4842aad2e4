//! Compactly supported vector test functions and their Fourier/Gelfand data.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

/// Scalar profile shared by the components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// `exp(-1/(1-u²))` on the support mapped to `u ∈ (-1, 1)`.
    Bump,
    /// `exp(-u²/(2σ²))` cut off at the support ends.
    GaussianTruncated { sigma: f64 },
    /// Samples on a uniform grid spanning the support, one row per
    /// component, interpolated by local cubics.
    CustomSamples { samples: Vec<Vec<[f64; 2]>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestFunction {
    pub support: (f64, f64),
    /// Component weights; the profile of component `j` is scaled by `weights[j]`.
    pub weights: Vec<Complex64>,
    pub profile: Profile,
}

/// Quadrature nodes over the support with cached function values.
#[derive(Clone, Debug)]
pub struct SampledRule {
    pub m: usize,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    /// `values[i * m + j]` is component `j` at node `i`.
    pub values: Vec<Complex64>,
}

const RULE_ORDER: usize = 20;
const MIN_PANELS: usize = 64;

fn lagrange4(y: &[[f64; 2]], pos: f64) -> Complex64 {
    let n = y.len();
    let i = (pos.floor() as i64).clamp(1, n as i64 - 3) as usize;
    let s = pos - i as f64;
    let p = |k: usize| Complex64::new(y[k][0], y[k][1]);
    let (y0, y1, y2, y3) = (p(i - 1), p(i), p(i + 1), p(i + 2));
    // Cubic through nodes -1, 0, 1, 2.
    let l0 = -s * (s - 1.0) * (s - 2.0) / 6.0;
    let l1 = (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0;
    let l2 = -(s + 1.0) * s * (s - 2.0) / 2.0;
    let l3 = (s + 1.0) * s * (s - 1.0) / 6.0;
    y0 * l0 + y1 * l1 + y2 * l2 + y3 * l3
}

impl TestFunction {
    pub fn bump(support: (f64, f64), weights: Vec<Complex64>) -> Result<Self> {
        Self::new(support, weights, Profile::Bump)
    }

    pub fn new(support: (f64, f64), weights: Vec<Complex64>, profile: Profile) -> Result<Self> {
        let f = TestFunction { support, weights, profile };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.support;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::config("test_function.support", "need finite lo < hi"));
        }
        if self.weights.is_empty() || self.weights.iter().all(|w| w.norm() == 0.0) {
            return Err(Error::config("test_function.weights", "at least one nonzero weight"));
        }
        match &self.profile {
            Profile::Bump => {}
            Profile::GaussianTruncated { sigma } => {
                if !(*sigma > 0.0) {
                    return Err(Error::config("test_function.sigma", "must be positive"));
                }
            }
            Profile::CustomSamples { samples } => {
                if samples.len() != self.weights.len() {
                    return Err(Error::config("test_function.samples", "one sample row per component"));
                }
                if samples.iter().any(|row| row.len() < 4 || row.len() != samples[0].len()) {
                    return Err(Error::config("test_function.samples", "rows of equal length >= 4"));
                }
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.weights.len()
    }

    fn unit(&self, x: f64) -> f64 {
        let (lo, hi) = self.support;
        (2.0 * x - lo - hi) / (hi - lo)
    }

    /// `f(x)`, zero outside the support.
    pub fn eval(&self, x: f64) -> Vec<Complex64> {
        let zero = vec![Complex64::new(0.0, 0.0); self.m()];
        let (lo, hi) = self.support;
        if x <= lo || x >= hi {
            return zero;
        }
        let u = self.unit(x);
        match &self.profile {
            Profile::Bump => {
                let v = (-1.0 / (1.0 - u * u)).exp();
                self.weights.iter().map(|w| w * v).collect()
            }
            Profile::GaussianTruncated { sigma } => {
                let v = (-u * u / (2.0 * sigma * sigma)).exp();
                self.weights.iter().map(|w| w * v).collect()
            }
            Profile::CustomSamples { samples } => {
                let pos = (u + 1.0) * 0.5 * (samples[0].len() - 1) as f64;
                samples.iter().zip(&self.weights).map(|(row, w)| w * lagrange4(row, pos)).collect()
            }
        }
    }

    /// Nodes resolving `e^{-iξx}` for `|ξ| ≤ xi_max`.
    pub fn rule(&self, xi_max: f64) -> SampledRule {
        let (lo, hi) = self.support;
        let panels = MIN_PANELS.max(((hi - lo) * xi_max / 8.0).ceil() as usize);
        let r = quad::composite(lo, hi, panels, RULE_ORDER);
        let m = self.m();
        let mut values = Vec::with_capacity(r.len() * m);
        for &x in &r.nodes {
            values.extend(self.eval(x));
        }
        SampledRule { m, x: r.nodes, w: r.weights, values }
    }

    pub fn norm(&self) -> f64 {
        let r = self.rule(0.0);
        r.values.iter().enumerate().map(|(i, v)| r.w[i / r.m] * v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Gelfand component `f_t(x) = Σ_j f(x + j) e^{-ijt}`.
    pub fn gelfand(&self, t: f64, x: f64) -> Vec<Complex64> {
        let (lo, hi) = self.support;
        let mut out = vec![Complex64::new(0.0, 0.0); self.m()];
        let j0 = (lo - x).floor() as i64;
        let j1 = (hi - x).ceil() as i64;
        for j in j0..=j1 {
            let ph = Complex64::from_polar(1.0, -(j as f64) * t);
            for (o, v) in out.iter_mut().zip(self.eval(x + j as f64)) {
                *o += v * ph;
            }
        }
        out
    }

    /// Random smooth bump inside `[-1.5, 1.5]` with random complex weights.
    pub fn random_smooth<R: Rng>(rng: &mut R, m: usize) -> Self {
        let c = rng.random_range(-0.7..0.7);
        let h = rng.random_range(0.3..0.8);
        let weights: Vec<Complex64> =
            (0..m).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        TestFunction { support: (c - h, c + h), weights, profile: Profile::Bump }
    }
}

impl SampledRule {
    /// `f̂(ξ) = ∫ f(x) e^{-iξx} dx` per component.
    pub fn fhat(&self, xi: f64) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.m];
        for (i, (&x, &w)) in self.x.iter().zip(&self.w).enumerate() {
            let e = Complex64::from_polar(w, -xi * x);
            for j in 0..self.m {
                out[j] += self.values[i * self.m + j] * e;
            }
        }
        out
    }

    /// `f̂_j(2πk + t)` for `|k| ≤ K`, laid out like the Galerkin basis.
    pub fn fhat_block(&self, t: f64, k_trunc: usize) -> Vec<Complex64> {
        let m = self.m;
        let nk = 2 * k_trunc + 1;
        let mut out = vec![Complex64::new(0.0, 0.0); nk * m];
        for (i, (&x, &w)) in self.x.iter().zip(&self.w).enumerate() {
            let step = Complex64::from_polar(1.0, -TAU * x);
            let mut ph = Complex64::from_polar(w, -(t - TAU * k_trunc as f64) * x);
            let vals = &self.values[i * m..(i + 1) * m];
            for b in 0..nk {
                for j in 0..m {
                    out[b * m + j] += vals[j] * ph;
                }
                ph *= step;
            }
        }
        out
    }

    /// `∫ f · conj(g)` over the support.
    pub fn inner_with(&self, g: impl Fn(f64) -> Vec<Complex64>) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, (&x, &w)) in self.x.iter().zip(&self.w).enumerate() {
            let gx = g(x);
            for j in 0..self.m {
                acc += self.values[i * self.m + j] * gx[j].conj() * w;
            }
        }
        acc
    }
}
