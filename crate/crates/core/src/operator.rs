//! The operator `y⁽ⁿ⁾ + p₁ y⁽ⁿ⁻¹⁾ + P₂ y⁽ⁿ⁻²⁾ + … + Pₙ y` with period-1
//! coefficients, its mean matrix, the reduction removing `p₁`, and the
//! two sufficient conditions for asymptotic spectrality.

use std::collections::BTreeMap;
use std::path::Path;

use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat};
use crate::trig::{MatTrigPoly, TrigPoly};

/// Order `n`, dimension `m`, and Fourier coefficients of `p₁, P₂, …, Pₙ`.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSpec {
    pub n: usize,
    pub m: usize,
    pub p1: TrigPoly,
    /// `p[ν - 2]` holds `P_ν` for `ν = 2..=n`.
    pub p: Vec<MatTrigPoly>,
}

impl OperatorSpec {
    pub fn new(n: usize, m: usize, p1: TrigPoly, p: Vec<MatTrigPoly>) -> Result<Self> {
        let spec = Self { n, m, p1, p };
        spec.validate()?;
        Ok(spec)
    }

    pub fn free(n: usize, m: usize) -> Result<Self> {
        Self::new(n, m, TrigPoly::zero(), (2..=n).map(|_| MatTrigPoly::zero(m)).collect())
    }

    /// `P₂ ≡ C`, every other coefficient zero.
    pub fn constant_c(n: usize, c: CMat) -> Result<Self> {
        let m = c.nrows();
        let mut p: Vec<_> = (2..=n).map(|_| MatTrigPoly::zero(m)).collect();
        if n >= 2 {
            p[0] = MatTrigPoly::constant(c);
        }
        Self::new(n, m, TrigPoly::zero(), p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidOperator(format!("order n = {} must be at least 2", self.n)));
        }
        if self.m < 1 {
            return Err(Error::InvalidOperator("dimension m must be at least 1".into()));
        }
        if self.p.len() != self.n - 1 {
            return Err(Error::InvalidOperator(format!(
                "expected {} matrix coefficients P_2..P_n, got {}",
                self.n - 1,
                self.p.len()
            )));
        }
        for (i, p) in self.p.iter().enumerate() {
            if p.dim() != self.m {
                return Err(Error::InvalidOperator(format!(
                    "P_{} has dimension {}, expected {}",
                    i + 2,
                    p.dim(),
                    self.m
                )));
            }
        }
        Ok(())
    }

    /// `P_ν` for `ν ≥ 2`.
    pub fn coeff(&self, nu: usize) -> &MatTrigPoly {
        &self.p[nu - 2]
    }

    /// Largest harmonic present in any coefficient.
    pub fn bandwidth(&self) -> usize {
        self.p.iter().map(MatTrigPoly::bandwidth).chain([self.p1.bandwidth()]).max().unwrap_or(0)
    }

    /// `r = (1/n) ∫₀¹ p₁`.
    pub fn r(&self) -> Complex64 {
        self.p1.mean() / self.n as f64
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: RawOperator = serde_json::from_str(text)
            .map_err(|e| Error::config(json_path_hint(&e), e.to_string()))?;
        raw.into_spec()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let raw = RawOperator::from_spec(self);
        serde_json::to_value(raw).expect("operator serializes")
    }
}

fn json_path_hint(e: &serde_json::Error) -> String {
    format!("line {} column {}", e.line(), e.column())
}

/// On-disk operator document.
///
/// Matrices are flattened row-major as `m²` pairs `[re, im]`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOperator {
    n: usize,
    m: usize,
    #[serde(default)]
    p1: Vec<(i64, f64, f64)>,
    #[serde(rename = "P", default)]
    p: BTreeMap<String, Vec<(i64, Vec<[f64; 2]>)>>,
}

impl RawOperator {
    fn into_spec(self) -> Result<OperatorSpec> {
        let RawOperator { n, m, p1, p } = self;
        if n < 2 {
            return Err(Error::config("n", format!("order must be at least 2, got {n}")));
        }
        if m < 1 {
            return Err(Error::config("m", "dimension must be at least 1"));
        }
        let p1 = TrigPoly::from_coeffs(p1.into_iter().map(|(q, re, im)| (q, Complex64::new(re, im))));
        let mut coeffs: Vec<MatTrigPoly> = (2..=n).map(|_| MatTrigPoly::zero(m)).collect();
        for (key, terms) in p {
            let nu: usize = key
                .parse()
                .ok()
                .filter(|nu| (2..=n).contains(nu))
                .ok_or_else(|| Error::config(format!("P.{key}"), format!("key must be an order in 2..={n}")))?;
            for (i, (q, flat)) in terms.into_iter().enumerate() {
                if flat.len() != m * m {
                    return Err(Error::config(
                        format!("P.{key}[{i}]"),
                        format!("expected {} entries for a {m}x{m} matrix, got {}", m * m, flat.len()),
                    ));
                }
                let mat = Mat::from_fn(m, m, |r, c| {
                    let [re, im] = flat[r * m + c];
                    Complex64::new(re, im)
                });
                coeffs[nu - 2].add_coeff(q, mat.as_ref());
            }
        }
        OperatorSpec::new(n, m, p1, coeffs)
    }

    fn from_spec(spec: &OperatorSpec) -> Self {
        let p1 = spec.p1.iter().map(|(q, c)| (q, c.re, c.im)).collect();
        let mut p = BTreeMap::new();
        for (i, poly) in spec.p.iter().enumerate() {
            if poly.is_zero() {
                continue;
            }
            let terms = poly
                .iter()
                .map(|(q, c)| {
                    let flat = (0..spec.m * spec.m)
                        .map(|k| {
                            let z = c[(k / spec.m, k % spec.m)];
                            [z.re, z.im]
                        })
                        .collect();
                    (q, flat)
                })
                .collect();
            p.insert((i + 2).to_string(), terms);
        }
        Self { n: spec.n, m: spec.m, p1, p }
    }
}

/// Mean matrix `C = ∫₀¹ P₂` with its eigendecomposition.
#[derive(Clone, Debug)]
pub struct MeanMatrixData {
    pub c: CMat,
    /// Sorted ascending by real part, then imaginary part.
    pub mu: Vec<Complex64>,
    /// Unit right eigenvectors, largest entry real positive.
    pub v: Vec<Vec<Complex64>>,
    /// Eigenvectors of `C*` for `μ̄_j`, scaled so `⟨u_j, v_j⟩ = 1`.
    pub u: Vec<Vec<Complex64>>,
    pub simple: bool,
    pub min_gap: f64,
    pub deg_tol: f64,
}

/// Default gap threshold `1e-8 (1 + ‖C‖_F)`.
pub fn default_deg_tol(c: &CMat) -> f64 {
    1e-8 * (1.0 + c.norm_l2())
}

/// Eigendecomposition of `C` without the simplicity check.
pub fn mean_matrix_unchecked(spec: &OperatorSpec) -> Result<MeanMatrixData> {
    let c = spec.coeff(2).mean();
    let deg_tol = default_deg_tol(&c);
    decompose_mean(c, deg_tol)
}

/// Like [`mean_matrix_unchecked`] but fails when `C` has a repeated eigenvalue.
pub fn compute_mean_matrix(spec: &OperatorSpec) -> Result<MeanMatrixData> {
    let data = mean_matrix_unchecked(spec)?;
    if !data.simple {
        return Err(Error::DegenerateMeanMatrix { gap: data.min_gap, tol: data.deg_tol });
    }
    Ok(data)
}

pub fn decompose_mean(c: CMat, deg_tol: f64) -> Result<MeanMatrixData> {
    let m = c.nrows();
    let eig = linalg::eigen(c.as_ref())?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (eig.values[a], eig.values[b]);
        x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im))
    });
    let mu: Vec<Complex64> = order.iter().map(|&i| eig.values[i]).collect();
    let mut v = Vec::with_capacity(m);
    let mut u = Vec::with_capacity(m);
    for &i in &order {
        let mut vi = linalg::column(eig.right.as_ref(), i);
        let nv = linalg::norm(&vi);
        vi.iter_mut().for_each(|x| *x /= nv);
        linalg::fix_phase(&mut vi);
        // Row i of V⁻¹ is a left eigenvector; rescale so that uᴴv = 1.
        let mut ui = linalg::conj_row(eig.left_rows.as_ref(), i);
        let s = linalg::inner(&vi, &ui);
        ui.iter_mut().for_each(|x| *x /= s.conj());
        v.push(vi);
        u.push(ui);
    }
    let mut min_gap = f64::INFINITY;
    for i in 0..m {
        for j in i + 1..m {
            min_gap = min_gap.min((mu[i] - mu[j]).norm());
        }
    }
    Ok(MeanMatrixData { c, mu, v, u, simple: min_gap > deg_tol, min_gap, deg_tol })
}

/// Result of the substitution `Y = exp(-∫ p₁/n) Ỹ`-type reduction that
/// removes the `y⁽ⁿ⁻¹⁾` term while keeping the coefficients periodic.
#[derive(Clone, Debug)]
pub struct ReducedSpec {
    pub r: Complex64,
    /// Scalar part added to `P₂`.
    pub q: TrigPoly,
    /// Same order and dimension, `p₁ ≡ 0`.
    pub spec: OperatorSpec,
}

impl ReducedSpec {
    /// Quasimomentum at which the reduced operator carries the eigenvalue the
    /// original operator has at `t`.
    pub fn shifted_t(&self, t: Complex64) -> Complex64 {
        t - Complex64::i() * self.r
    }
}

/// Coefficients `c_i` (trig polynomials) of the operator `(D + g)^j = Σ_i c_i D^{j-i}`.
fn shifted_power(g: &TrigPoly, j: usize) -> Vec<TrigPoly> {
    // (D + g) ∘ Σ c_i D^{j-i} = Σ (c_i' + g c_i) D^{j-i} + c_i D^{j-i+1}
    let mut c = vec![TrigPoly::constant(Complex64::new(1.0, 0.0))];
    for step in 0..j {
        let mut next = vec![TrigPoly::zero(); step + 2];
        for (i, ci) in c.iter().enumerate() {
            next[i] = next[i].add(ci);
            next[i + 1] = next[i + 1].add(&ci.derivative()).add(&g.mul(ci));
        }
        c = next;
    }
    c
}

/// Remove the `p₁` term.
///
/// With `y = e^{G} ỹ`, `G' = g = -p₁/n`, every derivative becomes
/// `y⁽ʲ⁾ = e^{G} (D + g)^j ỹ`, so the reduced coefficients are trigonometric
/// polynomials computed exactly. Writing `g = -r + g̃` with `g̃` mean zero, the
/// factor `e^{-rx}` moves into the quasimomentum, which is the shift recorded
/// in [`ReducedSpec::shifted_t`]; `e^{∫g̃}` is periodic and drops out.
pub fn reduce_p1(spec: &OperatorSpec) -> ReducedSpec {
    let n = spec.n;
    let m = spec.m;
    let r = spec.r();
    if spec.p1.is_zero() {
        return ReducedSpec { r, q: TrigPoly::zero(), spec: spec.clone() };
    }
    let g = spec.p1.scale(Complex64::new(-1.0 / n as f64, 0.0));
    // Scalar operator coefficients A_ν: A₀ = 1, A₁ = p₁.
    let a0 = TrigPoly::constant(Complex64::new(1.0, 0.0));
    let mut new_p: Vec<MatTrigPoly> = (2..=n).map(|_| MatTrigPoly::zero(m)).collect();
    // Scalar contributions from A₀ D^n and A₁ D^{n-1}.
    let mut scalar = vec![TrigPoly::zero(); n + 1];
    for (nu, a) in [(0usize, &a0), (1usize, &spec.p1)] {
        for (i, c) in shifted_power(&g, n - nu).into_iter().enumerate() {
            scalar[nu + i] = scalar[nu + i].add(&a.mul(&c));
        }
    }
    for (target, s) in scalar.iter().enumerate().skip(2) {
        new_p[target - 2] = new_p[target - 2].add(&MatTrigPoly::scalar_identity(s, m));
    }
    // Matrix contributions P_ν (D+g)^{n-ν}.
    for nu in 2..=n {
        for (i, c) in shifted_power(&g, n - nu).into_iter().enumerate() {
            let target = nu + i;
            new_p[target - 2] = new_p[target - 2].add(&spec.coeff(nu).mul_scalar(&c));
        }
    }
    let q = scalar[2].clone();
    let reduced = OperatorSpec { n, m, p1: TrigPoly::zero(), p: new_p };
    ReducedSpec { r, q, spec: reduced }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub condition1: bool,
    pub condition2: bool,
    pub asymptotically_spectral_expected: bool,
    pub note: Option<String>,
}

/// Threshold below which `Re ∫p₁` counts as zero.
pub const RE_NR_TOL: f64 = 1e-12;

pub fn classify_conditions(spec: &OperatorSpec, mean: &MeanMatrixData, red: &ReducedSpec) -> ConditionReport {
    let re_nr = (red.r * spec.n as f64).re;
    let odd = spec.n % 2 == 1;
    let condition1 = odd && mean.simple;
    let condition2 = !odd && mean.simple && re_nr.abs() > RE_NR_TOL;
    let note = if !odd && re_nr.abs() <= RE_NR_TOL {
        Some("n even with Re(nr) = 0: excluded case, not asymptotically spectral in general".into())
    } else if !mean.simple {
        Some("mean matrix has a repeated eigenvalue".into())
    } else {
        None
    };
    ConditionReport {
        condition1,
        condition2,
        asymptotically_spectral_expected: condition1 || condition2,
        note,
    }
}
