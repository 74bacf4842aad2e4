//! Projection norms, asymptotic spectrality scans and classification of
//! multiple eigenvalues into regular points, spectral singularities and
//! essential spectral singularities.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::SeedableRng;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::bands::{BandSet, LeadingModel};
use crate::error::{Error, Result};
use crate::floquet::{wrap_t, DegeneracyCatalog};
use crate::galerkin::{self, BlochEigenpair};
use crate::linalg::{self, CMat};
use crate::operator::OperatorSpec;
use crate::testfn::{SampledRule, TestFunction};

pub const BOUND_CAP: f64 = 1e6;
pub const ESS_MARGIN: f64 = 0.05;
/// Fitted `β` at or above which `1/|α|` counts as blowing up.
pub const SINGULAR_BETA: f64 = 0.1;
pub const MIN_R2: f64 = 0.9;
/// Log-range below which a sampled profile is treated as flat.
const FLAT_LOG_RANGE: f64 = 1e-2;

/// `1/|α|`, or `+∞` for a flagged pair.
pub fn projection_norm(pair: &BlochEigenpair) -> f64 {
    if pair.flagged {
        f64::INFINITY
    } else {
        1.0 / pair.alpha.norm()
    }
}

/// `Σ_J (f, X_p) Ψ_p` on coefficient vectors at a common `t`.
pub fn projection_apply(pairs: &[&BlochEigenpair], f: &[Complex64]) -> Result<Vec<Complex64>> {
    let mut out = vec![Complex64::new(0.0, 0.0); f.len()];
    for pair in pairs {
        if pair.flagged {
            return Err(Error::FlaggedPair { alpha: pair.alpha.norm() });
        }
        let a = linalg::inner(f, &pair.x());
        for (o, p) in out.iter_mut().zip(&pair.psi) {
            *o += a * p;
        }
    }
    Ok(out)
}

/// `(f, X) Ψ`.
pub fn rank1_projection_apply(pair: &BlochEigenpair, f: &[Complex64]) -> Result<Vec<Complex64>> {
    projection_apply(&[pair], f)
}

/// Exact operator norm of `Σ_J (·, X_p) Ψ_p` at real `t`, where the
/// coefficient map is an isometry: `σ_max² = λ_max(G_Ψ G_X)` with the two
/// `|J| × |J|` Gram matrices.
pub fn projection_operator_norm(pairs: &[&BlochEigenpair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    if pairs.iter().any(|p| p.flagged) {
        return Ok(f64::INFINITY);
    }
    let xs: Vec<Vec<Complex64>> = pairs.iter().map(|p| p.x()).collect();
    let n = pairs.len();
    let g_psi = CMat::from_fn(n, n, |i, j| linalg::inner(&pairs[j].psi, &pairs[i].psi));
    let g_x = CMat::from_fn(n, n, |i, j| linalg::inner(&xs[j], &xs[i]));
    let prod = &g_psi * &g_x;
    let ev = linalg::eigenvalues(prod.as_ref())?;
    Ok(ev.iter().map(|z| z.re).fold(0.0, f64::max).sqrt())
}

/// Random unit coefficient vector.
pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<Complex64> {
    let mut v: Vec<Complex64> =
        (0..dim).map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
    let n = linalg::norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

#[derive(Clone, Debug, Serialize)]
pub struct Rank1Check {
    pub inverse_alpha: f64,
    /// Largest `‖A f‖` over random unit starts refined by power iteration.
    pub empirical_norm: f64,
    /// Largest `‖A f‖` over the raw random starts.
    pub raw_random_max: f64,
    pub relative_gap: f64,
    /// `σ₂/σ₁` of the matrix of sampled outputs.
    pub rank_ratio: f64,
    /// Worst `‖A(Af) - Af‖ / ‖Af‖`.
    pub idempotence: f64,
}

/// Empirical operator norm, rank and idempotence of `f ↦ (f, X)Ψ`.
pub fn rank1_check(pair: &BlochEigenpair, trials: usize, seed: u64) -> Result<Rank1Check> {
    let dim = pair.psi.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = pair.x();
    let apply = |f: &[Complex64]| rank1_projection_apply(pair, f);
    let adjoint = |g: &[Complex64]| -> Vec<Complex64> {
        let a = linalg::inner(g, &pair.psi);
        x.iter().map(|v| a * v).collect()
    };
    let (mut best, mut raw, mut idem) = (0.0f64, 0.0f64, 0.0f64);
    let mut outputs: Vec<Vec<Complex64>> = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut f = random_unit(&mut rng, dim);
        let af = apply(&f)?;
        let n_af = linalg::norm(&af);
        raw = raw.max(n_af);
        let aaf = apply(&af)?;
        let diff: Vec<Complex64> = aaf.iter().zip(&af).map(|(a, b)| a - b).collect();
        if n_af > 0.0 {
            idem = idem.max(linalg::norm(&diff) / n_af);
        }
        outputs.push(af);
        for _ in 0..3 {
            let g = adjoint(&apply(&f)?);
            let ng = linalg::norm(&g);
            if ng == 0.0 {
                break;
            }
            f = g.iter().map(|v| v / ng).collect();
        }
        best = best.max(linalg::norm(&apply(&f)?));
    }
    let sampled = CMat::from_fn(dim, outputs.len(), |i, j| outputs[j][i]);
    let sv = linalg::singular_values(sampled.as_ref())?;
    let mut sv = sv;
    sv.sort_by(|a, b| b.total_cmp(a));
    let rank_ratio = if sv.len() > 1 && sv[0] > 0.0 { sv[1] / sv[0] } else { 0.0 };
    let inv = projection_norm(pair);
    Ok(Rank1Check {
        inverse_alpha: inv,
        empirical_norm: best,
        raw_random_max: raw,
        relative_gap: (best - inv).abs() / inv,
        rank_ratio,
        idempotence: idem,
    })
}

/// Half-open rectangle `[re.0, re.1) × [im.0, im.1)`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Rect {
    pub re: (f64, f64),
    pub im: (f64, f64),
}

impl Rect {
    pub fn contains(&self, z: Complex64) -> bool {
        z.re >= self.re.0 && z.re < self.re.1 && z.im >= self.im.0 && z.im < self.im.1
    }
}

/// Random finite unions of rectangles placed around leading-model values
/// for `k_lo ≤ |k| ≤ k_hi`. They depend only on the model and the seed,
/// not on the truncation, so scans at different `K` see the same sets.
pub fn random_unions(model: &LeadingModel, m: usize, k_lo: usize, k_hi: usize, trials: usize, seed: u64) -> Vec<Vec<Rect>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.n as f64;
    (0..trials)
        .map(|_| {
            let count = rng.random_range(1..=4usize);
            (0..count)
                .map(|_| {
                    let k = rng.random_range(k_lo as i64..=k_hi as i64) * if rng.random::<bool>() { 1 } else { -1 };
                    let j = rng.random_range(0..m);
                    let t = rng.random_range(-PI..PI);
                    let c = model.eval(k, j, t);
                    // Scale of dλ/dt along the branch.
                    let w = (TAU * k as f64 + t).abs().max(1.0);
                    let slope = n * w.powf(n - 1.0);
                    let hr = rng.random_range(0.05..1.5) * slope;
                    let hi = rng.random_range(0.05..1.5) * slope;
                    Rect { re: (c.re - hr, c.re + hr), im: (c.im - hi, c.im + hi) }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanReport {
    pub k_trunc: usize,
    pub m_threshold: f64,
    /// Largest trusted `|k|` of a counted eigenvalue.
    pub k_cap: usize,
    pub trials: usize,
    pub t_points: usize,
    /// Supremum over `t` for each union.
    pub per_union: Vec<f64>,
    pub sup: f64,
    pub bound_cap: f64,
    pub bounded: bool,
}

/// `sup_{γ, t} ‖e(t, γ)‖` over the supplied unions and grid.
pub fn bounded_projection_scan(
    spec: &OperatorSpec,
    k_trunc: usize,
    t_grid: &[f64],
    unions: &[Vec<Rect>],
    m_threshold: f64,
    k_cap: usize,
    bound_cap: f64,
) -> Result<ScanReport> {
    let per_t: Vec<Vec<f64>> = t_grid
        .par_iter()
        .map(|&t| -> Result<Vec<f64>> {
            let pairs = galerkin::solve_eigen(spec, Complex64::new(t, 0.0), k_trunc)?;
            let eligible: Vec<&BlochEigenpair> = pairs
                .iter()
                .filter(|p| p.lambda.norm() > m_threshold && p.dominant_mode().0.unsigned_abs() as usize <= k_cap)
                .collect();
            unions
                .iter()
                .map(|u| {
                    let inside: Vec<&BlochEigenpair> =
                        eligible.iter().copied().filter(|p| u.iter().any(|r| r.contains(p.lambda))).collect();
                    projection_operator_norm(&inside)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut per_union = vec![0.0f64; unions.len()];
    for row in &per_t {
        for (s, v) in per_union.iter_mut().zip(row) {
            *s = s.max(*v);
        }
    }
    let sup = linalg::max_or_nan(per_union.iter().cloned());
    Ok(ScanReport {
        k_trunc,
        m_threshold,
        k_cap,
        trials: unions.len(),
        t_points: t_grid.len(),
        per_union,
        sup,
        bound_cap,
        bounded: sup.is_finite() && sup < bound_cap,
    })
}

/// Threshold below every model eigenvalue with `|k| ≥ k_lo`.
pub fn default_threshold(model: &LeadingModel, m: usize, k_lo: usize) -> f64 {
    let mut lo = f64::INFINITY;
    for j in 0..m {
        for i in 0..=64 {
            let t = -PI + TAU * i as f64 / 64.0;
            for s in [1i64, -1] {
                lo = lo.min(model.eval(s * k_lo as i64, j, t).norm());
            }
        }
    }
    0.5 * lo
}

#[derive(Clone, Debug, Serialize)]
pub struct BlowupFit {
    pub slope: f64,
    pub r2: f64,
    pub flat: bool,
    pub deltas: Vec<f64>,
    pub values: Vec<f64>,
}

/// Least-squares slope of `log v` against `log |t - t0|` at
/// `t0 ± delta0·2^{-ℓ}`, `ℓ < levels`.
pub fn fit_blowup_exponent(mut v: impl FnMut(f64) -> Result<f64>, t0: f64, delta0: f64, levels: usize) -> Result<BlowupFit> {
    let mut deltas = Vec::new();
    let mut values = Vec::new();
    for l in 0..levels {
        let d = delta0 * 0.5f64.powi(l as i32);
        for s in [-1.0, 1.0] {
            deltas.push(d);
            values.push(v(wrap_t(t0 + s * d))?);
        }
    }
    Ok(fit_samples(deltas, values))
}

fn fit_samples(deltas: Vec<f64>, values: Vec<f64>) -> BlowupFit {
    let tiny = f64::MIN_POSITIVE;
    let lx: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
    let ly: Vec<f64> = values.iter().map(|v| v.max(tiny).ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let range = ly.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ly.iter().cloned().fold(f64::INFINITY, f64::min);
    let flat = range < FLAT_LOG_RANGE;
    let r2 = if flat || syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    BlowupFit { slope, r2, flat, deltas, values }
}

/// `|α|` of the worst involved branch and the expansion integrand
/// `g = max_f |a(t)| ‖Ψ‖` at one quasimomentum.
#[derive(Clone, Copy, Debug)]
pub struct ProbeSample {
    pub alpha: f64,
    pub g: f64,
}

pub trait ProbeSource: Sync {
    fn sample(&self, t: f64) -> Result<ProbeSample>;
}

/// Closed-form branch data for injection tests.
pub struct SyntheticBranch<F: Fn(f64) -> ProbeSample + Sync> {
    pub f: F,
}

impl<F: Fn(f64) -> ProbeSample + Sync> ProbeSource for SyntheticBranch<F> {
    fn sample(&self, t: f64) -> Result<ProbeSample> {
        Ok((self.f)(t))
    }
}

/// The `cluster` Galerkin eigenpairs nearest a multiple eigenvalue.
pub struct GalerkinProbe<'a> {
    pub spec: &'a OperatorSpec,
    pub k_trunc: usize,
    pub target: Complex64,
    pub cluster: usize,
    pub probes: &'a [SampledRule],
}

impl ProbeSource for GalerkinProbe<'_> {
    fn sample(&self, t: f64) -> Result<ProbeSample> {
        let pairs = galerkin::solve_eigen(self.spec, Complex64::new(t, 0.0), self.k_trunc)?;
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        idx.sort_by(|&a, &b| (pairs[a].lambda - self.target).norm().total_cmp(&(pairs[b].lambda - self.target).norm()));
        let blocks: Vec<Vec<Complex64>> = self.probes.iter().map(|r| r.fhat_block(t, self.k_trunc)).collect();
        let mut alpha = f64::INFINITY;
        let mut g = 0.0f64;
        for &i in idx.iter().take(self.cluster) {
            let p = &pairs[i];
            alpha = alpha.min(p.alpha.norm());
            let x = p.x();
            for b in &blocks {
                // ‖Ψ‖ = 1, so g is |a|.
                g = g.max(linalg::inner(b, &x).norm());
            }
        }
        Ok(ProbeSample { alpha, g })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SingularClass {
    RegularMultiple,
    SpectralSingularity,
    EssentialSpectralSingularity,
    Undetermined,
}

impl SingularClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            SingularClass::RegularMultiple => "regular_multiple",
            SingularClass::SpectralSingularity => "spectral_singularity",
            SingularClass::EssentialSpectralSingularity => "essential_spectral_singularity",
            SingularClass::Undetermined => "undetermined",
        }
    }

    pub fn is_singular(&self) -> bool {
        matches!(self, SingularClass::SpectralSingularity | SingularClass::EssentialSpectralSingularity)
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ClassifyParams {
    pub delta0: f64,
    pub levels: usize,
    pub bound_cap: f64,
    pub ess_margin: f64,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        ClassifyParams { delta0: 0.05, levels: 8, bound_cap: BOUND_CAP, ess_margin: ESS_MARGIN }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SingularEntry {
    pub t0: f64,
    /// Band labels `p` meeting at `(a, t0)`.
    pub branches: Vec<usize>,
    pub delta0: f64,
    pub beta: f64,
    pub r2: f64,
    pub beta_g: f64,
    pub r2_g: f64,
    pub sup_inverse_alpha: f64,
    pub class: SingularClass,
    /// Whether the probe integrands stay integrable near `t0`.
    pub integrable: bool,
}

/// Classify one `(a, t0)` from samples at `t0 ± δ_ℓ`.
pub fn classify_point(source: &dyn ProbeSource, t0: f64, branches: Vec<usize>, delta0: f64, params: &ClassifyParams) -> Result<SingularEntry> {
    let mut samples = Vec::new();
    let fa = fit_blowup_exponent(
        |t| {
            let s = source.sample(t)?;
            samples.push(s);
            Ok(s.alpha)
        },
        t0,
        delta0,
        params.levels,
    )?;
    let fg = fit_samples(fa.deltas.clone(), samples.iter().map(|s| s.g).collect());
    let sup_inv = samples.iter().map(|s| 1.0 / s.alpha).fold(0.0, f64::max);
    let beta = fa.slope;
    let beta_g = -fg.slope;
    let integrable = beta_g < 1.0 - params.ess_margin;
    let class = if fa.r2 < MIN_R2 {
        SingularClass::Undetermined
    } else if beta < SINGULAR_BETA && sup_inv < params.bound_cap {
        SingularClass::RegularMultiple
    } else if fg.r2 < MIN_R2 {
        SingularClass::Undetermined
    } else if integrable {
        SingularClass::SpectralSingularity
    } else {
        SingularClass::EssentialSpectralSingularity
    };
    Ok(SingularEntry { t0, branches, delta0, beta, r2: fa.r2, beta_g, r2_g: fg.r2, sup_inverse_alpha: sup_inv, class, integrable })
}

#[derive(Clone, Debug, Serialize)]
pub struct MultipleEigenvalue {
    pub a: Complex64,
    pub a_set: Vec<f64>,
    pub entries: Vec<SingularEntry>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SingularityReport {
    pub multiple_eigenvalues: Vec<MultipleEigenvalue>,
    pub e: Vec<f64>,
    pub s: Vec<usize>,
    /// Per `t_i ∈ E` (same order), the branches nonintegrable near `t_i`.
    pub s_i: Vec<Vec<usize>>,
    /// Per `t_i`, the partition of `S_i` by the multiple eigenvalue hit.
    pub s_ij: Vec<Vec<Vec<usize>>>,
    /// The eigenvalue `Λ_j(t_i)` of each block of `s_ij`.
    pub s_ij_values: Vec<Vec<Complex64>>,
    pub bound_cap: f64,
    pub ess_margin: f64,
}

fn circ_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

impl SingularityReport {
    /// Build `E`, `S`, `S_i`, `S_ij` from classified entries. Entries with
    /// the same `t0` (to `1e-9`) share a singular quasimomentum; entries
    /// whose eigenvalues agree within `deg_tol` share a bundle.
    pub fn from_entries(multiple: Vec<MultipleEigenvalue>, deg_tol: f64, params: &ClassifyParams) -> Self {
        let mut ess: Vec<(f64, Complex64, &SingularEntry)> = Vec::new();
        for me in &multiple {
            for e in &me.entries {
                if e.class == SingularClass::EssentialSpectralSingularity {
                    ess.push((wrap_t(e.t0), me.a, e));
                }
            }
        }
        ess.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut e_set: Vec<f64> = Vec::new();
        for (t, _, _) in &ess {
            if e_set.last().is_none_or(|&l| circ_dist(l, *t) > 1e-9) {
                e_set.push(*t);
            }
        }
        let mut s_i = Vec::new();
        let mut s_ij = Vec::new();
        let mut s_ij_values = Vec::new();
        for &ti in &e_set {
            let mut groups: Vec<(Complex64, Vec<usize>)> = Vec::new();
            for (t, a, entry) in &ess {
                if circ_dist(*t, ti) > 1e-9 {
                    continue;
                }
                let scale = deg_tol * (1.0 + a.norm());
                match groups.iter_mut().find(|(v, _)| (v - a).norm() <= scale) {
                    Some(g) => g.1.extend(entry.branches.iter().copied()),
                    None => groups.push((*a, entry.branches.clone())),
                }
            }
            // A branch meets one eigenvalue at t_i; keep its first bundle.
            let mut seen = std::collections::BTreeSet::new();
            let mut blocks = Vec::new();
            let mut values = Vec::new();
            for (a, mut b) in groups {
                b.sort_unstable();
                b.dedup();
                b.retain(|p| seen.insert(*p));
                if !b.is_empty() {
                    blocks.push(b);
                    values.push(a);
                }
            }
            let mut union: Vec<usize> = blocks.iter().flatten().copied().collect();
            union.sort_unstable();
            s_i.push(union);
            s_ij.push(blocks);
            s_ij_values.push(values);
        }
        let mut s: Vec<usize> = s_i.iter().flatten().copied().collect();
        s.sort_unstable();
        s.dedup();
        SingularityReport {
            multiple_eigenvalues: multiple,
            e: e_set,
            s,
            s_i,
            s_ij,
            s_ij_values,
            bound_cap: params.bound_cap,
            ess_margin: params.ess_margin,
        }
    }

    /// Report document with the published key names.
    pub fn to_json(&self) -> Value {
        let mv: Vec<Value> = self
            .multiple_eigenvalues
            .iter()
            .map(|me| {
                json!({
                    "a": [me.a.re, me.a.im],
                    "A": me.a_set,
                    "entries": me.entries.iter().map(|e| json!({
                        "t0": e.t0,
                        "beta": e.beta,
                        "beta_g": e.beta_g,
                        "class": e.class.as_str(),
                        "r2": e.r2,
                        "r2_g": e.r2_g,
                        "branches": e.branches,
                        "sup_inverse_alpha": e.sup_inverse_alpha,
                        "integrable": e.integrable,
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        let s_i: BTreeMap<String, Value> = self.s_i.iter().enumerate().map(|(i, v)| ((i + 1).to_string(), json!(v))).collect();
        let s_ij: BTreeMap<String, Value> = self
            .s_ij
            .iter()
            .enumerate()
            .map(|(i, blocks)| {
                let inner: BTreeMap<String, Value> = blocks.iter().enumerate().map(|(j, b)| ((j + 1).to_string(), json!(b))).collect();
                ((i + 1).to_string(), json!(inner))
            })
            .collect();
        json!({
            "multiple_eigenvalues": mv,
            "E": self.e,
            "S": self.s,
            "S_i": s_i,
            "S_ij": s_ij,
            "bound_cap": self.bound_cap,
            "ess_margin": self.ess_margin,
        })
    }
}

/// Fixed generic bump plus `extra` seeded random bumps.
pub fn default_probes(m: usize, extra: usize, seed: u64) -> Vec<TestFunction> {
    let weights: Vec<Complex64> = (0..m).map(|j| Complex64::new(1.0, 0.3 * j as f64)).collect();
    let mut out = vec![TestFunction::bump((-1.0, 1.0), weights).expect("valid bump")];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..extra {
        out.push(TestFunction::random_smooth(&mut rng, m));
    }
    out
}

/// Classify every `(a_j, t0 ∈ A_j)` of the catalog.
pub fn classify_singularities(
    spec: &OperatorSpec,
    k_trunc: usize,
    catalog: &DegeneracyCatalog,
    bands: &BandSet,
    probes: &[TestFunction],
    deg_tol: f64,
    params: &ClassifyParams,
) -> Result<SingularityReport> {
    let xi_max = TAU * (k_trunc as f64 + 1.0);
    let rules: Vec<SampledRule> = probes.iter().map(|f| f.rule(xi_max)).collect();
    let mut all_t: Vec<f64> = catalog.union();
    all_t.extend(bands.crossing_suspects.iter().copied());
    let jobs: Vec<(usize, f64)> = catalog.sets.iter().enumerate().flat_map(|(j, s)| s.iter().map(move |&t| (j, t))).collect();
    let entries: Vec<SingularEntry> = jobs
        .par_iter()
        .map(|&(j, t0)| -> Result<SingularEntry> {
            let a = catalog.a[j];
            let gap = all_t.iter().map(|&s| circ_dist(s, t0)).filter(|&d| d > 1e-9).fold(f64::INFINITY, f64::min);
            let delta0 = params.delta0.min(0.5 * gap);
            let pairs = galerkin::eigenvalues(spec, Complex64::new(t0, 0.0), k_trunc)?;
            let tol = 1e-5 * (1.0 + a.norm());
            let cluster = pairs.iter().filter(|l| (*l - a).norm() <= tol).count().max(2);
            let mut near: Vec<(f64, usize)> =
                bands.bands.iter().map(|b| ((bands.interpolate(b, t0) - a).norm(), b.p)).collect();
            near.sort_by(|x, y| x.0.total_cmp(&y.0));
            let mut branches: Vec<usize> = near.iter().take(cluster).map(|x| x.1).collect();
            branches.sort_unstable();
            let probe = GalerkinProbe { spec, k_trunc, target: a, cluster, probes: &rules };
            classify_point(&probe, t0, branches, delta0, params)
        })
        .collect::<Result<_>>()?;
    let mut it = entries.into_iter();
    let multiple = catalog
        .a
        .iter()
        .zip(&catalog.sets)
        .map(|(&a, set)| MultipleEigenvalue { a, a_set: set.clone(), entries: it.by_ref().take(set.len()).collect() })
        .collect();
    Ok(SingularityReport::from_entries(multiple, deg_tol, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::galerkin::eigenpairs_of;
    use crate::galerkin::GalerkinMatrix;
    use faer::Mat;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn jordan_pair(delta: f64) -> BlochEigenpair {
        let mat = Mat::from_fn(2, 2, |i, j| match (i, j) {
            (0, 1) => c(1.0, 0.0),
            (1, 0) => c(delta, 0.0),
            _ => c(0.5, 0.0),
        });
        let g = GalerkinMatrix { t: c(0.0, 0.0), k: 0, m: 2, mat };
        eigenpairs_of(&g).unwrap().remove(0)
    }

    #[test]
    fn projection_norm_matches_two_by_two_oracle() {
        // Eigenvectors (1, ±√δ) and left vectors (±√δ, 1): α = 2√δ/(1+δ).
        let d: f64 = 1e-4;
        let pair = jordan_pair(d);
        let oracle = (1.0 + d) / (2.0 * d.sqrt());
        assert!((projection_norm(&pair) - oracle).abs() < 1e-8 * oracle);
        assert!((oracle - 50.005).abs() < 1e-9);
        let chk = rank1_check(&pair, 200, 7).unwrap();
        assert!(chk.relative_gap < 0.02);
        assert!(chk.rank_ratio < 1e-8);
        assert!(chk.idempotence < 1e-10);
    }

    #[test]
    fn projection_fixes_range_and_kills_kernel() {
        let pair = jordan_pair(0.3);
        let out = rank1_projection_apply(&pair, &pair.psi).unwrap();
        for (a, b) in out.iter().zip(&pair.psi) {
            assert!((a - b).norm() < 1e-12);
        }
        // f orthogonal to Ψ* lies in the kernel.
        let s = &pair.psi_star;
        let f = vec![-s[1].conj(), s[0].conj()];
        let out = rank1_projection_apply(&pair, &f).unwrap();
        assert!(linalg::norm(&out) < 1e-12);
    }

    #[test]
    fn operator_norm_of_free_projection_sums_is_one() {
        let spec = OperatorSpec::free(2, 1).unwrap();
        let pairs = galerkin::solve_eigen(&spec, c(0.4, 0.0), 6).unwrap();
        let sel: Vec<&BlochEigenpair> = pairs.iter().step_by(3).collect();
        assert!((projection_operator_norm(&sel).unwrap() - 1.0).abs() < 1e-10);
        assert!((projection_norm(&pairs[0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn synthetic_blowup_exponents() {
        for (b, expect) in [(0.5, 0.5), (1.0, 1.0)] {
            let fit = fit_blowup_exponent(|t: f64| Ok((t - 0.3).abs().powf(b)), 0.3, 0.05, 8).unwrap();
            assert!((fit.slope - expect).abs() < 0.01);
            assert!(fit.r2 > 0.999);
        }
        let flat = fit_blowup_exponent(|t: f64| Ok(1.0 + 1e-4 * t), 0.3, 0.05, 8).unwrap();
        assert!(flat.flat && flat.slope.abs() < 1e-3);
    }

    #[test]
    fn synthetic_injection_classes() {
        let params = ClassifyParams::default();
        let t0 = 0.7;
        for (beta, expect) in [
            (0.5, SingularClass::SpectralSingularity),
            (1.2, SingularClass::EssentialSpectralSingularity),
            (0.0, SingularClass::RegularMultiple),
        ] {
            let src = SyntheticBranch {
                f: move |t: f64| {
                    let alpha = if beta == 0.0 { 0.8 } else { (t - t0).abs().powf(beta) };
                    ProbeSample { alpha, g: 0.6 / alpha }
                },
            };
            let e = classify_point(&src, t0, vec![3, 4], 0.05, &params).unwrap();
            assert_eq!(e.class, expect, "beta {beta}");
            if beta > 0.0 {
                assert!((e.beta - beta).abs() < 0.02);
            }
        }
    }

    #[test]
    fn noisy_profile_is_undetermined() {
        let src = SyntheticBranch {
            f: |t: f64| {
                let alpha = if ((t * 1e4) as i64) % 2 == 0 { 1e-3 } else { 1.0 };
                ProbeSample { alpha, g: 1.0 }
            },
        };
        let e = classify_point(&src, 0.0, vec![1], 0.05, &ClassifyParams::default()).unwrap();
        assert_eq!(e.class, SingularClass::Undetermined);
    }

    fn entry(t0: f64, branches: Vec<usize>, class: SingularClass) -> SingularEntry {
        SingularEntry {
            t0,
            branches,
            delta0: 0.05,
            beta: 1.2,
            r2: 1.0,
            beta_g: 1.2,
            r2_g: 1.0,
            sup_inverse_alpha: 1e9,
            class,
            integrable: class != SingularClass::EssentialSpectralSingularity,
        }
    }

    #[test]
    fn set_machinery() {
        let ess = SingularClass::EssentialSpectralSingularity;
        let multiple = vec![
            MultipleEigenvalue { a: c(1.0, 0.0), a_set: vec![0.2, -1.0], entries: vec![entry(0.2, vec![1, 2], ess), entry(-1.0, vec![3, 4], SingularClass::SpectralSingularity)] },
            MultipleEigenvalue { a: c(5.0, 0.0), a_set: vec![0.2], entries: vec![entry(0.2, vec![5, 6], ess)] },
        ];
        let r = SingularityReport::from_entries(multiple, 1e-8, &ClassifyParams::default());
        assert_eq!(r.e, vec![0.2]);
        assert_eq!(r.s, vec![1, 2, 5, 6]);
        assert_eq!(r.s_ij[0], vec![vec![1, 2], vec![5, 6]]);
        let j = r.to_json();
        assert_eq!(j["S_ij"]["1"]["2"], json!([5, 6]));
        assert_eq!(j["multiple_eigenvalues"][0]["entries"][1]["class"], "spectral_singularity");
    }

    #[test]
    fn constant_c_scan_respects_eigenvector_bound() {
        // Non-normal C: sup over rectangle unions is governed by ‖v_j‖‖u_j‖.
        let cm = Mat::from_fn(2, 2, |i, j| match (i, j) {
            (0, 0) => c(1.0, 0.0),
            (0, 1) => c(2.0, 0.0),
            (1, 1) => c(4.0, 0.0),
            _ => c(0.0, 0.0),
        });
        let spec = OperatorSpec::constant_c(2, cm.clone()).unwrap();
        let mean = crate::operator::compute_mean_matrix(&spec).unwrap();
        let mut oracle = 1.0f64;
        for j in 0..2 {
            oracle = oracle.max(linalg::norm(&mean.v[j]) * linalg::norm(&mean.u[j]));
        }
        let model = LeadingModel::new(&spec).unwrap();
        let unions = random_unions(&model, 2, 2, 5, 40, 42);
        let m = default_threshold(&model, 2, 2);
        let grid: Vec<f64> = (0..16).map(|i| -PI + TAU * (i + 1) as f64 / 16.0).collect();
        let rep = bounded_projection_scan(&spec, 12, &grid, &unions, m, 5, BOUND_CAP).unwrap();
        assert!(rep.bounded);
        assert!(rep.sup <= oracle + 1e-8, "{} {}", rep.sup, oracle);
        assert!(rep.sup >= 1.0 - 1e-10);
    }
}
