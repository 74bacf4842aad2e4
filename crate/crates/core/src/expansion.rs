//! Gelfand transform, expansion coefficients and the quasimomentum
//! integrals that reassemble `f` from Bloch eigenfunctions.
//!
//! Branch terms `a_k(t) Ψ_{k,t}(x)` are integrated over `(-π, π]` on rules
//! split at the multiple-eigenvalue set. Branches that hit an essential
//! spectral singularity are summed before integration over
//! `I(δ) = (-π, π] \ ∪(t_i - δ, t_i + δ)` and the limit `δ → 0` is taken by
//! extrapolation.

use std::f64::consts::{PI, TAU};

use faer::Mat;
use num_complex::Complex64;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::bands::{label_p, BandSet, LeadingModel};
use crate::error::{Error, Result};
use crate::galerkin::{self, basis_index, BlochEigenpair};
use crate::linalg::{self, CMat};
use crate::operator::OperatorSpec;
use crate::quad::{self, Rule};
use crate::singular::{projection_operator_norm, random_unit, SingularityReport};
use crate::testfn::{SampledRule, TestFunction};

type C = Complex64;

const ZERO: C = C::new(0.0, 0.0);

/// `f_t` at each point of `x_grid`, flattened as `[i * m + j]`.
pub fn gelfand_transform(f: &TestFunction, t: f64, x_grid: &[f64]) -> Vec<C> {
    x_grid.iter().flat_map(|&x| f.gelfand(t, x)).collect()
}

/// Worst pointwise error of `(1/2π) ∫ f_t(x) dt = f(x)` with `nt` uniform
/// quasimomentum nodes. `f_t(x)` is a trigonometric polynomial in `t`, so
/// the periodic trapezoid rule is exact once `nt` exceeds its degree.
pub fn gelfand_inversion_error(f: &TestFunction, x_grid: &[f64], nt: usize) -> f64 {
    let ts: Vec<f64> = (0..nt).map(|i| -PI + TAU * (i as f64 + 0.5) / nt as f64).collect();
    let mut worst = 0.0f64;
    for &x in x_grid {
        let mut acc = vec![ZERO; f.m()];
        for &t in &ts {
            for (a, v) in acc.iter_mut().zip(f.gelfand(t, x)) {
                *a += v / nt as f64;
            }
        }
        for (a, v) in acc.iter().zip(f.eval(x)) {
            worst = worst.max((a - v).norm());
        }
    }
    worst
}

/// `((1/2π) ∫ ‖f_t‖²_{(0,1)} dt, ‖f‖²)`.
pub fn gelfand_parseval(f: &TestFunction, nt: usize) -> (f64, f64) {
    let cell = quad::composite(0.0, 1.0, 64, 20);
    let ts: Vec<f64> = (0..nt).map(|i| -PI + TAU * (i as f64 + 0.5) / nt as f64).collect();
    let lhs: f64 = ts
        .iter()
        .map(|&t| cell.iter().map(|(x, w)| w * f.gelfand(t, x).iter().map(|v| v.norm_sqr()).sum::<f64>()).sum::<f64>())
        .sum::<f64>()
        / nt as f64;
    (lhs, f.norm().powi(2))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientMode {
    /// `∫₀¹ f_t X̄` on the fundamental cell.
    Cell,
    /// `∫_ℝ f X̄` over the support of `f`, `X` extended quasi-periodically.
    Line,
}

/// `a(t) = (f_t, X_t)` for a real-`t` pair.
pub fn coefficient_a(f: &TestFunction, pair: &BlochEigenpair, mode: CoefficientMode) -> Result<C> {
    if pair.flagged {
        return Err(Error::FlaggedPair { alpha: pair.alpha.norm() });
    }
    let t = pair.t.re;
    match mode {
        CoefficientMode::Cell => {
            let cell = quad::composite(0.0, 1.0, 64, 20);
            let mut acc = ZERO;
            for (x, w) in cell.iter() {
                let ft = f.gelfand(t, x);
                let xv = pair.eval_x(x);
                for (a, b) in ft.iter().zip(&xv) {
                    acc += a * b.conj() * w;
                }
            }
            Ok(acc)
        }
        CoefficientMode::Line => {
            let xi_max = TAU * (pair.k_trunc as f64 + 1.0);
            Ok(f.rule(xi_max).inner_with(|x| pair.eval_x(x)))
        }
    }
}

/// `a(t)` from the transform block `f̂_j(2πk + t)`; identical to the line
/// mode because `X = Σ d_{k,j} e_j e^{i(2πk+t)x}` at real `t`.
pub fn coefficient_from_block(block: &[C], pair: &BlochEigenpair) -> C {
    linalg::inner(block, &pair.x())
}

/// Integral of a vector-valued integrand over `(-π, π]` with panel
/// refinement.
#[derive(Clone, Debug, Serialize)]
pub struct BranchIntegral {
    pub value: Vec<C>,
    /// `‖I_{2P} - I_P‖_∞` at the finest pair of levels.
    pub error: f64,
    /// `∫ ‖integrand‖ dt` at each refinement level.
    pub abs_sequence: Vec<f64>,
    pub panels: Vec<usize>,
}

/// Integrates `g(t)` over `(-π, π]` split at `breaks`, doubling the panel
/// count `levels` times. Absolute integrability is tested on
/// `∫ ‖g(t)‖ dt`: if its increments stop shrinking the branch is
/// non-integrable and must be huddled.
pub fn integrate_branch<G>(g: G, breaks: &[f64], panels: usize, order: usize, levels: usize, label: usize, tol: f64) -> Result<BranchIntegral>
where
    G: Fn(f64) -> Result<Vec<C>> + Sync,
{
    let levels = levels.max(3);
    let mut values: Vec<Vec<C>> = Vec::new();
    let mut abs_seq = Vec::new();
    let mut ps = Vec::new();
    for l in 0..levels {
        let p = panels << l;
        let rule = quad::quasimomentum_rule(breaks, p, order);
        let samples: Vec<Vec<C>> = rule.nodes.par_iter().map(|&t| g(t)).collect::<Result<_>>()?;
        let dim = samples.first().map_or(0, |s| s.len());
        let mut v = vec![ZERO; dim];
        let mut a = 0.0;
        for (s, w) in samples.iter().zip(&rule.weights) {
            for (vi, si) in v.iter_mut().zip(s) {
                *vi += si * *w;
            }
            a += w * linalg::norm(s);
        }
        values.push(v);
        abs_seq.push(a);
        ps.push(p);
    }
    let n = abs_seq.len();
    let d_last = (abs_seq[n - 1] - abs_seq[n - 2]).abs();
    let d_prev = (abs_seq[n - 2] - abs_seq[n - 3]).abs();
    if d_last > tol * abs_seq[n - 1].max(1.0) && d_last > 0.5 * d_prev {
        return Err(Error::NonIntegrableBranch { label });
    }
    let error = max_diff(&values[n - 1], &values[n - 2]);
    Ok(BranchIntegral { value: values.pop().unwrap_or_default(), error, abs_sequence: abs_seq, panels: ps })
}

fn max_diff(a: &[C], b: &[C]) -> f64 {
    linalg::max_or_nan(a.iter().zip(b).map(|(x, y)| (x - y).norm()))
}

#[derive(Clone, Debug, Serialize)]
pub struct HuddleResult {
    pub deltas: Vec<f64>,
    /// `I_ℓ = ∫_{I(δ_ℓ)}` of the summed integrand.
    pub sequence: Vec<Vec<C>>,
    pub limit: Vec<C>,
    /// `‖I_L - I_{L-1}‖_∞`.
    pub tail: f64,
    /// Observed convergence order in `δ`, when the increments contract.
    pub order: Option<f64>,
    pub converged: bool,
}

impl HuddleResult {
    pub fn zero(dim: usize, delta0: f64, levels: usize) -> Self {
        HuddleResult {
            deltas: (0..levels).map(|l| delta0 * 0.5f64.powi(l as i32)).collect(),
            sequence: vec![vec![ZERO; dim]; levels],
            limit: vec![ZERO; dim],
            tail: 0.0,
            order: None,
            converged: true,
        }
    }

    pub fn sequence_norms(&self) -> Vec<f64> {
        self.sequence.iter().map(|v| v.iter().map(|x| x.norm()).fold(0.0, f64::max)).collect()
    }
}

/// Complement in `(-π, π]` of the windows `(t_i - δ, t_i + δ)`.
fn complement(e: &[f64], delta: f64) -> Vec<(f64, f64)> {
    let mut holes: Vec<(f64, f64)> = e.iter().flat_map(|&t| quad::wrap_interval(t - delta, t + delta)).collect();
    holes.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::new();
    let mut cur = -PI;
    for (a, b) in holes {
        if a > cur {
            out.push((cur, a));
        }
        cur = cur.max(b);
    }
    if cur < PI {
        out.push((cur, PI));
    }
    out
}

fn integrate_rule<G>(g: &G, rule: &Rule, dim: usize) -> Result<Vec<C>>
where
    G: Fn(f64) -> Result<Vec<C>> + Sync,
{
    let samples: Vec<Vec<C>> = rule.nodes.par_iter().map(|&t| g(t)).collect::<Result<_>>()?;
    let mut v = vec![ZERO; dim];
    for (s, w) in samples.iter().zip(&rule.weights) {
        for (vi, si) in v.iter_mut().zip(s) {
            *vi += si * *w;
        }
    }
    Ok(v)
}

/// `lim_{δ→0} ∫_{I(δ)} g(t) dt` for the summed integrand `g` over `S`.
///
/// `I(δ₀)` is integrated once on rules split at `a_breaks`; each further
/// level adds the two annuli `δ_ℓ < |t - t_i| < δ_{ℓ-1}`. The limit is
/// Richardson-extrapolated with the observed contraction ratio of the
/// increments and must pass a Cauchy test at `tail_tol`.
#[allow(clippy::too_many_arguments)]
pub fn huddled_integral<G>(
    g: G,
    dim: usize,
    e: &[f64],
    a_breaks: &[f64],
    delta0: f64,
    levels: usize,
    panels: usize,
    order: usize,
    tail_tol: f64,
) -> Result<HuddleResult>
where
    G: Fn(f64) -> Result<Vec<C>> + Sync,
{
    if e.is_empty() {
        return Ok(HuddleResult::zero(dim, delta0, levels));
    }
    let levels = levels.max(3);
    let deltas: Vec<f64> = (0..levels).map(|l| delta0 * 0.5f64.powi(l as i32)).collect();
    let mut base = Rule::default();
    for (a, b) in complement(e, delta0) {
        let p = ((panels as f64 * (b - a) / TAU).ceil() as usize).max(1);
        base.extend(quad::split_rule(a, b, a_breaks, p, order));
    }
    let mut cur = integrate_rule(&g, &base, dim)?;
    let mut sequence = vec![cur.clone()];
    for l in 1..levels {
        let (outer, inner) = (deltas[l - 1], deltas[l]);
        let mut ring = Rule::default();
        for &t in e {
            for (a, b) in quad::wrap_interval(t - outer, t - inner).into_iter().chain(quad::wrap_interval(t + inner, t + outer)) {
                ring.extend(quad::composite(a, b, 1, order));
            }
        }
        let add = integrate_rule(&g, &ring, dim)?;
        cur.iter_mut().zip(&add).for_each(|(c, a)| *c += a);
        sequence.push(cur.clone());
    }
    let n = sequence.len();
    let d_last = max_diff(&sequence[n - 1], &sequence[n - 2]);
    let d_prev = max_diff(&sequence[n - 2], &sequence[n - 3]);
    let rho = if d_prev > 0.0 { d_last / d_prev } else { 0.0 };
    let (limit, ord) = if rho > 0.0 && rho < 1.0 {
        let f = rho / (1.0 - rho);
        let lim = sequence[n - 1].iter().zip(&sequence[n - 2]).map(|(a, b)| a + (a - b) * f).collect();
        (lim, Some(-rho.log2()))
    } else {
        (sequence[n - 1].clone(), None)
    };
    let tail = d_last;
    let converged = tail < tail_tol;
    let out = HuddleResult { deltas, sequence, limit, tail, order: ord, converged };
    if !converged {
        return Err(Error::HuddleDiverged { tail, tol: tail_tol, sequence: out.sequence_norms() });
    }
    Ok(out)
}

/// Parameters of a reconstruction run.
#[derive(Clone, Debug, Serialize)]
pub struct ExpansionParams {
    pub k_branch: usize,
    pub k_trunc: usize,
    pub panels: usize,
    pub order: usize,
    pub delta0: f64,
    pub levels: usize,
    pub tail_tol: f64,
    pub windows: Vec<(f64, f64)>,
    /// Gauss–Legendre panels per unit length of output window.
    pub x_panels_per_unit: usize,
}

impl ExpansionParams {
    pub fn new(k_branch: usize) -> Self {
        ExpansionParams {
            k_branch,
            k_trunc: 2 * k_branch,
            panels: 4,
            order: 16,
            delta0: 0.05,
            levels: 12,
            tail_tol: 1e-6,
            windows: vec![(-2.0, 2.0)],
            x_panels_per_unit: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_branch == 0 || 2 * self.k_branch > self.k_trunc {
            return Err(Error::config("K_branch", format!("need 1 <= K_branch <= K/2 (K = {})", self.k_trunc)));
        }
        if self.windows.iter().any(|(a, b)| !(b > a)) {
            return Err(Error::config("windows", "each window needs a < b"));
        }
        Ok(())
    }

    /// Output grid: Gauss–Legendre nodes on each window, with weights.
    pub fn x_rule(&self) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut ws = Vec::new();
        let mut starts = Vec::new();
        for &(a, b) in &self.windows {
            starts.push(xs.len());
            let p = ((b - a) * self.x_panels_per_unit as f64).ceil() as usize;
            let r = quad::composite(a, b, p.max(1), 10);
            xs.extend(r.nodes);
            ws.extend(r.weights);
        }
        starts.push(xs.len());
        (xs, ws, starts)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WindowError {
    pub a: f64,
    pub b: f64,
    pub l2_error: f64,
    pub l2_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpansionResult {
    pub k_branch: usize,
    pub m: usize,
    pub x: Vec<f64>,
    /// Branch labels `p` of the retained branches outside `S`.
    pub branch_labels: Vec<usize>,
    /// `∫ a_p Ψ_p dt` on the output grid, `[i * m + j]`.
    pub branch_integrals: Vec<Vec<C>>,
    pub per_branch_norms: Vec<f64>,
    /// `‖I_{2P} - I_P‖_∞ / 2π` per branch; a branch whose value does not
    /// settle under refinement is not integrable outside `S`.
    pub branch_quad_errors: Vec<f64>,
    pub huddle: HuddleResult,
    pub reconstruction: Vec<C>,
    /// Reconstruction from the summed integrand with no huddling.
    pub direct: Vec<C>,
    pub quad_error: f64,
    pub windows: Vec<WindowError>,
    /// `‖f‖ s^{-1/4}` with `s = K_branch`, the square root of the tail term in
    /// the truncation bound.
    pub tail_estimate: f64,
}

impl ExpansionResult {
    pub fn to_json(&self) -> Value {
        json!({
            "windows": self.windows.iter().map(|w| json!({"a": w.a, "b": w.b, "l2_error": w.l2_error})).collect::<Vec<_>>(),
            "K_branch": self.k_branch,
            "delta_sequence": self.huddle.deltas,
            "huddle_converged": self.huddle.converged,
            "per_branch_norms": self.per_branch_norms,
        })
    }
}

/// Assigns the eigenpairs at `t` to tracked bands by greedy global
/// nearest matching against the interpolated band values.
fn match_bands(bands: &BandSet, pairs: &[BlochEigenpair], t: f64) -> Vec<usize> {
    let targets: Vec<C> = bands.bands.iter().map(|b| bands.interpolate(b, t)).collect();
    let nb = targets.len();
    let np = pairs.len();
    let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(nb * np);
    for (b, z) in targets.iter().enumerate() {
        for (q, p) in pairs.iter().enumerate() {
            cand.push(((p.lambda - z).norm(), b, q));
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut by_band = vec![usize::MAX; nb];
    let mut used = vec![false; np];
    for (_, b, q) in cand {
        if by_band[b] == usize::MAX && !used[q] {
            by_band[b] = q;
            used[q] = true;
        }
    }
    by_band
}

/// Exponentials `e^{i(2πk + t)x}` for `|k| ≤ K` (rows) on the grid (columns).
fn wave_table(t: f64, k_trunc: usize, xs: &[f64]) -> CMat {
    let nk = 2 * k_trunc + 1;
    let mut e = CMat::zeros(nk, xs.len());
    for (c, &x) in xs.iter().enumerate() {
        let step = C::from_polar(1.0, TAU * x);
        let mut ph = C::from_polar(1.0, (t - TAU * k_trunc as f64) * x);
        for r in 0..nk {
            e[(r, c)] = ph;
            ph *= step;
        }
    }
    e
}

/// Values of `a_b Ψ_b` on the grid for the selected bands at one `t`,
/// `[band][i * m + j]`, and `Σ a_b Ψ_b` over the summed bands.
struct NodeTerms {
    values: Vec<Vec<C>>,
    sum: Vec<C>,
}

#[allow(clippy::too_many_arguments)]
fn node_terms(
    spec: &OperatorSpec,
    bands: &BandSet,
    selected: &[usize],
    summed: &[usize],
    rule_f: &SampledRule,
    k_trunc: usize,
    xs: &[f64],
    t: f64,
) -> Result<NodeTerms> {
    let m = spec.m;
    let pairs = galerkin::solve_eigen(spec, C::new(t, 0.0), k_trunc)?;
    let by_band = match_bands(bands, &pairs, t);
    let block = rule_f.fhat_block(t, k_trunc);
    let coeff = |b: usize| -> Result<(C, &BlochEigenpair)> {
        let pair = &pairs[by_band[b]];
        if pair.flagged {
            return Err(Error::FlaggedPair { alpha: pair.alpha.norm() });
        }
        Ok((coefficient_from_block(&block, pair), pair))
    };
    let nk = 2 * k_trunc + 1;
    let e = wave_table(t, k_trunc, xs);
    let sel: Vec<(C, &BlochEigenpair)> = selected.iter().map(|&b| coeff(b)).collect::<Result<_>>()?;
    let mut total = vec![ZERO; nk * m];
    for &b in summed {
        let (a, pair) = coeff(b)?;
        total.iter_mut().zip(&pair.psi).for_each(|(c, p)| *c += a * p);
    }
    // One extra row carries the summed coefficients.
    let rows = sel.len() + 1;
    let mut values = vec![vec![ZERO; xs.len() * m]; sel.len()];
    let mut sum = vec![ZERO; xs.len() * m];
    for j in 0..m {
        let a_mat = Mat::from_fn(rows, nk, |r, k| match sel.get(r) {
            Some((a, pair)) => a * pair.psi[k * m + j],
            None => total[k * m + j],
        });
        let y = &a_mat * &e;
        for i in 0..xs.len() {
            for (r, v) in values.iter_mut().enumerate() {
                v[i * m + j] = y[(r, i)];
            }
            sum[i * m + j] = y[(rows - 1, i)];
        }
    }
    Ok(NodeTerms { values, sum })
}

/// Retained band indices: every band whose label has `|k| ≤ K_branch`.
pub fn retained_bands(bands: &BandSet, k_branch: usize) -> Vec<usize> {
    let cutoff = label_p(k_branch as i64, bands.m, bands.m).unwrap_or(bands.m);
    bands.bands.iter().enumerate().filter(|(_, b)| b.p <= cutoff).map(|(i, _)| i).collect()
}

fn l2_window(values: &[C], reference: &[Vec<C>], ws: &[f64], range: std::ops::Range<usize>, m: usize) -> (f64, f64) {
    let mut err = 0.0;
    let mut nrm = 0.0;
    for i in range {
        for j in 0..m {
            err += ws[i] * (values[i * m + j] - reference[i][j]).norm_sqr();
            nrm += ws[i] * reference[i][j].norm_sqr();
        }
    }
    (err.sqrt(), nrm.sqrt())
}

/// Reassemble `f` from its Bloch expansion.
///
/// Branches outside `S` are integrated individually on rules split at the
/// multiple-eigenvalue set `A` and at `E`; branches in `S` are summed and
/// huddled. `direct` integrates the full retained sum on the same `A`-split
/// rule without any huddling, which is the correct formula when `S = ∅`.
pub fn reconstruct(
    f: &TestFunction,
    spec: &OperatorSpec,
    bands: &BandSet,
    a_breaks: &[f64],
    report: &SingularityReport,
    params: &ExpansionParams,
) -> Result<ExpansionResult> {
    params.validate()?;
    if bands.k_trunc != params.k_trunc {
        return Err(Error::config("K", format!("bands tracked at K = {} but expansion uses K = {}", bands.k_trunc, params.k_trunc)));
    }
    if f.m() != spec.m {
        return Err(Error::config("test_function.weights", format!("expected {} components", spec.m)));
    }
    let m = spec.m;
    let (xs, ws, starts) = params.x_rule();
    let nx = xs.len();
    let rule_f = f.rule(TAU * (params.k_trunc as f64 + 1.0));
    let retained = retained_bands(bands, params.k_branch);
    let in_s = |b: usize| report.s.contains(&bands.bands[b].p);
    let regular: Vec<usize> = retained.iter().copied().filter(|&b| !in_s(b)).collect();
    let huddled: Vec<usize> = retained.iter().copied().filter(|&b| in_s(b)).collect();

    let mut breaks: Vec<f64> = a_breaks.to_vec();
    breaks.extend(report.e.iter().copied());
    let coarse = quad::quasimomentum_rule(&breaks, params.panels, params.order);
    let fine = quad::quasimomentum_rule(&breaks, 2 * params.panels, params.order);
    // Integrates the selected branches and the summed integrand over one rule.
    let eval_rule = |rule: &Rule, sel: &[usize], summed: &[usize]| -> Result<(Vec<Vec<C>>, Vec<C>)> {
        let per_node: Vec<NodeTerms> = rule
            .nodes
            .par_iter()
            .map(|&t| node_terms(spec, bands, sel, summed, &rule_f, params.k_trunc, &xs, t))
            .collect::<Result<_>>()?;
        let mut acc = vec![vec![ZERO; nx * m]; sel.len()];
        let mut total = vec![ZERO; nx * m];
        for (nt, w) in per_node.iter().zip(&rule.weights) {
            for (a, v) in acc.iter_mut().zip(&nt.values) {
                a.iter_mut().zip(v).for_each(|(x, y)| *x += y * *w);
            }
            total.iter_mut().zip(&nt.sum).for_each(|(x, y)| *x += y * *w);
        }
        Ok((acc, total))
    };
    // Without singular quasimomenta the direct rule is the fine rule.
    let share = report.e.is_empty();
    let (branch_fine, fine_sum) = eval_rule(&fine, &regular, if share { &retained } else { &[] })?;
    let (branch_coarse, _) = eval_rule(&coarse, &regular, &[])?;

    let huddle = if huddled.is_empty() {
        HuddleResult::zero(nx * m, params.delta0, params.levels)
    } else {
        let g = |t: f64| -> Result<Vec<C>> { Ok(node_terms(spec, bands, &[], &huddled, &rule_f, params.k_trunc, &xs, t)?.sum) };
        huddled_integral(g, nx * m, &report.e, a_breaks, params.delta0, params.levels, params.panels, params.order, params.tail_tol)?
    };

    let scale = 1.0 / TAU;
    let mut recon = huddle.limit.iter().map(|v| v * scale).collect::<Vec<C>>();
    let mut recon_coarse = recon.clone();
    let mut branch_quad_errors = Vec::with_capacity(regular.len());
    for (bf, bc) in branch_fine.iter().zip(&branch_coarse) {
        recon.iter_mut().zip(bf).for_each(|(r, v)| *r += v * scale);
        recon_coarse.iter_mut().zip(bc).for_each(|(r, v)| *r += v * scale);
        branch_quad_errors.push(max_diff(bf, bc) * scale);
    }
    let quad_error = max_diff(&recon, &recon_coarse);

    // Summed integrand over all retained branches, integrated as a whole.
    let direct_sum = if share {
        fine_sum
    } else {
        let direct_rule = quad::quasimomentum_rule(a_breaks, 2 * params.panels, params.order);
        eval_rule(&direct_rule, &[], &retained)?.1
    };
    let direct: Vec<C> = direct_sum.iter().map(|v| v * scale).collect();

    let fx: Vec<Vec<C>> = xs.iter().map(|&x| f.eval(x)).collect();
    let windows = params
        .windows
        .iter()
        .enumerate()
        .map(|(w, &(a, b))| {
            let (l2_error, l2_norm) = l2_window(&recon, &fx, &ws, starts[w]..starts[w + 1], m);
            WindowError { a, b, l2_error, l2_norm }
        })
        .collect();
    let per_branch_norms = branch_fine
        .iter()
        .map(|v| {
            let mut s = 0.0;
            for i in 0..nx {
                for j in 0..m {
                    s += ws[i] * (v[i * m + j] * scale).norm_sqr();
                }
            }
            s.sqrt()
        })
        .collect();
    Ok(ExpansionResult {
        k_branch: params.k_branch,
        m,
        x: xs,
        branch_labels: regular.iter().map(|&b| bands.bands[b].p).collect(),
        branch_integrals: branch_fine,
        per_branch_norms,
        branch_quad_errors,
        huddle,
        reconstruction: recon,
        direct,
        quad_error,
        windows,
        tail_estimate: f.norm() / (params.k_branch as f64).powf(0.25),
    })
}

/// Truncated Fourier inversion `(1/2π) ∫_{|ξ| ≤ ξ_max} f̂(ξ) e^{iξx} dξ`.
pub fn fourier_band_limited(f: &TestFunction, xi_max: f64, xs: &[f64]) -> Vec<C> {
    let rule_f = f.rule(xi_max);
    let panels = (xi_max / 2.0).ceil() as usize;
    let xi = quad::composite(-xi_max, xi_max, panels.max(4), 20);
    let m = f.m();
    let hats: Vec<Vec<C>> = xi.nodes.par_iter().map(|&s| rule_f.fhat(s)).collect();
    let mut out = vec![ZERO; xs.len() * m];
    for (i, &x) in xs.iter().enumerate() {
        for ((s, w), h) in xi.iter().zip(&hats) {
            let e = C::from_polar(w / TAU, s * x);
            for j in 0..m {
                out[i * m + j] += h[j] * e;
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct TailAtS {
    pub s: usize,
    /// Worst `‖Σ_J (f,X)Ψ‖² / (Σ_J |f_{kj}|² + ‖f‖²/√s)`, maximized over `f`.
    pub c_first: f64,
    /// Worst `‖Σ_J (f,X)Ψ‖² / ‖f‖²`, maximized over `f`.
    pub c_second: f64,
    /// Both ratios on the raw random `f`, a lower bound for the above.
    pub c_random: f64,
    pub c: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TailBoundReport {
    pub k_trunc: usize,
    pub trials: usize,
    pub per_s: Vec<TailAtS>,
    pub c: f64,
    /// Largest relative change of `c` between consecutive `s`.
    pub variation: f64,
}

/// Empirical constants of the two projection-sum inequalities over random
/// `(f, J, t)` with `J ⊆ {(k, j) : s ≤ |k| ≤ K/2}`.
///
/// For each `(J, t)` the supremum over `f` is a generalized eigenvalue
/// problem of size `|J|` and is solved exactly; the random `f` themselves
/// are also evaluated and reported.
pub fn tail_bound_check(spec: &OperatorSpec, k_trunc: usize, t_samples: &[f64], s_values: &[usize], trials: usize, seed: u64) -> Result<TailBoundReport> {
    let model = LeadingModel::new(spec)?;
    let m = spec.m;
    let k_top = k_trunc / 2;
    let s_min = s_values.iter().copied().min().unwrap_or(1);
    if s_values.iter().any(|&s| s == 0 || s > k_top) {
        return Err(Error::config("s_values", format!("each s must lie in 1..={k_top}")));
    }
    let per_t: Vec<Vec<BlochEigenpair>> = t_samples
        .par_iter()
        .map(|&t| -> Result<Vec<BlochEigenpair>> {
            let pairs = galerkin::solve_eigen(spec, C::new(t, 0.0), k_trunc)?;
            let mut out = Vec::new();
            for k in s_min as i64..=k_top as i64 {
                for sgn in [1i64, -1] {
                    for j in 0..m {
                        let target = model.eval(sgn * k, j, t);
                        let mut p = crate::bands::nearest_pair(&pairs, target).clone();
                        p.p = basis_index(sgn * k, j, k_trunc, m);
                        out.push(p);
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_s = Vec::new();
    for &s in s_values {
        let (mut c1, mut c2, mut cr) = (0.0f64, 0.0f64, 0.0f64);
        let inv_sqrt_s = 1.0 / (s as f64).sqrt();
        for _ in 0..trials {
            let ti = rng.random_range(0..t_samples.len());
            let eligible: Vec<&BlochEigenpair> =
                per_t[ti].iter().filter(|p| galerkin::fourier_index(p.p, k_trunc, m).0.unsigned_abs() as usize >= s).collect();
            let mut j_set: Vec<&BlochEigenpair> = eligible.iter().copied().filter(|_| rng.random::<bool>()).collect();
            if j_set.is_empty() {
                j_set.push(eligible[rng.random_range(0..eligible.len())]);
            }
            let dim = j_set[0].psi.len();
            // Exact suprema over f.
            let p_norm = projection_operator_norm(&j_set)?;
            c2 = c2.max(p_norm * p_norm);
            let xs: Vec<Vec<C>> = j_set.iter().map(|p| p.x()).collect();
            let in_j: Vec<bool> = {
                let mut v = vec![false; dim];
                j_set.iter().for_each(|p| v[p.p] = true);
                v
            };
            let binv: Vec<f64> = (0..dim).map(|i| 1.0 / (inv_sqrt_s + if in_j[i] { 1.0 } else { 0.0 })).collect();
            let n = j_set.len();
            let g_psi = CMat::from_fn(n, n, |a, b| linalg::inner(&j_set[b].psi, &j_set[a].psi));
            let h = CMat::from_fn(n, n, |a, b| (0..dim).map(|i| xs[a][i].conj() * xs[b][i] * binv[i]).sum::<C>());
            let ev = linalg::eigenvalues((&g_psi * &h).as_ref())?;
            c1 = c1.max(ev.iter().map(|z| z.re).fold(0.0, f64::max));
            // Random f.
            let f = random_unit(&mut rng, dim);
            let mut proj = vec![ZERO; dim];
            for (p, x) in j_set.iter().zip(&xs) {
                let a = linalg::inner(&f, x);
                proj.iter_mut().zip(&p.psi).for_each(|(o, v)| *o += a * v);
            }
            let lhs = linalg::norm(&proj).powi(2);
            let rhs1: f64 = (0..dim).filter(|&i| in_j[i]).map(|i| f[i].norm_sqr()).sum::<f64>() + inv_sqrt_s;
            cr = cr.max(lhs / rhs1).max(lhs);
        }
        per_s.push(TailAtS { s, c_first: c1, c_second: c2, c_random: cr, c: c1.max(c2) });
    }
    let c = linalg::max_or_nan(per_s.iter().map(|x| x.c));
    let variation = linalg::max_or_nan(per_s.windows(2).map(|w| (w[1].c - w[0].c).abs() / w[0].c));
    Ok(TailBoundReport { k_trunc, trials, per_s, c, variation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::{default_t_grid, track_bands};

    fn c(re: f64, im: f64) -> C {
        C::new(re, im)
    }

    #[test]
    fn gelfand_identities() {
        let f = TestFunction::bump((-1.3, 0.9), vec![c(1.0, 0.0), c(0.2, -0.5)]).unwrap();
        let xs: Vec<f64> = (0..41).map(|i| -2.0 + 0.1 * i as f64).collect();
        assert!(gelfand_inversion_error(&f, &xs, 128) < 1e-12);
        let (lhs, rhs) = gelfand_parseval(&f, 128);
        assert!((lhs - rhs).abs() < 1e-10 * rhs);
    }

    #[test]
    fn free_coefficients_are_fourier_transforms() {
        let spec = OperatorSpec::free(3, 1).unwrap();
        let f = TestFunction::bump((-1.0, 1.0), vec![c(1.0, 0.0)]).unwrap();
        let t = 0.4;
        let pairs = galerkin::solve_eigen(&spec, c(t, 0.0), 6).unwrap();
        let r = f.rule(TAU * 8.0);
        let direct = quad::composite(-1.0, 1.0, 200, 20);
        for pair in pairs.iter().take(5) {
            let (k, _) = pair.dominant_mode();
            let xi = TAU * k as f64 + t;
            let oracle: C = direct.iter().map(|(x, w)| f.eval(x)[0] * C::from_polar(w, -xi * x)).sum();
            // Phase of Ψ is real-positive on its dominant mode.
            let a = coefficient_from_block(&r.fhat_block(t, 6), pair);
            assert!((a - oracle).norm() < 1e-12);
            let cell = coefficient_a(&f, pair, CoefficientMode::Cell).unwrap();
            let line = coefficient_a(&f, pair, CoefficientMode::Line).unwrap();
            assert!((cell - line).norm() < 1e-10);
            assert!((line - a).norm() < 1e-12);
        }
    }

    #[test]
    fn eigenfunction_coefficients_are_biorthogonal() {
        // f = Ψ_k restricted to one cell: a_k = 1, a_l = 0.
        let spec = OperatorSpec::free(2, 1).unwrap();
        let t = 0.9;
        let pairs = galerkin::solve_eigen(&spec, c(t, 0.0), 5).unwrap();
        let target = &pairs[2];
        let samples: Vec<[f64; 2]> = (0..=800)
            .map(|i| {
                let v = target.eval_psi(i as f64 / 800.0)[0];
                [v.re, v.im]
            })
            .collect();
        let f = TestFunction::new((0.0, 1.0), vec![c(1.0, 0.0)], crate::testfn::Profile::CustomSamples { samples: vec![samples] }).unwrap();
        for (i, p) in pairs.iter().enumerate().take(5) {
            let a = coefficient_a(&f, p, CoefficientMode::Cell).unwrap();
            let expect = if i == 2 { 1.0 } else { 0.0 };
            assert!((a - c(expect, 0.0)).norm() < 1e-6, "{i} {a}");
        }
    }

    #[test]
    fn huddle_cancels_opposite_poles() {
        let t0 = 0.4;
        let smooth = |t: f64| c((t * 1.3).cos(), 0.2 * t);
        let b1 = move |t: f64| Ok(vec![c(1.0 / (t - t0), 0.0) + smooth(t)]);
        let b2 = move |t: f64| Ok(vec![c(-1.0 / (t - t0), 0.0) + smooth(t) * 0.5]);
        for g in [&b1 as &(dyn Fn(f64) -> Result<Vec<C>> + Sync), &b2] {
            let err = integrate_branch(g, &[t0], 4, 16, 4, 1, 1e-8).unwrap_err();
            assert!(matches!(err, Error::NonIntegrableBranch { .. }));
        }
        let sum = move |t: f64| -> Result<Vec<C>> { Ok(vec![b1(t)?[0] + b2(t)?[0]]) };
        let h = huddled_integral(sum, 1, &[t0], &[], 0.1, 24, 8, 16, 1e-6).unwrap();
        assert!(h.tail < 1e-6);
        let exact = rule_exact(|t| smooth(t) * 1.5);
        assert!((h.limit[0] - exact).norm() < 1e-8, "{} {}", h.limit[0], exact);
    }

    fn rule_exact(g: impl Fn(f64) -> C) -> C {
        quad::composite(-PI, PI, 32, 20).iter().map(|(t, w)| g(t) * w).sum()
    }

    #[test]
    fn integrable_blowup_converges() {
        let t0 = -0.8;
        let g = move |t: f64| Ok(vec![c((t - t0).abs().powf(-0.5), 0.0)]);
        let r = integrate_branch(g, &[t0], 4, 16, 4, 1, 1e-8).unwrap();
        let exact = 2.0 * ((PI - t0).sqrt() + (t0 + PI).sqrt());
        assert!((r.value[0].re - exact).abs() < 1e-7);
        assert!((r.value[0].re - exact).abs() <= 2.0 * r.error);
    }

    #[test]
    fn empty_singular_set_gives_zero_huddle() {
        let h = huddled_integral(|_t| Ok(vec![c(1.0, 0.0)]), 1, &[], &[], 0.1, 5, 4, 8, 1e-6).unwrap();
        assert!(h.limit[0].norm() == 0.0 && h.sequence.iter().all(|v| v[0].norm() == 0.0));
    }

    #[test]
    fn free_reconstruction_is_band_limited_inversion() {
        let spec = OperatorSpec::free(2, 1).unwrap();
        let f = TestFunction::bump((-1.0, 1.0), vec![c(1.0, 0.0)]).unwrap();
        let mut params = ExpansionParams::new(4);
        params.windows = vec![(-1.5, 1.5)];
        let bands = track_bands(&spec, params.k_trunc, &default_t_grid(64)).unwrap();
        let report = SingularityReport::default();
        let res = reconstruct(&f, &spec, &bands, &[0.0, PI], &report, &params).unwrap();
        let oracle = fourier_band_limited(&f, TAU * 4.5, &res.x);
        assert!(max_diff(&res.reconstruction, &oracle) < 1e-8, "{}", max_diff(&res.reconstruction, &oracle));
        assert!(max_diff(&res.reconstruction, &res.direct) < 1e-10);
        assert_eq!(res.branch_labels.len(), 9);
    }

    #[test]
    fn free_tail_constant_is_one() {
        let spec = OperatorSpec::free(3, 1).unwrap();
        let rep = tail_bound_check(&spec, 16, &[0.3, -1.1], &[2, 4], 20, 42).unwrap();
        for s in &rep.per_s {
            assert!((s.c_second - 1.0).abs() < 1e-10);
            let expect = 1.0 / (1.0 + 1.0 / (s.s as f64).sqrt());
            assert!((s.c_first - expect).abs() < 1e-10);
            assert!(s.c_random <= s.c + 1e-12);
        }
        assert!(rep.variation < 1e-10);
    }

    #[test]
    fn expand_rejects_oversized_branch_cutoff() {
        let mut p = ExpansionParams::new(4);
        p.k_trunc = 6;
        match p.validate() {
            Err(Error::ConfigInvalid { path, .. }) => assert_eq!(path, "K_branch"),
            other => panic!("{other:?}"),
        }
    }
}
