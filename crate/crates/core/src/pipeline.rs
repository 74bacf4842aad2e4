//! End-to-end runs shared by the command line, the acceptance suite and
//! the Python bindings.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::bands::{self, BandSet, LeadingModel};
use crate::error::{Error, Result};
use crate::expansion::{self, ExpansionParams, ExpansionResult, TailBoundReport};
use crate::floquet::{self, DegeneracyCatalog, Region};
use crate::galerkin::{self, Reference};
use crate::linalg;
use crate::operator::{self, MeanMatrixData, OperatorSpec};
use crate::singular::{self, ClassifyParams, ScanReport, SingularityReport};
use crate::testfn::TestFunction;

type C = Complex64;

/// Which closed form, if any, the operator's spectrum has.
pub fn closed_form(spec: &OperatorSpec) -> Option<Reference> {
    if !spec.p1.is_zero() || spec.p.iter().skip(1).any(|p| !p.is_zero()) {
        return None;
    }
    let p2 = spec.coeff(2);
    if p2.iter().any(|(q, c)| q != 0 && c.norm_l2() > 0.0) {
        return None;
    }
    if p2.is_zero() {
        Some(Reference::Free)
    } else {
        Some(Reference::ConstantC)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExactCaseReport {
    pub reference: &'static str,
    pub k_trunc: usize,
    /// `K/2 - Q_max`.
    pub k_max: usize,
    pub t_points: usize,
    /// Worst `|λ_Galerkin - λ_exact| / max(1, |λ_exact|)`.
    pub max_rel_error: f64,
    pub worst: (i64, usize, f64),
}

/// Galerkin eigenvalues against `(2πki + ti)^n + μ_j (2πki + ti)^{n-2}`
/// for every `|k| ≤ K/2 - Q_max` on `t_grid`.
pub fn exact_case_check(spec: &OperatorSpec, k_trunc: usize, t_grid: &[f64]) -> Result<ExactCaseReport> {
    let which = closed_form(spec).ok_or_else(|| Error::InvalidOperator("operator has no closed-form spectrum".into()))?;
    let mu: Vec<C> = match which {
        Reference::Free => vec![C::new(0.0, 0.0); spec.m],
        Reference::ConstantC => operator::compute_mean_matrix(spec)?.mu,
    };
    let k_max = (k_trunc / 2).saturating_sub(spec.bandwidth());
    let per_t: Vec<(f64, (i64, usize, f64))> = t_grid
        .par_iter()
        .map(|&t| -> Result<(f64, (i64, usize, f64))> {
            let ev = galerkin::eigenvalues(spec, C::new(t, 0.0), k_trunc)?;
            let mut worst = (0.0f64, (0, 0, t));
            for k in -(k_max as i64)..=k_max as i64 {
                for (j, &m) in mu.iter().enumerate() {
                    let exact = galerkin::leading_term(spec.n, k, C::new(t, 0.0), m);
                    let err = ev.iter().map(|l| (l - exact).norm()).fold(f64::INFINITY, f64::min) / exact.norm().max(1.0);
                    if err.is_nan() || (!worst.0.is_nan() && err > worst.0) {
                        worst = (err, (k, j + 1, t));
                    }
                }
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;
    let (max_rel_error, worst) = per_t.into_iter().fold((0.0f64, (0, 1, 0.0)), |a, b| if b.0.is_nan() || (!a.0.is_nan() && b.0 > a.0) { b } else { a });
    Ok(ExactCaseReport {
        reference: match which {
            Reference::Free => "free",
            Reference::ConstantC => "constant_c",
        },
        k_trunc,
        k_max,
        t_points: t_grid.len(),
        max_rel_error,
        worst,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleRecord {
    pub t: f64,
    pub k: i64,
    pub j: usize,
    pub lambda: [f64; 2],
    pub det_abs: f64,
    pub m_norm: f64,
    /// `|Δ(λ, t)| / max(1, ‖M‖)`.
    pub ratio: f64,
    /// `σ_min / σ_max` of the multiple-shooting matrix.
    pub shooting: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleByK {
    pub k: usize,
    pub max_ratio: f64,
    pub max_shooting: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub k_trunc: usize,
    pub k_max: usize,
    pub t_points: usize,
    pub tol: f64,
    pub max_ratio: f64,
    pub per_k: Vec<OracleByK>,
    pub records: Vec<OracleRecord>,
    pub pass: bool,
}

/// Characteristic determinant at every Galerkin eigenvalue whose dominant
/// Fourier mode has `|k| ≤ k_max`.
pub fn oracle_check(spec: &OperatorSpec, k_trunc: usize, t_points: &[f64], k_max: usize, tol: f64, integrator_tol: f64) -> Result<OracleReport> {
    let jobs: Vec<(f64, i64, usize, C)> = t_points
        .iter()
        .map(|&t| -> Result<Vec<(f64, i64, usize, C)>> {
            let pairs = galerkin::solve_eigen(spec, C::new(t, 0.0), k_trunc)?;
            Ok(pairs
                .iter()
                .filter_map(|p| {
                    let (k, j) = p.dominant_mode();
                    (k.unsigned_abs() as usize <= k_max).then_some((t, k, j + 1, p.lambda))
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let records: Vec<OracleRecord> = jobs
        .par_iter()
        .map(|&(t, k, j, lambda)| -> Result<OracleRecord> {
            let mono = floquet::monodromy(spec, lambda, integrator_tol)?;
            let det_abs = floquet::char_det_from(&mono.m, t).norm();
            let m_norm = mono.norm();
            let segments = floquet::shooting_segments(spec.n, lambda);
            let shooting = floquet::shooting_residual(spec, lambda, t, segments, integrator_tol)?;
            Ok(OracleRecord { t, k, j, lambda: [lambda.re, lambda.im], det_abs, m_norm, ratio: det_abs / m_norm.max(1.0), shooting })
        })
        .collect::<Result<_>>()?;
    let per_k: Vec<OracleByK> = (0..=k_max)
        .map(|k| {
            let rs: Vec<&OracleRecord> = records.iter().filter(|r| r.k.unsigned_abs() as usize == k).collect();
            let max_ratio = linalg::max_or_nan(rs.iter().map(|r| r.ratio));
            let max_shooting = linalg::max_or_nan(rs.iter().map(|r| r.shooting));
            OracleByK { k, max_ratio, max_shooting, pass: max_ratio < tol }
        })
        .collect();
    let max_ratio = linalg::max_or_nan(records.iter().map(|r| r.ratio));
    Ok(OracleReport { k_trunc, k_max, t_points: t_points.len(), tol, max_ratio, pass: max_ratio < tol, per_k, records })
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectralityScanReport {
    pub k_lo: usize,
    pub k_cap: usize,
    pub base: ScanReport,
    pub extended: ScanReport,
    /// `|sup(K + extra) - sup(K)| / sup(K)`.
    pub relative_change: f64,
}

/// Projection norms over random rectangle unions in `|k| ≥ k_lo`, at `K`
/// and `K + extra` with the same unions and the same trusted range.
#[allow(clippy::too_many_arguments)]
pub fn spectrality_scan(
    spec: &OperatorSpec,
    k_trunc: usize,
    extra: usize,
    k_lo: usize,
    t_grid: &[f64],
    trials: usize,
    seed: u64,
    bound_cap: f64,
) -> Result<SpectralityScanReport> {
    let model = LeadingModel::new(spec)?;
    let k_cap = k_trunc / 2;
    let unions = singular::random_unions(&model, spec.m, k_lo, k_cap, trials, seed);
    let threshold = singular::default_threshold(&model, spec.m, k_lo);
    let base = singular::bounded_projection_scan(spec, k_trunc, t_grid, &unions, threshold, k_cap, bound_cap)?;
    let extended = singular::bounded_projection_scan(spec, k_trunc + extra, t_grid, &unions, threshold, k_cap, bound_cap)?;
    let relative_change = (extended.sup - base.sup).abs() / base.sup;
    Ok(SpectralityScanReport { k_lo, k_cap, base, extended, relative_change })
}

/// Resultant search settings.
#[derive(Clone, Debug, Serialize)]
pub struct SearchParams {
    pub grid: (usize, usize),
    /// Number of lowest bands whose values the region covers.
    pub low_bands: Option<usize>,
    pub pad: f64,
    pub tol: f64,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams { grid: (32, 8), low_bands: None, pad: 0.1, tol: floquet::DEFAULT_TOL }
    }
}

/// Multiple eigenvalues among the low bands. The region covers those band
/// values and the grid scan is seeded with them at every crossing suspect.
pub fn search_catalog(spec: &OperatorSpec, bands: &BandSet, params: &SearchParams) -> Result<(Region, DegeneracyCatalog)> {
    let low = params.low_bands.unwrap_or(4 * spec.m).min(bands.bands.len());
    let pts: Vec<C> = bands.bands.iter().take(low).flat_map(|b| b.lambda.iter().copied()).collect();
    let region = Region::covering(&pts, params.pad);
    let seeds: Vec<C> = bands
        .crossing_suspects
        .iter()
        .flat_map(|&t| bands.bands.iter().take(low).map(move |b| bands.interpolate(b, t)))
        .collect();
    let cat = floquet::resultant_scan(spec, region, params.grid, &seeds, 1e-12, params.tol)?;
    Ok((region, cat))
}

/// Mean-matrix data, failing on a repeated eigenvalue unless forced.
pub fn mean_matrix(spec: &OperatorSpec, force: bool) -> Result<MeanMatrixData> {
    if force {
        operator::mean_matrix_unchecked(spec)
    } else {
        operator::compute_mean_matrix(spec)
    }
}

/// Bands, catalog and classification for one operator.
pub struct SingularityRun {
    pub bands: BandSet,
    pub region: Region,
    pub catalog: DegeneracyCatalog,
    pub report: SingularityReport,
}

#[allow(clippy::too_many_arguments)]
pub fn analyze_singularities(
    spec: &OperatorSpec,
    k_trunc: usize,
    t_grid_size: usize,
    search: &SearchParams,
    probes: &[TestFunction],
    deg_tol: f64,
    params: &ClassifyParams,
) -> Result<SingularityRun> {
    let bands = bands::track_bands(spec, k_trunc, &bands::default_t_grid(t_grid_size))?;
    let (region, catalog) = search_catalog(spec, &bands, search)?;
    let report = singular::classify_singularities(spec, k_trunc, &catalog, &bands, probes, deg_tol, params)?;
    Ok(SingularityRun { bands, region, catalog, report })
}

#[allow(clippy::too_many_arguments)]
/// Same as [`analyze_singularities`] with a catalog found earlier. The
/// catalog depends only on the operator, so it can be shared across `K`.
pub fn analyze_with_catalog(
    spec: &OperatorSpec,
    k_trunc: usize,
    t_grid_size: usize,
    region: Region,
    catalog: DegeneracyCatalog,
    probes: &[TestFunction],
    deg_tol: f64,
    params: &ClassifyParams,
) -> Result<SingularityRun> {
    let bands = bands::track_bands(spec, k_trunc, &bands::default_t_grid(t_grid_size))?;
    let report = singular::classify_singularities(spec, k_trunc, &catalog, &bands, probes, deg_tol, params)?;
    Ok(SingularityRun { bands, region, catalog, report })
}

/// Full reconstruction: bands at `K = params.k_trunc`, the catalog, the
/// classification and the expansion.
pub fn expand(
    f: &TestFunction,
    spec: &OperatorSpec,
    t_grid_size: usize,
    search: &SearchParams,
    probes: &[TestFunction],
    deg_tol: f64,
    classify: &ClassifyParams,
    params: &ExpansionParams,
) -> Result<(SingularityRun, ExpansionResult)> {
    params.validate()?;
    let run = analyze_singularities(spec, params.k_trunc, t_grid_size, search, probes, deg_tol, classify)?;
    let res = expansion::reconstruct(f, spec, &run.bands, &run.catalog.union(), &run.report, params)?;
    Ok((run, res))
}

/// Tail-bound constants on `t_samples` uniform points for `s` and `2s`.
pub fn tail_bound_run(spec: &OperatorSpec, k_trunc: usize, s: usize, t_samples: usize, trials: usize, seed: u64) -> Result<TailBoundReport> {
    let ts: Vec<f64> = (0..t_samples).map(|i| -PI + (2.0 * PI) * (i as f64 + 0.37) / t_samples as f64).collect();
    expansion::tail_bound_check(spec, k_trunc, &ts, &[s, 2 * s], trials, seed)
}
