//! Command-line front end: run configuration, subcommands and report
//! writers.
//!
//! Every report is written with a fixed key order and fixed float
//! formatting, so identical configurations give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bands::{self, BandSet};
use crate::error::{Error, Result};
use crate::expansion::{self, CoefficientMode, ExpansionParams, ExpansionResult, HuddleResult};
use crate::floquet;
use crate::galerkin;
use crate::linalg;
use crate::operator::{self, OperatorSpec};
use crate::pipeline::{self, SearchParams};
use crate::singular::{self, ClassifyParams};
use crate::testfn::{Profile, TestFunction};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug)]
#[command(name = "blochspec", version, about = "Bloch spectra, spectral singularities and spectral expansions of periodic differential operators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Track and label the Bloch bands; writes bands.csv and bands.json.
    Bands(CommonArgs),
    /// Cross-check Galerkin eigenvalues against closed forms and the monodromy path.
    OracleCheck(CommonArgs),
    /// Locate multiple eigenvalues and classify spectral singularities.
    Singularities(CommonArgs),
    /// Reconstruct the test function from its Bloch expansion.
    Expand(CommonArgs),
    /// Fit the eigenvalue and eigenfunction asymptotics.
    VerifyAsymptotics(CommonArgs),
    /// Run the fast internal consistency checks.
    Selfcheck(CommonArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue when the mean matrix has a repeated eigenvalue.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "Tolerances::quad")]
    pub quad_tol: f64,
    #[serde(default = "Tolerances::cross")]
    pub cross_tol: f64,
    #[serde(default = "Tolerances::eig")]
    pub eig_tol: f64,
    #[serde(default = "Tolerances::deg")]
    pub deg_tol: f64,
    #[serde(default = "Tolerances::ess")]
    pub ess_margin: f64,
    #[serde(default = "Tolerances::cap")]
    pub bound_cap: f64,
    #[serde(default = "Tolerances::tail")]
    pub tail_tol: f64,
    #[serde(default = "Tolerances::integrator")]
    pub integrator_tol: f64,
}

impl Tolerances {
    fn quad() -> f64 {
        1e-8
    }
    fn cross() -> f64 {
        1e-6
    }
    fn eig() -> f64 {
        1e-10
    }
    fn deg() -> f64 {
        1e-6
    }
    fn ess() -> f64 {
        singular::ESS_MARGIN
    }
    fn cap() -> f64 {
        singular::BOUND_CAP
    }
    fn tail() -> f64 {
        1e-6
    }
    fn integrator() -> f64 {
        floquet::DEFAULT_TOL
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            ("quad_tol", self.quad_tol),
            ("cross_tol", self.cross_tol),
            ("eig_tol", self.eig_tol),
            ("deg_tol", self.deg_tol),
            ("ess_margin", self.ess_margin),
            ("bound_cap", self.bound_cap),
            ("tail_tol", self.tail_tol),
            ("integrator_tol", self.integrator_tol),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("tolerances.{name}"), "must be positive and finite"));
            }
        }
        if !(1e-13..=1e-6).contains(&self.integrator_tol) {
            return Err(Error::config("tolerances.integrator_tol", "must lie in [1e-13, 1e-6]"));
        }
        if self.ess_margin >= 1.0 {
            return Err(Error::config("tolerances.ess_margin", "must be below 1"));
        }
        Ok(())
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            quad_tol: Self::quad(),
            cross_tol: Self::cross(),
            eig_tol: Self::eig(),
            deg_tol: Self::deg(),
            ess_margin: Self::ess(),
            bound_cap: Self::cap(),
            tail_tol: Self::tail(),
            integrator_tol: Self::integrator(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunctionConfig {
    pub kind: String,
    pub support: [f64; 2],
    /// One `[re, im]` weight per component.
    pub weights: Vec<[f64; 2]>,
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Per component, `[re, im]` samples on a uniform grid over the support.
    #[serde(default)]
    pub samples: Option<Vec<Vec<[f64; 2]>>>,
}

impl TestFunctionConfig {
    pub fn build(&self, m: usize) -> Result<TestFunction> {
        if self.weights.len() != m {
            return Err(Error::config("test_function.weights", format!("expected {m} weights, got {}", self.weights.len())));
        }
        let profile = match self.kind.as_str() {
            "bump" => Profile::Bump,
            "gaussian_truncated" => Profile::GaussianTruncated {
                sigma: self.sigma.ok_or_else(|| Error::config("test_function.sigma", "required for gaussian_truncated"))?,
            },
            "custom_samples" => Profile::CustomSamples {
                samples: self.samples.clone().ok_or_else(|| Error::config("test_function.samples", "required for custom_samples"))?,
            },
            other => return Err(Error::config("test_function.kind", format!("unknown kind `{other}`"))),
        };
        let weights = self.weights.iter().map(|w| Complex64::new(w[0], w[1])).collect();
        TestFunction::new((self.support[0], self.support[1]), weights, profile)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "OracleConfig::t_points")]
    pub t_points: usize,
    #[serde(default = "OracleConfig::k_max")]
    pub k_max: usize,
}

impl OracleConfig {
    fn t_points() -> usize {
        16
    }
    fn k_max() -> usize {
        8
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { t_points: Self::t_points(), k_max: Self::k_max() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsymptoticsConfig {
    #[serde(default = "AsymptoticsConfig::k_lo")]
    pub k_lo: usize,
    #[serde(default = "AsymptoticsConfig::k_hi")]
    pub k_hi: usize,
    #[serde(default = "AsymptoticsConfig::t_samples")]
    pub t_samples: usize,
}

impl AsymptoticsConfig {
    fn k_lo() -> usize {
        6
    }
    fn k_hi() -> usize {
        16
    }
    fn t_samples() -> usize {
        8
    }
}

impl Default for AsymptoticsConfig {
    fn default() -> Self {
        AsymptoticsConfig { k_lo: Self::k_lo(), k_hi: Self::k_hi(), t_samples: Self::t_samples() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    /// Random rectangle unions for the asymptotic-spectrality scan.
    #[serde(default = "ScanConfig::trials")]
    pub trials: usize,
    /// The scan is repeated at `K + extra_k`.
    #[serde(default = "ScanConfig::extra_k")]
    pub extra_k: usize,
    /// Tail-bound trials and the base `s` (also run at `2s`).
    #[serde(default = "ScanConfig::trials")]
    pub tail_trials: usize,
    #[serde(default = "ScanConfig::tail_s")]
    pub tail_s: usize,
    #[serde(default = "ScanConfig::tail_t")]
    pub tail_t_samples: usize,
    /// Random probes added to the fixed bump in the classification.
    #[serde(default = "ScanConfig::probes")]
    pub extra_probes: usize,
    #[serde(default = "ScanConfig::grid")]
    pub search_grid: [usize; 2],
    #[serde(default)]
    pub search_bands: Option<usize>,
}

impl ScanConfig {
    fn trials() -> usize {
        100
    }
    fn extra_k() -> usize {
        8
    }
    fn tail_s() -> usize {
        4
    }
    fn tail_t() -> usize {
        8
    }
    fn probes() -> usize {
        5
    }
    fn grid() -> [usize; 2] {
        [32, 8]
    }
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            trials: Self::trials(),
            extra_k: Self::extra_k(),
            tail_trials: Self::trials(),
            tail_s: Self::tail_s(),
            tail_t_samples: Self::tail_t(),
            extra_probes: Self::probes(),
            search_grid: Self::grid(),
            search_bands: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Operator JSON and output directory, both relative to the config file.
    pub operator: PathBuf,
    #[serde(rename = "K", default = "RunConfig::k")]
    pub k_trunc: usize,
    #[serde(default = "RunConfig::grid")]
    pub t_grid_size: usize,
    #[serde(rename = "K_branch", default = "RunConfig::k_branch")]
    pub k_branch: usize,
    #[serde(default = "RunConfig::delta0")]
    pub delta0: f64,
    #[serde(default = "RunConfig::levels")]
    pub levels: usize,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub test_function: Option<TestFunctionConfig>,
    #[serde(default = "RunConfig::windows")]
    pub windows: Vec<[f64; 2]>,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub asymptotics: AsymptoticsConfig,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl RunConfig {
    fn k() -> usize {
        32
    }
    fn grid() -> usize {
        64
    }
    fn k_branch() -> usize {
        8
    }
    fn delta0() -> f64 {
        0.05
    }
    fn levels() -> usize {
        10
    }
    fn windows() -> Vec<[f64; 2]> {
        vec![[-2.0, 2.0]]
    }

    /// Parse a config document; schema errors carry the offending path.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "config".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json_str(&text)?;
        if let Some(dir) = path.parent() {
            if cfg.operator.is_relative() {
                cfg.operator = dir.join(&cfg.operator);
            }
            if let Some(out) = cfg.out.as_mut().filter(|o| o.is_relative()) {
                *out = dir.join(&*out);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_trunc < 2 * self.k_branch {
            return Err(Error::config("K_branch", format!("K_branch = {} exceeds K/2 = {}", self.k_branch, self.k_trunc / 2)));
        }
        if self.k_branch == 0 {
            return Err(Error::config("K_branch", "must be at least 1"));
        }
        if self.t_grid_size < 64 {
            return Err(Error::config("t_grid_size", "must be at least 64"));
        }
        if !(self.delta0 > 0.0 && self.delta0 < 1.0) {
            return Err(Error::config("delta0", "must lie in (0, 1)"));
        }
        if self.levels < 5 {
            return Err(Error::config("levels", "must be at least 5"));
        }
        self.tolerances.validate()?;
        for (i, w) in self.windows.iter().enumerate() {
            if !(w[0] < w[1]) {
                return Err(Error::config(format!("windows[{i}]"), "need a < b"));
            }
        }
        if self.asymptotics.k_hi > self.k_trunc / 2 {
            return Err(Error::config("asymptotics.k_hi", format!("must not exceed K/2 = {}", self.k_trunc / 2)));
        }
        if self.oracle.k_max > self.k_trunc / 2 {
            return Err(Error::config("oracle.k_max", format!("must not exceed K/2 = {}", self.k_trunc / 2)));
        }
        if self.scan.tail_s == 0 || 2 * self.scan.tail_s > self.k_trunc / 2 {
            return Err(Error::config("scan.tail_s", format!("need 1 <= 2 s <= K/2 = {}", self.k_trunc / 2)));
        }
        if self.scan.search_grid.iter().any(|&g| g < 2) {
            return Err(Error::config("scan.search_grid", "each dimension must be at least 2"));
        }
        Ok(())
    }

    pub fn test_function(&self, m: usize) -> Result<TestFunction> {
        match &self.test_function {
            Some(tf) => tf.build(m),
            None => TestFunction::bump((-1.0, 1.0), vec![Complex64::new(1.0, 0.0); m]),
        }
    }

    pub fn classify_params(&self) -> ClassifyParams {
        ClassifyParams { delta0: self.delta0, levels: self.levels, bound_cap: self.tolerances.bound_cap, ess_margin: self.tolerances.ess_margin }
    }

    pub fn search_params(&self) -> SearchParams {
        SearchParams {
            grid: (self.scan.search_grid[0], self.scan.search_grid[1]),
            low_bands: self.scan.search_bands,
            tol: self.tolerances.integrator_tol,
            ..SearchParams::default()
        }
    }

    pub fn expansion_params(&self) -> ExpansionParams {
        let mut p = ExpansionParams::new(self.k_branch);
        p.k_trunc = self.k_trunc;
        p.delta0 = self.delta0;
        p.levels = self.levels;
        p.tail_tol = self.tolerances.tail_tol;
        p.windows = self.windows.iter().map(|w| (w[0], w[1])).collect();
        p
    }
}

/// Resolved inputs of one invocation.
pub struct Context {
    pub config: RunConfig,
    pub spec: OperatorSpec,
    pub out: PathBuf,
    pub seed: u64,
    pub force: bool,
}

impl Context {
    pub fn load(args: &CommonArgs) -> Result<Self> {
        let config = RunConfig::from_file(&args.config)?;
        let spec = OperatorSpec::from_json_file(&config.operator).map_err(|e| match e {
            Error::Io(io) => Error::config("operator", format!("{}: {io}", config.operator.display())),
            other => other,
        })?;
        config.test_function(spec.m)?;
        let out = args.out.clone().or_else(|| config.out.clone()).ok_or_else(|| Error::config("out", "no output directory given"))?;
        let seed = args.seed.or(config.seed).unwrap_or(DEFAULT_SEED);
        Ok(Context { config, spec, out, seed, force: args.force })
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join(name), contents)?;
        Ok(())
    }

    fn write_json(&self, name: &str, value: &Value) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, &s)
    }

    fn probes(&self) -> Vec<TestFunction> {
        singular::default_probes(self.spec.m, self.config.scan.extra_probes, self.seed)
    }
}

fn conditions_json(spec: &OperatorSpec) -> Result<Value> {
    let red = operator::reduce_p1(spec);
    let mean = operator::mean_matrix_unchecked(&red.spec)?;
    let rep = operator::classify_conditions(spec, &mean, &red);
    Ok(json!({
        "condition1": rep.condition1,
        "condition2": rep.condition2,
        "asymptotically_spectral_expected": rep.asymptotically_spectral_expected,
        "note": rep.note,
        "r": [red.r.re, red.r.im],
        "mu": mean.mu.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>(),
        "mean_simple": mean.simple,
    }))
}

pub fn bands_csv(bands: &BandSet) -> String {
    let mut s = String::from("p,k,j,t,Re λ,Im λ,|α|,continuity_flag\n");
    for b in &bands.bands {
        let (k, j) = match b.kj {
            Some((k, j)) => (k.to_string(), (j + 1).to_string()),
            None => (String::new(), String::new()),
        };
        for (i, &t) in bands.t_grid.iter().enumerate() {
            let l = b.lambda[i];
            let _ = writeln!(s, "{},{k},{j},{t},{},{},{},{}", b.p, l.re, l.im, b.alpha[i], b.flags[i].as_str());
        }
    }
    s
}

pub fn bands_json(bands: &BandSet, spec: &OperatorSpec) -> Result<Value> {
    Ok(json!({
        "n": bands.n,
        "m": bands.m,
        "K": bands.k_trunc,
        "t_grid_size": bands.t_grid.len(),
        "N0": bands.n0,
        "N1": bands.n1,
        "crossing_suspects": bands.crossing_suspects,
        "conditions": conditions_json(spec)?,
        "bands": bands.bands.iter().map(|b| json!({
            "p": b.p,
            "k": b.kj.map(|x| x.0),
            "j": b.kj.map(|x| x.1 + 1),
            "max_jump": b.max_jump,
            "max_jump_ratio": b.max_jump_ratio,
            "certified": b.certified(),
        })).collect::<Vec<_>>(),
    }))
}

pub fn reconstruction_csv(res: &ExpansionResult) -> String {
    let mut s = String::from("x,component,Re value,Im value\n");
    for (i, &x) in res.x.iter().enumerate() {
        for j in 0..res.m {
            let v = res.reconstruction[i * res.m + j];
            let _ = writeln!(s, "{x},{},{},{}", j + 1, v.re, v.im);
        }
    }
    s
}

fn catalog_json(run: &pipeline::SingularityRun) -> Value {
    json!({
        "region": {"re": [run.region.re.0, run.region.re.1], "im": [run.region.im.0, run.region.im.1]},
        "a": run.catalog.a.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>(),
        "A": run.catalog.sets,
        "dropped": run.catalog.dropped.iter().map(|(z, why)| json!({"candidate": [z.re, z.im], "reason": why})).collect::<Vec<_>>(),
    })
}

fn cmd_bands(ctx: &Context) -> Result<()> {
    pipeline::mean_matrix(&ctx.spec, ctx.force)?;
    let bands = bands::track_bands(&ctx.spec, ctx.config.k_trunc, &bands::default_t_grid(ctx.config.t_grid_size))?;
    ctx.write("bands.csv", &bands_csv(&bands))?;
    ctx.write_json("bands.json", &bands_json(&bands, &ctx.spec)?)
}

fn cmd_oracle(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    pipeline::mean_matrix(&ctx.spec, ctx.force)?;
    let exact = match pipeline::closed_form(&ctx.spec) {
        Some(_) => {
            let r = pipeline::exact_case_check(&ctx.spec, cfg.k_trunc, &bands::default_t_grid(cfg.t_grid_size))?;
            let pass = r.max_rel_error < cfg.tolerances.eig_tol;
            json!({"report": r, "tol": cfg.tolerances.eig_tol, "pass": pass})
        }
        None => Value::Null,
    };
    let ts = bands::default_t_grid(cfg.oracle.t_points);
    let oracle = pipeline::oracle_check(&ctx.spec, cfg.k_trunc, &ts, cfg.oracle.k_max, cfg.tolerances.cross_tol, cfg.tolerances.integrator_tol)?;
    ctx.write_json("oracle.json", &json!({"exact_case": exact, "monodromy": oracle}))
}

fn cmd_singularities(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    pipeline::mean_matrix(&ctx.spec, ctx.force)?;
    let run = pipeline::analyze_singularities(
        &ctx.spec,
        cfg.k_trunc,
        cfg.t_grid_size,
        &cfg.search_params(),
        &ctx.probes(),
        cfg.tolerances.deg_tol,
        &cfg.classify_params(),
    )?;
    ctx.write_json("singularities.json", &run.report.to_json())?;
    ctx.write_json("catalog.json", &catalog_json(&run))?;
    let k_lo = run.bands.n0.unwrap_or(1).max(1);
    let def2 = pipeline::spectrality_scan(
        &ctx.spec,
        cfg.k_trunc,
        cfg.scan.extra_k,
        k_lo,
        &bands::default_t_grid(cfg.t_grid_size),
        cfg.scan.trials,
        ctx.seed,
        cfg.tolerances.bound_cap,
    )?;
    let doc = json!({
        "conditions": conditions_json(&ctx.spec)?,
        "K": cfg.k_trunc,
        "K_extended": cfg.k_trunc + cfg.scan.extra_k,
        "k_lo": def2.k_lo,
        "m_threshold": def2.base.m_threshold,
        "trials": def2.base.trials,
        "sup": def2.base.sup,
        "sup_extended": def2.extended.sup,
        "relative_change": def2.relative_change,
        "bounded": def2.base.bounded && def2.extended.bounded,
        "bound_cap": cfg.tolerances.bound_cap,
    });
    ctx.write_json("asymptotic_spectrality.json", &doc)
}

fn cmd_expand(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    pipeline::mean_matrix(&ctx.spec, ctx.force)?;
    let f = cfg.test_function(ctx.spec.m)?;
    let params = cfg.expansion_params();
    let (run, res) = pipeline::expand(
        &f,
        &ctx.spec,
        cfg.t_grid_size,
        &cfg.search_params(),
        &ctx.probes(),
        cfg.tolerances.deg_tol,
        &cfg.classify_params(),
        &params,
    )?;
    let mut doc = res.to_json();
    let extra = json!({
        "K": params.k_trunc,
        "branch_labels": res.branch_labels,
        "branch_quad_errors": res.branch_quad_errors,
        "quad_error": res.quad_error,
        "huddle_tail": res.huddle.tail,
        "huddle_sequence_norms": res.huddle.sequence_norms(),
        "direct_difference": max_abs_diff(&res.reconstruction, &res.direct),
        "tail_estimate": res.tail_estimate,
        "E": run.report.e,
        "S": run.report.s,
    });
    if let (Value::Object(a), Value::Object(b)) = (&mut doc, extra) {
        a.extend(b);
    }
    ctx.write_json("expansion.json", &doc)?;
    ctx.write("reconstruction.csv", &reconstruction_csv(&res))?;
    let tail = pipeline::tail_bound_run(&ctx.spec, cfg.k_trunc, cfg.scan.tail_s, cfg.scan.tail_t_samples, cfg.scan.tail_trials, ctx.seed)?;
    ctx.write_json("tail_bound.json", &serde_json::to_value(&tail)?)
}

fn cmd_asymptotics(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let a = &cfg.asymptotics;
    pipeline::mean_matrix(&ctx.spec, ctx.force)?;
    let bands = bands::track_bands(&ctx.spec, cfg.k_trunc, &bands::default_t_grid(cfg.t_grid_size))?;
    let ev = bands::verify_eigenvalue_asymptotics(&bands, a.k_lo, a.k_hi)?;
    // Eigenfunctions are compared on the reduced operator, where r = 0.
    let red = operator::reduce_p1(&ctx.spec);
    let mean = pipeline::mean_matrix(&red.spec, ctx.force)?;
    let ts: Vec<f64> = (0..a.t_samples).map(|i| -std::f64::consts::PI + std::f64::consts::TAU * (i as f64 + 0.5) / a.t_samples as f64).collect();
    let (ef, adj) = bands::verify_eigenfunction_asymptotics(&red.spec, &mean, cfg.k_trunc, &ts, a.k_lo, a.k_hi)?;
    let pass = ev.pass && ef.pass && adj.pass;
    ctx.write_json("asymptotics.json", &json!({"eigenvalue": ev, "eigenfunction": ef, "adjoint": adj, "pass": pass}))
}

#[derive(Serialize)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

fn check(name: &'static str, value: f64, tol: f64) -> Check {
    Check { name, value, tol, pass: value < tol }
}

fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    linalg::max_or_nan(a.iter().zip(b).map(|(x, y)| (x - y).norm()))
}

/// Cheap invariants of the configured operator and test function.
pub fn selfcheck(spec: &OperatorSpec, f: &TestFunction, k_trunc: usize, tol: &Tolerances, seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let labels_ok = bands::label_p(1, 2, 2) == Some(6)
        && bands::label_p(-1, 1, 2) == Some(3)
        && (spec.m + 1..=40).all(|p| bands::label_kj(p, spec.m).and_then(|(k, j)| bands::label_p(k, j, spec.m)) == Some(p));
    out.push(check("label_arithmetic", if labels_ok { 0.0 } else { 1.0 }, 0.5));

    let t = 1.0;
    let pairs = galerkin::solve_eigen(spec, Complex64::new(t, 0.0), k_trunc)?;
    let take = pairs.len().min(12);
    let mut bi = 0.0f64;
    for p in &pairs[..take] {
        for q in &pairs[..take] {
            let d = if std::ptr::eq(p, q) { 1.0 } else { 0.0 };
            bi = bi.max((galerkin::pairing(p, q) - d).norm());
        }
    }
    out.push(check("biorthogonality", bi, 1e-8));

    if let Some(_) = pipeline::closed_form(spec) {
        let r = pipeline::exact_case_check(spec, k_trunc, &bands::default_t_grid(64))?;
        out.push(check("closed_form_eigenvalues", r.max_rel_error, tol.eig_tol));
    }
    if spec.p1.is_zero() {
        let mono = floquet::monodromy(spec, Complex64::new(1.0, 0.5), tol.integrator_tol)?;
        let det = linalg::det(mono.m.as_ref());
        out.push(check("wronskian_det_one", (det - 1.0).norm(), 1e-8));
    }

    let xs: Vec<f64> = (0..21).map(|i| -2.0 + 0.2 * i as f64).collect();
    out.push(check("gelfand_inversion", expansion::gelfand_inversion_error(f, &xs, 128), tol.quad_tol));
    let (lhs, rhs) = expansion::gelfand_parseval(f, 128);
    out.push(check("gelfand_parseval", (lhs - rhs).abs() / rhs, tol.quad_tol));

    let mut coeff = 0.0f64;
    for p in pairs.iter().take(6) {
        let cell = expansion::coefficient_a(f, p, CoefficientMode::Cell)?;
        let line = expansion::coefficient_a(f, p, CoefficientMode::Line)?;
        coeff = coeff.max((cell - line).norm());
    }
    out.push(check("coefficient_cell_line", coeff, tol.quad_tol));

    let chk = singular::rank1_check(&pairs[0], 200, seed)?;
    out.push(check("projection_norm_identity", chk.relative_gap, 0.02));
    out.push(check("projection_idempotence", chk.idempotence, 1e-10));
    out.push(check("projection_rank_one", chk.rank_ratio, 1e-8));

    let h = HuddleResult::zero(4, 0.1, 5);
    out.push(check("empty_huddle_is_zero", h.limit.iter().map(|z| z.norm()).sum(), 1e-300));
    Ok(out)
}

fn cmd_selfcheck(ctx: &Context) -> Result<bool> {
    let cfg = &ctx.config;
    pipeline::mean_matrix(&ctx.spec, ctx.force)?;
    let f = cfg.test_function(ctx.spec.m)?;
    let checks = selfcheck(&ctx.spec, &f, cfg.k_trunc.min(16), &cfg.tolerances, ctx.seed)?;
    let pass = checks.iter().all(|c| c.pass);
    ctx.write_json("selfcheck.json", &json!({"checks": checks, "pass": pass}))?;
    Ok(pass)
}

/// Machine-readable error document for stderr.
pub fn error_json(e: &Error) -> Value {
    let mut v = json!({"error": e.kind(), "message": e.to_string(), "exit_code": exit_code(e)});
    match e {
        Error::ConfigInvalid { path, .. } => v["path"] = json!(path),
        Error::HuddleDiverged { sequence, .. } => v["sequence"] = json!(sequence),
        _ => {}
    }
    v
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

/// Runs one subcommand and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let (args, which) = match &cli.command {
        Command::Bands(a) => (a, "bands"),
        Command::OracleCheck(a) => (a, "oracle-check"),
        Command::Singularities(a) => (a, "singularities"),
        Command::Expand(a) => (a, "expand"),
        Command::VerifyAsymptotics(a) => (a, "verify-asymptotics"),
        Command::Selfcheck(a) => (a, "selfcheck"),
    };
    let result = Context::load(args).and_then(|ctx| match which {
        "bands" => cmd_bands(&ctx).map(|_| true),
        "oracle-check" => cmd_oracle(&ctx).map(|_| true),
        "singularities" => cmd_singularities(&ctx).map(|_| true),
        "expand" => cmd_expand(&ctx).map(|_| true),
        "verify-asymptotics" => cmd_asymptotics(&ctx).map(|_| true),
        _ => cmd_selfcheck(&ctx),
    });
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("{}", json!({"error": "SelfcheckFailed", "message": "one or more invariants failed; see selfcheck.json", "exit_code": 2}));
            2
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_paths() {
        let cfg = RunConfig::from_json_str(r#"{"operator": "op.json"}"#).unwrap();
        assert_eq!(cfg.k_trunc, 32);
        assert_eq!(cfg.k_branch, 8);
        assert_eq!(cfg.tolerances.bound_cap, 1e6);
        let err = RunConfig::from_json_str(r#"{"operator": "op.json", "K": 16, "K_branch": 9}"#).unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid { ref path, .. } if path == "K_branch"));
        let err = RunConfig::from_json_str(r#"{"operator": "op.json", "tolerances": {"quad_tol": -1}}"#).unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid { ref path, .. } if path == "tolerances.quad_tol"));
        let err = RunConfig::from_json_str(r#"{"operator": "op.json", "tolerances": {"quad_tl": 1}}"#).unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid { ref path, .. } if path == "tolerances.quad_tl"), "{err:?}");
        let err = RunConfig::from_json_str(r#"{"operator": "op.json", "t_grid_size": 32}"#).unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid { ref path, .. } if path == "t_grid_size"));
    }

    #[test]
    fn test_function_descriptor() {
        let tf: TestFunctionConfig = serde_json::from_str(r#"{"kind": "gaussian_truncated", "support": [-1, 1], "weights": [[1, 0]], "sigma": 0.3}"#).unwrap();
        let f = tf.build(1).unwrap();
        assert!((f.eval(0.0)[0].re - 1.0).abs() < 1e-15);
        assert!(tf.build(2).is_err());
        let bad: TestFunctionConfig = serde_json::from_str(r#"{"kind": "box", "support": [-1, 1], "weights": [[1, 0]]}"#).unwrap();
        assert!(matches!(bad.build(1), Err(Error::ConfigInvalid { ref path, .. }) if path == "test_function.kind"));
    }

    #[test]
    fn free_selfcheck_passes() {
        let spec = OperatorSpec::free(2, 1).unwrap();
        let f = TestFunction::bump((-1.0, 1.0), vec![Complex64::new(1.0, 0.0)]).unwrap();
        let checks = selfcheck(&spec, &f, 8, &Tolerances::default(), 42).unwrap();
        for c in &checks {
            assert!(c.pass, "{} {}", c.name, c.value);
        }
    }
}
