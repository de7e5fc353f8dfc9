//! Experiment orchestration: a JSON configuration drives the pipeline
//! classify → spectral → simulate → fit → verdict, and the resulting bundle is
//! rendered into a directory of JSON and CSV reports.
//!
//! Modes:
//! - `stability`: λ^Q(μ̄₁) > 0 should coincide with a two-sided envelope fit
//!   at k = 0; λ^Q(μ̄₁) < 0 should make the k = 0 upper fit fail.
//! - `subprocess`: the same test for the α-subprocess, with the fitted growth
//!   rate reported against α.
//! - `extended_kato`: short-time regime, a finite fitted k is expected.
//! - `single_op`: one stage, no prediction.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envelopes::{fit_envelope, EnvelopeFamily, EnvelopeVerdict, FamilySpec, FitOptions};
use crate::error::{Error, Result};
use crate::feynman_kac::{
    fk_kernel, gauge, resolvent_a, GaugeEstimate, GaugeOptions, GaugeVerdict, KernelEstimate, KernelOptions,
    McOptions, ResolventOptions, ResolventTable, ResolventVerdict,
};
use crate::functionals::{JumpPerturbation, MeasureSpec, Perturbation, PotentialU};
use crate::kato::{classify, green_tight_check, ClassFlags, TriState};
use crate::numerics::{dist, norm};
use crate::processes::{transition_density, ProcessKind, ProcessSpec};
use crate::spectral::{mesh_study, Mesh, MeshMode, MeshStudy, SpectralProblem};

pub const SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Stability,
    Subprocess,
    ExtendedKato,
    SingleOp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleOp {
    Kernel,
    Spectral,
    Classify,
    Gauge,
    Resolvent,
}

/// Either all pairs (x_i, x_j), i ≤ j, of a point list, or an explicit list.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PairGrid {
    Points(Vec<Vec<f64>>),
    Explicit(Vec<(Vec<f64>, Vec<f64>)>),
}

impl PairGrid {
    pub fn expand(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        match self {
            PairGrid::Points(p) => {
                let mut out = Vec::new();
                for i in 0..p.len() {
                    for j in i..p.len() {
                        out.push((p[i].clone(), p[j].clone()));
                    }
                }
                out
            }
            PairGrid::Explicit(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub dt: f64,
    /// Steps grow to `max_dt` away from `focus_radius` (both needed).
    pub max_dt: Option<f64>,
    pub focus_radius: Option<f64>,
    /// KDE bandwidth; plug-in rule when absent.
    pub bandwidth: Option<f64>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { dt: 1e-3, max_dt: None, focus_radius: None, bandwidth: None }
    }
}

/// Every threshold used by the verdict logic. Confidence intervals are 95%.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub slack_factor: f64,
    pub band_factor: f64,
    pub growth_band: f64,
    pub trim_fraction: f64,
    pub reliable_rel_ci: f64,
    pub max_peak_rel_ci: f64,
    /// Relative slack on fitted constants against the h-transform bounds.
    pub constants_tol: f64,
    /// Relative slack on constants for the zero perturbation.
    pub identity_tol: f64,
    /// Diagnostic band for fitted k against |λ| or α.
    pub k_rel_tol: f64,
    pub kato_ladder: Vec<f64>,
    /// Number of axis points in the classification grid.
    pub class_grid_points: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        let f = FitOptions::default();
        Tolerances {
            slack_factor: f.slack_factor,
            band_factor: f.band_factor,
            growth_band: f.growth_band,
            trim_fraction: f.trim_fraction,
            reliable_rel_ci: f.reliable_rel_ci,
            max_peak_rel_ci: 0.5,
            constants_tol: 0.25,
            identity_tol: 0.05,
            k_rel_tol: 0.3,
            kato_ladder: vec![1.0, 4.0, 16.0, 64.0, 256.0],
            class_grid_points: 17,
        }
    }
}

impl Tolerances {
    fn fit(&self, allow_k: bool, shape: Option<(f64, f64)>) -> FitOptions {
        FitOptions {
            allow_k,
            slack_factor: self.slack_factor,
            band_factor: self.band_factor,
            growth_band: self.growth_band,
            trim_fraction: self.trim_fraction,
            reliable_rel_ci: self.reliable_rel_ci,
            fixed_shape: shape,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaugeConfig {
    /// Start points; the origin when empty.
    pub points: Vec<Vec<f64>>,
    pub truncation_radius: f64,
    /// Defaults to the top-level `n_paths`.
    pub n_paths: Option<u64>,
    pub dt: f64,
    pub margin: f64,
    pub max_dt: f64,
    pub tail_quantile: f64,
    pub min_exceedances: usize,
    pub bounded_above: f64,
    pub divergent_below: f64,
    pub max_tail_bias_fraction: f64,
}

impl Default for GaugeConfig {
    fn default() -> Self {
        let g = GaugeOptions::new(0, 0);
        GaugeConfig {
            points: Vec::new(),
            truncation_radius: 200.0,
            n_paths: None,
            dt: g.dt,
            margin: g.margin,
            max_dt: g.max_dt,
            tail_quantile: g.tail_quantile,
            min_exceedances: g.min_exceedances,
            bounded_above: g.bounded_above,
            divergent_below: g.divergent_below,
            max_tail_bias_fraction: g.max_tail_bias_fraction,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolventConfig {
    /// Start point; the origin when absent.
    pub x: Option<Vec<f64>>,
    /// Probe points; (0.5, 0, …) when empty.
    pub probes: Vec<Vec<f64>>,
    pub alpha: f64,
    pub n_paths: Option<u64>,
    pub dt: f64,
    /// Euler steps of `dt` inside this radius, growing to `max_dt` outside; by
    /// default the support of μ, |x| and the probes, padded by three bandwidths.
    pub focus_radius: Option<f64>,
    pub max_dt: f64,
    pub bandwidth: f64,
    pub ladder: Vec<f64>,
    pub finite_below: f64,
    pub divergent_above: f64,
    pub max_rate_rel_ci: f64,
    pub min_windows: usize,
}

impl Default for ResolventConfig {
    fn default() -> Self {
        let r = ResolventOptions::new(McOptions::new(2, 0, 1e-3));
        ResolventConfig {
            x: None,
            probes: Vec::new(),
            alpha: 0.0,
            n_paths: None,
            dt: 2e-3,
            focus_radius: None,
            max_dt: 4.0,
            bandwidth: r.bandwidth,
            ladder: r.ladder,
            finite_below: r.finite_below,
            divergent_above: r.divergent_above,
            max_rate_rel_ci: r.max_rate_rel_ci,
            min_windows: r.min_windows,
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub mode: Mode,
    pub process: ProcessSpec,
    #[serde(default)]
    pub u: Option<PotentialU>,
    #[serde(default)]
    pub mu: MeasureSpec,
    #[serde(default, alias = "F")]
    pub jump: Option<JumpPerturbation>,
    pub envelope: FamilySpec,
    /// Killing rate of the subprocess (`subprocess` mode).
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub mesh: Option<Mesh>,
    /// Also run the three-mesh Richardson study for λ.
    #[serde(default)]
    pub mesh_study: bool,
    pub n_paths: u64,
    pub seed: u64,
    pub t_values: Vec<f64>,
    pub pairs: PairGrid,
    pub output_dir: PathBuf,
    /// Estimate the unperturbed kernel for shape and constant comparisons.
    #[serde(default = "default_true")]
    pub baseline: bool,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub gauge: Option<GaugeConfig>,
    #[serde(default)]
    pub resolvent: Option<ResolventConfig>,
    #[serde(default)]
    pub op: Option<SingleOp>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Parses without the mode checks, for callers that override `mode` before `run`.
    pub fn load_unchecked(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema != SCHEMA {
            return bad(format!("unsupported schema {} (expected {SCHEMA})", self.schema));
        }
        self.process.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.mu.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let Some(f) = &self.jump {
            f.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        let d = self.process.dim;
        if self.envelope.dim != d {
            return bad(format!("envelope dim {} differs from process dim {d}", self.envelope.dim));
        }
        if self.mode == Mode::Stability && !self.process.is_transient() {
            return bad("stability mode requires a transient process".into());
        }
        if self.mode == Mode::Subprocess && !(self.alpha > 0.0) {
            return bad("subprocess mode requires alpha > 0".into());
        }
        if self.mode == Mode::SingleOp && self.op.is_none() {
            return bad("single_op mode requires `op`".into());
        }
        if self.mode != Mode::SingleOp && self.op.is_some() {
            return bad("`op` is only allowed in single_op mode".into());
        }
        if self.n_paths < 2 {
            return bad("n_paths must be ≥ 2".into());
        }
        if self.t_values.is_empty() || self.t_values.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return bad("t_values must be positive and finite".into());
        }
        let pairs = self.pairs.expand();
        if pairs.is_empty() || pairs.iter().any(|(x, y)| x.len() != d || y.len() != d) {
            return bad(format!("pairs must be non-empty points of dimension {d}"));
        }
        if !(self.simulation.dt > 0.0) {
            return bad("simulation.dt must be > 0".into());
        }
        if self.simulation.focus_radius.is_some() != self.simulation.max_dt.is_some() {
            return bad("simulation.focus_radius and simulation.max_dt go together".into());
        }
        if let Some(g) = &self.gauge {
            if g.points.iter().any(|p| p.len() != d) {
                return bad("gauge points have the wrong dimension".into());
            }
        }
        if let Some(r) = &self.resolvent {
            if r.x.as_ref().is_some_and(|x| x.len() != d) || r.probes.iter().any(|p| p.len() != d) {
                return bad("resolvent points have the wrong dimension".into());
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Bundle

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Consistent,
    Inconsistent,
    Inconclusive,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Inconsistent => 2,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Checked,
    SurrogateChecked,
    Assumed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Precondition {
    pub hypothesis: String,
    pub status: CheckStatus,
    pub result: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Finding {
    pub check: String,
    pub outcome: Outcome,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectralReport {
    pub lambda: f64,
    pub alpha: f64,
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub mesh: Mesh,
    pub nodes: usize,
    pub study: Option<MeshStudy>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Fits {
    pub baseline: Option<EnvelopeVerdict>,
    pub k_zero: Option<EnvelopeVerdict>,
    pub free_k: Option<EnvelopeVerdict>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub schema: u32,
    pub mode: Mode,
    pub verdict: Outcome,
    pub message: String,
    pub lambda: Option<f64>,
    pub class_flags: Option<ClassFlags>,
    pub gauge_verdict: Option<GaugeVerdict>,
    pub gauge_range: Option<(f64, f64)>,
    pub resolvent_verdict: Option<ResolventVerdict>,
    pub kernel_bandwidth: Option<f64>,
    pub kernel_bias_bound: Option<f64>,
    pub fits: Fits,
    pub preconditions: Vec<Precondition>,
    pub findings: Vec<Finding>,
    pub stage_errors: Vec<StageError>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RatioRow {
    pub r: f64,
    pub ratio: f64,
    pub ratio_ci: f64,
}

#[derive(Clone, Debug)]
pub struct ReportBundle {
    pub summary: Summary,
    pub kernel: Option<KernelEstimate>,
    pub baseline_kernel: Option<KernelEstimate>,
    pub gauge: Option<GaugeEstimate>,
    pub spectral: Option<SpectralReport>,
    pub resolvent: Option<ResolventTable>,
    /// (t, rows) of p̂ over the fitted upper envelope.
    pub ratios: Vec<(f64, Vec<RatioRow>)>,
}

impl ReportBundle {
    pub fn is_empty(&self) -> bool {
        self.kernel.is_none()
            && self.gauge.is_none()
            && self.spectral.is_none()
            && self.resolvent.is_none()
            && self.summary.class_flags.is_none()
    }
}

// ---------------------------------------------------------------------------
// Pipeline

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    preconditions: Vec<Precondition>,
    findings: Vec<Finding>,
    errors: Vec<StageError>,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors.push(StageError { stage: name.into(), error: e.to_string() });
                None
            }
        }
    }

    fn find(&mut self, check: &str, outcome: Outcome, detail: String) {
        self.findings.push(Finding { check: check.into(), outcome, detail });
    }

    fn pre(&mut self, hypothesis: &str, status: CheckStatus, result: String) {
        self.preconditions.push(Precondition { hypothesis: hypothesis.into(), status, result });
    }
}

fn tri(t: TriState) -> &'static str {
    match t {
        TriState::Yes => "yes",
        TriState::No => "no",
        TriState::Inconclusive => "inconclusive",
    }
}

/// Points on the first axis covering the support of μ, both signs unless μ is radial.
pub fn class_grid(mu: &MeasureSpec, dim: usize, n: usize) -> Vec<Vec<f64>> {
    let reach = 2.0 * mu.support_radius().max(0.5) + 1.0;
    let n = n.max(2);
    let mut out = Vec::new();
    for k in 0..n {
        let r = reach * k as f64 / (n - 1) as f64;
        let mut p = vec![0.0; dim];
        p[0] = r;
        out.push(p.clone());
        if !mu.is_radial() && k > 0 {
            p[0] = -r;
            out.push(p);
        }
    }
    out
}

fn default_mesh(cfg: &ExperimentConfig) -> Mesh {
    let radial = cfg.process.dim == 3
        && cfg.process.kind != ProcessKind::AlphaStable1d
        && cfg.mu.is_radial()
        && cfg.u.is_none()
        && cfg.jump.as_ref().is_none_or(|f| f.is_zero());
    if radial {
        let width = (3.0 * cfg.mu.support_radius()).max(32.0);
        return Mesh { h: 1.0 / 64.0, half_width: Some(width), mode: MeshMode::Radial };
    }
    let h = match cfg.process.dim {
        1 => 1.0 / 64.0,
        2 => 1.0 / 16.0,
        _ => 1.0 / 4.0,
    };
    Mesh { h, half_width: None, mode: MeshMode::Cartesian }
}

fn positive_part(mu: &MeasureSpec) -> MeasureSpec {
    MeasureSpec { label: format!("{} (positive part)", mu.label), pos: mu.pos.clone(), neg: None }
}

fn negative_part(mu: &MeasureSpec) -> MeasureSpec {
    MeasureSpec { label: format!("{} (negative part)", mu.label), pos: mu.neg.clone(), neg: None }
}

fn preconditions(run: &mut Run, spec: &ProcessSpec) -> Option<ClassFlags> {
    let cfg = run.cfg;
    let tol = &cfg.tolerances;
    let grid = class_grid(&cfg.mu, spec.dim, tol.class_grid_points);
    if cfg.mode == Mode::Stability {
        run.pre("transient process", CheckStatus::Checked, spec.is_transient().to_string());
    }
    let mut flags = None;
    if cfg.mu.pos.is_some() {
        let pos = positive_part(&cfg.mu);
        let r = classify(&pos, spec, &tol.kato_ladder, &grid);
        if let Some(rep) = run.stage("classify", r) {
            let f = rep.flags.clone();
            match cfg.mode {
                Mode::ExtendedKato => run.pre(
                    "μ₁ in the extended Kato class",
                    CheckStatus::SurrogateChecked,
                    format!("extended_kato={} (grid sup, jump part not included)", tri(f.extended_kato)),
                ),
                _ => run.pre(
                    "μ₁ in the Kato class",
                    CheckStatus::SurrogateChecked,
                    format!("kato={} green_bounded={} (grid sup)", tri(f.kato), tri(f.green_bounded)),
                ),
            }
            if f.kato == TriState::Inconclusive || f.extended_kato == TriState::Inconclusive {
                run.find("class preconditions", Outcome::Inconclusive, "kato classification inconclusive".into());
            }
            flags = Some(f);
        }
        if cfg.mode == Mode::Stability {
            let sr = cfg.mu.support_radius().max(0.5);
            let radii: Vec<f64> = [1.0, 2.0, 4.0, 8.0].iter().map(|k| k * sr).collect();
            let r = green_tight_check(&pos, spec, &radii, &grid);
            if let Some(t) = run.stage("green_tightness", r) {
                run.pre("μ₁ Green-tight", CheckStatus::SurrogateChecked, format!("tight={}", t.tight));
            }
        }
    } else {
        run.pre("μ₁ in the Kato class", CheckStatus::Checked, "μ₁ = 0".into());
    }
    if cfg.mu.neg.is_some() {
        let r = classify(&negative_part(&cfg.mu), spec, &tol.kato_ladder, &grid);
        if let Some(rep) = run.stage("classify_negative", r) {
            run.pre("μ₂ smooth", CheckStatus::SurrogateChecked, format!("dynkin={}", tri(rep.flags.dynkin)));
        }
    }
    if cfg.u.is_some() {
        run.pre("u of potential type", CheckStatus::Assumed, "not tested".into());
    }
    if cfg.jump.as_ref().is_some_and(|f| !f.is_zero()) {
        run.pre("N(e^F − 1)μ_H in the required class", CheckStatus::Assumed, "not tested".into());
    }
    flags
}

fn spectral_stage(run: &mut Run) -> Option<SpectralReport> {
    let cfg = run.cfg;
    let problem = SpectralProblem {
        process: cfg.process.clone(),
        u: cfg.u.clone(),
        mu: cfg.mu.clone(),
        jump: cfg.jump.clone(),
        nu: None,
        alpha: if cfg.mode == Mode::Subprocess { cfg.alpha } else { 0.0 },
    };
    let mesh = cfg.mesh.unwrap_or_else(|| default_mesh(cfg));
    let res = problem.discretize(&mesh).and_then(|disc| {
        let n = disc.len();
        problem.solve(&mesh).map(|r| (r, n))
    });
    let (res, nodes) = run.stage("spectral", res)?;
    let study = if cfg.mesh_study {
        let meshes: Vec<Mesh> = (0..3).map(|k| Mesh { h: mesh.h / 2f64.powi(k), ..mesh }).collect();
        let r = mesh_study(&problem, &meshes);
        run.stage("mesh_study", r)
    } else {
        None
    };
    Some(SpectralReport {
        lambda: study.as_ref().map_or(res.lambda, |s| s.extrapolated),
        alpha: res.alpha,
        residual: res.residual,
        converged: res.converged,
        iterations: res.iterations,
        mesh: Mesh { half_width: Some(res.mesh.1), ..mesh },
        nodes,
        study,
    })
}

fn kernel_options(cfg: &ExperimentConfig, seed: u64) -> KernelOptions {
    let sim = &cfg.simulation;
    let mut mc = McOptions::new(cfg.n_paths, seed, sim.dt);
    if let (Some(r), Some(m)) = (sim.focus_radius, sim.max_dt) {
        mc = mc.focused(r, m);
    }
    let mut k = KernelOptions::new(mc);
    k.bandwidth = sim.bandwidth;
    k.max_peak_rel_ci = cfg.tolerances.max_peak_rel_ci;
    k
}

/// The closed-form kernel on the same grid, with zero error.
fn exact_estimate(spec: &ProcessSpec, like: &KernelEstimate) -> Result<KernelEstimate> {
    let mut values = Vec::new();
    for &t in &like.t_values {
        let row: Vec<f64> =
            like.pairs.iter().map(|(x, y)| transition_density(spec, t, x, y)).collect::<Result<_>>()?;
        values.push(row);
    }
    let zeros = vec![vec![0.0; like.pairs.len()]; like.t_values.len()];
    Ok(KernelEstimate {
        t_values: like.t_values.clone(),
        pairs: like.pairs.clone(),
        values,
        ci_half_width: zeros.clone(),
        bias: zeros,
        n_paths: 0,
        bandwidth: 0.0,
        bias_bound: 0.0,
    })
}

fn two_sided(v: &EnvelopeVerdict) -> bool {
    v.passed_upper && v.passed_lower
}

fn ratio_rows(est: &KernelEstimate, fam: &EnvelopeFamily, fit: &EnvelopeVerdict) -> Vec<(f64, Vec<RatioRow>)> {
    let (upper, _) = fam.kind.sides();
    est.t_values
        .iter()
        .enumerate()
        .map(|(ti, &t)| {
            let mut rows: Vec<RatioRow> = est
                .pairs
                .iter()
                .enumerate()
                .filter_map(|(pi, (x, y))| {
                    let r = dist(x, y);
                    let env = fit.C2 * (fit.k * t).exp() * fam.eval_kind(upper, t, x, r, fit.c2).ok()?;
                    (env > 0.0).then(|| RatioRow {
                        r,
                        ratio: est.values[ti][pi] / env,
                        ratio_ci: est.ci_half_width[ti][pi] / env,
                    })
                })
                .collect();
            rows.sort_by(|a, b| a.r.total_cmp(&b.r).then(a.ratio.total_cmp(&b.ratio)));
            (t, rows)
        })
        .collect()
}

fn gauge_stage(run: &mut Run, spec: &ProcessSpec, pert: &Perturbation) -> Option<GaugeEstimate> {
    let cfg = run.cfg;
    let g = cfg.gauge.clone()?;
    let points = if g.points.is_empty() { vec![vec![0.0; spec.dim]] } else { g.points.clone() };
    let opts = GaugeOptions {
        n_paths: g.n_paths.unwrap_or(cfg.n_paths),
        seed: cfg.seed.wrapping_add(1),
        dt: g.dt,
        margin: g.margin,
        max_dt: g.max_dt,
        tail_quantile: g.tail_quantile,
        min_exceedances: g.min_exceedances,
        bounded_above: g.bounded_above,
        divergent_below: g.divergent_below,
        max_tail_bias_fraction: g.max_tail_bias_fraction,
    };
    let r = gauge(spec, pert, &points, g.truncation_radius, &opts);
    run.stage("gauge", r)
}

fn resolvent_stage(run: &mut Run, spec: &ProcessSpec, pert: &Perturbation) -> Option<ResolventTable> {
    let cfg = run.cfg;
    let rc = cfg.resolvent.clone()?;
    let x = rc.x.clone().unwrap_or_else(|| vec![0.0; spec.dim]);
    let probes = if rc.probes.is_empty() {
        let mut p = vec![0.0; spec.dim];
        p[0] = 0.5;
        vec![p]
    } else {
        rc.probes.clone()
    };
    let reach = probes.iter().chain(std::iter::once(&x)).map(|p| norm(p)).fold(cfg.mu.support_radius(), f64::max);
    let focus = rc.focus_radius.unwrap_or(reach + 3.0 * rc.bandwidth);
    let mc = McOptions::new(rc.n_paths.unwrap_or(cfg.n_paths), cfg.seed.wrapping_add(2), rc.dt).focused(focus, rc.max_dt);
    let opts = ResolventOptions {
        mc,
        bandwidth: rc.bandwidth,
        ladder: rc.ladder.clone(),
        finite_below: rc.finite_below,
        divergent_above: rc.divergent_above,
        max_rate_rel_ci: rc.max_rate_rel_ci,
        min_windows: rc.min_windows,
    };
    let r = resolvent_a(spec, pert, rc.alpha, &x, &probes, &opts);
    run.stage("resolvent", r)
}

/// Runs every stage of the configured mode. Configuration errors are returned;
/// numeric failures become `stage_errors` and an inconclusive verdict.
pub fn run(cfg: &ExperimentConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let spec = cfg.process.clone();
    let fam = cfg.envelope.build().map_err(|e| Error::Config(e.to_string()))?;
    let mut run = Run { cfg, preconditions: Vec::new(), findings: Vec::new(), errors: Vec::new() };
    let bound_u = match &cfg.u {
        Some(u) => run.stage("bind_u", u.bind(&spec)),
        None => None,
    };
    let u_failed = cfg.u.is_some() && bound_u.is_none();
    let pert = Perturbation { u: bound_u, mu: cfg.mu.clone(), jump: cfg.jump.clone() };
    let tol = &cfg.tolerances;
    let pairs = cfg.pairs.expand();

    let op = cfg.op;
    let wants = |o: SingleOp| cfg.mode != Mode::SingleOp || op == Some(o);

    let class_flags = if wants(SingleOp::Classify) { preconditions(&mut run, &spec) } else { None };
    let spectral = match cfg.mode {
        Mode::Stability | Mode::Subprocess => spectral_stage(&mut run),
        Mode::SingleOp if op == Some(SingleOp::Spectral) => spectral_stage(&mut run),
        _ => None,
    };
    let lambda = spectral.as_ref().map(|s| s.lambda);

    let (mut kernel, mut baseline_kernel) = (None, None);
    let mut fits = Fits::default();
    let mut main: Option<(Outcome, String)> = None;
    let mut ratios = Vec::new();

    if wants(SingleOp::Kernel) && !u_failed {
        let kopts = kernel_options(cfg, cfg.seed);
        let r = fk_kernel(&spec, &pert, &cfg.t_values, &pairs, &kopts);
        kernel = run.stage("kernel", r);
        // Reference kernel: closed form for the zero perturbation, else the simulated free kernel.
        let reference = match (&kernel, pert.is_zero()) {
            (Some(k), true) => exact_estimate(&spec, k).ok(),
            (Some(_), false) if cfg.baseline && cfg.mode != Mode::SingleOp => {
                let r = fk_kernel(&spec, &Perturbation::default(), &cfg.t_values, &pairs, &kopts);
                baseline_kernel = run.stage("baseline_kernel", r);
                baseline_kernel.clone()
            }
            _ => None,
        };
        if let Some(reference) = &reference {
            let r = fit_envelope(reference, &fam, &tol.fit(false, None));
            fits.baseline = run.stage("baseline_fit", r);
        }
        let shape = fits.baseline.as_ref().map(|b| (b.c1, b.c2));
        if let Some(est) = &kernel {
            let r = fit_envelope(est, &fam, &tol.fit(false, shape));
            fits.k_zero = run.stage("fit_k_zero", r);
            let r = fit_envelope(est, &fam, &tol.fit(true, shape));
            fits.free_k = run.stage("fit_free_k", r);
            if let Some(f) = fits.free_k.as_ref().or(fits.k_zero.as_ref()) {
                ratios = ratio_rows(est, &fam, f);
            }
        }
    }

    let gauge_est = if matches!(cfg.mode, Mode::Stability) || op == Some(SingleOp::Gauge) {
        gauge_stage(&mut run, &spec, &pert)
    } else {
        None
    };
    let resolvent = if matches!(cfg.mode, Mode::Stability) || op == Some(SingleOp::Resolvent) {
        resolvent_stage(&mut run, &spec, &pert)
    } else {
        None
    };

    // Zero perturbation: constants against the closed form.
    if pert.is_zero() && cfg.mode != Mode::SingleOp {
        if let (Some(k0), Some(b)) = (&fits.k_zero, &fits.baseline) {
            let (q2, q1) = (k0.C2 / b.C2, k0.C1 / b.C1);
            let ok = two_sided(k0) && (q2 - 1.0).abs() <= tol.identity_tol && (q1 - 1.0).abs() <= tol.identity_tol;
            let detail = format!("C₂/C₂⁰ = {q2:.4}, C₁/C₁⁰ = {q1:.4}");
            if ok {
                main = Some((Outcome::Consistent, "consistent: identity perturbation, constants within tolerance of 1".into()));
                run.find("identity constants", Outcome::Consistent, detail);
            } else {
                run.find("identity constants", Outcome::Inconsistent, detail);
            }
        }
    }

    match cfg.mode {
        _ if main.is_some() => {}
        Mode::Stability => {
            if let (Some(l), Some(k0)) = (lambda, &fits.k_zero) {
                if l > 0.0 {
                    if two_sided(k0) {
                        main = Some((Outcome::Consistent, "consistent: λ>0 and k=0 two-sided fit passed".into()));
                    } else {
                        let m = format!(
                            "inconsistent: λ={l:.4}>0 but k=0 fit failed (upper {}, lower {})",
                            k0.passed_upper, k0.passed_lower
                        );
                        run.find("stability", Outcome::Inconsistent, m.clone());
                        main = Some((Outcome::Inconsistent, m));
                    }
                    if let (Some(g), Some(b)) = (&gauge_est, &fits.baseline) {
                        let hmax = g.h_hat.iter().cloned().fold(1.0, f64::max);
                        let hmin = g.h_hat.iter().cloned().fold(1.0, f64::min);
                        let ub = hmax * hmax * b.C2 * (1.0 + tol.constants_tol);
                        let lb = hmin * hmin * b.C1 * (1.0 - tol.constants_tol);
                        let ok = k0.C2 <= ub && k0.C1 >= lb;
                        let detail = format!("C₂ = {:.4e} ≤ {ub:.4e}, C₁ = {:.4e} ≥ {lb:.4e}", k0.C2, k0.C1);
                        run.find(
                            "h-transform constants",
                            if ok { Outcome::Consistent } else { Outcome::Inconsistent },
                            detail,
                        );
                    }
                } else if l < 0.0 {
                    let k = fits.free_k.as_ref().map_or(f64::NAN, |f| f.k);
                    if !k0.passed_upper {
                        main = Some((
                            Outcome::Consistent,
                            format!("consistent: λ<0 and k=0 upper fit failed; fitted k = {k:.4}"),
                        ));
                        let ratio = k / l.abs();
                        let near = (ratio - 1.0).abs() <= tol.k_rel_tol;
                        run.find(
                            "fitted k against |λ|",
                            Outcome::Inconclusive,
                            format!("k/|λ| = {ratio:.3} (within band: {near})"),
                        );
                    } else {
                        main = Some((
                            Outcome::Inconclusive,
                            format!("inconclusive: λ={l:.4}<0 but the k=0 upper fit passed on this time window"),
                        ));
                    }
                } else {
                    main = Some((Outcome::Inconclusive, "inconclusive: λ = 0".into()));
                }
            }
            // Gauge, resolvent and λ should agree on subcriticality.
            let mut votes: Vec<(&str, bool)> = Vec::new();
            if let Some(l) = lambda {
                if l != 0.0 {
                    votes.push(("λ>0", l > 0.0));
                }
            }
            if let Some(g) = &gauge_est {
                match g.verdict {
                    GaugeVerdict::Bounded => votes.push(("gauge bounded", true)),
                    GaugeVerdict::Divergent => votes.push(("gauge bounded", false)),
                    GaugeVerdict::Inconclusive => {}
                }
            }
            if let Some(r) = &resolvent {
                match r.verdict {
                    ResolventVerdict::Finite => votes.push(("resolvent finite", true)),
                    ResolventVerdict::Divergent => votes.push(("resolvent finite", false)),
                    ResolventVerdict::Inconclusive => {}
                }
            }
            if votes.len() >= 2 {
                let agree = votes.iter().all(|v| v.1 == votes[0].1);
                let detail = votes.iter().map(|(n, b)| format!("{n}={b}")).collect::<Vec<_>>().join(", ");
                run.find("subcriticality concordance", if agree { Outcome::Consistent } else { Outcome::Inconsistent }, detail);
            }
        }
        Mode::Subprocess => {
            if let (Some(l), Some(fk)) = (lambda, &fits.free_k) {
                if l > 0.0 {
                    if two_sided(fk) {
                        main = Some((
                            Outcome::Consistent,
                            format!("consistent: λ_α>0 and two-sided fit passed with k = {:.4} (α = {})", fk.k, cfg.alpha),
                        ));
                        let within = fk.k <= cfg.alpha * (1.0 + tol.k_rel_tol);
                        run.find(
                            "fitted k against α",
                            Outcome::Inconclusive,
                            format!("k = {:.4}, α = {} (k ≤ α within band: {within})", fk.k, cfg.alpha),
                        );
                    } else {
                        let m = format!("inconsistent: λ_α={l:.4}>0 but the two-sided fit with free k failed");
                        run.find("subprocess stability", Outcome::Inconsistent, m.clone());
                        main = Some((Outcome::Inconsistent, m));
                    }
                } else {
                    main = Some((Outcome::Inconclusive, format!("inconclusive: λ_α={l:.4} ≤ 0, no prediction")));
                }
            }
        }
        Mode::ExtendedKato => {
            if let Some(fk) = &fits.free_k {
                let ext = class_flags.as_ref().map(|f| f.extended_kato);
                if two_sided(fk) && fk.k.is_finite() {
                    main = Some((Outcome::Consistent, format!("consistent: two-sided fit passed with finite k = {:.4}", fk.k)));
                } else if ext == Some(TriState::Yes) {
                    let m = "inconsistent: extended-Kato input but no two-sided fit with finite k".to_string();
                    run.find("short-time bounds", Outcome::Inconsistent, m.clone());
                    main = Some((Outcome::Inconsistent, m));
                } else {
                    main = Some((Outcome::Inconclusive, "inconclusive: fit failed and the class is not established".into()));
                }
            }
            if let (Some(fk), Some(b)) = (&fits.free_k, &fits.baseline) {
                let (q2, q1) = (fk.C2 / b.C2, fk.C1 / b.C1);
                let ok = (q2 - 1.0).abs() <= tol.constants_tol && (q1 - 1.0).abs() <= tol.constants_tol;
                run.find(
                    "constants against baseline",
                    if ok { Outcome::Consistent } else { Outcome::Inconclusive },
                    format!("C₂/C₂⁰ = {q2:.4}, C₁/C₁⁰ = {q1:.4}"),
                );
            }
        }
        _ => {}
    }

    let (mut verdict, mut message) = main.unwrap_or_else(|| {
        let m = if cfg.mode == Mode::SingleOp {
            "inconclusive: single operation, no prediction".to_string()
        } else {
            "inconclusive: required stages did not complete".to_string()
        };
        (Outcome::Inconclusive, m)
    });
    if let Some(f) = run.findings.iter().find(|f| f.outcome == Outcome::Inconsistent) {
        if verdict != Outcome::Inconsistent {
            verdict = Outcome::Inconsistent;
            message = format!("inconsistent: {} ({})", f.check, f.detail);
        }
    }

    let summary = Summary {
        schema: SCHEMA,
        mode: cfg.mode,
        verdict,
        message,
        lambda,
        class_flags,
        gauge_verdict: gauge_est.as_ref().map(|g| g.verdict),
        gauge_range: gauge_est.as_ref().map(|g| {
            let lo = g.h_hat.iter().cloned().fold(f64::INFINITY, f64::min);
            (lo, g.sup())
        }),
        resolvent_verdict: resolvent.as_ref().map(|r| r.verdict),
        kernel_bandwidth: kernel.as_ref().map(|k| k.bandwidth),
        kernel_bias_bound: kernel.as_ref().map(|k| k.bias_bound),
        fits,
        preconditions: run.preconditions,
        findings: run.findings,
        stage_errors: run.errors,
    };
    Ok(ReportBundle { summary, kernel, baseline_kernel, gauge: gauge_est, spectral, resolvent, ratios })
}

// ---------------------------------------------------------------------------
// Reports

fn coord_header(prefix: &str, d: usize) -> String {
    (1..=d).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",")
}

fn join(v: &[f64]) -> String {
    v.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(",")
}

pub fn kernel_csv(est: &KernelEstimate) -> String {
    let d = est.pairs.first().map_or(0, |p| p.0.len());
    let mut s = format!("t,{},{},value,ci,bias\n", coord_header("x", d), coord_header("y", d));
    for (ti, t) in est.t_values.iter().enumerate() {
        for (pi, (x, y)) in est.pairs.iter().enumerate() {
            let _ = writeln!(
                s,
                "{t},{},{},{},{},{}",
                join(x),
                join(y),
                est.values[ti][pi],
                est.ci_half_width[ti][pi],
                est.bias[ti][pi]
            );
        }
    }
    s
}

pub fn gauge_csv(g: &GaugeEstimate) -> String {
    let d = g.points.first().map_or(0, |p| p.len());
    let mut s = format!("{},h,ci,tail_bias\n", coord_header("x", d));
    for (i, p) in g.points.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", join(p), g.h_hat[i], g.ci[i], g.tail_bias_bound);
    }
    s
}

pub fn resolvent_csv(r: &ResolventTable) -> String {
    let d = r.x.len();
    let mut s = format!("horizon,{},value,ci,rate,rate_ci\n", coord_header("y", d));
    for (k, horizon) in r.ladder.iter().enumerate() {
        for (j, y) in r.probes.iter().enumerate() {
            let _ = writeln!(
                s,
                "{horizon},{},{},{},{},{}",
                join(y),
                r.values[k][j],
                r.ci[k][j],
                r.rates[k][j],
                r.rate_ci[k][j]
            );
        }
    }
    s
}

fn ratio_csv(rows: &[RatioRow]) -> String {
    let mut s = String::from("r,ratio,ratio_ci\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.r, r.ratio, r.ratio_ci);
    }
    s
}

/// All report files as (name, contents); fails on an empty bundle.
pub fn render(bundle: &ReportBundle) -> Result<Vec<(String, String)>> {
    if bundle.is_empty() {
        return Err(Error::InvalidInput("empty report bundle".into()));
    }
    let mut files = vec![("summary.json".to_string(), serde_json::to_string_pretty(&bundle.summary)? + "\n")];
    if let Some(k) = &bundle.kernel {
        files.push(("kernel.csv".into(), kernel_csv(k)));
    }
    if let Some(k) = &bundle.baseline_kernel {
        files.push(("baseline_kernel.csv".into(), kernel_csv(k)));
    }
    if let Some(g) = &bundle.gauge {
        files.push(("gauge.csv".into(), gauge_csv(g)));
    }
    if let Some(sp) = &bundle.spectral {
        files.push(("spectral.json".into(), serde_json::to_string_pretty(sp)? + "\n"));
    }
    if let Some(r) = &bundle.resolvent {
        files.push(("resolvent.csv".into(), resolvent_csv(r)));
    }
    for (ti, (_, rows)) in bundle.ratios.iter().enumerate() {
        files.push((format!("ratio_t{ti}.csv"), ratio_csv(rows)));
    }
    Ok(files)
}

/// Writes the rendered bundle into `dir`; nothing is written when rendering fails.
pub fn report(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = render(bundle)?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, text) in files {
        let p = dir.join(name);
        std::fs::write(&p, text)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_json() -> serde_json::Value {
        serde_json::json!({
            "schema": 1,
            "mode": "stability",
            "process": {"kind": "brownian", "dim": 3},
            "envelope": {"kind": "gaussian_UE", "phi": {"form": "power", "beta": 2.0}, "dim": 3},
            "n_paths": 100,
            "seed": 1,
            "t_values": [0.5, 1.0, 2.0],
            "pairs": {"points": [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]},
            "output_dir": "out"
        })
    }

    fn parse(v: serde_json::Value) -> Result<ExperimentConfig> {
        ExperimentConfig::from_json(&v.to_string())
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = parse(base_json()).unwrap();
        assert_eq!(c.simulation.dt, 1e-3);
        assert_eq!(c.tolerances.kato_ladder, vec![1.0, 4.0, 16.0, 64.0, 256.0]);
        assert!(c.baseline);
        assert_eq!(c.pairs.expand().len(), 3);
    }

    #[test]
    fn unknown_keys_and_wrong_schema_rejected() {
        let mut v = base_json();
        v["colour"] = serde_json::json!(1);
        assert!(matches!(parse(v), Err(Error::Config(_))));
        let mut v = base_json();
        v["schema"] = serde_json::json!(2);
        assert!(matches!(parse(v), Err(Error::Config(_))));
        let mut v = base_json();
        v["tolerances"] = serde_json::json!({"band": 2.0});
        assert!(matches!(parse(v), Err(Error::Config(_))));
    }

    #[test]
    fn stability_requires_transience() {
        let mut v = base_json();
        v["process"] = serde_json::json!({"kind": "brownian", "dim": 1});
        v["envelope"]["dim"] = serde_json::json!(1);
        v["pairs"] = serde_json::json!({"points": [[0.0], [1.0]]});
        assert!(matches!(parse(v.clone()), Err(Error::Config(_))));
        v["mode"] = serde_json::json!("extended_kato");
        assert!(parse(v).is_ok());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut v = base_json();
        v["pairs"] = serde_json::json!({"explicit": [[[0.0], [1.0]]]});
        assert!(matches!(parse(v), Err(Error::Config(_))));
    }

    #[test]
    fn empty_bundle_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r");
        let summary = Summary {
            schema: SCHEMA,
            mode: Mode::SingleOp,
            verdict: Outcome::Inconclusive,
            message: String::new(),
            lambda: None,
            class_flags: None,
            gauge_verdict: None,
            gauge_range: None,
            resolvent_verdict: None,
            kernel_bandwidth: None,
            kernel_bias_bound: None,
            fits: Fits::default(),
            preconditions: vec![],
            findings: vec![],
            stage_errors: vec![],
        };
        let b = ReportBundle {
            summary,
            kernel: None,
            baseline_kernel: None,
            gauge: None,
            spectral: None,
            resolvent: None,
            ratios: vec![],
        };
        assert!(report(&b, &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn class_grid_covers_support() {
        let g = class_grid(&MeasureSpec::well(1.0), 3, 5);
        assert_eq!(g.len(), 5);
        assert_eq!(g[4][0], 3.0);
        let mut m = MeasureSpec::well(1.0);
        m.pos = Some(crate::functionals::Density::custom(|x: &[f64]| (x[0] > 0.0) as u8 as f64, 1.0, false));
        assert_eq!(class_grid(&m, 1, 5).len(), 9);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Outcome::Consistent.exit_code(), 0);
        assert_eq!(Outcome::Inconclusive.exit_code(), 0);
        assert_eq!(Outcome::Inconsistent.exit_code(), 2);
    }
}
