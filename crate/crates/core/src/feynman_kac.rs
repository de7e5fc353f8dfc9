//! Monte-Carlo estimators of the perturbed semigroup P_t^A f(x) = E_x[e_A(t) f(X_t)],
//! its kernel (Gaussian KDE, symmetrized), the gauge h(x) = E_x[e_A(ζ)] and the
//! time-truncated perturbed resolvent.
//!
//! Work is split into fixed chunks of paths; chunk results are merged in a fixed
//! binary tree, so outputs do not depend on the number of worker threads.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{Density, MeasureSpec, Perturbation};
use crate::kato::radial_potential;
use crate::numerics::{dist, interp_linear, norm, pairwise_sum, Moments};
use crate::processes::{
    path_rng, sample_path_with, sample_stable, PathOptions, ProcessKind, ProcessSpec, StableMode, Stepping,
};

const CHUNK: u64 = 512;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelEstimate {
    pub t_values: Vec<f64>,
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
    /// values[ti][pi]
    pub values: Vec<Vec<f64>>,
    pub ci_half_width: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
    pub n_paths: u64,
    pub bandwidth: f64,
    pub bias_bound: f64,
}

impl KernelEstimate {
    pub fn value(&self, ti: usize, pi: usize) -> f64 {
        self.values[ti][pi]
    }
}

/// Path budget and time stepping shared by the estimators.
#[derive(Clone, Debug)]
pub struct McOptions {
    pub n_paths: u64,
    pub seed: u64,
    pub stepping: Stepping,
}

impl McOptions {
    pub fn new(n_paths: u64, seed: u64, dt: f64) -> Self {
        McOptions { n_paths, seed, stepping: Stepping::uniform(dt) }
    }

    pub fn focused(mut self, radius: f64, max_dt: f64) -> Self {
        self.stepping.focus_radius = Some(radius);
        self.stepping.max_dt = max_dt.max(self.stepping.dt);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(Error::InvalidInput("at least two paths are required".into()));
        }
        if !(self.stepping.dt > 0.0) || !self.stepping.dt.is_finite() {
            return Err(Error::InvalidStep(self.stepping.dt));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Deterministic parallel reduction

fn chunked<A, F>(n: u64, f: F) -> Result<Vec<A>>
where
    A: Send,
    F: Fn(u64, u64) -> Result<A> + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    (0..chunks).into_par_iter().map(|c| f(c * CHUNK, ((c + 1) * CHUNK).min(n))).collect()
}

fn tree_reduce<A, M: Fn(A, A) -> A + Copy>(mut v: Vec<A>, merge: M) -> Option<A> {
    while v.len() > 1 {
        let mut next = Vec::with_capacity(v.len().div_ceil(2));
        let mut it = v.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        v = next;
    }
    v.pop()
}

/// Sums and sums of squares for a vector of means.
#[derive(Clone, Debug)]
struct Acc {
    s: Vec<f64>,
    q: Vec<f64>,
}

impl Acc {
    fn new(len: usize) -> Self {
        Acc { s: vec![0.0; len], q: vec![0.0; len] }
    }

    #[inline]
    fn push(&mut self, i: usize, v: f64) {
        self.s[i] += v;
        self.q[i] += v * v;
    }

    fn merge(mut self, other: Acc) -> Acc {
        for (a, b) in self.s.iter_mut().zip(other.s) {
            *a += b;
        }
        for (a, b) in self.q.iter_mut().zip(other.q) {
            *a += b;
        }
        self
    }

    fn moments(&self, i: usize, n: u64) -> Moments {
        Moments { n, sum: self.s[i], sum_sq: self.q[i] }
    }
}

fn reduce_accs(parts: Vec<Acc>, len: usize) -> Acc {
    tree_reduce(parts, Acc::merge).unwrap_or_else(|| Acc::new(len))
}

// ---------------------------------------------------------------------------
// Path simulation routes

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Route {
    /// No perturbation: exact increments between the requested times.
    Exact,
    /// Brownian kinds: streaming Euler walk with a trapezoid weight.
    Walk,
    /// Stable processes with a perturbation: stored paths and the functionals module.
    Generic,
}

struct Sim<'a> {
    spec: &'a ProcessSpec,
    pert: &'a Perturbation,
    stepping: Stepping,
    route: Route,
}

/// State at one requested time: `None` once the path has been killed.
type EndState = Option<(f64, Vec<f64>)>;

impl<'a> Sim<'a> {
    fn new(spec: &'a ProcessSpec, pert: &'a Perturbation, stepping: Stepping) -> Result<Self> {
        spec.validate()?;
        pert.mu.validate()?;
        let stable = spec.kind == ProcessKind::AlphaStable1d;
        let has_jump = pert.jump.as_ref().is_some_and(|f| !f.is_zero());
        if has_jump && !stable {
            return Err(Error::UnsupportedProcess("jump perturbation on a Brownian process".into()));
        }
        let route = if pert.is_zero() {
            Route::Exact
        } else if stable {
            Route::Generic
        } else {
            Route::Walk
        };
        Ok(Sim { spec, pert, stepping, route })
    }

    fn lifetime(&self, rng: &mut ChaCha8Rng) -> f64 {
        let kill = self.spec.effective_kill_rate();
        if kill > 0.0 {
            Distribution::<f64>::sample(&Exp1, rng) / kill
        } else {
            f64::INFINITY
        }
    }

    /// Weighted states at the sorted positive `times`, plus the jump-threshold bias of log e_A.
    fn endpoints(&self, x0: &[f64], times: &[f64], seed: u64, stream: u64) -> Result<(Vec<EndState>, f64)> {
        match self.route {
            Route::Exact => {
                let mut rng = path_rng(seed, stream);
                let life = self.lifetime(&mut rng);
                let mut x = x0.to_vec();
                let mut t = 0.0;
                let mut out = Vec::with_capacity(times.len());
                for &s in times {
                    let h = s - t;
                    if h > 0.0 {
                        match self.spec.stable_index() {
                            Some(a) => x[0] += h.powf(1.0 / a) * sample_stable(a, &mut rng),
                            None => {
                                let sd = h.sqrt();
                                for xi in x.iter_mut() {
                                    let z: f64 = StandardNormal.sample(&mut rng);
                                    *xi += sd * z;
                                }
                            }
                        }
                    }
                    t = s;
                    out.push((s < life).then(|| (0.0, x.clone())));
                }
                Ok((out, 0.0))
            }
            Route::Walk => {
                let mut rng = path_rng(seed, stream);
                let life = self.lifetime(&mut rng);
                let mut w = Walker::new(x0, self.pert, life);
                let mut out = Vec::with_capacity(times.len());
                for &s in times {
                    if s >= life {
                        out.push(None);
                        continue;
                    }
                    w.advance_to(s, &self.stepping, &mut rng, |_| {});
                    out.push(Some((w.log_w, w.x.clone())));
                }
                Ok((out, 0.0))
            }
            Route::Generic => {
                let horizon = times.last().copied().unwrap_or(0.0);
                let opts = PathOptions {
                    horizon,
                    stepping: self.stepping.clone(),
                    stops: times.to_vec(),
                    stable_mode: StableMode::Decomposed,
                };
                let path = sample_path_with(self.spec, x0, &opts, seed, stream)?;
                let (logs, bias) = self.pert.log_weights(&path, times)?;
                let mut out = Vec::with_capacity(times.len());
                for (&s, &lw) in times.iter().zip(&logs) {
                    out.push(if path.alive_at(s) { Some((lw, path.position_at(s)?)) } else { None });
                }
                Ok((out, bias))
            }
        }
    }
}

/// One step of a Brownian walk, handed to observers.
struct Segment<'s> {
    t0: f64,
    t1: f64,
    x0: &'s [f64],
    x1: &'s [f64],
    lw0: f64,
    lw1: f64,
}

/// Streaming Euler walk for Brownian kinds. Uses the same random draws and
/// grid as `sample_path_with`, so weights agree with the stored-path route.
struct Walker<'a> {
    pert: &'a Perturbation,
    weighted: bool,
    x: Vec<f64>,
    prev: Vec<f64>,
    t: f64,
    log_w: f64,
    g: f64,
}

impl<'a> Walker<'a> {
    fn new(x0: &[f64], pert: &'a Perturbation, _lifetime: f64) -> Self {
        let weighted = !pert.is_zero();
        let g = if weighted { pert.local_rate(x0) } else { 0.0 };
        Walker { pert, weighted, x: x0.to_vec(), prev: x0.to_vec(), t: 0.0, log_w: 0.0, g }
    }

    fn advance_to<F: FnMut(&Segment)>(&mut self, target: f64, stepping: &Stepping, rng: &mut ChaCha8Rng, mut observe: F) {
        while self.t < target {
            let mut h = stepping.step_at(&self.x);
            let landed = self.t + h >= target * (1.0 - 1e-14);
            if landed {
                h = target - self.t;
            }
            if h <= 0.0 {
                self.t = target;
                break;
            }
            self.prev.copy_from_slice(&self.x);
            let sd = h.sqrt();
            for xi in self.x.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *xi += sd * z;
            }
            let lw0 = self.log_w;
            if self.weighted {
                let g1 = self.pert.local_rate(&self.x);
                self.log_w += 0.5 * h * (self.g + g1);
                self.g = g1;
            }
            let t0 = self.t;
            self.t = if landed { target } else { self.t + h };
            observe(&Segment { t0, t1: self.t, x0: &self.prev, x1: &self.x, lw0, lw1: self.log_w });
        }
    }
}

fn gaussian_kernel(d: usize, bw: f64, r2: f64) -> f64 {
    (-(r2) / (2.0 * bw * bw)).exp() / (2.0 * PI * bw * bw).powf(d as f64 / 2.0)
}

fn sorted_times(t_values: &[f64]) -> Result<Vec<f64>> {
    if t_values.is_empty() {
        return Err(Error::InvalidInput("no times requested".into()));
    }
    for &t in t_values {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidInput(format!("times must be positive and finite, got {t}")));
        }
    }
    let mut ts = t_values.to_vec();
    ts.sort_by(|a, b| a.total_cmp(b));
    ts.dedup();
    Ok(ts)
}

// ---------------------------------------------------------------------------
// Semigroup

/// P_t^A f(x) with its 95% half-width.
pub fn fk_semigroup(
    spec: &ProcessSpec,
    pert: &Perturbation,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    t: f64,
    x: &[f64],
    opts: &McOptions,
) -> Result<(f64, f64)> {
    opts.validate()?;
    if x.len() != spec.dim {
        return Err(Error::InvalidInput(format!("point has dim {}, process dim {}", x.len(), spec.dim)));
    }
    let times = sorted_times(&[t])?;
    let sim = Sim::new(spec, pert, opts.stepping.clone())?;
    let parts = chunked(opts.n_paths, |lo, hi| {
        let mut acc = Acc::new(1);
        for i in lo..hi {
            let (states, _) = sim.endpoints(x, &times, opts.seed, i)?;
            let v = states[0].as_ref().map_or(0.0, |(lw, xt)| lw.exp() * f(xt));
            acc.push(0, v);
        }
        Ok(acc)
    })?;
    let m = reduce_accs(parts, 1).moments(0, opts.n_paths);
    Ok((m.mean(), m.ci95()))
}

// ---------------------------------------------------------------------------
// Kernel

#[derive(Clone, Debug)]
pub struct KernelOptions {
    pub mc: McOptions,
    /// Gaussian KDE bandwidth; `None` selects the plug-in rule.
    pub bandwidth: Option<f64>,
    /// BandwidthTooSmall when the relative 95% half-width at a kernel peak exceeds this.
    pub max_peak_rel_ci: f64,
}

impl KernelOptions {
    pub fn new(mc: McOptions) -> Self {
        KernelOptions { mc, bandwidth: None, max_peak_rel_ci: 0.5 }
    }

    pub fn with_bandwidth(mut self, bw: f64) -> Self {
        self.bandwidth = Some(bw);
        self
    }
}

fn robust_sd(mut v: Vec<f64>) -> f64 {
    let n = v.len();
    if n < 4 {
        return 1.0;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let sd = (v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64).sqrt();
    v.sort_by(|a, b| a.total_cmp(b));
    let iqr = v[3 * n / 4] - v[n / 4];
    let robust = iqr / 1.349;
    if robust > 0.0 && robust.is_finite() {
        sd.min(robust)
    } else {
        sd
    }
}

/// Plug-in bandwidth σ̂·(4/(d+2))^{1/(d+4)}·n^{−1/(d+4)} (1.06·σ̂·n^{−1/5} for d = 1),
/// with σ̂ the robust spread of X_t − x at the smallest time.
fn plugin_bandwidth(sim: &Sim, x0: &[f64], t: f64, n: u64, seed: u64, stream0: u64) -> Result<f64> {
    let pilot = n.clamp(64, 4096);
    let d = x0.len();
    let mut per_coord: Vec<Vec<f64>> = vec![Vec::new(); d];
    for i in 0..pilot {
        let (states, _) = sim.endpoints(x0, &[t], seed, stream0 + i)?;
        if let Some((_, x)) = &states[0] {
            for k in 0..d {
                per_coord[k].push(x[k] - x0[k]);
            }
        }
    }
    let sigma = per_coord.into_iter().map(robust_sd).sum::<f64>() / d as f64;
    let df = d as f64;
    Ok(sigma * (4.0 / (df + 2.0)).powf(1.0 / (df + 4.0)) * (n as f64).powf(-1.0 / (df + 4.0)))
}

/// Kernel estimate p̂_t^A(x, y) = Ê_x[e_A(t) K_bw(X_t − y)], symmetrized in (x, y).
pub fn fk_kernel(
    spec: &ProcessSpec,
    pert: &Perturbation,
    t_values: &[f64],
    pairs: &[(Vec<f64>, Vec<f64>)],
    opts: &KernelOptions,
) -> Result<KernelEstimate> {
    let mc = &opts.mc;
    mc.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no (x, y) pairs".into()));
    }
    for (x, y) in pairs {
        if x.len() != spec.dim || y.len() != spec.dim {
            return Err(Error::InvalidInput("pair dimension does not match the process".into()));
        }
    }
    let times = sorted_times(t_values)?;
    let sim = Sim::new(spec, pert, mc.stepping.clone())?;
    let d = spec.dim;

    // distinct start points, each probed at its partners
    let mut starts: Vec<Vec<f64>> = Vec::new();
    let index_of = |starts: &mut Vec<Vec<f64>>, p: &Vec<f64>| -> usize {
        match starts.iter().position(|q| q == p) {
            Some(i) => i,
            None => {
                starts.push(p.clone());
                starts.len() - 1
            }
        }
    };
    let mut probes: Vec<Vec<Vec<f64>>> = Vec::new();
    // (start, probe) slots for p̂(x, y) and p̂(y, x)
    let mut slots: Vec<((usize, usize), (usize, usize))> = Vec::new();
    let probe_slot = |probes: &mut Vec<Vec<Vec<f64>>>, s: usize, y: &Vec<f64>| -> usize {
        if probes.len() <= s {
            probes.resize(s + 1, Vec::new());
        }
        match probes[s].iter().position(|q| q == y) {
            Some(j) => j,
            None => {
                probes[s].push(y.clone());
                probes[s].len() - 1
            }
        }
    };
    for (x, y) in pairs {
        let sx = index_of(&mut starts, x);
        let jx = probe_slot(&mut probes, sx, y);
        let sy = index_of(&mut starts, y);
        let jy = probe_slot(&mut probes, sy, x);
        slots.push(((sx, jx), (sy, jy)));
    }
    probes.resize(starts.len(), Vec::new());

    let n = mc.n_paths;
    let n_starts = starts.len() as u64;
    let bw = match opts.bandwidth {
        Some(b) if b > 0.0 && b.is_finite() => b,
        Some(b) => return Err(Error::InvalidInput(format!("bandwidth must be positive, got {b}"))),
        None => plugin_bandwidth(&sim, &starts[0], times[0], n, mc.seed, n_starts * n)?,
    };
    let nt = times.len();
    let two_bw2 = 2.0 * bw * bw;
    let norm_c = (2.0 * PI * bw * bw).powf(-(d as f64) / 2.0);
    let (inv_bw4, d_over_bw2) = (1.0 / bw.powi(4), d as f64 / (bw * bw));

    // per start: [value; laplacian] moments per (time, probe), and the jump bias
    let mut per_start: Vec<(Acc, Acc, f64)> = Vec::with_capacity(starts.len());
    for (s, x0) in starts.iter().enumerate() {
        let np = probes[s].len();
        let len = nt * np;
        let parts = chunked(n, |lo, hi| {
            let mut val = Acc::new(len);
            let mut lap = Acc::new(len);
            let mut jb: f64 = 0.0;
            for i in lo..hi {
                let (states, bias) = sim.endpoints(x0, &times, mc.seed, s as u64 * n + i)?;
                jb = jb.max(bias);
                for (ti, st) in states.iter().enumerate() {
                    let Some((lw, xt)) = st else { continue };
                    let w = lw.exp();
                    for (j, y) in probes[s].iter().enumerate() {
                        let r2: f64 = xt.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                        if r2 > 80.0 * two_bw2 {
                            continue;
                        }
                        let k = w * norm_c * (-r2 / two_bw2).exp();
                        val.push(ti * np + j, k);
                        lap.push(ti * np + j, k * (r2 * inv_bw4 - d_over_bw2));
                    }
                }
            }
            Ok((val, lap, jb))
        })?;
        let (vals, laps, jbs): (Vec<Acc>, Vec<Acc>, Vec<f64>) =
            parts.into_iter().fold((Vec::new(), Vec::new(), Vec::new()), |mut acc, (a, b, c)| {
                acc.0.push(a);
                acc.1.push(b);
                acc.2.push(c);
                acc
            });
        per_start.push((reduce_accs(vals, len), reduce_accs(laps, len), jbs.into_iter().fold(0.0, f64::max)));
    }

    let one_sided = |s: usize, j: usize, ti: usize| -> (f64, f64, f64) {
        let np = probes[s].len();
        let (val, lap, jb) = &per_start[s];
        let m = val.moments(ti * np + j, n);
        let l = lap.moments(ti * np + j, n);
        let mean = m.mean().max(0.0);
        let bias = 0.5 * bw * bw * (l.mean().abs() + l.ci95()) + mean * jb.exp_m1();
        (mean, m.ci95(), bias)
    };

    let mut values = vec![vec![0.0; pairs.len()]; nt];
    let mut ci = vec![vec![0.0; pairs.len()]; nt];
    let mut bias = vec![vec![0.0; pairs.len()]; nt];
    for ti in 0..nt {
        for (pi, &((sx, jx), (sy, jy))) in slots.iter().enumerate() {
            let (v1, c1, b1) = one_sided(sx, jx, ti);
            if (sx, jx) == (sy, jy) {
                values[ti][pi] = v1;
                ci[ti][pi] = c1;
                bias[ti][pi] = b1;
            } else {
                let (v2, c2, b2) = one_sided(sy, jy, ti);
                values[ti][pi] = 0.5 * (v1 + v2);
                ci[ti][pi] = 0.5 * (c1 * c1 + c2 * c2).sqrt();
                bias[ti][pi] = 0.5 * (b1 + b2);
            }
        }
    }
    for ti in 0..nt {
        let (pk, peak) =
            values[ti].iter().enumerate().fold((0, 0.0), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        let rel = if peak > 0.0 { ci[ti][pk] / peak } else { f64::INFINITY };
        if rel > opts.max_peak_rel_ci {
            return Err(Error::BandwidthTooSmall(rel));
        }
    }
    let bias_bound = bias.iter().flatten().cloned().fold(0.0, f64::max);
    Ok(KernelEstimate {
        t_values: times,
        pairs: pairs.to_vec(),
        values,
        ci_half_width: ci,
        bias,
        n_paths: n,
        bandwidth: bw,
        bias_bound,
    })
}

// ---------------------------------------------------------------------------
// Gauge

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaugeVerdict {
    Bounded,
    Divergent,
    Inconclusive,
}

#[derive(Clone, Debug)]
pub struct GaugeOptions {
    pub n_paths: u64,
    pub seed: u64,
    /// Euler step near the support of μ.
    pub dt: f64,
    /// Width of the Euler shell around the support, relative to the support radius.
    pub margin: f64,
    /// Largest step for killed processes far from the support.
    pub max_dt: f64,
    /// Exceedance threshold quantile for the tail-rate fit.
    pub tail_quantile: f64,
    pub min_exceedances: usize,
    /// Tail rate θ of A_ζ: above → bounded, below `divergent_below` → divergent.
    pub bounded_above: f64,
    pub divergent_below: f64,
    pub max_tail_bias_fraction: f64,
}

impl GaugeOptions {
    pub fn new(n_paths: u64, seed: u64) -> Self {
        GaugeOptions {
            n_paths,
            seed,
            dt: 1e-3,
            margin: 0.25,
            max_dt: 1.0,
            tail_quantile: 0.99,
            min_exceedances: 50,
            bounded_above: 1.1,
            divergent_below: 0.9,
            max_tail_bias_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaugeEstimate {
    pub points: Vec<Vec<f64>>,
    pub h_hat: Vec<f64>,
    pub ci: Vec<f64>,
    pub truncation_radius: f64,
    pub tail_bias_bound: f64,
    pub support_radius: f64,
    pub return_probability: f64,
    pub n_paths: u64,
    /// Fitted exponential tail rate of A_ζ (pooled over points); ∞ when A_ζ ≤ 0.
    pub tail_rate: Option<f64>,
    pub exceedances: usize,
    pub verdict: GaugeVerdict,
    /// Partial means at n/8, n/4, n/2, n for each point.
    pub running_means: Vec<Vec<f64>>,
}

impl GaugeEstimate {
    pub fn sup(&self) -> f64 {
        self.h_hat.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

struct GaugeWalk<'a> {
    mu: &'a MeasureSpec,
    dim: usize,
    r_s: f64,
    r_cut: f64,
    kill: f64,
    opts: &'a GaugeOptions,
}

impl GaugeWalk<'_> {
    fn unit_direction(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        loop {
            for v in out.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let n = norm(out);
            if n > 1e-12 {
                out.iter_mut().for_each(|v| *v /= n);
                return;
            }
        }
    }

    /// A_ζ for one path, frozen at the exit from B(0, R_cut).
    fn run(&self, x0: &[f64], rng: &mut ChaCha8Rng) -> f64 {
        let mut x = x0.to_vec();
        let mut dir = vec![0.0; self.dim];
        let mut g = self.mu.density(&x);
        let mut a = 0.0;
        let edge = self.r_cut * (1.0 - 1e-6);
        if self.kill > 0.0 {
            let life = Distribution::<f64>::sample(&Exp1, rng) / self.kill;
            let stepping = Stepping {
                dt: self.opts.dt,
                max_dt: self.opts.max_dt,
                focus_radius: Some(self.r_s * (1.0 + self.opts.margin)),
            };
            let mut t = 0.0;
            while t < life && norm(&x) < edge {
                let h = stepping.step_at(&x).min(life - t);
                let sd = h.sqrt();
                for xi in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *xi += sd * z;
                }
                let g1 = self.mu.density(&x);
                a += 0.5 * h * (g + g1);
                g = g1;
                t += h;
            }
            return a;
        }
        let zone = self.r_s * (1.0 + self.opts.margin);
        let sd = self.opts.dt.sqrt();
        loop {
            let r = norm(&x);
            if r >= edge {
                return a;
            }
            if r <= zone {
                for xi in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *xi += sd * z;
                }
                let g1 = self.mu.density(&x);
                a += 0.5 * self.opts.dt * (g + g1);
                g = g1;
            } else {
                // walk on spheres through the region where μ vanishes
                let rho = (r - self.r_s).min(self.r_cut - r);
                self.unit_direction(rng, &mut dir);
                for (xi, di) in x.iter_mut().zip(&dir) {
                    *xi += rho * di;
                }
                g = self.mu.density(&x);
            }
        }
    }
}

/// Exponential tail rate of the positive part of `a` by the exceedance MLE.
fn tail_rate(a: &[f64], quantile: f64, min_exceed: usize) -> (Option<f64>, usize) {
    let mut pos: Vec<f64> = a.iter().cloned().filter(|&v| v > 0.0).collect();
    if pos.is_empty() {
        return (Some(f64::INFINITY), 0);
    }
    pos.sort_by(|p, q| p.total_cmp(q));
    let k = ((pos.len() as f64) * quantile).floor() as usize;
    let u = pos[k.min(pos.len() - 1)];
    let exc: Vec<f64> = pos.iter().filter(|&&v| v > u).map(|v| v - u).collect();
    if exc.len() < min_exceed {
        return (None, exc.len());
    }
    let mean = pairwise_sum(&exc) / exc.len() as f64;
    (Some(if mean > 0.0 { 1.0 / mean } else { f64::INFINITY }), exc.len())
}

/// Gauge h(x) = E_x[e_A(ζ)] for u = 0 on a transient Brownian process.
pub fn gauge(
    spec: &ProcessSpec,
    pert: &Perturbation,
    points: &[Vec<f64>],
    truncation_radius: f64,
    opts: &GaugeOptions,
) -> Result<GaugeEstimate> {
    spec.validate()?;
    pert.mu.validate()?;
    if pert.u.is_some() {
        return Err(Error::InvalidInput("gauge estimation requires u = 0".into()));
    }
    if pert.jump.as_ref().is_some_and(|f| !f.is_zero()) {
        return Err(Error::UnsupportedProcess("jump perturbation in the gauge walker".into()));
    }
    if spec.kind == ProcessKind::AlphaStable1d {
        return Err(if spec.is_transient() {
            Error::UnsupportedProcess("gauge walker supports Brownian kinds only".into())
        } else {
            Error::RecurrentProcess
        });
    }
    if !spec.is_transient() {
        return Err(Error::RecurrentProcess);
    }
    if opts.n_paths < 2 || points.is_empty() {
        return Err(Error::InvalidInput("gauge needs points and at least two paths".into()));
    }
    let r_s = pert.mu.support_radius().max(1e-12);
    if truncation_radius < 4.0 * r_s {
        return Err(Error::InvalidInput(format!(
            "truncation radius {truncation_radius} is below 4× the support radius {r_s}"
        )));
    }
    for p in points {
        if p.len() != spec.dim || norm(p) >= truncation_radius {
            return Err(Error::InvalidInput("gauge point outside the truncation ball".into()));
        }
    }
    let kill = spec.effective_kill_rate();
    let walk = GaugeWalk { mu: &pert.mu, dim: spec.dim, r_s, r_cut: truncation_radius, kill, opts };

    let n = opts.n_paths;
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for (pi, x0) in points.iter().enumerate() {
        let parts = chunked(n, |lo, hi| {
            Ok((lo..hi)
                .map(|i| {
                    let mut rng = path_rng(opts.seed, pi as u64 * n + i);
                    walk.run(x0, &mut rng)
                })
                .collect::<Vec<f64>>())
        })?;
        samples.push(parts.concat());
    }

    let mut h_hat = Vec::with_capacity(points.len());
    let mut ci = Vec::with_capacity(points.len());
    let mut running = Vec::with_capacity(points.len());
    for a in &samples {
        let w: Vec<f64> = a.iter().map(|v| v.exp()).collect();
        let w2: Vec<f64> = w.iter().map(|v| v * v).collect();
        let m = Moments { n, sum: pairwise_sum(&w), sum_sq: pairwise_sum(&w2) };
        h_hat.push(m.mean());
        ci.push(m.ci95());
        running.push(
            [8u64, 4, 2, 1]
                .iter()
                .map(|&f| {
                    let k = ((n / f).max(1)) as usize;
                    pairwise_sum(&w[..k]) / k as f64
                })
                .collect(),
        );
    }

    let pooled: Vec<f64> = samples.concat();
    let (rate, exceedances) = tail_rate(&pooled, opts.tail_quantile, opts.min_exceedances);
    let verdict = match rate {
        Some(th) if th > opts.bounded_above => GaugeVerdict::Bounded,
        Some(th) if th < opts.divergent_below => GaugeVerdict::Divergent,
        _ => GaugeVerdict::Inconclusive,
    };

    let edge = truncation_radius * (1.0 - 1e-6);
    let mut p_ret: f64 = 1.0;
    if spec.dim >= 3 {
        p_ret = p_ret.min((r_s / edge).powi(spec.dim as i32 - 2));
    }
    if kill > 0.0 {
        p_ret = p_ret.min((-(2.0 * kill).sqrt() * (edge - r_s)).exp());
    }
    let h_max = h_hat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let h_min = h_hat.iter().cloned().fold(f64::INFINITY, f64::min);
    let tail_bias_bound = if pert.mu.is_zero() {
        0.0
    } else {
        p_ret * h_max.max(1.0) * (h_max - 1.0).abs().max((1.0 - h_min).abs())
    };
    if verdict != GaugeVerdict::Divergent && tail_bias_bound > opts.max_tail_bias_fraction * h_min {
        return Err(Error::TailBiasTooLarge { bound: tail_bias_bound, estimate: h_min });
    }
    Ok(GaugeEstimate {
        points: points.to_vec(),
        h_hat,
        ci,
        truncation_radius,
        tail_bias_bound,
        support_radius: r_s,
        return_probability: p_ret,
        n_paths: n,
        tail_rate: rate,
        exceedances,
        verdict,
        running_means: running,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityResidual {
    pub radii: Vec<f64>,
    /// ĥ(x)
    pub lhs: Vec<f64>,
    /// R(ĥμ̄)(x) + 1
    pub rhs: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Combined Monte-Carlo, interpolation, truncation and quadrature error per point.
    pub error_estimates: Vec<f64>,
    pub max_residual: f64,
    /// max over points of residual / error estimate
    pub max_ratio: f64,
}

/// Quadratic interpolation through the nearest three nodes.
fn interp_quadratic(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if n < 3 {
        return interp_linear(xs, ys, x);
    }
    let x = x.clamp(xs[0], xs[n - 1]);
    let i = xs.partition_point(|&v| v < x).clamp(1, n - 1);
    let lo = if i + 1 < n && (i == 1 || (x - xs[i - 1]) > (xs[i] - x)) { i - 1 } else { i - 2 };
    let (a, b, c) = (xs[lo], xs[lo + 1], xs[lo + 2]);
    ys[lo] * (x - b) * (x - c) / ((a - b) * (a - c))
        + ys[lo + 1] * (x - a) * (x - c) / ((b - a) * (b - c))
        + ys[lo + 2] * (x - a) * (x - b) / ((c - a) * (c - b))
}

/// |ĥ(x) − R(ĥ_interp μ̄)(x) − 1| at the gauge points, for radial μ on
/// three-dimensional Brownian motion (u = F = 0).
pub fn gauge_identity_residual(g: &GaugeEstimate, mu: &MeasureSpec, spec: &ProcessSpec) -> Result<IdentityResidual> {
    if spec.kind == ProcessKind::AlphaStable1d || spec.dim != 3 {
        return Err(Error::UnsupportedProcess("gauge identity requires three-dimensional Brownian motion".into()));
    }
    if !mu.is_radial() {
        return Err(Error::InvalidInput("gauge identity needs a radial measure".into()));
    }
    let mut nodes: Vec<(f64, f64, f64)> =
        g.points.iter().zip(&g.h_hat).zip(&g.ci).map(|((p, &h), &c)| (norm(p), h, c)).collect();
    nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
    nodes.dedup_by(|a, b| a.0 == b.0);
    let rs: Vec<f64> = nodes.iter().map(|v| v.0).collect();
    let hs: Vec<f64> = nodes.iter().map(|v| v.1).collect();
    let cs: Vec<f64> = nodes.iter().map(|v| v.2).collect();

    let weighted = |d: &Density, w: Box<dyn Fn(f64) -> f64 + Send + Sync>| -> Density {
        let d = d.clone();
        let support = d.support_radius();
        Density::custom(move |x: &[f64]| w(x[0]) * d.radial_value(x[0]).unwrap_or(0.0), support, true)
    };
    let potential = |w: &dyn Fn() -> Box<dyn Fn(f64) -> f64 + Send + Sync>, signed: bool, r: f64| -> Result<f64> {
        let mut total = 0.0;
        if let Some(d) = &mu.pos {
            total += radial_potential(&weighted(d, w()), spec, 0.0, r)?;
        }
        if let Some(d) = &mu.neg {
            let v = radial_potential(&weighted(d, w()), spec, 0.0, r)?;
            total += if signed { -v } else { v };
        }
        Ok(total)
    };
    let (rs1, hs1, cs1) = (rs.clone(), hs.clone(), cs.clone());
    let h_lin = move || -> Box<dyn Fn(f64) -> f64 + Send + Sync> {
        let (a, b) = (rs1.clone(), hs1.clone());
        Box::new(move |r| interp_linear(&a, &b, r))
    };
    let ci_lin = move || -> Box<dyn Fn(f64) -> f64 + Send + Sync> {
        let (a, b) = (rs.clone(), cs1.clone());
        Box::new(move |r| interp_linear(&a, &b, r))
    };
    let (rs2, hs2) = (nodes.iter().map(|v| v.0).collect::<Vec<_>>(), hs.clone());
    let interp_gap = move || -> Box<dyn Fn(f64) -> f64 + Send + Sync> {
        let (a, b) = (rs2.clone(), hs2.clone());
        Box::new(move |r| (interp_linear(&a, &b, r) - interp_quadratic(&a, &b, r)).abs())
    };
    let one = || -> Box<dyn Fn(f64) -> f64 + Send + Sync> { Box::new(|_| 1.0) };

    let mut out = IdentityResidual {
        radii: Vec::new(),
        lhs: Vec::new(),
        rhs: Vec::new(),
        residuals: Vec::new(),
        error_estimates: Vec::new(),
        max_residual: 0.0,
        max_ratio: 0.0,
    };
    for (p, (&h, &c)) in g.points.iter().zip(g.h_hat.iter().zip(&g.ci)) {
        let r = norm(p);
        let rhs = potential(&h_lin, true, r)? + 1.0;
        let abs_mu = potential(&one, false, r)?;
        let mc = c + potential(&ci_lin, false, r)?;
        let interp = potential(&interp_gap, false, r)?;
        let trunc = g.tail_bias_bound * (1.0 + abs_mu);
        let quad = 1e-6 * rhs.abs();
        let err = mc + interp + trunc + quad;
        let res = (h - rhs).abs();
        out.radii.push(r);
        out.lhs.push(h);
        out.rhs.push(rhs);
        out.residuals.push(res);
        out.error_estimates.push(err);
        out.max_residual = out.max_residual.max(res);
        out.max_ratio = out.max_ratio.max(if err > 0.0 { res / err } else if res > 0.0 { f64::INFINITY } else { 0.0 });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Resolvent

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolventVerdict {
    Finite,
    Divergent,
    Inconclusive,
}

#[derive(Clone, Debug)]
pub struct ResolventOptions {
    pub mc: McOptions,
    pub bandwidth: f64,
    /// Increasing horizons T₁ < T₂ < ….
    pub ladder: Vec<f64>,
    /// Per-step growth factor of the rates after the first interval: at most → finite, at least → divergent.
    pub finite_below: f64,
    pub divergent_above: f64,
    /// Windows whose rate has a relative 95% half-width above this end the trend fit.
    pub max_rate_rel_ci: f64,
    pub min_windows: usize,
}

impl ResolventOptions {
    pub fn new(mc: McOptions) -> Self {
        ResolventOptions {
            mc,
            bandwidth: 0.3,
            ladder: (0..8).map(|k| 2f64.powi(k)).collect(),
            finite_below: 0.7,
            divergent_above: 1.3,
            max_rate_rel_ci: 0.5,
            min_windows: 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolventTable {
    pub alpha: f64,
    pub x: Vec<f64>,
    pub probes: Vec<Vec<f64>>,
    pub ladder: Vec<f64>,
    /// values[k][j] = R̂_α^A(x, y_j; T_k)
    pub values: Vec<Vec<f64>>,
    pub ci: Vec<Vec<f64>>,
    /// Mean of the time-integrated kernel per unit time on each ladder interval.
    pub rates: Vec<Vec<f64>>,
    pub rate_ci: Vec<Vec<f64>>,
    /// Number of windows entering the trend fit, per probe.
    pub windows_used: Vec<usize>,
    /// Per-step growth factor of the rates after the first interval, per probe.
    pub trend_ratios: Vec<f64>,
    pub verdicts: Vec<ResolventVerdict>,
    pub verdict: ResolventVerdict,
    pub bandwidth: f64,
    pub n_paths: u64,
}

/// Per-step growth factor of the rates: exp of the least-squares slope of
/// log r_k against k. NaN when a rate is not positive.
fn trend_ratio(rates: &[f64]) -> f64 {
    if rates.len() < 2 || rates.iter().any(|&r| !(r > 0.0)) {
        return f64::NAN;
    }
    let n = rates.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = rates.iter().map(|r| r.ln()).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, r) in rates.iter().enumerate() {
        let dx = k as f64 - xm;
        sxy += dx * (r.ln() - ym);
        sxx += dx * dx;
    }
    (sxy / sxx).exp()
}

/// R̂_α^A(x, y; T) = Ê_x ∫₀^T e^{−αt} e_A(t) K_bw(X_t − y) dt on a horizon ladder.
pub fn resolvent_a(
    spec: &ProcessSpec,
    pert: &Perturbation,
    alpha: f64,
    x: &[f64],
    probes: &[Vec<f64>],
    opts: &ResolventOptions,
) -> Result<ResolventTable> {
    let mc = &opts.mc;
    mc.validate()?;
    if spec.kind == ProcessKind::AlphaStable1d {
        return Err(Error::UnsupportedProcess("resolvent estimator supports Brownian kinds only".into()));
    }
    if !(alpha >= 0.0) || !(opts.bandwidth > 0.0) {
        return Err(Error::InvalidInput("alpha must be ≥ 0 and the bandwidth > 0".into()));
    }
    if x.len() != spec.dim || probes.is_empty() || probes.iter().any(|y| y.len() != spec.dim) {
        return Err(Error::InvalidInput("point dimensions do not match the process".into()));
    }
    let ladder = sorted_times(&opts.ladder)?;
    if ladder.len() < 3 {
        return Err(Error::InvalidInput("the horizon ladder needs at least three entries".into()));
    }
    let sim = Sim::new(spec, pert, mc.stepping.clone())?;
    let d = spec.dim;
    let bw = opts.bandwidth;
    let (np, nk) = (probes.len(), ladder.len());
    let n = mc.n_paths;

    let parts = chunked(n, |lo, hi| {
        let mut acc = Acc::new(2 * nk * np);
        let mut cum = vec![0.0; np];
        let mut before = vec![0.0; np];
        for i in lo..hi {
            let mut rng = path_rng(mc.seed, i);
            let life = sim.lifetime(&mut rng);
            let mut w = Walker::new(x, pert, life);
            cum.iter_mut().for_each(|c| *c = 0.0);
            let dens = |xp: &[f64], y: &[f64]| gaussian_kernel(d, bw, dist(xp, y).powi(2));
            let mut alive = true;
            for (k, &tk) in ladder.iter().enumerate() {
                before.copy_from_slice(&cum);
                if alive {
                    let target = tk.min(life);
                    w.advance_to(target, &sim.stepping, &mut rng, |s| {
                        let e0 = (s.lw0 - alpha * s.t0).exp();
                        let e1 = (s.lw1 - alpha * s.t1).exp();
                        for (j, y) in probes.iter().enumerate() {
                            let k0 = dens(s.x0, y);
                            let k1 = dens(s.x1, y);
                            if k0 > 0.0 || k1 > 0.0 {
                                cum[j] += 0.5 * (s.t1 - s.t0) * (e0 * k0 + e1 * k1);
                            }
                        }
                    });
                    if life <= tk {
                        alive = false;
                    }
                }
                for j in 0..np {
                    acc.push(k * np + j, cum[j]);
                    acc.push((nk + k) * np + j, cum[j] - before[j]);
                }
            }
        }
        Ok(acc)
    })?;
    let acc = reduce_accs(parts, 2 * nk * np);

    let mut values = vec![vec![0.0; np]; nk];
    let mut ci = vec![vec![0.0; np]; nk];
    for k in 0..nk {
        for j in 0..np {
            let m = acc.moments(k * np + j, n);
            values[k][j] = m.mean();
            ci[k][j] = m.ci95();
        }
    }
    let mut rates = vec![vec![0.0; np]; nk];
    let mut rate_ci = vec![vec![0.0; np]; nk];
    for k in 0..nk {
        let width = ladder[k] - if k == 0 { 0.0 } else { ladder[k - 1] };
        for j in 0..np {
            let m = acc.moments((nk + k) * np + j, n);
            rates[k][j] = m.mean() / width;
            rate_ci[k][j] = m.ci95() / width;
        }
    }
    let mut ratios = Vec::with_capacity(np);
    let mut used = Vec::with_capacity(np);
    let mut verdicts = Vec::with_capacity(np);
    for j in 0..np {
        // windows after the first, up to the first one carried by too few paths
        let reliable: Vec<f64> = (1..nk)
            .map(|k| (rates[k][j], rate_ci[k][j]))
            .take_while(|&(r, c)| r > 0.0 && c <= opts.max_rate_rel_ci * r)
            .map(|(r, _)| r)
            .collect();
        let ratio = if reliable.len() >= opts.min_windows { trend_ratio(&reliable) } else { f64::NAN };
        used.push(reliable.len());
        ratios.push(ratio);
        verdicts.push(if ratio <= opts.finite_below {
            ResolventVerdict::Finite
        } else if ratio >= opts.divergent_above {
            ResolventVerdict::Divergent
        } else {
            ResolventVerdict::Inconclusive
        });
    }
    let verdict = if verdicts.contains(&ResolventVerdict::Divergent) {
        ResolventVerdict::Divergent
    } else if verdicts.iter().all(|v| *v == ResolventVerdict::Finite) {
        ResolventVerdict::Finite
    } else {
        ResolventVerdict::Inconclusive
    };
    Ok(ResolventTable {
        alpha,
        x: x.to_vec(),
        probes: probes.to_vec(),
        ladder,
        values,
        ci,
        rates,
        rate_ci,
        windows_used: used,
        trend_ratios: ratios,
        verdicts,
        verdict,
        bandwidth: bw,
        n_paths: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::fk_weight;
    use crate::kato::density_potential;
    use crate::processes::{gaussian_density, sample_path_with};

    fn zero() -> Perturbation {
        Perturbation::default()
    }

    fn erfc(x: f64) -> f64 {
        libm::erfc(x)
    }

    #[test]
    fn semigroup_of_gaussian_bump_matches_convolution() {
        let spec = ProcessSpec::brownian(1);
        let s2: f64 = 0.5;
        let f = move |y: &[f64]| (-y[0] * y[0] / (2.0 * s2)).exp();
        let (t, x) = (0.7, 0.4);
        let (est, ci) = fk_semigroup(&spec, &zero(), &f, t, &[x], &McOptions::new(40_000, 3, 1e-2)).unwrap();
        let exact = (s2 / (s2 + t)).sqrt() * (-x * x / (2.0 * (s2 + t))).exp();
        assert!((est - exact).abs() < ci, "{est} vs {exact} ± {ci}");
    }

    #[test]
    fn killing_measure_gives_subprobability() {
        let spec = ProcessSpec::brownian(1);
        let pert = Perturbation::measure(MeasureSpec::negative("kill", Density::uniform_ball(2.0, 1.0)));
        let (est, ci) = fk_semigroup(&spec, &pert, &|_| 1.0, 1.0, &[0.2], &McOptions::new(4000, 5, 1e-3)).unwrap();
        assert!(est <= 1.0 + ci && est < 0.9, "{est} ± {ci}");
    }

    #[test]
    fn killing_rate_gives_exponential_survival() {
        let spec = ProcessSpec::killed(2, 0.8);
        let (est, ci) = fk_semigroup(&spec, &zero(), &|_| 1.0, 1.5, &[0.0, 0.0], &McOptions::new(40_000, 1, 0.1)).unwrap();
        let exact = (-0.8f64 * 1.5).exp();
        assert!((est - exact).abs() < ci, "{est} vs {exact} ± {ci}");
    }

    #[test]
    fn streaming_walk_matches_stored_path_weights() {
        let spec = ProcessSpec::killed(2, 0.3);
        let mu = MeasureSpec::well(1.3);
        let pert = Perturbation::measure(mu.clone());
        let stepping = Stepping { dt: 1e-3, max_dt: 0.05, focus_radius: Some(1.2) };
        let times = [0.25, 0.9];
        let sim = Sim::new(&spec, &pert, stepping.clone()).unwrap();
        for stream in 0..20 {
            let (states, _) = sim.endpoints(&[0.3, -0.2], &times, 42, stream).unwrap();
            let opts = PathOptions { horizon: 0.9, stepping: stepping.clone(), stops: times.to_vec(), stable_mode: StableMode::Exact };
            let path = sample_path_with(&spec, &[0.3, -0.2], &opts, 42, stream).unwrap();
            for (st, &t) in states.iter().zip(&times) {
                match st {
                    Some((lw, x)) => {
                        assert!(path.alive_at(t));
                        let w = fk_weight(&path, None, &mu, None, t).unwrap();
                        assert!((lw.exp() - w).abs() < 1e-12 * w, "{} vs {w}", lw.exp());
                        let px = path.position_at(t).unwrap();
                        assert!(dist(x, &px) < 1e-12);
                    }
                    None => assert!(!path.alive_at(t)),
                }
            }
        }
    }

    fn line_pairs() -> Vec<(Vec<f64>, Vec<f64>)> {
        vec![(vec![0.0], vec![0.0]), (vec![-0.5], vec![0.5]), (vec![0.3], vec![1.4]), (vec![1.0], vec![-1.0])]
    }

    #[test]
    fn free_kernel_matches_smoothed_gaussian_and_is_symmetric() {
        let spec = ProcessSpec::brownian(1);
        let pairs = line_pairs();
        let opts = KernelOptions::new(McOptions::new(100_000, 11, 1.0)).with_bandwidth(0.1);
        let est = fk_kernel(&spec, &zero(), &[0.5, 1.0], &pairs, &opts).unwrap();
        for (ti, &t) in est.t_values.iter().enumerate() {
            for (pi, (x, y)) in pairs.iter().enumerate() {
                let r = dist(x, y);
                let smoothed = gaussian_density(1, t + 0.01, r);
                let exact = gaussian_density(1, t, r);
                let (v, c, b) = (est.values[ti][pi], est.ci_half_width[ti][pi], est.bias[ti][pi]);
                assert!((v - smoothed).abs() < 1.5 * c, "t={t} r={r}: {v} vs {smoothed} ± {c}");
                assert!((smoothed - exact).abs() <= b, "bias {} exceeds bound {b}", smoothed - exact);
            }
        }
        let mut both = pairs.clone();
        both.extend(pairs.iter().map(|(x, y)| (y.clone(), x.clone())));
        let est2 = fk_kernel(&spec, &zero(), &[0.5, 1.0], &both, &opts).unwrap();
        let m = pairs.len();
        for row in &est2.values {
            assert_eq!(row[..m], row[m..]);
        }
    }

    #[test]
    fn killing_part_lowers_kernel() {
        let spec = ProcessSpec::brownian(1);
        let pairs = line_pairs();
        let opts = KernelOptions::new(McOptions::new(20_000, 2, 2e-3)).with_bandwidth(0.15);
        let free = fk_kernel(&spec, &zero(), &[0.5, 1.0], &pairs, &opts).unwrap();
        let pert = Perturbation::measure(MeasureSpec::negative("kill", Density::uniform_ball(1.5, 1.0)));
        let killed = fk_kernel(&spec, &pert, &[0.5, 1.0], &pairs, &opts).unwrap();
        for ti in 0..2 {
            for pi in 0..pairs.len() {
                let slack = killed.ci_half_width[ti][pi] + free.ci_half_width[ti][pi];
                assert!(killed.values[ti][pi] <= free.values[ti][pi] + slack);
            }
        }
    }

    #[test]
    fn kernel_is_independent_of_thread_count() {
        let spec = ProcessSpec::brownian(2);
        let pert = Perturbation::measure(MeasureSpec::well(0.8));
        let pairs = vec![(vec![0.0, 0.0], vec![0.5, 0.0]), (vec![0.2, 0.1], vec![0.2, 0.1])];
        let opts = KernelOptions::new(McOptions::new(3000, 9, 1e-2)).with_bandwidth(0.3);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| fk_kernel(&spec, &pert, &[0.3, 0.6], &pairs, &opts).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.values, b.values);
        assert_eq!(a.ci_half_width, b.ci_half_width);
    }

    #[test]
    fn tiny_bandwidth_is_rejected() {
        let spec = ProcessSpec::brownian(1);
        let opts = KernelOptions::new(McOptions::new(200, 1, 1.0)).with_bandwidth(1e-4);
        let r = fk_kernel(&spec, &zero(), &[1.0], &[(vec![0.0], vec![0.0])], &opts);
        assert!(matches!(r, Err(Error::BandwidthTooSmall(_))), "{r:?}");
    }

    #[test]
    fn plugin_bandwidth_follows_rule_of_thumb() {
        let spec = ProcessSpec::brownian(1);
        let opts = KernelOptions::new(McOptions::new(10_000, 4, 1.0));
        let est = fk_kernel(&spec, &zero(), &[1.0], &[(vec![0.0], vec![0.0])], &opts).unwrap();
        let rule = 1.06 * 10_000f64.powf(-0.2);
        assert!((est.bandwidth / rule - 1.0).abs() < 0.1, "{} vs {rule}", est.bandwidth);
    }

    #[test]
    fn gauge_without_perturbation_is_one() {
        let spec = ProcessSpec::brownian(3);
        let pert = Perturbation::measure(MeasureSpec::zero());
        let g = gauge(&spec, &pert, &[vec![0.0; 3], vec![2.0, 0.0, 0.0]], 10.0, &GaugeOptions::new(200, 1)).unwrap();
        assert!(g.h_hat.iter().all(|&h| h == 1.0));
        assert_eq!(g.tail_bias_bound, 0.0);
        assert_eq!(g.verdict, GaugeVerdict::Bounded);
    }

    #[test]
    fn killing_gauge_respects_potential_bounds() {
        let spec = ProcessSpec::brownian(3);
        let mu = MeasureSpec::negative("kill", Density::uniform_ball(0.5, 1.0));
        let pert = Perturbation::measure(mu.clone());
        let pts = vec![vec![0.0; 3], vec![0.5, 0.0, 0.0], vec![0.0, 1.5, 0.0]];
        let g = gauge(&spec, &pert, &pts, 40.0, &GaugeOptions::new(4000, 2)).unwrap();
        let sup = density_potential(mu.neg.as_ref().unwrap(), &spec, 0.0, &[0.0; 3]).unwrap();
        for (h, c) in g.h_hat.iter().zip(&g.ci) {
            assert!(*h > (-sup).exp() && *h <= 1.0 + c, "{h} ± {c}, bound {}", (-sup).exp());
        }
    }

    /// h(r) = sin(kr)/(r k cos k) inside, 1 + (tan k/k − 1)/r outside, k = √(2c).
    fn well_gauge(c: f64, r: f64) -> f64 {
        let k = (2.0 * c).sqrt();
        if r < 1e-12 {
            1.0 / k.cos()
        } else if r <= 1.0 {
            (k * r).sin() / (r * k * k.cos())
        } else {
            1.0 + (k.tan() / k - 1.0) / r
        }
    }

    #[test]
    fn subcritical_well_gauge_matches_closed_form() {
        let spec = ProcessSpec::brownian(3);
        let pert = Perturbation::measure(MeasureSpec::well(0.5));
        let pts = vec![vec![0.0; 3], vec![0.0, 0.7, 0.0], vec![0.0, 0.0, 1.6]];
        let g = gauge(&spec, &pert, &pts, 200.0, &GaugeOptions::new(20_000, 8)).unwrap();
        for ((p, h), c) in pts.iter().zip(&g.h_hat).zip(&g.ci) {
            let exact = well_gauge(0.5, norm(p));
            assert!((h - exact).abs() < c + g.tail_bias_bound + 0.01 * exact, "{h} vs {exact} ± {c}");
        }
        assert_eq!(g.verdict, GaugeVerdict::Bounded);
    }

    #[test]
    fn supercritical_well_gauge_is_flagged() {
        let spec = ProcessSpec::brownian(3);
        let pert = Perturbation::measure(MeasureSpec::well(2.0));
        let g = gauge(&spec, &pert, &[vec![0.0; 3], vec![0.5, 0.0, 0.0]], 200.0, &GaugeOptions::new(15_000, 3)).unwrap();
        assert_eq!(g.verdict, GaugeVerdict::Divergent, "{:?}", g.tail_rate);
    }

    #[test]
    fn recurrent_and_short_cut_are_rejected() {
        let pert = Perturbation::measure(MeasureSpec::well(0.5));
        let opts = GaugeOptions::new(10, 1);
        let r = gauge(&ProcessSpec::brownian(2), &pert, &[vec![0.0; 2]], 10.0, &opts);
        assert!(matches!(r, Err(Error::RecurrentProcess)));
        let r = gauge(&ProcessSpec::brownian(3), &pert, &[vec![0.0; 3]], 3.0, &opts);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn small_truncation_radius_reports_tail_bias() {
        let spec = ProcessSpec::brownian(3);
        let pert = Perturbation::measure(MeasureSpec::well(0.9));
        let r = gauge(&spec, &pert, &[vec![0.0; 3]], 4.0, &GaugeOptions::new(2000, 1));
        assert!(matches!(r, Err(Error::TailBiasTooLarge { .. })), "{r:?}");
    }

    fn radial_points(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64 / (n - 1) as f64, 0.0, 0.0]).collect()
    }

    #[test]
    fn identity_residual_vanishes_without_perturbation() {
        let spec = ProcessSpec::brownian(3);
        let g = gauge(&spec, &Perturbation::measure(MeasureSpec::zero()), &radial_points(4), 10.0, &GaugeOptions::new(50, 1))
            .unwrap();
        let res = gauge_identity_residual(&g, &MeasureSpec::zero(), &spec).unwrap();
        assert_eq!(res.max_residual, 0.0);
    }

    #[test]
    fn planted_inconsistency_is_detected() {
        let spec = ProcessSpec::brownian(3);
        let mu = MeasureSpec::well(0.5);
        let g = gauge(&spec, &Perturbation::measure(MeasureSpec::zero()), &radial_points(5), 10.0, &GaugeOptions::new(50, 1))
            .unwrap();
        let res = gauge_identity_residual(&g, &mu, &spec).unwrap();
        for (r, v) in res.radii.iter().zip(&res.residuals) {
            let rmu = 0.5 * (1.0 - r * r / 3.0);
            assert!((v - rmu).abs() < 1e-6, "{v} vs {rmu}");
        }
        assert!(res.max_ratio > 3.0);
    }

    #[test]
    fn closed_form_gauge_satisfies_identity() {
        let spec = ProcessSpec::brownian(3);
        let mu = MeasureSpec::well(0.5);
        let pts = radial_points(9);
        let h: Vec<f64> = pts.iter().map(|p| well_gauge(0.5, norm(p))).collect();
        let g = GaugeEstimate {
            points: pts.clone(),
            h_hat: h,
            ci: vec![0.0; pts.len()],
            truncation_radius: f64::INFINITY,
            tail_bias_bound: 0.0,
            support_radius: 1.0,
            return_probability: 0.0,
            n_paths: 0,
            tail_rate: None,
            exceedances: 0,
            verdict: GaugeVerdict::Bounded,
            running_means: Vec::new(),
        };
        let res = gauge_identity_residual(&g, &mu, &spec).unwrap();
        assert!(res.max_residual < 2e-3, "{:?}", res.residuals);
        for (v, e) in res.residuals.iter().zip(&res.error_estimates) {
            assert!(v <= &(3.0 * e), "{v} vs {e}");
        }
    }

    #[test]
    fn quadratic_interpolant_is_exact_on_parabolas() {
        let xs = [0.0, 0.3, 0.5, 1.0, 1.7];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - x + 0.5 * x * x).collect();
        for x in [0.1, 0.45, 0.8, 1.5] {
            assert!((interp_quadratic(&xs, &ys, x) - (2.0 - x + 0.5 * x * x)).abs() < 1e-12);
        }
    }

    #[test]
    fn tail_rate_recovers_exponential() {
        let mut rng = path_rng(3, 0);
        let a: Vec<f64> = (0..200_000).map(|_| Distribution::<f64>::sample(&Exp1, &mut rng) / 1.7).collect();
        let (th, k) = tail_rate(&a, 0.99, 50);
        assert!(k >= 1900 && (th.unwrap() / 1.7 - 1.0).abs() < 0.08, "{th:?}");
        assert_eq!(tail_rate(&[-1.0, -2.0], 0.99, 50).0, Some(f64::INFINITY));
    }

    #[test]
    fn trend_ratio_of_geometric_sequence() {
        let r: Vec<f64> = (0..6).map(|k| 3.0 * 0.4f64.powi(k)).collect();
        assert!((trend_ratio(&r) - 0.4).abs() < 1e-12);
        assert!(trend_ratio(&[1.0, 0.0, 2.0]).is_nan());
    }

    #[test]
    fn free_resolvent_matches_truncated_green_function() {
        let spec = ProcessSpec::brownian(3);
        let mut ro = ResolventOptions::new(McOptions::new(20_000, 5, 2e-3).focused(1.5, 4.0));
        ro.ladder = vec![1.0, 2.0, 4.0, 8.0, 16.0];
        let y = vec![1.0, 0.0, 0.0];
        let tab = resolvent_a(&spec, &zero(), 0.0, &[0.0; 3], &[y], &ro).unwrap();
        let bw2 = ro.bandwidth * ro.bandwidth;
        let g = |t: f64| erfc(1.0 / (2.0 * t).sqrt()) / (2.0 * PI);
        let exact = g(16.0 + bw2) - g(bw2);
        let est = tab.values[4][0];
        assert!((est / exact - 1.0).abs() < 0.05, "{est} vs {exact}");
        assert_eq!(tab.verdict, ResolventVerdict::Finite, "{:?}", tab.trend_ratios);
    }
}
