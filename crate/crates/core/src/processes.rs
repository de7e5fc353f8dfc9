//! Example processes: Brownian motion (generator ½Δ), Brownian motion killed at
//! a constant rate, and the one-dimensional symmetric α-stable process with
//! characteristic exponent |ξ|^α. Paths are simulated on a grid; the
//! closed-form kernels double as test oracles.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dist, integrate, integrate_with_limit, norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    Brownian,
    BrownianKilledAlpha,
    #[serde(rename = "alpha_stable_1d")]
    AlphaStable1d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub kind: ProcessKind,
    pub dim: usize,
    #[serde(default)]
    pub alpha_stable_index: Option<f64>,
    #[serde(default)]
    pub kill_rate: f64,
    #[serde(default)]
    pub jump_cutoff: Option<f64>,
}

impl ProcessSpec {
    pub fn brownian(dim: usize) -> Self {
        ProcessSpec { kind: ProcessKind::Brownian, dim, alpha_stable_index: None, kill_rate: 0.0, jump_cutoff: None }
    }

    pub fn killed(dim: usize, kill_rate: f64) -> Self {
        ProcessSpec { kind: ProcessKind::BrownianKilledAlpha, kill_rate, ..Self::brownian(dim) }
    }

    pub fn stable(alpha: f64) -> Self {
        ProcessSpec {
            kind: ProcessKind::AlphaStable1d,
            dim: 1,
            alpha_stable_index: Some(alpha),
            kill_rate: 0.0,
            jump_cutoff: None,
        }
    }

    pub fn with_cutoff(mut self, cutoff: f64) -> Self {
        self.jump_cutoff = Some(cutoff);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidInput("dimension must be ≥ 1".into()));
        }
        if !(self.kill_rate >= 0.0) {
            return Err(Error::InvalidInput(format!("kill_rate must be ≥ 0, got {}", self.kill_rate)));
        }
        if let Some(c) = self.jump_cutoff {
            if !(c > 0.0) {
                return Err(Error::InvalidInput(format!("jump_cutoff must be > 0, got {c}")));
            }
        }
        if self.kind == ProcessKind::AlphaStable1d {
            if self.dim != 1 {
                return Err(Error::UnsupportedDim(self.dim));
            }
            match self.alpha_stable_index {
                Some(a) if a > 0.0 && a < 2.0 => {}
                other => {
                    return Err(Error::InvalidInput(format!("stable index must lie in (0,2), got {other:?}")))
                }
            }
        }
        Ok(())
    }

    pub fn stable_index(&self) -> Option<f64> {
        match self.kind {
            ProcessKind::AlphaStable1d => self.alpha_stable_index,
            _ => None,
        }
    }

    /// Killing rate actually applied (the plain Brownian kind ignores `kill_rate`).
    pub fn effective_kill_rate(&self) -> f64 {
        match self.kind {
            ProcessKind::Brownian => 0.0,
            _ => self.kill_rate,
        }
    }

    /// Whether the 0-order resolvent is finite off the diagonal.
    pub fn is_transient(&self) -> bool {
        if self.effective_kill_rate() > 0.0 {
            return true;
        }
        match self.kind {
            ProcessKind::AlphaStable1d => self.alpha_stable_index.is_some_and(|a| a < 1.0),
            _ => self.dim >= 3,
        }
    }

    pub fn cutoff(&self, horizon: f64) -> f64 {
        let a = self.alpha_stable_index.unwrap_or(2.0);
        self.jump_cutoff.unwrap_or(1e-3 * horizon.powf(1.0 / a))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub from: Vec<f64>,
    pub to: Vec<f64>,
}

/// A simulated path on a grid. Times are nondecreasing: a recorded jump
/// appears as two consecutive entries at the same time holding its endpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    pub jumps: Vec<Jump>,
    pub killed_at: Option<f64>,
    pub rng_stream_id: u64,
    pub brownian: bool,
    /// Stable index and recording threshold; `cutoff = ∞` when no jumps were recorded.
    pub jump_record: Option<JumpRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub alpha: f64,
    pub cutoff: f64,
}

impl PathSample {
    pub fn dim(&self) -> usize {
        self.positions.first().map_or(0, |p| p.len())
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// t ∧ ζ, or BeyondHorizon when the path was not simulated up to t.
    pub fn effective_end(&self, t: f64) -> Result<f64> {
        if let Some(z) = self.killed_at {
            if t >= z {
                return Ok(z);
            }
        }
        if t > self.horizon() * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::BeyondHorizon { t, horizon: self.horizon() });
        }
        Ok(t)
    }

    pub fn alive_at(&self, t: f64) -> bool {
        self.killed_at.is_none_or(|z| t < z)
    }

    /// Position at time t (right-continuous; linear between grid points).
    pub fn position_at(&self, t: f64) -> Result<Vec<f64>> {
        let end = self.effective_end(t)?;
        let i = self.times.partition_point(|&s| s <= end);
        if i == 0 {
            return Ok(self.positions[0].clone());
        }
        let i = i - 1;
        if i + 1 >= self.times.len() || self.times[i] == end {
            return Ok(self.positions[i].clone());
        }
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let w = (end - t0) / (t1 - t0);
        Ok(self.positions[i].iter().zip(&self.positions[i + 1]).map(|(a, b)| a + w * (b - a)).collect())
    }

    /// Shifted path θ_s: the part after time s, re-based to start at 0.
    /// `s` must be a grid time.
    pub fn shift(&self, s: f64) -> Result<PathSample> {
        let start = self
            .times
            .iter()
            .rposition(|&t| t == s)
            .ok_or_else(|| Error::InvalidInput(format!("shift time {s} is not a grid time")))?;
        Ok(PathSample {
            times: self.times[start..].iter().map(|t| t - s).collect(),
            positions: self.positions[start..].to_vec(),
            jumps: self
                .jumps
                .iter()
                .filter(|j| j.time > s)
                .map(|j| Jump { time: j.time - s, ..j.clone() })
                .collect(),
            killed_at: self.killed_at.map(|z| z - s),
            rng_stream_id: self.rng_stream_id,
            brownian: self.brownian,
            jump_record: self.jump_record,
        })
    }

    /// Mirror image x ↦ −x.
    pub fn reflect(&self) -> PathSample {
        let neg = |v: &Vec<f64>| v.iter().map(|x| -x).collect::<Vec<_>>();
        PathSample {
            positions: self.positions.iter().map(neg).collect(),
            jumps: self.jumps.iter().map(|j| Jump { time: j.time, from: neg(&j.from), to: neg(&j.to) }).collect(),
            ..self.clone()
        }
    }
}

/// Grid control for path simulation. Away from `focus_radius` the step grows
/// like (distance/5)², capped at `max_dt`; stop times always land on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Stepping {
    pub dt: f64,
    pub max_dt: f64,
    pub focus_radius: Option<f64>,
}

impl Stepping {
    pub fn uniform(dt: f64) -> Self {
        Stepping { dt, max_dt: dt, focus_radius: None }
    }

    pub fn step_at(&self, x: &[f64]) -> f64 {
        match self.focus_radius {
            Some(rad) => {
                let gap = norm(x) - rad;
                if gap <= 0.0 {
                    self.dt
                } else {
                    (gap / 5.0).powi(2).clamp(self.dt, self.max_dt)
                }
            }
            None => self.dt,
        }
    }
}

/// How stable increments are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StableMode {
    /// Exact stable increments; no jump events recorded.
    Exact,
    /// Explicit jumps above the cutoff plus a Gaussian small-jump remainder.
    Decomposed,
}

#[derive(Clone, Debug)]
pub struct PathOptions {
    pub horizon: f64,
    pub stepping: Stepping,
    /// Times that must appear on the grid.
    pub stops: Vec<f64>,
    pub stable_mode: StableMode,
}

impl PathOptions {
    pub fn new(horizon: f64, dt: f64) -> Self {
        PathOptions { horizon, stepping: Stepping::uniform(dt), stops: Vec::new(), stable_mode: StableMode::Decomposed }
    }
}

/// Per-path RNG: the experiment seed selects the key, the path index the stream.
pub fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Lévy density constant c_α of |ξ|^α: J(z) = c_α |z|^{−1−α}.
pub fn stable_levy_constant(alpha: f64) -> f64 {
    alpha * 2f64.powf(alpha - 1.0) * libm::tgamma((1.0 + alpha) / 2.0)
        / (PI.sqrt() * libm::tgamma(1.0 - alpha / 2.0))
}

/// Standard symmetric α-stable variate with E e^{iξX} = e^{−|ξ|^α}.
pub fn sample_stable<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let v = PI * (rng.random::<f64>() - 0.5);
    if alpha == 1.0 {
        return v.tan();
    }
    let w: f64 = Exp1.sample(rng);
    (alpha * v).sin() / v.cos().powf(1.0 / alpha) * (((1.0 - alpha) * v).cos() / w).powf((1.0 - alpha) / alpha)
}

pub fn sample_path(spec: &ProcessSpec, x0: &[f64], horizon: f64, dt: f64, seed: u64) -> Result<PathSample> {
    sample_path_with(spec, x0, &PathOptions::new(horizon, dt), seed, 0)
}

pub fn sample_path_with(spec: &ProcessSpec, x0: &[f64], opts: &PathOptions, seed: u64, stream: u64) -> Result<PathSample> {
    spec.validate()?;
    let dt = opts.stepping.dt;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidStep(dt));
    }
    if !(opts.horizon > 0.0) || dt > opts.horizon * (1.0 + 1e-12) {
        return Err(Error::InvalidStep(dt));
    }
    if x0.len() != spec.dim {
        return Err(Error::InvalidInput(format!("start point has dim {}, process dim {}", x0.len(), spec.dim)));
    }
    let mut rng = path_rng(seed, stream);
    let kill = spec.effective_kill_rate();
    let lifetime = if kill > 0.0 { Distribution::<f64>::sample(&Exp1, &mut rng) / kill } else { f64::INFINITY };
    let end = opts.horizon.min(lifetime);

    let mut stops: Vec<f64> = opts.stops.iter().cloned().filter(|&s| s > 0.0 && s < end).collect();
    stops.sort_by(|a, b| a.total_cmp(b));
    stops.push(end);
    stops.dedup();

    let est_len = (end / dt).ceil() as usize + stops.len() + 2;
    let mut path = PathSample {
        times: Vec::with_capacity(est_len),
        positions: Vec::with_capacity(est_len),
        jumps: Vec::new(),
        killed_at: (lifetime <= opts.horizon).then_some(lifetime),
        rng_stream_id: stream,
        brownian: spec.kind != ProcessKind::AlphaStable1d,
        jump_record: None,
    };
    path.times.push(0.0);
    path.positions.push(x0.to_vec());

    let stable = spec.stable_index();
    let decomposed = stable.is_some() && opts.stable_mode == StableMode::Decomposed;
    path.jump_record = stable.map(|alpha| JumpRecord {
        alpha,
        cutoff: if decomposed { spec.cutoff(opts.horizon) } else { f64::INFINITY },
    });
    let jump_params = stable.map(|a| {
        let eps = spec.cutoff(opts.horizon);
        let c = stable_levy_constant(a);
        let rate = 2.0 * c * eps.powf(-a) / a;
        let small_var = 2.0 * c * eps.powf(2.0 - a) / (2.0 - a);
        (a, eps, rate, small_var)
    });

    let mut t = 0.0;
    let mut x = x0.to_vec();
    let mut next_stop = 0;
    while t < end {
        let target = stops[next_stop];
        let mut h = opts.stepping.step_at(&x);
        let landed = t + h >= target * (1.0 - 1e-14);
        if landed {
            h = target - t;
            next_stop += 1;
        }
        if h <= 0.0 {
            continue;
        }
        match jump_params {
            None => {
                let s = h.sqrt();
                for xi in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *xi += s * z;
                }
            }
            Some((a, _, _, _)) if !decomposed => {
                x[0] += h.powf(1.0 / a) * sample_stable(a, &mut rng);
            }
            Some((a, eps, rate, small_var)) => {
                let lam = rate * h;
                let n = if lam > 0.0 { Poisson::new(lam).map(|p| p.sample(&mut rng) as usize).unwrap_or(0) } else { 0 };
                let z: f64 = StandardNormal.sample(&mut rng);
                let remainder = (small_var * h).sqrt() * z;
                let mut events: Vec<(f64, f64)> = (0..n)
                    .map(|_| {
                        let u: f64 = rng.random::<f64>();
                        let size = eps * (1.0 - u).powf(-1.0 / a);
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        (rng.random::<f64>() * h, sign * size)
                    })
                    .collect();
                events.sort_by(|p, q| p.0.total_cmp(&q.0));
                let base = x[0];
                let mut jumped = 0.0;
                for (tau, size) in events {
                    let before = base + jumped + remainder * tau / h;
                    let after = before + size;
                    path.times.push(t + tau);
                    path.positions.push(vec![before]);
                    path.times.push(t + tau);
                    path.positions.push(vec![after]);
                    path.jumps.push(Jump { time: t + tau, from: vec![before], to: vec![after] });
                    jumped += size;
                }
                x[0] = base + jumped + remainder;
            }
        }
        t = if landed { target } else { t + h };
        path.times.push(t);
        path.positions.push(x.clone());
    }
    Ok(path)
}

// ---------------------------------------------------------------------------
// Stable densities

/// Tabulated standard density p₁ and its derivative on [0, r_max] (cubic Hermite),
/// series beyond.
struct StableTable {
    alpha: f64,
    step: f64,
    r_max: f64,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

fn fourier_p1(alpha: f64, r: f64) -> (f64, f64) {
    let xi_max = 45f64.powf(1.0 / alpha);
    let width = if r > 0.0 { (PI / r).min(1.0) } else { 1.0 };
    let n = (xi_max / width).ceil() as usize;
    let mut val = 0.0;
    let mut der = 0.0;
    for k in 0..n {
        let a = k as f64 * width;
        let b = ((k + 1) as f64 * width).min(xi_max);
        let mut f = |xi: f64| (xi * r).cos() * (-xi.powf(alpha)).exp();
        val += integrate_with_limit(&mut f, a, b, 1e-15, 1e-13, 200).value;
        let mut g = |xi: f64| -xi * (xi * r).sin() * (-xi.powf(alpha)).exp();
        der += integrate_with_limit(&mut g, a, b, 1e-15, 1e-13, 200).value;
    }
    (val / PI, der / PI)
}

/// Series (1/π) Σ (−1)^{k+1} Γ(kα+1)/k! sin(kπα/2) r^{−kα−1}: convergent for α < 1,
/// asymptotic for α > 1.
fn series_p1(alpha: f64, r: f64) -> (f64, f64) {
    let mut val = 0.0;
    let mut der = 0.0;
    let mut prev = f64::INFINITY;
    let mut log_fact = 0.0;
    for k in 1..80 {
        let kf = k as f64;
        log_fact += kf.ln();
        let mag = (libm::lgamma(kf * alpha + 1.0) - log_fact - (kf * alpha + 1.0) * r.ln()).exp();
        if mag > prev && alpha > 1.0 {
            break;
        }
        prev = mag;
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        let term = sign * mag * (kf * PI * alpha / 2.0).sin();
        val += term;
        der -= term * (kf * alpha + 1.0) / r;
        if mag < 1e-18 * val.abs().max(1e-300) {
            break;
        }
    }
    (val / PI, der / PI)
}

impl StableTable {
    fn build(alpha: f64) -> StableTable {
        let step: f64 = 0.01;
        let r_max: f64 = if alpha < 1.0 { 4.0 } else { 20.0 };
        let n = (r_max / step).round() as usize + 1;
        let (values, slopes): (Vec<f64>, Vec<f64>) = (0..n).map(|i| fourier_p1(alpha, i as f64 * step)).unzip();
        StableTable { alpha, step, r_max, values, slopes }
    }

    fn eval(&self, r: f64) -> f64 {
        let r = r.abs();
        if r >= self.r_max {
            return series_p1(self.alpha, r).0;
        }
        let i = ((r / self.step) as usize).min(self.values.len() - 2);
        let h = self.step;
        let s = (r - i as f64 * h) / h;
        let (p0, p1) = (self.values[i], self.values[i + 1]);
        let (m0, m1) = (self.slopes[i] * h, self.slopes[i + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * p0 + (s3 - 2.0 * s2 + s) * m0 + (-2.0 * s3 + 3.0 * s2) * p1 + (s3 - s2) * m1
    }
}

fn stable_table(alpha: f64) -> Arc<StableTable> {
    static CACHE: OnceLock<Mutex<HashMap<u64, Arc<StableTable>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("stable table cache poisoned");
    guard.entry(alpha.to_bits()).or_insert_with(|| Arc::new(StableTable::build(alpha))).clone()
}

/// Standard (t = 1) symmetric α-stable density at r.
pub fn stable_density_unit(alpha: f64, r: f64) -> f64 {
    if alpha == 1.0 {
        return 1.0 / (PI * (1.0 + r * r));
    }
    stable_table(alpha).eval(r)
}

/// Transition density p_t(x, y); sub-Markovian (includes e^{−κt}) for killed kinds.
pub fn transition_density(spec: &ProcessSpec, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.validate()?;
    if !(t > 0.0) {
        return Err(Error::InvalidInput(format!("t must be > 0, got {t}")));
    }
    let r = dist(x, y);
    let kill = (-spec.effective_kill_rate() * t).exp();
    let p = match spec.kind {
        ProcessKind::Brownian | ProcessKind::BrownianKilledAlpha => gaussian_density(spec.dim, t, r),
        ProcessKind::AlphaStable1d => {
            let a = spec.alpha_stable_index.unwrap_or(1.0);
            if a == 1.0 {
                t / (PI * (t * t + r * r))
            } else {
                let s = t.powf(-1.0 / a);
                s * stable_density_unit(a, r * s)
            }
        }
    };
    Ok(kill * p)
}

pub fn gaussian_density(dim: usize, t: f64, r: f64) -> f64 {
    (2.0 * PI * t).powf(-(dim as f64) / 2.0) * (-(r * r) / (2.0 * t)).exp()
}

// ---------------------------------------------------------------------------
// Resolvents

/// α-order resolvent kernel R_α(x, y) = ∫₀^∞ e^{−αt} p_t(x, y) dt.
/// Returns `DivergentResolvent` for recurrent processes at α = 0.
pub fn resolvent_kernel(spec: &ProcessSpec, alpha: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    spec.validate()?;
    if !(alpha >= 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be ≥ 0, got {alpha}")));
    }
    resolvent_radial(spec, alpha, dist(x, y))
}

pub fn resolvent_radial(spec: &ProcessSpec, alpha: f64, r: f64) -> Result<f64> {
    let a = alpha + spec.effective_kill_rate();
    if a == 0.0 && !spec.is_transient() {
        return Err(Error::DivergentResolvent);
    }
    if r == 0.0 {
        return match spec.kind {
            ProcessKind::AlphaStable1d if spec.alpha_stable_index.unwrap_or(1.0) > 1.0 => {
                resolvent_by_time_quadrature(spec, a, 0.0)
            }
            ProcessKind::Brownian | ProcessKind::BrownianKilledAlpha if spec.dim == 1 => {
                Ok(1.0 / (2.0 * a).sqrt())
            }
            _ => Ok(f64::INFINITY),
        };
    }
    match spec.kind {
        ProcessKind::Brownian | ProcessKind::BrownianKilledAlpha => {
            let kappa = (2.0 * a).sqrt();
            match spec.dim {
                1 => Ok((-kappa * r).exp() / kappa),
                2 => Ok(bessel_k0(kappa * r) / PI),
                3 => Ok((-kappa * r).exp() / (2.0 * PI * r)),
                d if a == 0.0 => {
                    let h = d as f64 / 2.0;
                    Ok(libm::tgamma(h - 1.0) / (2.0 * PI.powf(h)) * r.powf(2.0 - d as f64))
                }
                _ => resolvent_by_time_quadrature(spec, a, r),
            }
        }
        ProcessKind::AlphaStable1d => {
            let idx = spec.alpha_stable_index.unwrap_or(1.0);
            if a == 0.0 {
                Ok(libm::tgamma(1.0 - idx) * (PI * idx / 2.0).sin() / PI * r.powf(idx - 1.0))
            } else {
                resolvent_by_time_quadrature(spec, a, r)
            }
        }
    }
}

fn resolvent_by_time_quadrature(spec: &ProcessSpec, a: f64, r: f64) -> Result<f64> {
    let base = ProcessSpec { kind: ProcessKind::Brownian, kill_rate: 0.0, ..spec.clone() };
    let base = if spec.kind == ProcessKind::AlphaStable1d { ProcessSpec { kill_rate: 0.0, ..spec.clone() } } else { base };
    let origin = vec![0.0; spec.dim];
    let mut target = vec![0.0; spec.dim];
    target[0] = r;
    // t = e^s
    let f = |s: f64| {
        let t = s.exp();
        t * (-a * t).exp() * transition_density(&base, t, &origin, &target).unwrap_or(0.0)
    };
    let upper = if a > 0.0 { (60.0 / a).ln().max(1.0) } else { 60.0 };
    let q = integrate(f, -60.0, upper, 1e-300, 1e-9);
    if q.error > 1e-6 * q.value.abs() {
        return Err(Error::QuadratureFailure { value: q.value, error: q.error });
    }
    Ok(q.value)
}

/// Modified Bessel K₀(z) = ∫₀^∞ e^{−z cosh s} ds.
pub fn bessel_k0(z: f64) -> f64 {
    if z <= 0.0 {
        return f64::INFINITY;
    }
    let upper = (60.0 / z + 2.0).acosh() + 1.0;
    integrate(|s| (-z * s.cosh()).exp(), 0.0, upper, 1e-300, 1e-13).value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{integrate_to_infinity, Moments};

    #[test]
    fn levy_constant_cauchy() {
        assert!((stable_levy_constant(1.0) - 1.0 / PI).abs() < 1e-14);
    }

    #[test]
    fn gaussian_peak() {
        let p = transition_density(&ProcessSpec::brownian(1), 1.0, &[0.0], &[0.0]).unwrap();
        assert!((p - 0.398942280401).abs() < 1e-11);
    }

    #[test]
    fn cauchy_peak() {
        let p = transition_density(&ProcessSpec::stable(1.0), 1.0, &[0.0], &[0.0]).unwrap();
        assert!((p - 1.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn stable_table_matches_series_at_switch() {
        for alpha in [0.6, 1.5] {
            let tab = stable_table(alpha);
            let r = tab.r_max - 0.015;
            let (s, _) = series_p1(alpha, r);
            assert!((tab.eval(r) / s - 1.0).abs() < 1e-6, "alpha {alpha}: {} vs {s}", tab.eval(r));
        }
    }

    #[test]
    fn stable_density_normalized() {
        for alpha in [0.6, 1.5] {
            let spec = ProcessSpec::stable(alpha);
            let f = |r: f64| 2.0 * transition_density(&spec, 1.0, &[0.0], &[r]).unwrap();
            let total = integrate(f, 0.0, 50.0, 1e-14, 1e-12).value
                + integrate_to_infinity(|r| f(r), 50.0, 1e-14, 1e-10).value;
            assert!((total - 1.0).abs() < 1e-6, "alpha {alpha}: {total}");
        }
    }

    #[test]
    fn stable_fourier_reproduces_cauchy() {
        // the general route, applied at α = 1, against the closed form
        for r in [0.0, 0.5, 3.0] {
            let (v, d) = fourier_p1(1.0, r);
            assert!((v - 1.0 / (PI * (1.0 + r * r))).abs() < 1e-12);
            assert!((d + 2.0 * r / (PI * (1.0 + r * r).powi(2))).abs() < 1e-12);
        }
    }

    #[test]
    fn stable_scaling() {
        let spec = ProcessSpec::stable(1.5);
        for c in [0.3f64, 2.0, 7.0] {
            let s = c.powf(1.0 / 1.5);
            let lhs = transition_density(&spec, c * 0.8, &[s * 0.1], &[s * 1.4]).unwrap() * s;
            let rhs = transition_density(&spec, 0.8, &[0.1], &[1.4]).unwrap();
            assert!((lhs - rhs).abs() < 1e-8 * rhs);
        }
    }

    #[test]
    fn chapman_kolmogorov_closed_forms() {
        for spec in [ProcessSpec::brownian(1), ProcessSpec::stable(1.0)] {
            let f = |z: f64| {
                transition_density(&spec, 0.7, &[0.2], &[z]).unwrap()
                    * transition_density(&spec, 1.1, &[z], &[-0.9]).unwrap()
            };
            let lhs = [(-4000.0, -40.0), (-40.0, 40.0), (40.0, 4000.0)]
                .iter()
                .map(|&(a, b)| integrate(f, a, b, 1e-15, 1e-12).value)
                .sum::<f64>()
                + 2.0 / (PI * PI) * 0.7 * 1.1 / (3.0 * 4000f64.powi(3));
            let rhs = transition_density(&spec, 1.8, &[0.2], &[-0.9]).unwrap();
            assert!((lhs - rhs).abs() < 1e-6, "{:?}: {lhs} vs {rhs}", spec.kind);
        }
    }

    #[test]
    fn green_kernel_three_dim() {
        let g = resolvent_kernel(&ProcessSpec::brownian(3), 0.0, &[0.0; 3], &[1.0, 0.0, 0.0]).unwrap();
        assert!((g - 1.0 / (2.0 * PI)).abs() < 1e-15);
        let by_time = resolvent_by_time_quadrature(&ProcessSpec::brownian(3), 0.0, 1.0).unwrap();
        assert!((by_time / g - 1.0).abs() < 1e-6, "{by_time}");
    }

    #[test]
    fn resolvent_one_dim() {
        let spec = ProcessSpec::brownian(1);
        assert!(matches!(resolvent_kernel(&spec, 0.0, &[0.0], &[1.0]), Err(Error::DivergentResolvent)));
        let r = resolvent_kernel(&spec, 0.5, &[0.0], &[1.0]).unwrap();
        assert!((r - (-1.0f64).exp()).abs() < 1e-15);
        let by_time = resolvent_by_time_quadrature(&spec, 0.5, 1.0).unwrap();
        assert!((by_time / r - 1.0).abs() < 1e-6);
    }

    #[test]
    fn resolvent_two_dim_and_stable_routes() {
        let spec = ProcessSpec::brownian(2);
        let closed = resolvent_kernel(&spec, 0.3, &[0.0, 0.0], &[0.8, 0.0]).unwrap();
        let by_time = resolvent_by_time_quadrature(&spec, 0.3, 0.8).unwrap();
        assert!((closed / by_time - 1.0).abs() < 1e-6);
        let st = ProcessSpec::stable(0.5);
        let riesz = resolvent_kernel(&st, 0.0, &[0.0], &[2.0]).unwrap();
        let by_time = resolvent_by_time_quadrature(&st, 1e-12, 2.0).unwrap();
        assert!((riesz / by_time - 1.0).abs() < 1e-4, "{riesz} vs {by_time}");
        assert!(matches!(
            resolvent_kernel(&ProcessSpec::stable(1.0), 0.0, &[0.0], &[1.0]),
            Err(Error::DivergentResolvent)
        ));
    }

    #[test]
    fn resolvent_equation_one_dim() {
        // (R_a f − R_b f) = (b − a) R_a R_b f for f = 1_{[−1,1]}
        let spec = ProcessSpec::brownian(1);
        let (a, b) = (0.5, 2.0);
        let rf = |alpha: f64, x: f64| {
            integrate(|y| resolvent_kernel(&spec, alpha, &[x], &[y]).unwrap(), -1.0, 1.0, 1e-14, 1e-12).value
        };
        let x = 0.3;
        let lhs = rf(a, x) - rf(b, x);
        let inner = |z: f64| resolvent_kernel(&spec, a, &[x], &[z]).unwrap() * rf(b, z);
        let comp = integrate(inner, -40.0, 40.0, 1e-14, 1e-10).value;
        assert!((lhs - (b - a) * comp).abs() < 1e-5, "{lhs} vs {}", (b - a) * comp);
    }

    #[test]
    fn brownian_second_moment() {
        let spec = ProcessSpec::brownian(3);
        let mut m = Moments::default();
        for i in 0..20_000 {
            let p = sample_path_with(&spec, &[0.0; 3], &PathOptions::new(1.0, 0.05), 11, i).unwrap();
            let end = p.positions.last().unwrap();
            m.push(end.iter().map(|v| v * v).sum());
        }
        assert!((m.mean() - 3.0).abs() < 3.0 * m.ci95() / 1.96 + 1e-9 + 0.05, "{}", m.mean());
    }

    #[test]
    fn killing_clock() {
        let spec = ProcessSpec::killed(1, 2.0);
        let n = 40_000;
        let alive = (0..n)
            .filter(|&i| {
                let p = sample_path_with(&spec, &[0.0], &PathOptions::new(1.5, 0.5), 5, i).unwrap();
                p.alive_at(1.0)
            })
            .count() as f64
            / n as f64;
        let expected = (-2.0f64).exp();
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((alive - expected).abs() < 4.0 * se, "{alive}");
    }

    #[test]
    fn cauchy_median() {
        let spec = ProcessSpec::stable(1.0);
        let mut opts = PathOptions::new(1.0, 0.25);
        opts.stable_mode = StableMode::Exact;
        let mut ends: Vec<f64> = (0..20_001)
            .map(|i| sample_path_with(&spec, &[0.0], &opts, 3, i).unwrap().positions.last().unwrap()[0].abs())
            .collect();
        ends.sort_by(|a, b| a.total_cmp(b));
        let med = ends[ends.len() / 2];
        // quantile spread for |C|: density of |C| at 1 is 1/π, se ≈ 0.5/(√n/π)
        assert!((med - 1.0).abs() < 4.0 * 0.5 * PI / (20_001f64).sqrt(), "{med}");
    }

    #[test]
    fn decomposed_path_structure() {
        let spec = ProcessSpec::stable(1.0).with_cutoff(0.05);
        let p = sample_path_with(&spec, &[0.0], &PathOptions::new(1.0, 0.1), 9, 0).unwrap();
        assert_eq!(p.times.len(), p.positions.len());
        assert!(p.times.windows(2).all(|w| w[1] >= w[0]));
        assert!(!p.jumps.is_empty());
        for j in &p.jumps {
            assert!((j.to[0] - j.from[0]).abs() >= 0.05);
            let i = p.times.iter().position(|&t| t == j.time).unwrap();
            assert_eq!(p.positions[i], j.from);
            assert_eq!(p.positions[i + 1], j.to);
        }
        assert!((p.horizon() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stops_land_on_grid() {
        let mut opts = PathOptions::new(2.0, 0.3);
        opts.stops = vec![0.5, 1.0, 1.7];
        let p = sample_path_with(&ProcessSpec::brownian(2), &[0.0, 0.0], &opts, 1, 0).unwrap();
        for s in [0.5, 1.0, 1.7, 2.0] {
            assert!(p.times.contains(&s), "{s} missing from {:?}", p.times);
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(sample_path(&ProcessSpec::brownian(1), &[0.0], 1.0, 0.0, 1), Err(Error::InvalidStep(_))));
        let mut bad = ProcessSpec::stable(1.0);
        bad.dim = 2;
        assert!(matches!(sample_path(&bad, &[0.0, 0.0], 1.0, 0.1, 1), Err(Error::UnsupportedDim(2))));
    }

    #[test]
    fn same_seed_same_path() {
        let spec = ProcessSpec::brownian(2);
        let a = sample_path_with(&spec, &[0.0, 0.0], &PathOptions::new(1.0, 0.1), 42, 7).unwrap();
        let b = sample_path_with(&spec, &[0.0, 0.0], &PathOptions::new(1.0, 0.1), 42, 7).unwrap();
        let c = sample_path_with(&spec, &[0.0, 0.0], &PathOptions::new(1.0, 0.1), 42, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn spec_json() {
        let s: ProcessSpec = serde_json::from_str(r#"{"kind":"alpha_stable_1d","dim":1,"alpha_stable_index":1.5}"#).unwrap();
        assert_eq!(s.stable_index(), Some(1.5));
        assert!(serde_json::from_str::<ProcessSpec>(r#"{"kind":"brownian","dim":1,"bogus":1}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn densities_symmetric(t in 0.01f64..10.0, x in -5.0f64..5.0, y in -5.0f64..5.0, which in 0usize..3) {
                let spec = [ProcessSpec::brownian(1), ProcessSpec::stable(1.0), ProcessSpec::stable(1.5)][which].clone();
                let a = transition_density(&spec, t, &[x], &[y]).unwrap();
                let b = transition_density(&spec, t, &[y], &[x]).unwrap();
                prop_assert_eq!(a, b);
                prop_assert!(a >= 0.0 && a.is_finite());
            }

            #[test]
            fn resolvent_nonincreasing_in_alpha(a in 0.0f64..5.0, da in 0.0f64..5.0, r in 0.05f64..5.0) {
                let spec = ProcessSpec::brownian(3);
                let lo = resolvent_radial(&spec, a + da, r).unwrap();
                let hi = resolvent_radial(&spec, a, r).unwrap();
                prop_assert!(lo <= hi);
            }
        }
    }
}
