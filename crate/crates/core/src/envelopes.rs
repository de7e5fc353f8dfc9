//! Heat-kernel envelope formulas and the comparison-relation fit.
//!
//! Every envelope is evaluated with unit leading constant; the multiplicative
//! constants, the distance scale and the exponential tempering `k` are what
//! [`fit_envelope`] estimates from a kernel estimate.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feynman_kac::KernelEstimate;
use crate::numerics::{dist, golden_max, unit_ball_volume, Z95};

/// Search bracket for the supremum defining Φ.
const PHI_R_MIN: f64 = 1e-8;
const PHI_R_MAX: f64 = 1e8;
const PHI_SCAN: usize = 200;

#[derive(Clone)]
pub enum ScalingForm {
    /// coef · r^beta
    Power { beta: f64, coef: f64 },
    /// Log-log interpolated table of (r, value), power-law extrapolation at both ends.
    Table { points: Vec<(f64, f64)> },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for ScalingForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalingForm::Power { beta, coef } => write!(f, "Power({coef}·r^{beta})"),
            ScalingForm::Table { points } => write!(f, "Table({} points)", points.len()),
            ScalingForm::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// A strictly increasing scale function with declared scaling indices
/// `L(beta_lower, c_lower)` and `U(beta_upper, c_upper)`.
#[derive(Clone, Debug)]
pub struct ScalingFunction {
    pub form: ScalingForm,
    pub beta_lower: f64,
    pub beta_upper: f64,
    pub c_lower: f64,
    pub c_upper: f64,
}

impl ScalingFunction {
    pub fn power(beta: f64) -> Self {
        Self::power_with_coef(beta, 1.0)
    }

    pub fn power_with_coef(beta: f64, coef: f64) -> Self {
        ScalingFunction {
            form: ScalingForm::Power { beta, coef },
            beta_lower: beta,
            beta_upper: beta,
            c_lower: 1.0,
            c_upper: 1.0,
        }
    }

    pub fn table(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput("scaling table needs at least two points".into()));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.iter().any(|&(r, v)| r <= 0.0 || v <= 0.0) {
            return Err(Error::InvalidInput("scaling table entries must be positive".into()));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0 || w[1].1 <= w[0].1) {
            return Err(Error::InvalidInput("scaling table must be strictly increasing".into()));
        }
        let slopes: Vec<f64> = points
            .windows(2)
            .map(|w| (w[1].1 / w[0].1).ln() / (w[1].0 / w[0].0).ln())
            .collect();
        let lo = slopes.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(ScalingFunction {
            form: ScalingForm::Table { points },
            beta_lower: lo,
            beta_upper: hi,
            c_lower: 1.0,
            c_upper: 1.0,
        })
    }

    pub fn custom<F>(f: F, beta_lower: f64, beta_upper: f64, c_lower: f64, c_upper: f64) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        ScalingFunction { form: ScalingForm::Custom(Arc::new(f)), beta_lower, beta_upper, c_lower, c_upper }
    }

    pub fn eval(&self, r: f64) -> f64 {
        match &self.form {
            ScalingForm::Power { beta, coef } => coef * r.powf(*beta),
            ScalingForm::Table { points } => table_eval(points, r),
            ScalingForm::Custom(f) => f(r),
        }
    }

    pub fn inverse_eval(&self, t: f64) -> f64 {
        match &self.form {
            ScalingForm::Power { beta, coef } => (t / coef).powf(1.0 / beta),
            _ => {
                // bisection in log r; eval is strictly increasing
                let mut lo = -60.0f64;
                let mut hi = 60.0f64;
                while self.eval(lo.exp()) > t && lo > -700.0 {
                    lo -= 60.0;
                }
                while self.eval(hi.exp()) < t && hi < 700.0 {
                    hi += 60.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.eval(mid.exp()) < t {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-15 {
                        break;
                    }
                }
                (0.5 * (lo + hi)).exp()
            }
        }
    }

    /// ψ_*(r) = ψ(r) on r ≤ 1 and r² beyond; increasing when ψ(1) ≤ 1.
    pub fn starred(&self) -> ScalingFunction {
        let inner = self.clone();
        let at_one = self.eval(1.0);
        ScalingFunction::custom(
            move |r| if r <= 1.0 { inner.eval(r) } else { at_one.max(1.0) * r * r },
            self.beta_lower.min(2.0),
            self.beta_upper.max(2.0),
            self.c_lower,
            self.c_upper,
        )
    }
}

fn table_eval(points: &[(f64, f64)], r: f64) -> f64 {
    let n = points.len();
    let lr = r.ln();
    let seg = if r <= points[0].0 {
        0
    } else if r >= points[n - 1].0 {
        n - 2
    } else {
        points.partition_point(|p| p.0 <= r) - 1
    };
    let (r0, v0) = points[seg];
    let (r1, v1) = points[seg + 1];
    let slope = (v1 / v0).ln() / (r1 / r0).ln();
    (v0.ln() + slope * (lr - r0.ln())).exp()
}

/// Volume of balls V(x, r).
#[derive(Clone, Debug)]
pub struct VolumeFunction {
    pub dim: usize,
    pub table: Option<Vec<(f64, f64)>>,
    pub doubling_const: f64,
    pub rvd_exponent: f64,
}

impl VolumeFunction {
    pub fn lebesgue(dim: usize) -> Self {
        VolumeFunction { dim, table: None, doubling_const: 2f64.powi(dim as i32), rvd_exponent: dim as f64 }
    }

    pub fn eval(&self, _x: &[f64], r: f64) -> f64 {
        match &self.table {
            None => unit_ball_volume(self.dim) * r.powi(self.dim as i32),
            Some(points) => table_eval(points, r),
        }
    }

    /// Worst observed VD constant and RVD constant c₁ for the declared exponent.
    pub fn check(&self, x: &[f64], radii: &[f64]) -> VolumeReport {
        let mut worst_doubling: f64 = 0.0;
        let mut worst_rvd = f64::INFINITY;
        for &r in radii {
            worst_doubling = worst_doubling.max(self.eval(x, 2.0 * r) / self.eval(x, r));
            for &r2 in radii.iter().filter(|&&r2| r2 >= r) {
                let ratio = self.eval(x, r2) / self.eval(x, r) / (r2 / r).powf(self.rvd_exponent);
                worst_rvd = worst_rvd.min(ratio);
            }
        }
        VolumeReport {
            worst_doubling,
            worst_rvd_const: worst_rvd,
            doubling_ok: worst_doubling <= self.doubling_const * (1.0 + 1e-12),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VolumeReport {
    pub worst_doubling: f64,
    pub worst_rvd_const: f64,
    pub doubling_ok: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvelopeKind {
    #[serde(rename = "gaussian_UE")]
    GaussianUpper,
    #[serde(rename = "gaussian_LE")]
    GaussianLower,
    #[serde(rename = "gaussian_NLE")]
    GaussianNearDiagonal,
    #[serde(rename = "jump_HK_upper")]
    JumpUpper,
    #[serde(rename = "jump_HK_lower")]
    JumpLower,
    #[serde(rename = "q_beta")]
    QBeta,
    #[serde(rename = "h_psi_beta")]
    HPsiBeta,
}

impl EnvelopeKind {
    /// Kinds used for the upper and the lower side of a two-sided fit.
    pub fn sides(self) -> (EnvelopeKind, EnvelopeKind) {
        use EnvelopeKind::*;
        match self {
            GaussianUpper | GaussianLower => (GaussianUpper, GaussianLower),
            GaussianNearDiagonal => (GaussianUpper, GaussianNearDiagonal),
            JumpUpper | JumpLower => (JumpUpper, JumpLower),
            QBeta => (QBeta, QBeta),
            HPsiBeta => (HPsiBeta, HPsiBeta),
        }
    }

    fn has_distance_scale(self) -> bool {
        matches!(
            self,
            EnvelopeKind::GaussianUpper | EnvelopeKind::GaussianLower | EnvelopeKind::GaussianNearDiagonal
        )
    }
}

#[derive(Clone, Debug)]
pub struct EnvelopeFamily {
    pub kind: EnvelopeKind,
    pub phi: ScalingFunction,
    pub psi: Option<ScalingFunction>,
    pub volume: VolumeFunction,
    /// Tempering index; `f64::INFINITY` for β = ∞ and `0.0` for the 0₊ case of H_{ψ,β}.
    pub beta: f64,
    pub a0: f64,
    pub eta: f64,
    pub eps_nle: f64,
}

impl EnvelopeFamily {
    pub fn new(kind: EnvelopeKind, phi: ScalingFunction, dim: usize) -> Self {
        EnvelopeFamily {
            kind,
            phi,
            psi: None,
            volume: VolumeFunction::lebesgue(dim),
            beta: f64::INFINITY,
            a0: 1.0,
            eta: 1.0,
            eps_nle: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.volume.dim
    }

    fn psi(&self) -> &ScalingFunction {
        self.psi.as_ref().unwrap_or(&self.phi)
    }

    /// Unit-constant envelope at distance `r` for the given kind; the shape
    /// parameter `c` rescales the distance (and, for the Gaussian lower
    /// estimate, also multiplies Φ).
    pub fn eval_kind(&self, kind: EnvelopeKind, t: f64, x: &[f64], r: f64, c: f64) -> Result<f64> {
        if !(t > 0.0) || r < 0.0 {
            return Err(Error::InvalidInput(format!("envelope needs t > 0 and r ≥ 0 (t={t}, r={r})")));
        }
        let s = c * r;
        let v_t = self.volume.eval(x, self.phi.inverse_eval(t));
        let value = match kind {
            EnvelopeKind::GaussianUpper => (-0.5 * phi_big_or_inf(s, t, &self.phi)?).exp() / v_t,
            EnvelopeKind::GaussianLower => (-c * phi_big_or_inf(s, t, &self.phi)?).exp() / v_t,
            EnvelopeKind::GaussianNearDiagonal => {
                if s <= self.eps_nle * self.phi.inverse_eval(t) {
                    1.0 / v_t
                } else {
                    0.0
                }
            }
            EnvelopeKind::JumpUpper => {
                let jump = t / (self.volume.eval(x, s) * self.psi().eval(s));
                let diffusive = (-self.a0 * phi_big_or_inf(s, t, &self.phi)?).exp() / v_t;
                (1.0 / v_t).min(jump + diffusive)
            }
            EnvelopeKind::JumpLower => {
                if s <= self.eta * self.phi.inverse_eval(t) {
                    1.0 / v_t
                } else {
                    t / (self.volume.eval(x, s) * self.psi().eval(s))
                }
            }
            EnvelopeKind::QBeta => self.q_beta(t, s)?,
            EnvelopeKind::HPsiBeta => self.h_psi_beta(t, x, s)?,
        };
        if value.is_nan() || value < 0.0 {
            return Err(Error::UnsupportedRegime { t, r });
        }
        Ok(value)
    }

    fn q_beta(&self, t: f64, r: f64) -> Result<f64> {
        let beta = self.beta;
        if !(beta > 0.0) {
            return Err(Error::UnsupportedRegime { t, r });
        }
        let d = self.dim() as f64;
        let phi = &self.phi;
        let small_time = || {
            let diag = phi.inverse_eval(t).powf(-d);
            // Φ(r) read as e^{r^β}, matching the tempered jump density
            let off = t / (r.powf(d) * phi.eval(r) * r.powf(beta).exp());
            diag.min(off)
        };
        let value = if beta <= 1.0 {
            if t <= 1.0 {
                small_time()
            } else {
                t.powf(-d / 2.0) * (-(r.powf(beta).min(r * r / t))).exp()
            }
        } else {
            let expo = if beta.is_infinite() { 1.0 } else { (beta - 1.0) / beta };
            let log_growth = r * (1.0 + (r / t).max(1.0).ln()).powf(expo);
            if t <= 1.0 && r < 1.0 {
                small_time()
            } else if t <= 1.0 {
                t * (-(log_growth.min(r.powf(beta)))).exp()
            } else {
                t.powf(-d / 2.0) * (-(log_growth.min(r * r / t))).exp()
            }
        };
        Ok(value)
    }

    fn p_psi_beta(&self, psi: &ScalingFunction, beta: f64, t: f64, x: &[f64], r: f64) -> f64 {
        let gauss = (-(r * r) / t).exp() / self.volume.eval(x, t.sqrt());
        let diag = 1.0 / self.volume.eval(x, psi.inverse_eval(t));
        let off = t / (self.volume.eval(x, r) * psi.eval(r) * r.powf(beta).exp());
        gauss + diag.min(off)
    }

    fn h_psi_beta(&self, t: f64, x: &[f64], r: f64) -> Result<f64> {
        let beta = self.beta;
        if beta < 0.0 || beta.is_nan() {
            return Err(Error::UnsupportedRegime { t, r });
        }
        let psi = self.psi();
        let v_sqrt = self.volume.eval(x, t.sqrt());
        if beta == 0.0 {
            let starred = psi.starred();
            return Ok((1.0 / v_sqrt).min(self.p_psi_beta(&starred, 0.0, t, x, r)));
        }
        let value = if beta <= 1.0 {
            if t <= 1.0 {
                (1.0 / v_sqrt).min(self.p_psi_beta(psi, beta, t, x, r))
            } else {
                (-(r.powf(beta).min(r * r / t))).exp() / v_sqrt
            }
        } else {
            let expo = if beta.is_infinite() { 1.0 } else { (beta - 1.0) / beta };
            let log_growth = r * (1.0 + (r / t).max(1.0).ln()).powf(expo);
            if t <= 1.0 && r <= 1.0 {
                (1.0 / v_sqrt).min(self.p_psi_beta(psi, beta, t, x, r))
            } else if t <= 1.0 {
                t / (self.volume.eval(x, r) * psi.eval(r)) * (-(log_growth.min(r.powf(beta)))).exp()
            } else {
                (-(log_growth.min(r * r / t))).exp() / v_sqrt
            }
        };
        Ok(value)
    }
}

/// Φ(s, t) = sup_{r>0} { s/r − t/φ(r) }.
pub fn phi_big(s: f64, t: f64, phi: &ScalingFunction) -> Result<f64> {
    if !(s >= 0.0) || !(t > 0.0) {
        return Err(Error::InvalidInput(format!("phi_big needs s ≥ 0, t > 0 (s={s}, t={t})")));
    }
    if s == 0.0 {
        return Ok(0.0);
    }
    let objective = |log_r: f64| {
        let r = log_r.exp();
        s / r - t / phi.eval(r)
    };
    let (lo, hi) = (PHI_R_MIN.ln(), PHI_R_MAX.ln());
    let step = (hi - lo) / (PHI_SCAN - 1) as f64;
    let mut best = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    for i in 0..PHI_SCAN {
        let v = objective(lo + step * i as f64);
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    if best == 0 && best_val > 0.0 {
        // the objective still rises toward r → 0
        if phi.beta_lower <= 1.0 || objective(lo - 1.0) > best_val {
            return Err(Error::NonSuperlinearScaling { beta_lower: phi.beta_lower });
        }
    }
    if best == PHI_SCAN - 1 {
        // sup approached as r → ∞, where the objective tends to 0
        return Ok(best_val.max(0.0));
    }
    let a = lo + step * best.saturating_sub(1) as f64;
    let b = lo + step * (best + 1).min(PHI_SCAN - 1) as f64;
    let (_, v) = golden_max(objective, a, b, 1e-15);
    Ok(v.max(best_val).max(0.0))
}

/// Φ with the degenerate (non-superlinear) supremum mapped to +∞.
fn phi_big_or_inf(s: f64, t: f64, phi: &ScalingFunction) -> Result<f64> {
    match phi_big(s, t, phi) {
        Err(Error::NonSuperlinearScaling { .. }) => Ok(f64::INFINITY),
        other => other,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    /// Largest c with ratio ≥ c (R/r)^{beta_lower} on all pairs.
    pub lower_constant: f64,
    /// Smallest C with ratio ≤ C (R/r)^{beta_upper} on all pairs.
    pub upper_constant: f64,
    pub passes_lower: bool,
    pub passes_upper: bool,
    pub strictly_increasing: bool,
}

impl ScalingReport {
    pub fn passes(&self) -> bool {
        self.passes_lower && self.passes_upper && self.strictly_increasing
    }
}

pub fn check_scaling(f: &ScalingFunction, grid: &[(f64, f64)]) -> Result<ScalingReport> {
    let mut lower = f64::INFINITY;
    let mut upper: f64 = 0.0;
    let mut increasing = true;
    for &(r, big_r) in grid {
        if !(r > 0.0) || !(big_r > 0.0) || r > big_r {
            return Err(Error::InvalidGrid(format!("pair (r={r}, R={big_r}) must satisfy 0 < r ≤ R")));
        }
        let ratio = f.eval(big_r) / f.eval(r);
        if big_r > r && ratio <= 1.0 {
            increasing = false;
        }
        let scale = big_r / r;
        lower = lower.min(ratio / scale.powf(f.beta_lower));
        upper = upper.max(ratio / scale.powf(f.beta_upper));
    }
    let tol = 1e-12;
    Ok(ScalingReport {
        lower_constant: lower,
        upper_constant: upper,
        passes_lower: lower >= f.c_lower * (1.0 - tol),
        passes_upper: upper <= f.c_upper * (1.0 + tol),
        strictly_increasing: increasing,
    })
}

/// Unit-constant envelope of the family's own kind at (t, x, y).
pub fn eval_envelope(fam: &EnvelopeFamily, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    fam.eval_kind(fam.kind, t, x, dist(x, y), 1.0)
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub allow_k: bool,
    /// Multiplier turning the stored 95% half-width into the one-sided 95% slack.
    pub slack_factor: f64,
    /// A point violates a fitted bound only if it misses it by more than this factor.
    pub band_factor: f64,
    /// Allowed growth of the extreme log-ratio at the last time over all earlier times (k = 0 test).
    pub growth_band: f64,
    pub trim_fraction: f64,
    /// Points with relative CI above this are excluded from shape and constant fitting.
    pub reliable_rel_ci: f64,
    /// Fixed (c1, c2) instead of fitting the distance scale.
    pub fixed_shape: Option<(f64, f64)>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            allow_k: false,
            slack_factor: 1.6448536269514722 / Z95,
            band_factor: 2.0,
            growth_band: 3.0,
            trim_fraction: 0.05,
            reliable_rel_ci: 0.5,
            fixed_shape: None,
        }
    }
}

impl FitOptions {
    pub fn with_k(mut self, allow_k: bool) -> Self {
        self.allow_k = allow_k;
        self
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Violation {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// estimate / fitted envelope (above the band for upper, below for lower)
    pub ratio: f64,
    pub side: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EnvelopeVerdict {
    pub C1: f64,
    pub c1: f64,
    pub C2: f64,
    pub c2: f64,
    pub k: f64,
    pub passed_upper: bool,
    pub passed_lower: bool,
    pub violation_points: Vec<Violation>,
    /// log growth of the max ratio at the last time over earlier times
    pub growth_upper: f64,
    /// log decay of the min ratio at the last time below earlier times
    pub decay_lower: f64,
    pub points_used: usize,
}

struct FitPoint<'a> {
    t: f64,
    ti: usize,
    x: &'a [f64],
    y: &'a [f64],
    r: f64,
    value: f64,
    slack: f64,
    reliable: bool,
}

fn collect_points<'a>(est: &'a KernelEstimate, opts: &FitOptions) -> Vec<FitPoint<'a>> {
    let mut out = Vec::new();
    for (ti, &t) in est.t_values.iter().enumerate() {
        for (pi, (x, y)) in est.pairs.iter().enumerate() {
            let value = est.values[ti][pi];
            let ci = est.ci_half_width[ti][pi];
            let bias = est.bias.get(ti).and_then(|row| row.get(pi)).copied().unwrap_or(0.0);
            out.push(FitPoint {
                t,
                ti,
                x,
                y,
                r: dist(x, y),
                value,
                slack: ci * opts.slack_factor + bias,
                reliable: value > 0.0 && ci <= opts.reliable_rel_ci * value,
            });
        }
    }
    out
}

/// Trimmed extreme: drop the `trim` most extreme values on the chosen side.
fn trimmed_max(mut v: Vec<f64>, trim: usize) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| b.total_cmp(a));
    v[trim.min(v.len() - 1)]
}

fn trimmed_range(v: &[f64], trim: usize) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let t = trim.min((s.len() - 1) / 2);
    s[s.len() - 1 - t] - s[t]
}

fn log_ratios(fam: &EnvelopeFamily, kind: EnvelopeKind, pts: &[&FitPoint], c: f64) -> Result<Vec<Option<f64>>> {
    pts.iter()
        .map(|p| {
            let env = fam.eval_kind(kind, p.t, p.x, p.r, c)?;
            Ok(if env > 0.0 && p.value > 0.0 { Some((p.value / env).ln()) } else { None })
        })
        .collect()
}

/// Shape criterion: mean over times of the within-time trimmed log-ratio range.
/// Per-time factors (such as e^{kt}) do not affect it.
fn shape_spread(fam: &EnvelopeFamily, kind: EnvelopeKind, pts: &[&FitPoint], n_times: usize, c: f64, trim_frac: f64) -> f64 {
    let Ok(lr) = log_ratios(fam, kind, pts, c) else {
        return f64::INFINITY;
    };
    let mut by_time: Vec<Vec<f64>> = vec![Vec::new(); n_times];
    for (p, v) in pts.iter().zip(lr) {
        if let Some(v) = v {
            by_time[p.ti].push(v);
        }
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for row in &by_time {
        if row.len() >= 2 {
            let trim = (row.len() as f64 * trim_frac).floor() as usize;
            total += trimmed_range(row, trim);
            used += 1;
        }
    }
    // penalize shapes that push points outside the envelope support (NLE)
    let coverage = by_time.iter().map(|r| r.len()).sum::<usize>() as f64 / pts.len().max(1) as f64;
    if used == 0 {
        return f64::INFINITY;
    }
    total / used as f64 + (1.0 - coverage) * 1e3
}

fn fit_shape(fam: &EnvelopeFamily, kind: EnvelopeKind, pts: &[&FitPoint], n_times: usize, trim_frac: f64) -> f64 {
    if !kind.has_distance_scale() {
        return 1.0;
    }
    let (lo, hi) = (0.05f64.ln(), 20f64.ln());
    let n = 161;
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let spreads: Vec<f64> =
        grid.iter().map(|&lc| shape_spread(fam, kind, pts, n_times, lc.exp(), trim_frac)).collect();
    let best = spreads.iter().cloned().fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return 1.0;
    }
    let tie = 1e-9 * (1.0 + best.abs());
    let ties: Vec<usize> = (0..n).filter(|&i| spreads[i] <= best + tie).collect();
    if ties.len() > 1 {
        // a range of shapes fits equally well: prefer the one closest to 1
        let i = *ties.iter().min_by(|&&a, &&b| grid[a].abs().total_cmp(&grid[b].abs())).unwrap();
        let span = grid[*ties.last().unwrap()] - grid[ties[0]];
        if span > 0.0 && (0.0 >= grid[ties[0]] && 0.0 <= grid[*ties.last().unwrap()]) {
            return 1.0;
        }
        return grid[i].exp();
    }
    let i = ties[0];
    let a = grid[i.saturating_sub(1)];
    let b = grid[(i + 1).min(n - 1)];
    let (lc, v) = golden_max(|lc| -shape_spread(fam, kind, pts, n_times, lc.exp(), trim_frac), a, b, 1e-10);
    if -v <= best {
        lc.exp()
    } else {
        grid[i].exp()
    }
}

/// Per-time extreme log ratios, used for the k fit and the k = 0 growth test.
fn time_profile(lr: &[Option<f64>], pts: &[&FitPoint], n_times: usize, upper: bool) -> Vec<Option<f64>> {
    let mut prof: Vec<Option<f64>> = vec![None; n_times];
    for (p, v) in pts.iter().zip(lr) {
        if let Some(v) = *v {
            let slot = &mut prof[p.ti];
            *slot = Some(match *slot {
                None => v,
                Some(cur) if upper => cur.max(v),
                Some(cur) => cur.min(v),
            });
        }
    }
    prof
}

/// Smallest k ≥ 0 under which the last time's extreme is no worse than any earlier one.
fn profile_k(prof: &[Option<f64>], times: &[f64], upper: bool) -> f64 {
    let Some((last_i, Some(last))) = prof.iter().enumerate().rev().find(|(_, v)| v.is_some()).map(|(i, v)| (i, *v))
    else {
        return 0.0;
    };
    let mut k: f64 = 0.0;
    for (j, v) in prof.iter().enumerate().take(last_i) {
        if let Some(v) = v {
            let dt = times[last_i] - times[j];
            if dt > 0.0 {
                let slope = if upper { (last - v) / dt } else { (v - last) / dt };
                k = k.max(slope);
            }
        }
    }
    k
}

/// Growth of the last-time extreme beyond all earlier extremes (log scale).
fn profile_growth(prof: &[Option<f64>], upper: bool) -> f64 {
    let present: Vec<f64> = prof.iter().flatten().cloned().collect();
    if present.len() < 2 {
        return 0.0;
    }
    let last = *present.last().unwrap();
    let earlier = &present[..present.len() - 1];
    if upper {
        last - earlier.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    } else {
        earlier.iter().cloned().fold(f64::INFINITY, f64::min) - last
    }
}

/// Fit the two-sided comparison relation of `fam` to a kernel estimate.
#[allow(non_snake_case)]
pub fn fit_envelope(est: &KernelEstimate, fam: &EnvelopeFamily, opts: &FitOptions) -> Result<EnvelopeVerdict> {
    let mut distinct_t = est.t_values.clone();
    distinct_t.sort_by(|a, b| a.total_cmp(b));
    distinct_t.dedup();
    if distinct_t.len() < 3 {
        return Err(Error::InsufficientData(format!("{} distinct times (need ≥ 3)", distinct_t.len())));
    }
    if est.pairs.len() < 10 {
        return Err(Error::InsufficientData(format!("{} (x,y) pairs (need ≥ 10)", est.pairs.len())));
    }
    if est.values.iter().flatten().all(|&v| v == 0.0) {
        return Err(Error::DegenerateEstimate);
    }
    let all = collect_points(est, opts);
    let reliable: Vec<&FitPoint> = all.iter().filter(|p| p.reliable).collect();
    if reliable.len() < 3 {
        return Err(Error::InsufficientData("fewer than 3 reliable kernel values".into()));
    }
    let n_times = est.t_values.len();
    let (upper_kind, lower_kind) = fam.kind.sides();
    let (c1, c2) = match opts.fixed_shape {
        Some(shape) => shape,
        None => (
            fit_shape(fam, lower_kind, &reliable, n_times, opts.trim_fraction),
            fit_shape(fam, upper_kind, &reliable, n_times, opts.trim_fraction),
        ),
    };
    let lr_up = log_ratios(fam, upper_kind, &reliable, c2)?;
    let lr_lo = log_ratios(fam, lower_kind, &reliable, c1)?;
    let prof_up = time_profile(&lr_up, &reliable, n_times, true);
    let prof_lo = time_profile(&lr_lo, &reliable, n_times, false);
    let k = if opts.allow_k {
        profile_k(&prof_up, &est.t_values, true).max(profile_k(&prof_lo, &est.t_values, false))
    } else {
        0.0
    };
    let shift = |prof: &[Option<f64>], sign: f64| -> Vec<Option<f64>> {
        prof.iter().zip(&est.t_values).map(|(v, t)| v.map(|v| v - sign * k * t)).collect()
    };
    let growth_upper = profile_growth(&shift(&prof_up, 1.0), true);
    let decay_lower = profile_growth(&shift(&prof_lo, -1.0), false);

    let trim = (reliable.len() as f64 * opts.trim_fraction).floor() as usize;
    let up_vals: Vec<f64> =
        reliable.iter().zip(&lr_up).filter_map(|(p, v)| v.map(|v| v - k * p.t)).collect();
    let lo_vals: Vec<f64> =
        reliable.iter().zip(&lr_lo).filter_map(|(p, v)| v.map(|v| -(v + k * p.t))).collect();
    let C2 = trimmed_max(up_vals, trim).exp();
    let C1 = (-trimmed_max(lo_vals, trim)).exp();

    let mut violations = check_upper(&all, fam, upper_kind, c2, C2, k, opts)?;
    let lower_viol = check_lower(&all, fam, lower_kind, c1, C1, k, opts)?;
    let lower_bad = !lower_viol.is_empty();
    let upper_bad = !violations.is_empty();
    violations.extend(lower_viol);
    let band = opts.growth_band.ln();
    Ok(EnvelopeVerdict {
        C1,
        c1,
        C2,
        c2,
        k,
        passed_upper: !upper_bad && growth_upper <= band,
        passed_lower: !lower_bad && decay_lower <= band,
        violation_points: violations,
        growth_upper,
        decay_lower,
        points_used: reliable.len(),
    })
}

#[allow(clippy::too_many_arguments)]
fn check_upper(
    pts: &[FitPoint],
    fam: &EnvelopeFamily,
    kind: EnvelopeKind,
    c2: f64,
    big_c2: f64,
    k: f64,
    opts: &FitOptions,
) -> Result<Vec<Violation>> {
    let mut out = Vec::new();
    for p in pts {
        let bound = big_c2 * (k * p.t).exp() * fam.eval_kind(kind, p.t, p.x, p.r, c2)?;
        if p.value - p.slack > opts.band_factor * bound {
            out.push(Violation {
                t: p.t,
                x: p.x.to_vec(),
                y: p.y.to_vec(),
                ratio: p.value / bound,
                side: "upper".into(),
            });
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn check_lower(
    pts: &[FitPoint],
    fam: &EnvelopeFamily,
    kind: EnvelopeKind,
    c1: f64,
    big_c1: f64,
    k: f64,
    opts: &FitOptions,
) -> Result<Vec<Violation>> {
    let mut out = Vec::new();
    for p in pts.iter().filter(|p| p.reliable) {
        let bound = big_c1 * (-k * p.t).exp() * fam.eval_kind(kind, p.t, p.x, p.r, c1)?;
        if bound > 0.0 && (p.value + p.slack) * opts.band_factor < bound {
            out.push(Violation {
                t: p.t,
                x: p.x.to_vec(),
                y: p.y.to_vec(),
                ratio: p.value / bound,
                side: "lower".into(),
            });
        }
    }
    Ok(out)
}

/// Pointwise check of a given upper bound C2·e^{kt}·env(t, c2·d) (no growth test).
#[allow(non_snake_case)]
pub fn upper_bound_holds(est: &KernelEstimate, fam: &EnvelopeFamily, c2: f64, C2: f64, k: f64, opts: &FitOptions) -> Result<bool> {
    let pts = collect_points(est, opts);
    Ok(check_upper(&pts, fam, fam.kind.sides().0, c2, C2, k, opts)?.is_empty())
}

// ---------------------------------------------------------------------------
// JSON form

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalingSpec {
    Power {
        beta: f64,
        #[serde(default = "one")]
        coef: f64,
    },
    Table {
        points: Vec<[f64; 2]>,
    },
}

fn one() -> f64 {
    1.0
}

impl ScalingSpec {
    pub fn build(&self) -> Result<ScalingFunction> {
        match self {
            ScalingSpec::Power { beta, coef } => {
                if !(*beta > 0.0) || !(*coef > 0.0) {
                    return Err(Error::InvalidInput("power scaling needs beta > 0 and coef > 0".into()));
                }
                Ok(ScalingFunction::power_with_coef(*beta, *coef))
            }
            ScalingSpec::Table { points } => ScalingFunction::table(points.iter().map(|p| (p[0], p[1])).collect()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum TemperIndex {
    Finite(f64),
    Named(String),
}

impl TemperIndex {
    pub fn value(&self) -> Result<f64> {
        match self {
            TemperIndex::Finite(v) => Ok(*v),
            TemperIndex::Named(s) if s == "inf" => Ok(f64::INFINITY),
            TemperIndex::Named(s) => Err(Error::Config(format!("beta_temper must be a number or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub kind: EnvelopeKind,
    pub phi: ScalingSpec,
    #[serde(default)]
    pub psi: Option<ScalingSpec>,
    pub dim: usize,
    #[serde(default = "inf_temper")]
    pub beta_temper: TemperIndex,
    #[serde(default = "one")]
    pub a0: f64,
    #[serde(default = "one")]
    pub eta: f64,
    #[serde(default = "one")]
    pub eps_nle: f64,
    /// Optional tabulated V(r) replacing Lebesgue volume.
    #[serde(default)]
    pub volume_table: Option<Vec<[f64; 2]>>,
}

fn inf_temper() -> TemperIndex {
    TemperIndex::Named("inf".into())
}

impl FamilySpec {
    pub fn build(&self) -> Result<EnvelopeFamily> {
        if self.dim == 0 {
            return Err(Error::Config("envelope dim must be ≥ 1".into()));
        }
        let mut volume = VolumeFunction::lebesgue(self.dim);
        if let Some(table) = &self.volume_table {
            volume.table = Some(table.iter().map(|p| (p[0], p[1])).collect());
        }
        Ok(EnvelopeFamily {
            kind: self.kind,
            phi: self.phi.build()?,
            psi: self.psi.as_ref().map(|p| p.build()).transpose()?,
            volume,
            beta: self.beta_temper.value()?,
            a0: self.a0,
            eta: self.eta,
            eps_nle: self.eps_nle,
        })
    }
}
