//! Additive functionals along simulated paths and the Feynman-Kac weight
//! e_A(t) = exp(N^u_t + A^μ_t + A^F_t).

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kato;
use crate::numerics::{integrate_to_infinity, integrate_with_limit, interp_linear, norm};
use crate::processes::{stable_levy_constant, PathSample, ProcessKind, ProcessSpec};

/// Densities (with respect to Lebesgue measure) from a small named library.
#[derive(Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Density {
    UniformBall { c: f64, radius: f64 },
    /// c·|x|^exponent on the ball of the given radius.
    Power { c: f64, exponent: f64, radius: f64 },
    /// c·exp(−|x|²/(2σ²)), truncated at 8σ.
    GaussianBump { c: f64, sigma: f64 },
    /// c·(1+|x|)^{−power} on the ball of the given radius.
    Rational { c: f64, power: f64, radius: f64 },
    #[serde(skip)]
    Custom { f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>, support_radius: f64, radial: bool },
}

impl fmt::Debug for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Density::UniformBall { c, radius } => write!(f, "UniformBall(c={c}, radius={radius})"),
            Density::Power { c, exponent, radius } => write!(f, "Power(c={c}, exponent={exponent}, radius={radius})"),
            Density::GaussianBump { c, sigma } => write!(f, "GaussianBump(c={c}, sigma={sigma})"),
            Density::Rational { c, power, radius } => write!(f, "Rational(c={c}, power={power}, radius={radius})"),
            Density::Custom { support_radius, radial, .. } => {
                write!(f, "Custom(support_radius={support_radius}, radial={radial})")
            }
        }
    }
}

impl Density {
    pub fn uniform_ball(c: f64, radius: f64) -> Self {
        Density::UniformBall { c, radius }
    }

    pub fn custom<F>(f: F, support_radius: f64, radial: bool) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Density::Custom { f: Arc::new(f), support_radius, radial }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Density::Custom { f, support_radius, .. } => {
                if norm(x) <= *support_radius {
                    f(x)
                } else {
                    0.0
                }
            }
            _ => self.radial_value(norm(x)).unwrap_or(0.0),
        }
    }

    /// Profile as a function of |x|; `None` for non-radial custom densities.
    pub fn radial_value(&self, r: f64) -> Option<f64> {
        Some(match self {
            Density::UniformBall { c, radius } => {
                if r <= *radius {
                    *c
                } else {
                    0.0
                }
            }
            Density::Power { c, exponent, radius } => {
                if r <= *radius {
                    c * r.powf(*exponent)
                } else {
                    0.0
                }
            }
            Density::GaussianBump { c, sigma } => {
                if r <= 8.0 * sigma {
                    c * (-(r * r) / (2.0 * sigma * sigma)).exp()
                } else {
                    0.0
                }
            }
            Density::Rational { c, power, radius } => {
                if r <= *radius {
                    c * (1.0 + r).powf(-power)
                } else {
                    0.0
                }
            }
            Density::Custom { f, support_radius, radial } => {
                if !radial {
                    return None;
                }
                if r <= *support_radius {
                    f(&[r])
                } else {
                    0.0
                }
            }
        })
    }

    pub fn support_radius(&self) -> f64 {
        match self {
            Density::UniformBall { radius, .. } | Density::Power { radius, .. } | Density::Rational { radius, .. } => {
                *radius
            }
            Density::GaussianBump { sigma, .. } => 8.0 * sigma,
            Density::Custom { support_radius, .. } => *support_radius,
        }
    }

    pub fn is_radial(&self) -> bool {
        !matches!(self, Density::Custom { radial: false, .. })
    }

    /// Radii where the profile is discontinuous or singular (quadrature breakpoints).
    pub fn breakpoints(&self) -> Vec<f64> {
        vec![self.support_radius()]
    }

    pub fn scaled(&self, s: f64) -> Density {
        match self.clone() {
            Density::UniformBall { c, radius } => Density::UniformBall { c: s * c, radius },
            Density::Power { c, exponent, radius } => Density::Power { c: s * c, exponent, radius },
            Density::GaussianBump { c, sigma } => Density::GaussianBump { c: s * c, sigma },
            Density::Rational { c, power, radius } => Density::Rational { c: s * c, power, radius },
            Density::Custom { f, support_radius, radial } => {
                Density::Custom { f: Arc::new(move |x| s * f(x)), support_radius, radial }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Density::UniformBall { c, radius } => *c >= 0.0 && *radius > 0.0,
            Density::Power { c, radius, exponent } => *c >= 0.0 && *radius > 0.0 && exponent.is_finite(),
            Density::GaussianBump { c, sigma } => *c >= 0.0 && *sigma > 0.0,
            Density::Rational { c, power, radius } => *c >= 0.0 && *radius > 0.0 && power.is_finite(),
            Density::Custom { support_radius, .. } => *support_radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid density parameters: {self:?}")))
        }
    }
}

/// Signed measure μ = pos − neg given by densities.
#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub pos: Option<Density>,
    #[serde(default)]
    pub neg: Option<Density>,
}

impl MeasureSpec {
    pub fn zero() -> Self {
        MeasureSpec::default()
    }

    pub fn positive(label: &str, d: Density) -> Self {
        MeasureSpec { label: label.into(), pos: Some(d), neg: None }
    }

    pub fn negative(label: &str, d: Density) -> Self {
        MeasureSpec { label: label.into(), pos: None, neg: Some(d) }
    }

    /// c·1_{B(0,1)}: attractive well for c > 0, killing for c < 0.
    pub fn well(c: f64) -> Self {
        if c >= 0.0 {
            MeasureSpec::positive(&format!("well c={c}"), Density::uniform_ball(c, 1.0))
        } else {
            MeasureSpec::negative(&format!("well c={c}"), Density::uniform_ball(-c, 1.0))
        }
    }

    pub fn is_zero(&self) -> bool {
        self.pos.is_none() && self.neg.is_none()
    }

    pub fn density_pos(&self, x: &[f64]) -> f64 {
        self.pos.as_ref().map_or(0.0, |d| d.value(x))
    }

    pub fn density_neg(&self, x: &[f64]) -> f64 {
        self.neg.as_ref().map_or(0.0, |d| d.value(x))
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.density_pos(x) - self.density_neg(x)
    }

    pub fn support_radius(&self) -> f64 {
        let p = self.pos.as_ref().map_or(0.0, |d| d.support_radius());
        let n = self.neg.as_ref().map_or(0.0, |d| d.support_radius());
        p.max(n)
    }

    pub fn is_radial(&self) -> bool {
        self.pos.as_ref().is_none_or(|d| d.is_radial()) && self.neg.as_ref().is_none_or(|d| d.is_radial())
    }

    pub fn scaled(&self, s: f64) -> MeasureSpec {
        MeasureSpec {
            label: format!("{}×{s}", self.label),
            pos: self.pos.as_ref().map(|d| d.scaled(s)),
            neg: self.neg.as_ref().map(|d| d.scaled(s)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for d in self.pos.iter().chain(self.neg.iter()) {
            d.validate()?;
        }
        Ok(())
    }
}

/// Jump kernels F(x, y) depending on |x − y|.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum JumpKernel {
    /// eps on min_jump ≤ |x−y| < max_jump.
    Threshold {
        eps: f64,
        min_jump: f64,
        #[serde(default)]
        max_jump: Option<f64>,
    },
}

impl JumpKernel {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.eval_size(crate::numerics::dist(x, y))
    }

    pub fn eval_size(&self, z: f64) -> f64 {
        match self {
            JumpKernel::Threshold { eps, min_jump, max_jump } => {
                if z >= *min_jump && max_jump.is_none_or(|m| z < m) {
                    *eps
                } else {
                    0.0
                }
            }
        }
    }

    pub fn bound(&self) -> f64 {
        match self {
            JumpKernel::Threshold { eps, .. } => eps.abs(),
        }
    }

    /// Jump sizes where the kernel is nonzero, as [lo, hi).
    pub fn active_range(&self) -> (f64, f64) {
        match self {
            JumpKernel::Threshold { min_jump, max_jump, .. } => (*min_jump, max_jump.unwrap_or(f64::INFINITY)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            JumpKernel::Threshold { eps, min_jump, max_jump } => {
                if !(*eps >= 0.0) || !(*min_jump > 0.0) || max_jump.is_some_and(|m| m <= *min_jump) {
                    return Err(Error::InvalidInput(format!("invalid threshold kernel {self:?}")));
                }
            }
        }
        Ok(())
    }
}

/// F = F_pos − F_neg.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpPerturbation {
    #[serde(default)]
    pub pos: Option<JumpKernel>,
    #[serde(default)]
    pub neg: Option<JumpKernel>,
}

impl JumpPerturbation {
    pub fn threshold(eps: f64, min_jump: f64) -> Self {
        JumpPerturbation { pos: Some(JumpKernel::Threshold { eps, min_jump, max_jump: None }), neg: None }
    }

    pub fn bound(&self) -> f64 {
        self.pos.as_ref().map_or(0.0, |k| k.bound()) + self.neg.as_ref().map_or(0.0, |k| k.bound())
    }

    pub fn f_pos(&self, x: &[f64], y: &[f64]) -> f64 {
        self.pos.as_ref().map_or(0.0, |k| k.eval(x, y))
    }

    pub fn f_neg(&self, x: &[f64], y: &[f64]) -> f64 {
        self.neg.as_ref().map_or(0.0, |k| k.eval(x, y))
    }

    pub fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        self.f_pos(x, y) - self.f_neg(x, y)
    }

    /// F as a function of the jump size.
    pub fn value_size(&self, z: f64) -> f64 {
        self.pos.as_ref().map_or(0.0, |k| k.eval_size(z)) - self.neg.as_ref().map_or(0.0, |k| k.eval_size(z))
    }

    pub fn is_zero(&self) -> bool {
        self.bound() == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        for k in self.pos.iter().chain(self.neg.iter()) {
            k.validate()?;
        }
        Ok(())
    }
}

/// Potential-type functions u entering through the zero-energy part N^u.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialU {
    /// u = R_α ν₁ − R_α ν₂ with ν = pos − neg.
    ResolventPotential {
        nu: MeasureSpec,
        alpha: f64,
        #[serde(default)]
        cap: Option<f64>,
    },
    /// u = ℓ_β on the line (d = 1 Brownian paths only).
    EllBeta { beta: f64, eps: f64 },
}

/// Radial table of a resolvent potential with its exact continuation outside the support.
#[derive(Clone, Debug)]
pub struct PotentialField {
    pub dim: usize,
    pub kappa: f64,
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
}

impl PotentialField {
    pub fn build(density: &Density, spec: &ProcessSpec, alpha: f64, n: usize) -> Result<PotentialField> {
        if !density.is_radial() {
            return Err(Error::InvalidInput("potential tables need a radial density".into()));
        }
        let a = alpha + spec.effective_kill_rate();
        let r_s = density.support_radius();
        let radii: Vec<f64> = (0..n).map(|i| r_s * i as f64 / (n - 1) as f64).collect();
        let values = radii
            .iter()
            .map(|&r| kato::radial_potential(density, spec, alpha, r))
            .collect::<Result<Vec<f64>>>()?;
        Ok(PotentialField { dim: spec.dim, kappa: (2.0 * a).sqrt(), radii, values })
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    pub fn eval_radial(&self, r: f64) -> f64 {
        let r_s = *self.radii.last().unwrap();
        if r <= r_s {
            return interp_linear(&self.radii, &self.values, r);
        }
        let u_s = *self.values.last().unwrap();
        match self.dim {
            1 => u_s * (-self.kappa * (r - r_s)).exp(),
            _ => u_s * (r_s / r) * (-self.kappa * (r - r_s)).exp(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_radial(norm(x))
    }

    /// du/dr by central differences of the table.
    pub fn grad_radial(&self, r: f64) -> f64 {
        let h = (self.radii[1] - self.radii[0]).max(1e-6);
        if r < h {
            return (self.eval_radial(r + h) - self.eval_radial(r)) / h;
        }
        (self.eval_radial(r + h) - self.eval_radial(r - h)) / (2.0 * h)
    }
}

/// A potential u resolved against a process: tables built, ready for path evaluation.
#[derive(Clone, Debug)]
pub enum BoundPotential {
    Resolvent { nu: MeasureSpec, alpha: f64, pos: Option<PotentialField>, neg: Option<PotentialField> },
    EllBeta { beta: f64, eps: f64 },
}

impl PotentialU {
    pub fn bind(&self, spec: &ProcessSpec) -> Result<BoundPotential> {
        match self {
            PotentialU::ResolventPotential { nu, alpha, cap } => {
                nu.validate()?;
                let build = |d: &Option<Density>| -> Result<Option<PotentialField>> {
                    d.as_ref().map(|d| PotentialField::build(d, spec, *alpha, 1025)).transpose()
                };
                let pos = build(&nu.pos)?;
                let neg = build(&nu.neg)?;
                if let Some(cap) = cap {
                    for f in pos.iter().chain(neg.iter()) {
                        if f.sup() > *cap {
                            return Err(Error::UnboundedPotential { sup: f.sup(), cap: *cap });
                        }
                    }
                }
                Ok(BoundPotential::Resolvent { nu: nu.clone(), alpha: *alpha, pos, neg })
            }
            PotentialU::EllBeta { beta, eps } => {
                check_ell_beta(*beta, *eps)?;
                if spec.kind == ProcessKind::AlphaStable1d || spec.dim != 1 {
                    return Err(Error::NonBrownianPath);
                }
                Ok(BoundPotential::EllBeta { beta: *beta, eps: *eps })
            }
        }
    }
}

impl BoundPotential {
    /// u(x).
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            BoundPotential::Resolvent { pos, neg, .. } => {
                pos.as_ref().map_or(0.0, |f| f.eval(x)) - neg.as_ref().map_or(0.0, |f| f.eval(x))
            }
            BoundPotential::EllBeta { beta, .. } => ell_beta(*beta, x[0]),
        }
    }

    /// Integrand of N^u along the path: α·u − ν, or ½ ℓ_β'' cut off at eps.
    fn rate(&self, x: &[f64]) -> f64 {
        match self {
            BoundPotential::Resolvent { nu, alpha, .. } => {
                let au = if *alpha > 0.0 { alpha * self.value(x) } else { 0.0 };
                au - nu.density(x)
            }
            BoundPotential::EllBeta { beta, eps } => 0.5 * hilbert_integrand(*beta, *eps, x[0]),
        }
    }
}

fn check_ell_beta(beta: f64, eps: f64) -> Result<()> {
    if !(beta > -1.5 && beta <= 0.0) {
        return Err(Error::InvalidInput(format!("beta must lie in (−3/2, 0], got {beta}")));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("eps must be > 0, got {eps}")));
    }
    Ok(())
}

/// ℓ_β(x): x log|x| − x for β = −1, else sgn(x)|x|^{β+2}/((β+1)(β+2)).
pub fn ell_beta(beta: f64, x: f64) -> f64 {
    if beta == -1.0 {
        if x == 0.0 {
            0.0
        } else {
            x * x.abs().ln() - x
        }
    } else {
        x.signum() * x.abs().powf(beta + 2.0) / ((beta + 1.0) * (beta + 2.0))
    }
}

fn hilbert_integrand(beta: f64, eps: f64, x: f64) -> f64 {
    if x.abs() >= eps {
        x.abs().powf(beta) * x.signum()
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Path integrals

/// ∫₀^{t∧ζ} g(X_s) ds by the trapezoid rule on the path grid.
pub fn path_integral<G: Fn(&[f64]) -> f64>(path: &PathSample, t: f64, g: G) -> Result<f64> {
    Ok(path_integrals(path, &[t], g)?[0])
}

/// Trapezoid integrals of g along the path up to each of the (sorted) times.
pub fn path_integrals<G: Fn(&[f64]) -> f64>(path: &PathSample, times: &[f64], g: G) -> Result<Vec<f64>> {
    let ends = times.iter().map(|&t| path.effective_end(t)).collect::<Result<Vec<f64>>>()?;
    let mut out = vec![0.0; times.len()];
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| ends[a].total_cmp(&ends[b]));
    let mut acc = 0.0;
    let mut k = 0;
    let mut g_prev = g(&path.positions[0]);
    for i in 1..path.times.len() {
        let (t0, t1) = (path.times[i - 1], path.times[i]);
        // finish requested times inside (t0, t1]
        while k < order.len() && ends[order[k]] <= t1 {
            let e = ends[order[k]];
            if e <= t0 {
                out[order[k]] = acc;
            } else {
                let w = (e - t0) / (t1 - t0);
                let xe: Vec<f64> =
                    path.positions[i - 1].iter().zip(&path.positions[i]).map(|(a, b)| a + w * (b - a)).collect();
                out[order[k]] = acc + 0.5 * (e - t0) * (g_prev + g(&xe));
            }
            k += 1;
        }
        if k == order.len() {
            return Ok(out);
        }
        let g_next = g(&path.positions[i]);
        acc += 0.5 * (t1 - t0) * (g_prev + g_next);
        g_prev = g_next;
    }
    for &j in &order[k..] {
        out[j] = acc;
    }
    Ok(out)
}

/// (A_pos, A_neg) = (∫ density_pos(X_s) ds, ∫ density_neg(X_s) ds) up to t∧ζ.
pub fn caf_integral(path: &PathSample, mu: &MeasureSpec, t: f64) -> Result<(f64, f64)> {
    let a_pos = match &mu.pos {
        Some(d) => path_integral(path, t, |x| d.value(x))?,
        None => {
            path.effective_end(t)?;
            0.0
        }
    };
    let a_neg = match &mu.neg {
        Some(d) => path_integral(path, t, |x| d.value(x))?,
        None => 0.0,
    };
    Ok((a_pos, a_neg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JumpSum {
    pub pos: f64,
    pub neg: f64,
    /// Bound on the contribution of jumps below the recording threshold.
    pub bias_bound: f64,
}

/// Σ_{s ≤ t∧ζ} F(X_{s−}, X_s) over recorded jumps, split into positive and negative parts.
pub fn jump_functional(path: &PathSample, f: &JumpPerturbation, t: f64) -> Result<JumpSum> {
    let end = path.effective_end(t)?;
    let mut pos = 0.0;
    let mut neg = 0.0;
    for j in path.jumps.iter().take_while(|j| j.time <= end) {
        pos += f.f_pos(&j.from, &j.to);
        neg += f.f_neg(&j.from, &j.to);
    }
    let bias_bound = match path.jump_record {
        Some(rec) => {
            let c = stable_levy_constant(rec.alpha);
            let unrecorded_mass = |k: &JumpKernel| {
                let (lo, hi) = k.active_range();
                let top = hi.min(rec.cutoff);
                if top <= lo {
                    0.0
                } else {
                    2.0 * c * (lo.powf(-rec.alpha) - top.powf(-rec.alpha)) / rec.alpha
                }
            };
            let m = f.pos.as_ref().map_or(0.0, |k| k.bound() * unrecorded_mass(k))
                + f.neg.as_ref().map_or(0.0, |k| k.bound() * unrecorded_mass(k));
            end * m
        }
        None => 0.0,
    };
    Ok(JumpSum { pos, neg, bias_bound })
}

/// Zero-energy part N^u_t (α∫u(X)ds − A^ν_t for resolvent potentials; ½H^β for ℓ_β).
pub fn zero_energy(path: &PathSample, u: &BoundPotential, t: f64) -> Result<f64> {
    if let BoundPotential::EllBeta { .. } = u {
        if !path.brownian || path.dim() != 1 {
            return Err(Error::NonBrownianPath);
        }
    }
    path_integral(path, t, |x| u.rate(x))
}

/// ∫₀^t |X_s|^β sgn(X_s) 1{|X_s| ≥ eps} ds for a one-dimensional Brownian path.
pub fn hilbert_transform(path: &PathSample, beta: f64, eps: f64, t: f64) -> Result<f64> {
    if !path.brownian || path.dim() != 1 {
        return Err(Error::NonBrownianPath);
    }
    check_ell_beta(beta, eps)?;
    path_integral(path, t, |x| hilbert_integrand(beta, eps, x[0]))
}

#[derive(Clone, Debug, Serialize)]
pub struct HilbertLadder {
    pub eps: Vec<f64>,
    pub values: Vec<f64>,
    /// Value at the smallest cutoff.
    pub estimate: f64,
    /// max − min over the ladder.
    pub spread: f64,
}

/// H^β over the cutoff ladder {ε, ε/2, ε/4}; the spread is the reported error.
pub fn hilbert_ladder(path: &PathSample, beta: f64, eps: f64, t: f64) -> Result<HilbertLadder> {
    let eps_list = vec![eps, eps / 2.0, eps / 4.0];
    let values = eps_list.iter().map(|&e| hilbert_transform(path, beta, e, t)).collect::<Result<Vec<_>>>()?;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(HilbertLadder { estimate: values[2], spread: hi - lo, eps: eps_list, values })
}

/// The perturbation triple (u, μ, F), bound to a process.
#[derive(Clone, Debug, Default)]
pub struct Perturbation {
    pub u: Option<BoundPotential>,
    pub mu: MeasureSpec,
    pub jump: Option<JumpPerturbation>,
}

impl Perturbation {
    pub fn measure(mu: MeasureSpec) -> Self {
        Perturbation { u: None, mu, jump: None }
    }

    pub fn is_zero(&self) -> bool {
        self.u.is_none() && self.mu.is_zero() && self.jump.as_ref().is_none_or(|f| f.is_zero())
    }

    pub fn local_rate(&self, x: &[f64]) -> f64 {
        self.mu.density(x) + self.u.as_ref().map_or(0.0, |u| u.rate(x))
    }

    /// log e_A at each of the given times (evaluated at t∧ζ), plus the jump bias bound at the last time.
    pub fn log_weights(&self, path: &PathSample, times: &[f64]) -> Result<(Vec<f64>, f64)> {
        if let Some(BoundPotential::EllBeta { .. }) = &self.u {
            if !path.brownian || path.dim() != 1 {
                return Err(Error::NonBrownianPath);
            }
        }
        let mut logs = if self.mu.is_zero() && self.u.is_none() {
            for &t in times {
                path.effective_end(t)?;
            }
            vec![0.0; times.len()]
        } else {
            path_integrals(path, times, |x| self.local_rate(x))?
        };
        let mut bias = 0.0;
        if let Some(f) = &self.jump {
            for (l, &t) in logs.iter_mut().zip(times) {
                let js = jump_functional(path, f, t)?;
                *l += js.pos - js.neg;
                bias = f64::max(bias, js.bias_bound);
            }
        }
        Ok((logs, bias))
    }
}

/// e_A(t) = exp(N^u + A^μ + A^F) at t∧ζ.
pub fn fk_weight(
    path: &PathSample,
    u: Option<&BoundPotential>,
    mu: &MeasureSpec,
    f: Option<&JumpPerturbation>,
    t: f64,
) -> Result<f64> {
    let mut log = 0.0;
    if let Some(u) = u {
        log += zero_energy(path, u, t)?;
    }
    let (a_pos, a_neg) = caf_integral(path, mu, t)?;
    log += a_pos - a_neg;
    if let Some(f) = f {
        let js = jump_functional(path, f, t)?;
        log += js.pos - js.neg;
    }
    Ok(log.exp())
}

/// N(G)(x) = ∫ G(x, y) J(x, y) dy on the line, splitting the jump-size axis at `breaks`.
pub fn compensator_nf<G, J>(x: f64, g: G, j: J, breaks: &[f64]) -> Result<f64>
where
    G: Fn(f64, f64) -> f64,
    J: Fn(f64, f64) -> f64,
{
    let mut f = |z: f64| {
        if z == 0.0 {
            return 0.0;
        }
        let up = g(x, x + z) * j(x, x + z);
        let down = g(x, x - z) * j(x, x - z);
        up + down
    };
    let mut cuts: Vec<f64> = breaks.iter().cloned().filter(|&b| b > 0.0 && b.is_finite()).collect();
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();
    let mut total = 0.0;
    let mut err = 0.0;
    let mut a = 0.0;
    for &b in &cuts {
        let q = integrate_with_limit(&mut f, a, b, 1e-300, 1e-10, 4000);
        total += q.value;
        err += q.error;
        a = b;
    }
    let q = integrate_to_infinity(&mut f, a, 1e-300, 1e-10);
    total += q.value;
    err += q.error;
    if !total.is_finite() || err > 1e-6 * total.abs().max(1e-300) && err > 1e-14 {
        return Err(Error::QuadratureFailure { value: total, error: err });
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Discrete Stollmann–Voigt check

#[derive(Clone, Debug, Serialize)]
pub struct StollmannVoigtReport {
    /// ‖(S + αM)^{-1} D_μ 1‖_∞ on the grid.
    pub discrete_potential_sup: f64,
    /// Largest observed ∫f²dμ / E_α(f, f) over the trials.
    pub worst_ratio: f64,
    pub trials: usize,
    pub holds: bool,
}

/// On a uniform 1-d Dirichlet grid, checks ∫f²dμ ≤ ‖R_α μ‖_∞·E_α(f,f) for random grid functions,
/// with the discrete resolvent potential in place of R_α μ.
pub fn stollmann_voigt_check(
    density: &Density,
    alpha: f64,
    h: f64,
    half_width: f64,
    trials: usize,
    seed: u64,
) -> Result<StollmannVoigtReport> {
    use rand::Rng;
    if !(h > 0.0) || !(half_width > h) {
        return Err(Error::MeshTooCoarse(format!("h={h}, L={half_width}")));
    }
    let n = (2.0 * half_width / h).round() as usize - 1;
    let xs: Vec<f64> = (1..=n).map(|i| -half_width + i as f64 * h).collect();
    let mu: Vec<f64> = xs.iter().map(|&x| density.value(&[x]) * h).collect();
    // S + αM is tridiagonal: diag 1/h + αh, off −1/(2h)
    let diag = 1.0 / h + alpha * h;
    let off = -0.5 / h;
    let pot = solve_tridiagonal_const(diag, off, &mu);
    let sup = pot.iter().cloned().fold(0.0, f64::max);
    let mut rng = crate::processes::path_rng(seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let f: Vec<f64> = xs.iter().map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let mut energy = 0.0;
        for i in 0..=n {
            let a = if i == 0 { 0.0 } else { f[i - 1] };
            let b = if i == n { 0.0 } else { f[i] };
            energy += 0.5 * (b - a).powi(2) / h;
        }
        energy += alpha * h * f.iter().map(|v| v * v).sum::<f64>();
        let lhs: f64 = f.iter().zip(&mu).map(|(v, m)| v * v * m).sum();
        worst = worst.max(lhs / energy);
    }
    Ok(StollmannVoigtReport {
        discrete_potential_sup: sup,
        worst_ratio: worst,
        trials,
        holds: worst <= sup * (1.0 + 1e-12),
    })
}

fn solve_tridiagonal_const(diag: f64, off: f64, rhs: &[f64]) -> Vec<f64> {
    let n = rhs.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = off / diag;
    d[0] = rhs[0] / diag;
    for i in 1..n {
        let m = diag - off * c[i - 1];
        c[i] = off / m;
        d[i] = (rhs[i] - off * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Moments;
    use crate::processes::{sample_path, sample_path_with, PathOptions, StableMode};
    use std::f64::consts::PI;

    fn bm_path(dim: usize, x0: &[f64], horizon: f64, dt: f64, stream: u64) -> PathSample {
        sample_path_with(&ProcessSpec::brownian(dim), x0, &PathOptions::new(horizon, dt), 17, stream).unwrap()
    }

    #[test]
    fn caf_constant_density_is_time() {
        let p = bm_path(2, &[0.0, 0.0], 1.0, 0.01, 0);
        let mu = MeasureSpec::positive("const", Density::uniform_ball(1.0, 1e9));
        let (a, b) = caf_integral(&p, &mu, 1.0).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        assert_eq!(b, 0.0);
        assert_eq!(caf_integral(&p, &MeasureSpec::zero(), 1.0).unwrap(), (0.0, 0.0));
        assert!(matches!(caf_integral(&p, &mu, 2.0), Err(Error::BeyondHorizon { .. })));
    }

    #[test]
    fn caf_additive_under_shift() {
        let p = bm_path(1, &[0.2], 2.0, 0.01, 3);
        let mu = MeasureSpec::positive("g", Density::GaussianBump { c: 1.0, sigma: 0.7 });
        let s = p.times[100];
        let (whole, _) = caf_integral(&p, &mu, 2.0).unwrap();
        let (first, _) = caf_integral(&p, &mu, s).unwrap();
        let (rest, _) = caf_integral(&p.shift(s).unwrap(), &mu, 2.0 - s).unwrap();
        assert!((whole - first - rest).abs() < 1e-12);
    }

    #[test]
    fn integrals_at_many_times_match_single() {
        let p = bm_path(1, &[0.0], 2.0, 0.03, 4);
        let g = |x: &[f64]| x[0].cos();
        let times = [1.7, 0.5, 0.333, 2.0];
        let many = path_integrals(&p, &times, g).unwrap();
        for (t, v) in times.iter().zip(&many) {
            assert!((path_integral(&p, *t, g).unwrap() - v).abs() < 1e-12);
        }
        assert!(many[2] <= many[1] + 1.0 && many[3].is_finite());
    }

    #[test]
    fn caf_mean_matches_occupation_quadrature() {
        // E₀[∫₀¹ 1_B(X_s) ds] = ∫₀¹ P(|X_s| ≤ 1) ds, with |X_s|²/s ~ χ²₃
        let chi3_cdf = |x: f64| libm::erf((x / 2.0).sqrt()) - (2.0 * x / PI).sqrt() * (-x / 2.0).exp();
        let oracle = crate::numerics::integrate(|s| chi3_cdf(1.0 / s), 1e-12, 1.0, 1e-14, 1e-12).value;
        let mu = MeasureSpec::well(1.0);
        let mut m = Moments::default();
        for i in 0..20_000 {
            let p = bm_path(3, &[0.0; 3], 1.0, 0.005, i);
            m.push(caf_integral(&p, &mu, 1.0).unwrap().0);
        }
        // trapezoid bias at this step is well under the MC error
        assert!((m.mean() - oracle).abs() < 4.0 * m.ci95() / 1.96 + 5e-3, "{} vs {oracle}", m.mean());
    }

    #[test]
    fn cauchy_jump_count() {
        let spec = ProcessSpec::stable(1.0).with_cutoff(0.5);
        let f = JumpPerturbation::threshold(0.3, 1.0);
        let mut m = Moments::default();
        for i in 0..40_000 {
            let p = sample_path_with(&spec, &[0.0], &PathOptions::new(1.0, 0.25), 8, i).unwrap();
            let js = jump_functional(&p, &f, 1.0).unwrap();
            assert_eq!(js.bias_bound, 0.0);
            m.push(js.pos / 0.3);
        }
        assert!((m.mean() - 2.0 / PI).abs() < 0.03 * 2.0 / PI, "{}", m.mean());
    }

    #[test]
    fn jumps_below_cutoff_only_report_bias() {
        let spec = ProcessSpec::stable(1.0).with_cutoff(0.5);
        let f = JumpPerturbation { pos: Some(JumpKernel::Threshold { eps: 1.0, min_jump: 0.1, max_jump: Some(0.4) }), neg: None };
        let p = sample_path_with(&spec, &[0.0], &PathOptions::new(1.0, 0.25), 8, 0).unwrap();
        let js = jump_functional(&p, &f, 1.0).unwrap();
        assert_eq!((js.pos, js.neg), (0.0, 0.0));
        let expected = 2.0 / PI * (1.0 / 0.1 - 1.0 / 0.4);
        assert!((js.bias_bound - expected).abs() < 1e-12);
        let zero = jump_functional(&p, &JumpPerturbation::default(), 1.0).unwrap();
        assert_eq!((zero.pos, zero.neg), (0.0, 0.0));
    }

    #[test]
    fn compensator_oracles() {
        let j = |x: f64, y: f64| 1.0 / (PI * (x - y).powi(2));
        let ind = |x: f64, y: f64| if (x - y).abs() >= 1.0 { 1.0 } else { 0.0 };
        assert_eq!(compensator_nf(0.0, |_, _| 0.0, j, &[1.0]).unwrap(), 0.0);
        for x in [-3.0, 0.0, 2.5] {
            let v = compensator_nf(x, ind, j, &[1.0]).unwrap();
            assert!((v - 2.0 / PI).abs() < 1e-9, "{v}");
        }
        let eps: f64 = 0.1;
        let g = |x: f64, y: f64| (eps * ind(x, y)).exp() - 1.0;
        let v = compensator_nf(0.0, g, j, &[1.0]).unwrap();
        assert!((v - (eps.exp() - 1.0) * 2.0 / PI).abs() < 1e-9);
        assert!((v - 0.06696).abs() < 5e-5);
    }

    #[test]
    fn zero_energy_green_potential_is_minus_caf() {
        let spec = ProcessSpec::brownian(3);
        let u = PotentialU::ResolventPotential { nu: MeasureSpec::well(1.0), alpha: 0.0, cap: None }.bind(&spec).unwrap();
        let p = bm_path(3, &[0.0; 3], 1.0, 0.01, 1);
        let n = zero_energy(&p, &u, 1.0).unwrap();
        let (a, _) = caf_integral(&p, &MeasureSpec::well(1.0), 1.0).unwrap();
        assert!((n + a).abs() < 1e-12);
        let zero = PotentialU::ResolventPotential { nu: MeasureSpec::zero(), alpha: 0.5, cap: None }.bind(&spec).unwrap();
        assert_eq!(zero_energy(&p, &zero, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn potential_cap_enforced() {
        let spec = ProcessSpec::brownian(3);
        let u = PotentialU::ResolventPotential { nu: MeasureSpec::well(1.0), alpha: 0.0, cap: Some(0.5) };
        assert!(matches!(u.bind(&spec), Err(Error::UnboundedPotential { .. })));
    }

    #[test]
    fn telescoping_resolvent_potential() {
        // u(X_t) − u(X_0) − N_t is a martingale
        let spec = ProcessSpec::brownian(3);
        let nu = MeasureSpec::positive("bump", Density::GaussianBump { c: 1.0, sigma: 0.5 });
        let u = PotentialU::ResolventPotential { nu, alpha: 1.0, cap: None }.bind(&spec).unwrap();
        let mut m = Moments::default();
        let x0 = [0.3, 0.0, 0.0];
        for i in 0..20_000 {
            let p = bm_path(3, &x0, 1.0, 0.005, 100 + i);
            let end = p.positions.last().unwrap().clone();
            m.push(u.value(&end) - u.value(&x0) - zero_energy(&p, &u, 1.0).unwrap());
        }
        assert!(m.mean().abs() < 4.0 * m.ci95() / 1.96 + 2e-3, "{} ± {}", m.mean(), m.ci95());
    }

    #[test]
    fn telescoping_ell_beta() {
        let spec = ProcessSpec::brownian(1);
        let u = PotentialU::EllBeta { beta: -0.5, eps: 1e-3 }.bind(&spec).unwrap();
        let mut m = Moments::default();
        for i in 0..20_000 {
            let p = bm_path(1, &[0.7], 1.0, 0.002, 500 + i);
            let end = p.positions.last().unwrap()[0];
            m.push(ell_beta(-0.5, end) - ell_beta(-0.5, 0.7) - zero_energy(&p, &u, 1.0).unwrap());
        }
        assert!(m.mean().abs() < 4.0 * m.ci95() / 1.96 + 3e-3, "{} ± {}", m.mean(), m.ci95());
    }

    #[test]
    fn hilbert_without_cancellation() {
        let mut p = bm_path(1, &[5.0], 1.0, 0.01, 2);
        for x in p.positions.iter_mut() {
            x[0] = x[0].abs().max(2.0);
        }
        let h = hilbert_transform(&p, -0.5, 0.01, 1.0).unwrap();
        let plain = path_integral(&p, 1.0, |x| x[0].powf(-0.5)).unwrap();
        assert_eq!(h, plain);
        let r = hilbert_transform(&p.reflect(), -0.5, 0.01, 1.0).unwrap();
        assert_eq!(r, -h);
    }

    #[test]
    fn hilbert_rejects_jump_paths() {
        let p = sample_path(&ProcessSpec::stable(1.0), &[0.0], 1.0, 0.1, 1).unwrap();
        assert!(matches!(hilbert_transform(&p, -1.0, 0.1, 1.0), Err(Error::NonBrownianPath)));
        let q = bm_path(1, &[0.0], 1.0, 0.1, 0);
        assert!(matches!(hilbert_transform(&q, 0.5, 0.1, 1.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn hilbert_principal_value_symmetric() {
        let mut m3 = Moments::default();
        let mut vals = Vec::new();
        for i in 0..4000 {
            let p = bm_path(1, &[0.0], 1.0, 0.001, 900 + i);
            let h = hilbert_transform(&p, -1.0, 1e-3, 1.0).unwrap();
            vals.push(h);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        for v in &vals {
            m3.push(((v - mean) / sd).powi(3));
        }
        assert!(m3.mean().abs() < 4.0 * m3.ci95() / 1.96, "skew {} ± {}", m3.mean(), m3.ci95());
    }

    #[test]
    fn weights_trivial_cases() {
        let p = bm_path(3, &[0.0; 3], 1.0, 0.01, 5);
        assert_eq!(fk_weight(&p, None, &MeasureSpec::zero(), None, 1.0).unwrap(), 1.0);
        let w = fk_weight(&p, None, &MeasureSpec::well(-2.0), None, 1.0).unwrap();
        assert!(w <= 1.0 && w > 0.0);
    }

    #[test]
    fn weight_multiplicative_under_shift() {
        let p = bm_path(1, &[0.0], 2.0, 0.01, 6);
        let mu = MeasureSpec::positive("g", Density::GaussianBump { c: 0.8, sigma: 1.0 });
        let s = p.times[80];
        let whole = fk_weight(&p, None, &mu, None, 2.0).unwrap();
        let first = fk_weight(&p, None, &mu, None, s).unwrap();
        let rest = fk_weight(&p.shift(s).unwrap(), None, &mu, None, 2.0 - s).unwrap();
        assert!((whole / (first * rest) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_weights_agree_with_fk_weight() {
        let spec = ProcessSpec::stable(1.0).with_cutoff(0.5);
        let mut opts = PathOptions::new(2.0, 0.1);
        opts.stable_mode = StableMode::Decomposed;
        opts.stops = vec![0.5, 1.0];
        let p = sample_path_with(&spec, &[0.0], &opts, 2, 3).unwrap();
        let pert = Perturbation {
            u: None,
            mu: MeasureSpec::positive("g", Density::GaussianBump { c: 0.5, sigma: 1.0 }),
            jump: Some(JumpPerturbation::threshold(0.1, 1.0)),
        };
        let (logs, _) = pert.log_weights(&p, &[0.5, 1.0, 2.0]).unwrap();
        for (t, l) in [0.5, 1.0, 2.0].iter().zip(&logs) {
            let w = fk_weight(&p, None, &pert.mu, pert.jump.as_ref(), *t).unwrap();
            assert!((w.ln() - l).abs() < 1e-12);
        }
    }

    #[test]
    fn stollmann_voigt_holds() {
        let rep = stollmann_voigt_check(&Density::uniform_ball(3.0, 1.0), 1.0, 0.02, 6.0, 20, 4).unwrap();
        assert!(rep.holds, "{rep:?}");
        // continuous R_1 1_{[−1,1]}·3 at 0 = 3(1 − e^{−√2})
        let cont = 3.0 * (1.0 - (-(2f64).sqrt()).exp());
        assert!((rep.discrete_potential_sup / cont - 1.0).abs() < 0.02, "{}", rep.discrete_potential_sup);
    }

    #[test]
    fn measure_json() {
        let json = r#"{"label":"w","pos":{"uniform_ball":{"c":0.5,"radius":1.0}},"neg":{"gaussian_bump":{"c":1,"sigma":0.3}}}"#;
        let m: MeasureSpec = serde_json::from_str(json).unwrap();
        assert_eq!(m.density_pos(&[0.2, 0.0, 0.0]), 0.5);
        assert!((m.density_neg(&[0.0]) - 1.0).abs() < 1e-15);
        let f: JumpPerturbation = serde_json::from_str(r#"{"pos":{"threshold":{"eps":0.1,"min_jump":1.0}}}"#).unwrap();
        assert_eq!(f.value(&[0.0], &[2.0]), 0.1);
        assert_eq!(f.value(&[0.0], &[0.5]), 0.0);
        assert!(serde_json::from_str::<MeasureSpec>(r#"{"pos":{"cube":{"c":1}}}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn caf_parts_monotone(seed in 0u64..1000, t1 in 0.0f64..1.0, dt in 0.0f64..1.0) {
                let p = bm_path(1, &[0.0], 2.0, 0.02, seed);
                let mu = MeasureSpec {
                    label: String::new(),
                    pos: Some(Density::GaussianBump { c: 1.0, sigma: 0.5 }),
                    neg: Some(Density::uniform_ball(2.0, 0.3)),
                };
                let (a1, b1) = caf_integral(&p, &mu, t1).unwrap();
                let (a2, b2) = caf_integral(&p, &mu, t1 + dt).unwrap();
                prop_assert!(a1 >= 0.0 && b1 >= 0.0);
                prop_assert!(a2 >= a1 - 1e-15 && b2 >= b1 - 1e-15);
            }

            #[test]
            fn jump_sums_monotone(seed in 0u64..500, t1 in 0.0f64..1.0, dt in 0.0f64..1.0) {
                let spec = ProcessSpec::stable(1.0).with_cutoff(0.3);
                let p = sample_path_with(&spec, &[0.0], &PathOptions::new(2.0, 0.2), 1, seed).unwrap();
                let f = JumpPerturbation {
                    pos: Some(JumpKernel::Threshold { eps: 0.2, min_jump: 1.0, max_jump: None }),
                    neg: Some(JumpKernel::Threshold { eps: 0.1, min_jump: 0.3, max_jump: Some(1.0) }),
                };
                let a = jump_functional(&p, &f, t1).unwrap();
                let b = jump_functional(&p, &f, t1 + dt).unwrap();
                prop_assert!(b.pos >= a.pos && b.neg >= a.neg);
            }
        }
    }
}
