//! Class membership of measures through their resolvent potentials
//! R_α ν(x) = ∫ R_α(x, y) ν(dy): Dynkin, Green-bounded, Kato and extended
//! Kato, plus a tightness curve for the tails of the Green potential.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{Density, MeasureSpec};
use crate::numerics::{gauss_legendre, integrate, integrate_graded, norm, Quad};
use crate::processes::{resolvent_radial, ProcessKind, ProcessSpec};

const REL_TOL: f64 = 1e-7;

/// ∫_{between} f, graded toward the `singular` endpoint (which may be either end).
fn graded(mut f: impl FnMut(f64) -> f64, singular: f64, other: f64) -> Result<Quad> {
    let sign = if other >= singular { 1.0 } else { -1.0 };
    integrate_graded(|s| f(singular + sign * s), 0.0, (other - singular).abs(), REL_TOL)
}

fn profile(d: &Density) -> Result<impl Fn(f64) -> f64 + '_> {
    if !d.is_radial() {
        return Err(Error::InvalidInput("radial potential needs a radial density".into()));
    }
    Ok(move |r: f64| d.radial_value(r).unwrap_or(0.0))
}

/// Radial route: R_α ρ at |x| = r for radial densities, d = 3 Brownian (closed
/// radial kernels) or d = 1 (line integral against the process kernel).
pub fn radial_potential(density: &Density, spec: &ProcessSpec, alpha: f64, r: f64) -> Result<f64> {
    match (spec.kind, spec.dim) {
        (ProcessKind::Brownian | ProcessKind::BrownianKilledAlpha, 3) => radial_potential_3d(density, spec, alpha, r),
        (_, 1) => line_potential(density, spec, alpha, r),
        (_, d) => Err(Error::UnsupportedDim(d)),
    }
}

fn radial_potential_3d(density: &Density, spec: &ProcessSpec, alpha: f64, r: f64) -> Result<f64> {
    let rho = profile(density)?;
    let r_s = density.support_radius();
    let a = alpha + spec.effective_kill_rate();
    let kappa = (2.0 * a).sqrt();
    let inner_end = r.min(r_s);
    if a == 0.0 {
        // 2∫ ρ(s) s² / max(r, s) ds
        let inner = if inner_end > 0.0 { graded(|s| rho(s) * s * s, 0.0, inner_end)?.value / r } else { 0.0 };
        let outer = if r < r_s {
            if r == 0.0 {
                graded(|s| rho(s) * s, 0.0, r_s)?.value
            } else {
                graded(|s| rho(s) * s, r, r_s)?.value
            }
        } else {
            0.0
        };
        return Ok(2.0 * (inner + outer));
    }
    if r == 0.0 {
        return Ok(2.0 * graded(|s| rho(s) * s * (-kappa * s).exp(), 0.0, r_s)?.value);
    }
    // s < r: e^{−κr}·2 sinh(κs)/(κr)·sρ;  s > r: e^{−κs}·2 sinh(κr)/(κr)·sρ
    let inner = if inner_end > 0.0 {
        graded(|s| s * rho(s) * 2.0 * (kappa * s).sinh() * (-kappa * r).exp() / (kappa * r), 0.0, inner_end)?.value
    } else {
        0.0
    };
    let outer = if r < r_s {
        let shr = 2.0 * (kappa * r).sinh() / (kappa * r);
        graded(|s| s * rho(s) * shr * (-kappa * s).exp(), r, r_s)?.value
    } else {
        0.0
    };
    Ok(inner + outer)
}

fn line_potential(density: &Density, spec: &ProcessSpec, alpha: f64, x: f64) -> Result<f64> {
    let r_s = density.support_radius();
    let rho = |y: f64| density.value(&[y]);
    let mut cuts = vec![-r_s, 0.0, r_s];
    if x.abs() < r_s {
        cuts.push(x);
    }
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();
    let kernel = |y: f64| -> f64 {
        match resolvent_radial(spec, alpha, (x - y).abs()) {
            Ok(v) => v,
            Err(_) => f64::NAN,
        }
    };
    // surface recurrence before integrating
    resolvent_radial(spec, alpha, 1.0)?;
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let singular = if a == x || a == 0.0 { a } else { b };
        let other = if singular == a { b } else { a };
        let q = graded(|y| rho(y) * kernel(y), singular, other)?;
        if !q.value.is_finite() {
            return Err(Error::DivergentPotential);
        }
        total += q.value;
    }
    Ok(total)
}

/// Polar route around x: ∫₀^∞ R_α(ρ) ∫_{S^{d−1}} density(x + ρω) dω ρ^{d−1} dρ,
/// adaptive in the angle, graded in ρ toward the kernel singularity. d = 2, 3.
pub fn polar_potential(density: &Density, spec: &ProcessSpec, alpha: f64, x: &[f64]) -> Result<f64> {
    let d = spec.dim;
    if !(d == 2 || d == 3) || x.len() != d {
        return Err(Error::UnsupportedDim(d));
    }
    resolvent_radial(spec, alpha, 1.0)?;
    let reach = norm(x) + density.support_radius();
    let radial = density.is_radial();
    let xn = norm(x);
    let (gl_x, gl_w) = gauss_legendre(24);
    let angular = |rho: f64| -> f64 {
        if radial {
            // axial symmetry about x: |x + ρω|² = |x|² + ρ² + 2|x|ρ cosθ
            let g = |c: f64| {
                let r2 = (xn * xn + rho * rho + 2.0 * xn * rho * c).max(0.0);
                density.radial_value(r2.sqrt()).unwrap_or(0.0)
            };
            // cosθ at which |x + ρω| meets a breakpoint shell
            let mut cs: Vec<f64> = density
                .breakpoints()
                .iter()
                .filter(|_| xn > 0.0)
                .map(|&b| (b * b - xn * xn - rho * rho) / (2.0 * xn * rho))
                .filter(|c| c.abs() < 1.0)
                .collect();
            cs.extend([-1.0, 1.0]);
            cs.sort_by(|a, b| a.total_cmp(b));
            let mut acc = 0.0;
            for w in cs.windows(2) {
                acc += if d == 3 {
                    // ∫ dω = 2π ∫_{−1}^{1} d(cosθ)
                    2.0 * std::f64::consts::PI * integrate(g, w[0], w[1], 1e-13, 1e-10).value
                } else {
                    2.0 * integrate(|th: f64| g(th.cos()), w[1].acos(), w[0].acos(), 1e-13, 1e-10).value
                };
            }
            acc
        } else if d == 2 {
            integrate(
                |th: f64| density.value(&[x[0] + rho * th.cos(), x[1] + rho * th.sin()]),
                0.0,
                2.0 * std::f64::consts::PI,
                1e-13,
                1e-9,
            )
            .value
        } else {
            let mut acc = 0.0;
            for (c, w) in gl_x.iter().zip(&gl_w) {
                let s = (1.0 - c * c).max(0.0).sqrt();
                acc += w * integrate(
                    |ph: f64| density.value(&[x[0] + rho * s * ph.cos(), x[1] + rho * s * ph.sin(), x[2] + rho * c]),
                    0.0,
                    2.0 * std::f64::consts::PI,
                    1e-13,
                    1e-9,
                )
                .value;
            }
            acc
        }
    };
    let f = |rho: f64| {
        if rho == 0.0 {
            return 0.0;
        }
        let k = resolvent_radial(spec, alpha, rho).unwrap_or(f64::NAN);
        k * angular(rho) * rho.powi(d as i32 - 1)
    };
    // the angular average has kinks where the sphere around x crosses a breakpoint shell
    let mut cuts: Vec<f64> = density
        .breakpoints()
        .iter()
        .flat_map(|&b| [(b - xn).abs(), b + xn])
        .filter(|&c| c > 0.0 && c < reach)
        .collect();
    cuts.push(reach);
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();
    let mut total = graded(f, 0.0, cuts[0])?.value;
    for w in cuts.windows(2) {
        total += integrate(f, w[0], w[1], 1e-300, 1e-9).value;
    }
    if !total.is_finite() {
        return Err(Error::DivergentPotential);
    }
    Ok(total)
}

/// R_α of a single nonnegative density at x.
pub fn density_potential(density: &Density, spec: &ProcessSpec, alpha: f64, x: &[f64]) -> Result<f64> {
    spec.validate()?;
    if !(alpha >= 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be ≥ 0, got {alpha}")));
    }
    match (spec.kind, spec.dim) {
        (ProcessKind::Brownian | ProcessKind::BrownianKilledAlpha, 3) if density.is_radial() => {
            radial_potential_3d(density, spec, alpha, norm(x))
        }
        (_, 1) => line_potential(density, spec, alpha, x[0]),
        (ProcessKind::Brownian | ProcessKind::BrownianKilledAlpha, 2 | 3) => polar_potential(density, spec, alpha, x),
        (_, d) => Err(Error::UnsupportedDim(d)),
    }
}

/// R_α ν(x) for the signed measure ν = pos − neg. Divergence is reported as
/// `DivergentPotential`; recurrence at α = 0 as `DivergentResolvent`.
pub fn resolvent_potential(nu: &MeasureSpec, alpha: f64, x: &[f64], spec: &ProcessSpec) -> Result<f64> {
    let p = nu.pos.as_ref().map(|d| density_potential(d, spec, alpha, x)).transpose()?.unwrap_or(0.0);
    let n = nu.neg.as_ref().map(|d| density_potential(d, spec, alpha, x)).transpose()?.unwrap_or(0.0);
    Ok(p - n)
}

/// R_α |ν|(x), with any divergence mapped to +∞.
pub fn total_potential_or_inf(nu: &MeasureSpec, alpha: f64, x: &[f64], spec: &ProcessSpec) -> f64 {
    let part = |d: &Option<Density>| match d {
        None => 0.0,
        Some(d) => density_potential(d, spec, alpha, x).unwrap_or(f64::INFINITY),
    };
    part(&nu.pos) + part(&nu.neg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriState {
    Yes,
    No,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassFlags {
    pub dynkin: TriState,
    pub green_bounded: TriState,
    pub kato: TriState,
    pub extended_kato: TriState,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassReport {
    /// (α, sup over the grid of R_α|ν|); +∞ is serialized as null.
    pub sup_r_alpha: Vec<(f64, f64)>,
    pub green_sup: f64,
    pub limit_estimate: f64,
    pub flags: ClassFlags,
    pub grid_points: usize,
}

fn sup_over(nu: &MeasureSpec, spec: &ProcessSpec, alpha: f64, grid: &[Vec<f64>]) -> f64 {
    grid.par_iter().map(|x| total_potential_or_inf(nu, alpha, x, spec)).reduce(|| 0.0, f64::max)
}

/// Limit of the tail of a decreasing sequence on a geometric ladder: Aitken's
/// extrapolation of the last three values, or the last value when the
/// decrements do not shrink.
pub fn extrapolate_limit(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if values.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    if n < 3 {
        return values[n - 1];
    }
    let (s1, s2, s3) = (values[n - 3], values[n - 2], values[n - 1]);
    let (d1, d2) = (s2 - s1, s3 - s2);
    if d1 >= 0.0 || d2 > 0.0 {
        return s3;
    }
    let ratio = d2 / d1;
    if !(ratio < 1.0) {
        return s3;
    }
    (s3 + d2 * ratio / (1.0 - ratio)).max(0.0)
}

pub fn classify(nu: &MeasureSpec, spec: &ProcessSpec, alpha_ladder: &[f64], grid: &[Vec<f64>]) -> Result<ClassReport> {
    spec.validate()?;
    nu.validate()?;
    if alpha_ladder.is_empty() || alpha_ladder.windows(2).any(|w| w[1] <= w[0]) || alpha_ladder[0] <= 0.0 {
        return Err(Error::InvalidInput("alpha ladder must be positive and increasing".into()));
    }
    let mut pts: Vec<Vec<f64>> = grid.to_vec();
    pts.push(vec![0.0; spec.dim]);
    let sups: Vec<(f64, f64)> = alpha_ladder.iter().map(|&a| (a, sup_over(nu, spec, a, &pts))).collect();
    let green_sup = if spec.is_transient() { sup_over(nu, spec, 0.0, &pts) } else { f64::INFINITY };
    let values: Vec<f64> = sups.iter().map(|p| p.1).collect();
    let initial = values[0];
    let limit = extrapolate_limit(&values);

    let dynkin = if initial.is_finite() { TriState::Yes } else { TriState::No };
    let green_bounded = if green_sup.is_finite() { TriState::Yes } else { TriState::No };
    let kato = if initial == 0.0 || limit < 1e-3 * initial {
        TriState::Yes
    } else if !limit.is_finite() || limit > 0.1 * initial {
        TriState::No
    } else {
        TriState::Inconclusive
    };
    let extended_kato = if limit < 0.5 {
        TriState::Yes
    } else if limit > 2.0 {
        TriState::No
    } else {
        TriState::Inconclusive
    };
    let mut flags = ClassFlags { dynkin, green_bounded, kato, extended_kato };
    enforce_lattice(&mut flags);
    Ok(ClassReport { sup_r_alpha: sups, green_sup, limit_estimate: limit, flags, grid_points: pts.len() })
}

/// Kato ⊂ extended Kato ⊂ Dynkin, Green-bounded ⊂ Dynkin.
fn enforce_lattice(f: &mut ClassFlags) {
    if f.kato == TriState::Yes {
        f.extended_kato = TriState::Yes;
    }
    if f.extended_kato == TriState::Yes || f.green_bounded == TriState::Yes {
        f.dynkin = TriState::Yes;
    }
    if f.dynkin == TriState::No {
        f.kato = TriState::No;
        f.extended_kato = TriState::No;
        f.green_bounded = TriState::No;
    }
    if f.extended_kato == TriState::No {
        f.kato = TriState::No;
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TightnessReport {
    /// (K, sup_x ∫_{|y| ≥ K} R(x, y) ν(dy))
    pub curve: Vec<(f64, f64)>,
    pub tight: bool,
}

/// Green potential of ν restricted to {|y| ≥ K}, maximized over the grid, for each K.
pub fn green_tight_check(nu: &MeasureSpec, spec: &ProcessSpec, radii: &[f64], grid: &[Vec<f64>]) -> Result<TightnessReport> {
    spec.validate()?;
    if !spec.is_transient() {
        return Err(Error::RecurrentProcess);
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("radii must be increasing".into()));
    }
    let restrict = |d: &Option<Density>, k: f64| -> Option<Density> {
        d.as_ref().map(|d| {
            let d = d.clone();
            let radial = d.is_radial();
            let sr = d.support_radius();
            Density::custom(
                move |x: &[f64]| {
                    let r = norm(x);
                    if r >= k {
                        if radial {
                            d.radial_value(r).unwrap_or(0.0)
                        } else {
                            d.value(x)
                        }
                    } else {
                        0.0
                    }
                },
                sr,
                radial,
            )
        })
    };
    let mut curve = Vec::with_capacity(radii.len());
    for &k in radii {
        let value = if k >= nu.support_radius() {
            0.0
        } else {
            let tail = MeasureSpec { label: String::new(), pos: restrict(&nu.pos, k), neg: restrict(&nu.neg, k) };
            let mut pts: Vec<Vec<f64>> = grid.to_vec();
            pts.push(vec![0.0; spec.dim]);
            let mut on_shell = vec![0.0; spec.dim];
            on_shell[0] = k;
            pts.push(on_shell);
            sup_over(&tail, spec, 0.0, &pts)
        };
        curve.push((k, value));
    }
    let first = curve.first().map_or(0.0, |c| c.1);
    let last = curve.last().map_or(0.0, |c| c.1);
    Ok(TightnessReport { tight: last <= 1e-3 * first || last == 0.0, curve })
}
