//! Finite-difference discretization of the perturbed form
//! Q_α(f, f) = E(f, f) + E(u, f²) − H(f, f) + α(f, f) and its spectral
//! function λ^{Q_α}(ν) = inf { Q_α(f, f) : ∫ f² dν = 1 } as the smallest
//! eigenvalue of the pencil (A, B).
//!
//! Three layouts are supported: a radial line for radial d = 3 Brownian data
//! (substitution g = r·f), a Cartesian box in d ≤ 3 for Brownian motion, and
//! a dense Cartesian line for the 1-d stable process.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{compensator_nf, BoundPotential, Density, JumpPerturbation, MeasureSpec, PotentialU};
use crate::linalg::SymBand;
use crate::numerics::integrate;
use crate::processes::{stable_levy_constant, ProcessKind, ProcessSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshMode {
    Radial,
    Cartesian,
}

fn default_mode() -> MeshMode {
    MeshMode::Cartesian
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mesh {
    pub h: f64,
    /// Box half-width L; defaults to max(3·support radius, 8).
    #[serde(default)]
    pub half_width: Option<f64>,
    #[serde(default = "default_mode")]
    pub mode: MeshMode,
}

impl Mesh {
    pub fn radial(h: f64, half_width: f64) -> Self {
        Mesh { h, half_width: Some(half_width), mode: MeshMode::Radial }
    }

    pub fn cartesian(h: f64, half_width: f64) -> Self {
        Mesh { h, half_width: Some(half_width), mode: MeshMode::Cartesian }
    }

    pub fn width_for(&self, support: f64) -> f64 {
        self.half_width.unwrap_or((3.0 * support).max(8.0))
    }
}

#[derive(Clone, Debug)]
pub struct FormDiscretization {
    pub mode: MeshMode,
    pub dim: usize,
    pub h: f64,
    pub half_width: f64,
    /// Node coordinates (the radius alone in radial mode).
    pub nodes: Vec<Vec<f64>>,
    pub stiffness: SymBand,
    pub drift_coupling: Vec<f64>,
    pub h_matrix: SymBand,
    pub mass_m: Vec<f64>,
    /// Node masses of μ̄₁.
    pub mass_nu: Vec<f64>,
    pub jump_tail_bound: f64,
    pub per_axis: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectralResult {
    pub lambda: f64,
    pub eigvec: Vec<f64>,
    pub alpha: f64,
    pub mesh: (f64, f64),
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Sampling points per axis for Cartesian cell averages.
fn subcells(dim: usize) -> usize {
    match dim {
        1 => 0,
        2 => 8,
        _ => 4,
    }
}

impl FormDiscretization {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Lumped node masses ∫_{cell} ρ (with the 4π shell factor in radial mode).
    pub fn node_masses(&self, d: &Density) -> Result<Vec<f64>> {
        let h = self.h;
        let cuts = d.breakpoints();
        let cell_1d = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| -> f64 {
            let mut pts = vec![a];
            pts.extend(cuts.iter().flat_map(|&c| [c, -c]).filter(|&c| c > a && c < b));
            pts.push(b);
            pts.sort_by(|x, y| x.total_cmp(y));
            pts.windows(2).map(|w| integrate(f, w[0], w[1], 1e-300, 1e-12).value).sum()
        };
        match self.mode {
            MeshMode::Radial => {
                if !d.is_radial() {
                    return Err(Error::UnsupportedProcess("radial mode needs radial densities".into()));
                }
                let f = |r: f64| d.radial_value(r).unwrap_or(0.0);
                Ok(self
                    .nodes
                    .par_iter()
                    .map(|x| 4.0 * PI * cell_1d(&f, x[0] - 0.5 * h, x[0] + 0.5 * h))
                    .collect())
            }
            MeshMode::Cartesian if self.dim == 1 => {
                let f = |x: f64| d.value(&[x]);
                Ok(self.nodes.par_iter().map(|x| cell_1d(&f, x[0] - 0.5 * h, x[0] + 0.5 * h)).collect())
            }
            MeshMode::Cartesian => {
                let s = subcells(self.dim);
                let offs: Vec<f64> = (0..s).map(|k| ((k as f64 + 0.5) / s as f64 - 0.5) * h).collect();
                let count = s.pow(self.dim as u32);
                let vol = h.powi(self.dim as i32);
                let reach = d.support_radius() + h;
                Ok(self
                    .nodes
                    .par_iter()
                    .map(|x| {
                        if crate::numerics::norm(x) > reach + h * self.dim as f64 {
                            return 0.0;
                        }
                        let mut acc = 0.0;
                        let mut y = x.clone();
                        for flat in 0..count {
                            let mut q = flat;
                            for k in 0..self.dim {
                                y[k] = x[k] + offs[q % s];
                                q /= s;
                            }
                            acc += d.value(&y);
                        }
                        acc * vol / count as f64
                    })
                    .collect())
            }
        }
    }

    /// (|ν| masses, signed masses) of a measure.
    pub fn measure_masses(&self, nu: &MeasureSpec) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.len();
        let p = nu.pos.as_ref().map(|d| self.node_masses(d)).transpose()?.unwrap_or_else(|| vec![0.0; n]);
        let m = nu.neg.as_ref().map(|d| self.node_masses(d)).transpose()?.unwrap_or_else(|| vec![0.0; n]);
        let total = p.iter().zip(&m).map(|(a, b)| a + b).collect();
        let signed = p.iter().zip(&m).map(|(a, b)| a - b).collect();
        Ok((total, signed))
    }

    /// A = stiffness + drift − H + α·mass_m.
    pub fn form_matrix(&self, alpha: f64) -> SymBand {
        let mut a = self.stiffness.combine(1.0, &self.h_matrix, -1.0);
        a.add_diag(&self.drift_coupling, 1.0);
        a.add_diag(&self.mass_m, alpha);
        a
    }

    /// Q_α(f, f) for a grid vector.
    pub fn q_alpha(&self, f: &[f64], alpha: f64) -> f64 {
        self.form_matrix(alpha).quad_form(f)
    }

    /// E₁(f, f) = E(f, f) + (f, f).
    pub fn e_one(&self, f: &[f64]) -> f64 {
        self.stiffness.quad_form(f) + f.iter().zip(&self.mass_m).map(|(v, m)| v * v * m).sum::<f64>()
    }
}

fn support_of(mu: &MeasureSpec, u: Option<&PotentialU>) -> f64 {
    let us = match u {
        Some(PotentialU::ResolventPotential { nu, .. }) => nu.support_radius(),
        _ => 0.0,
    };
    mu.support_radius().max(us)
}

pub fn assemble(
    spec: &ProcessSpec,
    u: Option<&PotentialU>,
    mu: &MeasureSpec,
    jump: Option<&JumpPerturbation>,
    mesh: &Mesh,
) -> Result<FormDiscretization> {
    spec.validate()?;
    mu.validate()?;
    let support = support_of(mu, u);
    let h = mesh.h;
    let l = mesh.width_for(support);
    if !(h > 0.0) || !(l > h) {
        return Err(Error::MeshTooCoarse(format!("h={h}, L={l}")));
    }
    if support > 0.0 && h > support / 8.0 {
        return Err(Error::MeshTooCoarse(format!("h={h} leaves fewer than 8 cells across radius {support}")));
    }
    if l < 3.0 * support {
        return Err(Error::MeshTooCoarse(format!("L={l} below 3×{support}")));
    }
    let m = (l / h).round() as usize;
    if ((m as f64) * h - l).abs() > 1e-9 * l {
        return Err(Error::InvalidInput(format!("L={l} is not a multiple of h={h}")));
    }
    let stable = spec.kind == ProcessKind::AlphaStable1d;
    if jump.is_some_and(|f| !f.is_zero()) && !stable {
        return Err(Error::UnsupportedProcess("jump perturbations need a jump process".into()));
    }
    let bound_u = u.map(|u| u.bind(spec)).transpose()?;
    let kill = spec.effective_kill_rate();
    match mesh.mode {
        MeshMode::Radial => {
            if spec.dim != 3 || stable || !mu.is_radial() {
                return Err(Error::UnsupportedProcess("radial mode covers radial data for d = 3 Brownian motion".into()));
            }
            if matches!(bound_u, Some(BoundPotential::EllBeta { .. })) {
                return Err(Error::UnsupportedProcess("ℓ_β lives on the line".into()));
            }
            assemble_radial(mu, bound_u.as_ref(), h, l, m, kill)
        }
        MeshMode::Cartesian if stable => {
            if bound_u.is_some() {
                return Err(Error::UnsupportedProcess("u is not supported for the stable process".into()));
            }
            assemble_stable(spec, mu, jump, h, l, m, kill)
        }
        MeshMode::Cartesian => assemble_cartesian(spec.dim, mu, bound_u.as_ref(), h, l, m, kill),
    }
}

fn finish(mut disc: FormDiscretization, mu: &MeasureSpec, extra_nu: Vec<f64>, jump_off: Option<SymBand>) -> Result<FormDiscretization> {
    let p = mu.pos.as_ref().map(|d| disc.node_masses(d)).transpose()?.unwrap_or_else(|| vec![0.0; disc.len()]);
    let q = mu.neg.as_ref().map(|d| disc.node_masses(d)).transpose()?.unwrap_or_else(|| vec![0.0; disc.len()]);
    let signed: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a - b).collect();
    let mut hm = SymBand::diagonal(&signed);
    if let Some(off) = jump_off {
        hm = off.combine(1.0, &hm, 1.0);
    }
    disc.h_matrix = hm;
    disc.mass_nu = p.iter().zip(&extra_nu).map(|(a, b)| a + b).collect();
    Ok(disc)
}

fn assemble_radial(
    mu: &MeasureSpec,
    u: Option<&BoundPotential>,
    h: f64,
    l: f64,
    m: usize,
    kill: f64,
) -> Result<FormDiscretization> {
    let n = m - 1;
    let nodes: Vec<Vec<f64>> = (1..=n).map(|i| vec![i as f64 * h]).collect();
    // E(f, f) = 2π ∫ g'² dr with g = r f
    let c = 2.0 * PI / h;
    let mut k = SymBand::zeros(n, 1);
    for i in 0..n {
        k.add(i, i, 2.0 * c);
        if i > 0 {
            k.add(i, i - 1, -c);
        }
    }
    let mass_m = vec![4.0 * PI * h; n];
    k.add_diag(&mass_m, kill);
    let mut drift = vec![0.0; n];
    let mut grad_nu = vec![0.0; n];
    if let Some(u) = u {
        let uv = |r: f64| u.value(&[r, 0.0, 0.0]);
        for (i, x) in nodes.iter().enumerate() {
            let r = x[0];
            let ru = |s: f64| s * uv(s);
            let lap = (ru(r + h) - 2.0 * ru(r) + ru(r - h)) / (h * h * r);
            drift[i] = 4.0 * PI * h * (-0.5 * lap);
            let du = (uv(r + h) - uv(r - h)) / (2.0 * h);
            grad_nu[i] = 4.0 * PI * h * 0.5 * du * du;
        }
    }
    let disc = FormDiscretization {
        mode: MeshMode::Radial,
        dim: 3,
        h,
        half_width: l,
        nodes,
        stiffness: k,
        drift_coupling: drift,
        h_matrix: SymBand::zeros(n, 0),
        mass_m,
        mass_nu: vec![],
        jump_tail_bound: 0.0,
        per_axis: n,
    };
    finish(disc, mu, grad_nu, None)
}

fn assemble_cartesian(
    dim: usize,
    mu: &MeasureSpec,
    u: Option<&BoundPotential>,
    h: f64,
    l: f64,
    m: usize,
    kill: f64,
) -> Result<FormDiscretization> {
    if !(1..=3).contains(&dim) {
        return Err(Error::UnsupportedDim(dim));
    }
    if matches!(u, Some(BoundPotential::EllBeta { .. })) && dim != 1 {
        return Err(Error::UnsupportedProcess("ℓ_β lives on the line".into()));
    }
    let per = 2 * m - 1;
    let n = per.pow(dim as u32);
    let bw = per.pow(dim as u32 - 1);
    if (n as f64) * (bw as f64).powi(2) > 2e10 {
        return Err(Error::InvalidInput(format!("mesh with {n} nodes and band {bw} is too large")));
    }
    let coord = |k: usize| -l + (k + 1) as f64 * h;
    let nodes: Vec<Vec<f64>> = (0..n)
        .map(|flat| {
            let mut q = flat;
            (0..dim)
                .map(|_| {
                    let c = coord(q % per);
                    q /= per;
                    c
                })
                .collect()
        })
        .collect();
    let ce = 0.5 * h.powi(dim as i32 - 2);
    let mut k = SymBand::zeros(n, bw);
    let stride = |axis: usize| per.pow(axis as u32);
    for i in 0..n {
        k.add(i, i, 2.0 * dim as f64 * ce);
        for axis in 0..dim {
            let pos = (i / stride(axis)) % per;
            if pos > 0 {
                k.add(i, i - stride(axis), -ce);
            }
        }
    }
    let vol = h.powi(dim as i32);
    let mass_m = vec![vol; n];
    k.add_diag(&mass_m, kill);
    let mut drift = vec![0.0; n];
    let mut grad_nu = vec![0.0; n];
    if let Some(u) = u {
        let vals: Vec<(f64, f64)> = nodes
            .par_iter()
            .map(|x| {
                let ui = u.value(x);
                let mut d = 0.0;
                let mut g2 = 0.0;
                let mut y = x.clone();
                for axis in 0..dim {
                    y[axis] = x[axis] + h;
                    let up = u.value(&y);
                    y[axis] = x[axis] - h;
                    let dn = u.value(&y);
                    y[axis] = x[axis];
                    // discrete product rule: E(u, fg) = Σ_i f_i g_i Σ_j c_e (u_i − u_j)
                    d += ce * (2.0 * ui - up - dn);
                    g2 += 0.5 * (((up - ui) / h).powi(2) + ((ui - dn) / h).powi(2));
                }
                (d, vol * 0.5 * g2)
            })
            .collect();
        for (i, (d, g)) in vals.into_iter().enumerate() {
            drift[i] = d;
            grad_nu[i] = g;
        }
    }
    let disc = FormDiscretization {
        mode: MeshMode::Cartesian,
        dim,
        h,
        half_width: l,
        nodes,
        stiffness: k,
        drift_coupling: drift,
        h_matrix: SymBand::zeros(n, 0),
        mass_m,
        mass_nu: vec![],
        jump_tail_bound: 0.0,
        per_axis: per,
    };
    finish(disc, mu, grad_nu, None)
}

fn assemble_stable(
    spec: &ProcessSpec,
    mu: &MeasureSpec,
    jump: Option<&JumpPerturbation>,
    h: f64,
    l: f64,
    m: usize,
    kill: f64,
) -> Result<FormDiscretization> {
    let a = spec.stable_index().ok_or_else(|| Error::UnsupportedProcess("missing stable index".into()))?;
    let c = stable_levy_constant(a);
    let n = 2 * m - 1;
    let nodes: Vec<Vec<f64>> = (1..=n).map(|i| vec![-l + i as f64 * h]).collect();
    let mut k = SymBand::zeros(n, n - 1);
    // E = ½ Σ_{i≠j} W_ij (f_i − f_j)² + Σ_i κ_i f_i², W_ij = c h² |x_i − x_j|^{−1−α}
    let local = 2.0 * c * (0.5 * h).powf(2.0 - a) / (2.0 - a) / (2.0 * h);
    let w = |dist: usize| c * h * h * (dist as f64 * h).powf(-1.0 - a) + if dist == 1 { local } else { 0.0 };
    let jump = jump.filter(|f| !f.is_zero());
    let mut hm = jump.map(|_| SymBand::zeros(n, n - 1));
    for i in 0..n {
        let xi = nodes[i][0];
        let exterior = h * c / a * ((l - xi).powf(-a) + (l + xi).powf(-a));
        let mut row = exterior;
        for j in 0..n {
            if j != i {
                row += w(i.abs_diff(j));
            }
        }
        k.add(i, i, row);
        for j in 0..i {
            let wij = w(i - j);
            k.add(i, j, -wij);
            if let (Some(f), Some(hm)) = (jump, hm.as_mut()) {
                let z = (i - j) as f64 * h;
                let e = f.value_size(z).exp() - 1.0;
                if e != 0.0 {
                    hm.add(i, j, e * c * h * h * z.powf(-1.0 - a));
                }
            }
        }
    }
    let mass_m = vec![h; n];
    k.add_diag(&mass_m, kill);
    let mut extra = vec![0.0; n];
    if let Some(f) = jump {
        // N(e^F − F − 1 + F₁)(x) does not depend on x for kernels of the jump size
        let mut breaks = Vec::new();
        for kern in f.pos.iter().chain(f.neg.iter()) {
            let (lo, hi) = kern.active_range();
            breaks.push(lo);
            breaks.push(hi);
        }
        let g = |x: f64, y: f64| {
            let z = (x - y).abs();
            let fv = f.value_size(z);
            let f1 = f.pos.as_ref().map_or(0.0, |k| k.eval_size(z));
            fv.exp() - fv - 1.0 + f1
        };
        let jd = |x: f64, y: f64| c * (x - y).abs().powf(-1.0 - a);
        let density = compensator_nf(0.0, g, jd, &breaks)?;
        extra = vec![density * h; n];
    }
    let disc = FormDiscretization {
        mode: MeshMode::Cartesian,
        dim: 1,
        h,
        half_width: l,
        nodes,
        stiffness: k,
        drift_coupling: vec![0.0; n],
        h_matrix: SymBand::zeros(n, 0),
        mass_m,
        mass_nu: vec![],
        jump_tail_bound: 2.0 * c * (2.0 * l).powf(-a) / a,
        per_axis: n,
    };
    finish(disc, mu, extra, hm)
}

/// Smallest eigenpair of A f = λ B f for diagonal B ≥ 0: bisection on the
/// inertia of A − σB, then inverse iteration shifted just below λ.
pub fn smallest_eigenpair(a: &SymBand, b: &[f64]) -> Result<(f64, Vec<f64>, f64, bool, usize)> {
    if !b.iter().any(|&v| v > 0.0) || b.iter().any(|&v| v < 0.0) {
        return Err(Error::SingularPencil);
    }
    let shifted = |sigma: f64| {
        let mut s = a.clone();
        s.add_diag(b, -sigma);
        s
    };
    let count = |sigma: f64| -> usize {
        let mut s = sigma;
        for _ in 0..4 {
            if let Ok(f) = shifted(s).ldlt() {
                return f.negatives();
            }
            s += 1e-9 * s.abs().max(1e-12);
        }
        usize::MAX
    };
    let mut lo = -1.0;
    let mut hi = None;
    let mut tries = 0;
    while count(lo) > 0 {
        hi = Some(lo);
        lo *= 4.0;
        tries += 1;
        if tries > 40 {
            return Err(Error::SingularPencil);
        }
    }
    let mut hi = match hi {
        Some(h) => h,
        None => {
            let mut h: f64 = 1.0;
            let mut t = 0;
            while count(h) == 0 {
                h *= 4.0;
                t += 1;
                if t > 40 {
                    return Err(Error::SingularPencil);
                }
            }
            h
        }
    };
    for _ in 0..200 {
        if hi - lo <= 1e-5 * lo.abs().max(hi.abs()).max(1e-3) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if count(mid) == 0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma = lo - 1e-6 * lo.abs().max(1e-3);
    let fac = shifted(sigma).ldlt()?;
    let norm_a = a.norm_inf();
    let bnorm = |x: &[f64]| x.iter().zip(b).map(|(v, w)| v * v * w).sum::<f64>().sqrt();
    let mut x: Vec<f64> = b.iter().map(|&w| if w > 0.0 { 1.0 } else { 0.0 }).collect();
    let s = bnorm(&x);
    x.iter_mut().for_each(|v| *v /= s);
    let mut lambda = a.quad_form(&x);
    let mut residual = f64::INFINITY;
    for it in 1..=500 {
        let bx: Vec<f64> = x.iter().zip(b).map(|(v, w)| v * w).collect();
        let mut y = fac.solve(&bx);
        let s = bnorm(&y);
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::NonConvergence { residual });
        }
        y.iter_mut().for_each(|v| *v /= s);
        x = y;
        let ax = a.matvec(&x);
        lambda = ax.iter().zip(&x).map(|(p, q)| p * q).sum();
        let r2: f64 = ax.iter().zip(&x).zip(b).map(|((p, q), w)| (p - lambda * w * q).powi(2)).sum();
        let x2: f64 = x.iter().map(|v| v * v).sum();
        residual = (r2 / x2).sqrt();
        if residual < 1e-10 * norm_a {
            return Ok((lambda, x, residual, true, it));
        }
    }
    Ok((lambda, x, residual, false, 500))
}

/// λ^{Q_α}(ν) for ν given by its node masses.
pub fn lambda_q(disc: &FormDiscretization, nu: &[f64], alpha: f64) -> Result<SpectralResult> {
    if nu.len() != disc.len() {
        return Err(Error::InvalidInput("ν masses do not match the mesh".into()));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be ≥ 0, got {alpha}")));
    }
    let a = disc.form_matrix(alpha);
    let (lambda, eigvec, residual, converged, iterations) = smallest_eigenpair(&a, nu)?;
    Ok(SpectralResult { lambda, eigvec, alpha, mesh: (disc.h, disc.half_width), residual, converged, iterations })
}

/// inf ½∫|∇f|² + ∫f² dμ̂⁻ subject to ∫f² dμ̂⁺ = 1, on the mesh of `disc`.
pub fn takeda_lambda(mu_plus: &MeasureSpec, mu_minus: &MeasureSpec, disc: &FormDiscretization) -> Result<f64> {
    let (plus, _) = disc.measure_masses(mu_plus)?;
    let (minus, _) = disc.measure_masses(mu_minus)?;
    let mut a = disc.stiffness.clone();
    a.add_diag(&minus, 1.0);
    Ok(smallest_eigenpair(&a, &plus)?.0)
}

/// A complete spectral problem, as read from configuration files.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralProblem {
    pub process: ProcessSpec,
    #[serde(default)]
    pub u: Option<PotentialU>,
    #[serde(default)]
    pub mu: MeasureSpec,
    #[serde(default)]
    pub jump: Option<JumpPerturbation>,
    /// Constraint measure; μ̄₁ when absent.
    #[serde(default)]
    pub nu: Option<MeasureSpec>,
    #[serde(default)]
    pub alpha: f64,
}

impl SpectralProblem {
    pub fn well(c: f64) -> Self {
        SpectralProblem {
            process: ProcessSpec::brownian(3),
            u: None,
            mu: MeasureSpec::well(c),
            jump: None,
            nu: None,
            alpha: 0.0,
        }
    }

    pub fn discretize(&self, mesh: &Mesh) -> Result<FormDiscretization> {
        assemble(&self.process, self.u.as_ref(), &self.mu, self.jump.as_ref(), mesh)
    }

    pub fn solve(&self, mesh: &Mesh) -> Result<SpectralResult> {
        let disc = self.discretize(mesh)?;
        let nu = match &self.nu {
            Some(nu) => disc.measure_masses(nu)?.0,
            None => disc.mass_nu.clone(),
        };
        lambda_q(&disc, &nu, self.alpha)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeshRow {
    pub h: f64,
    pub half_width: f64,
    pub lambda: f64,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeshStudy {
    pub rows: Vec<MeshRow>,
    pub extrapolated: f64,
    pub observed_order: Option<f64>,
    pub monotone: bool,
    /// λ(L) − λ(2L) on the finest mesh.
    pub box_bias: f64,
}

/// Richardson extrapolation from three values on meshes h, h/2, h/4; falls
/// back to order 2 when the observed order is not defined.
pub fn richardson(l1: f64, l2: f64, l3: f64) -> (f64, Option<f64>) {
    let (d1, d2) = (l2 - l1, l3 - l2);
    let order = if d2 != 0.0 && d1 / d2 > 1.0 { Some((d1 / d2).log2()) } else { None };
    let p = order.unwrap_or(2.0);
    (l3 + d2 / (2f64.powf(p) - 1.0), order)
}

pub fn mesh_study(problem: &SpectralProblem, meshes: &[Mesh]) -> Result<MeshStudy> {
    if meshes.len() < 3 {
        return Err(Error::InvalidInput("mesh study needs at least three meshes".into()));
    }
    for w in meshes.windows(2) {
        if (w[0].h / w[1].h - 2.0).abs() > 1e-9 || w[0].half_width != w[1].half_width || w[0].mode != w[1].mode {
            return Err(Error::InvalidInput("meshes must halve h at a fixed box".into()));
        }
    }
    let rows: Vec<MeshRow> = meshes
        .iter()
        .map(|m| {
            let r = problem.solve(m)?;
            Ok(MeshRow { h: m.h, half_width: r.mesh.1, lambda: r.lambda, residual: r.residual, converged: r.converged })
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    let (extrapolated, observed_order) = richardson(rows[n - 3].lambda, rows[n - 2].lambda, rows[n - 1].lambda);
    let diffs: Vec<f64> = rows.windows(2).map(|w| w[1].lambda - w[0].lambda).collect();
    let monotone = diffs.iter().all(|&d| d >= 0.0) || diffs.iter().all(|&d| d <= 0.0);
    let last = meshes[n - 1];
    let wide = Mesh { half_width: Some(2.0 * rows[n - 1].half_width), ..last };
    let box_bias = rows[n - 1].lambda - problem.solve(&wide)?.lambda;
    Ok(MeshStudy { rows, extrapolated, observed_order, monotone, box_bias })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoxStudy {
    /// (L, h-extrapolated λ)
    pub per_width: Vec<(f64, f64)>,
    pub extrapolated: f64,
}

/// Neville extrapolation of samples (x_k, y_k) to x = 0.
pub fn extrapolate_to_zero(xs: &[f64], ys: &[f64]) -> f64 {
    let mut p = ys.to_vec();
    let n = xs.len();
    for k in 1..n {
        for i in 0..n - k {
            p[i] = (xs[i + k] * p[i] - xs[i] * p[i + 1]) / (xs[i + k] - xs[i]);
        }
    }
    p[0]
}

/// λ extrapolated in h (Richardson) on each box, then in 1/L (polynomial).
pub fn box_study(problem: &SpectralProblem, hs: &[f64], widths: &[f64], mode: MeshMode) -> Result<BoxStudy> {
    let per_width: Vec<(f64, f64)> = widths
        .iter()
        .map(|&l| {
            let meshes: Vec<Mesh> = hs.iter().map(|&h| Mesh { h, half_width: Some(l), mode }).collect();
            let vals: Vec<f64> = meshes.iter().map(|m| problem.solve(m).map(|r| r.lambda)).collect::<Result<_>>()?;
            let n = vals.len();
            let v = if n >= 3 { richardson(vals[n - 3], vals[n - 2], vals[n - 1]).0 } else { vals[n - 1] };
            Ok((l, v))
        })
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = per_width.iter().map(|p| 1.0 / p.0).collect();
    let ys: Vec<f64> = per_width.iter().map(|p| p.1).collect();
    Ok(BoxStudy { extrapolated: extrapolate_to_zero(&xs, &ys), per_width })
}

/// Critical depth c of the radial well c·ρ(r) (support [0, R]) for ½Δ in d = 3:
/// the zero-energy solution g = r f of g'' = −2cρg, g(0) = 0, g'(0) = 1, meets
/// the exterior condition g'(R) = 0 (whole space) or g(R) + (L − R)g'(R) = 0
/// (Dirichlet box of radius L). RK4 shooting with bisection in c.
pub fn critical_depth_shooting(profile: impl Fn(f64) -> f64, support: f64, box_radius: Option<f64>) -> f64 {
    let steps = 4000;
    let hstep = support / steps as f64;
    let exterior = |c: f64| {
        let mut g = 0.0;
        let mut dg = 1.0;
        let rhs = |r: f64, g: f64| -2.0 * c * profile(r) * g;
        for k in 0..steps {
            let r = k as f64 * hstep;
            let (k1g, k1d) = (dg, rhs(r, g));
            let (k2g, k2d) = (dg + 0.5 * hstep * k1d, rhs(r + 0.5 * hstep, g + 0.5 * hstep * k1g));
            let (k3g, k3d) = (dg + 0.5 * hstep * k2d, rhs(r + 0.5 * hstep, g + 0.5 * hstep * k2g));
            let (k4g, k4d) = (dg + hstep * k3d, rhs(r + hstep, g + hstep * k3g));
            g += hstep / 6.0 * (k1g + 2.0 * k2g + 2.0 * k3g + k4g);
            dg += hstep / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d);
        }
        match box_radius {
            Some(l) => g + (l - support) * dg,
            None => dg,
        }
    };
    let mut lo = 0.0;
    let mut hi = 0.05;
    while exterior(hi) > 0.0 {
        lo = hi;
        hi *= 1.5;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if exterior(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
