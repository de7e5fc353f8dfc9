//! Acceptance criteria. Each test prints one `criterion N PASS|FAIL` line
//! (visible with `--nocapture`) and then asserts.

use std::f64::consts::PI;
use std::time::Instant;

use fklab::envelopes::{
    check_scaling, fit_envelope, phi_big, EnvelopeFamily, EnvelopeKind, FitOptions, ScalingFunction,
};
use fklab::experiment::{render, run, ExperimentConfig, Outcome};
use fklab::feynman_kac::{
    fk_kernel, fk_semigroup, gauge, gauge_identity_residual, resolvent_a, GaugeOptions, GaugeVerdict, KernelOptions,
    McOptions, ResolventOptions, ResolventVerdict,
};
use fklab::functionals::{stollmann_voigt_check, Density, JumpPerturbation, MeasureSpec, Perturbation};
use fklab::kato::{classify, TriState};
use fklab::numerics::{dist, integrate};
use fklab::processes::{gaussian_density, resolvent_kernel, transition_density, ProcessSpec};
use fklab::spectral::{
    assemble, box_study, critical_depth_shooting, lambda_q, takeda_lambda, Mesh, MeshMode, SpectralProblem,
};
use rand::{Rng, SeedableRng};

const LADDER: [f64; 5] = [1.0, 4.0, 16.0, 64.0, 256.0];

fn verdict_line(n: u32, name: &str, pass: bool, start: Instant, detail: &str) {
    println!(
        "criterion {n} {} ({:.1}s): {name}: {detail}",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
}

fn axis_points(dim: usize, radii: &[f64]) -> Vec<Vec<f64>> {
    radii
        .iter()
        .map(|&r| {
            let mut p = vec![0.0; dim];
            p[0] = r;
            p
        })
        .collect()
}

fn all_pairs(points: &[Vec<f64>]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    for i in 0..points.len() {
        for j in i..points.len() {
            out.push((points[i].clone(), points[j].clone()));
        }
    }
    out
}

fn well(c: f64) -> Perturbation {
    Perturbation::measure(MeasureSpec::well(c))
}

#[test]
fn criterion_01_identity_perturbation_kernel() {
    let start = Instant::now();
    let spec = ProcessSpec::brownian(1);
    let pairs = all_pairs(&axis_points(1, &[-1.0, 0.0, 0.5, 1.0, 2.0]));
    assert_eq!(pairs.len(), 15);
    let times = [0.5, 1.0, 2.0];
    let opts = KernelOptions::new(McOptions::new(1_000_000, 101, 1e-3));
    let est = fk_kernel(&spec, &Perturbation::default(), &times, &pairs, &opts).unwrap();
    let mut worst: f64 = 0.0;
    let mut misses = 0;
    for (ti, &t) in est.t_values.iter().enumerate() {
        for (pi, (x, y)) in est.pairs.iter().enumerate() {
            let exact = gaussian_density(1, t, dist(x, y));
            let tol = 3.0 * est.ci_half_width[ti][pi] + est.bias[ti][pi];
            let err = (est.values[ti][pi] - exact).abs();
            worst = worst.max(err / tol);
            if err > tol {
                misses += 1;
            }
        }
    }
    let pass = misses == 0 && start.elapsed().as_secs() <= 120;
    verdict_line(
        1,
        "identity perturbation kernel",
        pass,
        start,
        &format!("max |err|/(3CI+bias) = {worst:.3}, misses {misses}/45, bandwidth {:.4}", est.bandwidth),
    );
    assert!(pass);
}

#[test]
fn criterion_02_phi_closed_form() {
    let start = Instant::now();
    let phi = ScalingFunction::power(2.0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut worst_h: f64 = 0.0;
    for _ in 0..100 {
        let s: f64 = rng.random::<f64>() * 10.0;
        let t: f64 = 0.01 + rng.random::<f64>() * 10.0;
        let v = phi_big(s, t, &phi).unwrap();
        let exact = s * s / (4.0 * t);
        worst = worst.max((v - exact).abs() / exact.max(1.0));
        let h = t * phi_big(s / t, 1.0, &phi).unwrap();
        worst_h = worst_h.max((v - h).abs() / v.abs().max(1.0));
    }
    let pass = worst <= 1e-8 && worst_h <= 1e-8 && start.elapsed().as_secs_f64() <= 1.0;
    verdict_line(2, "Φ closed form and homogeneity", pass, start, &format!("closed form {worst:.2e}, homogeneity {worst_h:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_03_spectral_critical_point() {
    let start = Instant::now();
    let hs = [1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0];
    let widths = [8.0, 16.0, 32.0];
    let lambda = |c: f64| box_study(&SpectralProblem::well(c), &hs, &widths, MeshMode::Radial).unwrap().extrapolated;
    let (mut lo, mut hi) = (0.5, 3.0);
    assert!(lambda(lo) > 0.0 && lambda(hi) < 0.0);
    while hi - lo > 1e-4 {
        let mid = 0.5 * (lo + hi);
        if lambda(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c_star = 0.5 * (lo + hi);
    let oracle = critical_depth_shooting(|_| 1.0, 1.0, None);
    let rel = (c_star / (PI * PI / 8.0) - 1.0).abs();
    let pass = rel <= 0.02 && (oracle - PI * PI / 8.0).abs() < 1e-8 && start.elapsed().as_secs() <= 30;
    verdict_line(3, "critical depth of the ball well", pass, start, &format!("c* = {c_star:.5}, shooting {oracle:.5}, rel {rel:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_04_takeda_equivalence() {
    let start = Instant::now();
    let bm3 = ProcessSpec::brownian(3);
    let cases: Vec<(ProcessSpec, MeasureSpec, Mesh)> = vec![
        (bm3.clone(), MeasureSpec::well(0.5), Mesh::radial(1.0 / 64.0, 8.0)),
        (bm3.clone(), MeasureSpec::well(2.0), Mesh::radial(1.0 / 64.0, 8.0)),
        (
            bm3.clone(),
            MeasureSpec {
                label: "signed".into(),
                pos: Some(Density::uniform_ball(1.0, 1.0)),
                neg: Some(Density::GaussianBump { c: 0.3, sigma: 0.5 }),
            },
            Mesh::radial(1.0 / 64.0, 12.0),
        ),
        (
            bm3.clone(),
            MeasureSpec::positive("rational", Density::Rational { c: 1.5, power: 4.0, radius: 4.0 }),
            Mesh::radial(1.0 / 32.0, 16.0),
        ),
        (
            ProcessSpec::killed(1, 0.5),
            MeasureSpec::positive("bump", Density::GaussianBump { c: 2.0, sigma: 0.4 }),
            Mesh::cartesian(1.0 / 64.0, 12.0),
        ),
    ];
    let mut worst: f64 = 0.0;
    for (spec, mu, mesh) in &cases {
        let disc = assemble(spec, None, mu, None, mesh).unwrap();
        let lq = lambda_q(&disc, &disc.mass_nu, 0.0).unwrap();
        let plus = MeasureSpec { pos: mu.pos.clone(), ..MeasureSpec::zero() };
        let minus = MeasureSpec { pos: mu.neg.clone(), ..MeasureSpec::zero() };
        let t = takeda_lambda(&plus, &minus, &disc).unwrap();
        worst = worst.max((lq.lambda - (t - 1.0)).abs());
    }
    let pass = worst <= 1e-10 && start.elapsed().as_secs() <= 10;
    verdict_line(4, "λ^Q = takeda − 1", pass, start, &format!("max deviation {worst:.2e} over {} measures", cases.len()));
    assert!(pass);
}

#[test]
fn criterion_05_subcriticality_concordance() {
    let start = Instant::now();
    let spec = ProcessSpec::brownian(3);
    let n = 100_000;
    let mut inconclusive = 0;
    let mut disagreements = 0;
    let mut rows = Vec::new();
    for (i, &c) in [0.25, 0.5, 0.75, 1.0, 1.5, 2.0].iter().enumerate() {
        let lam = SpectralProblem::well(c).solve(&Mesh::radial(1.0 / 128.0, 32.0)).unwrap().lambda;
        let pert = well(c);
        let g = gauge(&spec, &pert, &[vec![0.0; 3]], 200.0, &GaugeOptions::new(n, 500 + i as u64)).unwrap();
        let ro = ResolventOptions::new(McOptions::new(n, 600 + i as u64, 2e-3).focused(1.5, 4.0));
        let r = resolvent_a(&spec, &pert, 0.0, &[0.0; 3], &[vec![0.5, 0.0, 0.0]], &ro).unwrap();
        let votes = [
            Some(lam > 0.0),
            match g.verdict {
                GaugeVerdict::Bounded => Some(true),
                GaugeVerdict::Divergent => Some(false),
                GaugeVerdict::Inconclusive => None,
            },
            match r.verdict {
                ResolventVerdict::Finite => Some(true),
                ResolventVerdict::Divergent => Some(false),
                ResolventVerdict::Inconclusive => None,
            },
        ];
        if votes.iter().any(|v| v.is_none()) {
            inconclusive += 1;
        } else if votes.iter().any(|v| *v != votes[0]) {
            disagreements += 1;
        }
        rows.push(format!(
            "c={c}: λ={lam:.3} gauge={:?} (θ={:.2}) resolvent={:?} (trend {:.2})",
            g.verdict,
            g.tail_rate.unwrap_or(f64::NAN),
            r.verdict,
            r.trend_ratios[0]
        ));
    }
    let pass = disagreements == 0 && inconclusive <= 1 && start.elapsed().as_secs() <= 1200;
    for row in &rows {
        println!("  {row}");
    }
    verdict_line(
        5,
        "λ sign, gauge and resolvent agree",
        pass,
        start,
        &format!("{disagreements} disagreements, {inconclusive} inconclusive of 6"),
    );
    assert!(pass);
}

/// h(r) for ½Δ + c·1_{B(0,1)} in three dimensions.
fn well_gauge(c: f64, r: f64) -> f64 {
    let k = (2.0 * c).sqrt();
    if r < 1e-12 {
        1.0 / k.cos()
    } else if r <= 1.0 {
        (k * r).sin() / (r * k * k.cos())
    } else {
        1.0 + ((k.tan() / k) - 1.0) / r
    }
}

#[test]
fn criterion_06_gauge_identity() {
    let start = Instant::now();
    let spec = ProcessSpec::brownian(3);
    let mu = MeasureSpec::well(0.5);
    let points = axis_points(3, &(0..8).map(|i| i as f64 / 7.0).collect::<Vec<_>>());
    let g = gauge(&spec, &Perturbation::measure(mu.clone()), &points, 200.0, &GaugeOptions::new(100_000, 61)).unwrap();
    let res = gauge_identity_residual(&g, &mu, &spec).unwrap();
    let closed = points.iter().zip(&g.h_hat).map(|(p, h)| (h - well_gauge(0.5, p[0])).abs()).fold(0.0, f64::max);
    let pass = res.max_ratio < 3.0 && start.elapsed().as_secs() <= 300;
    verdict_line(
        6,
        "gauge identity h = R(hμ̄) + 1",
        pass,
        start,
        &format!(
            "max residual/error = {:.3}, max residual {:.2e}, max |ĥ − h| {closed:.2e}",
            res.max_ratio, res.max_residual
        ),
    );
    assert!(pass);
}

fn stability_config(c: f64, n: u64, with_gauge: bool) -> ExperimentConfig {
    let mut v = serde_json::json!({
        "schema": 1,
        "mode": "stability",
        "process": {"kind": "brownian", "dim": 3},
        "mu": {"label": "well", "pos": {"uniform_ball": {"c": c, "radius": 1.0}}},
        "envelope": {"kind": "gaussian_UE", "phi": {"form": "power", "beta": 2.0}, "dim": 3},
        "n_paths": n,
        "seed": 7,
        "t_values": [0.5, 1.0, 2.0, 4.0],
        "pairs": {"points": [[0, 0, 0], [0.5, 0, 0], [1, 0, 0], [0, 1.5, 0], [2, 0, 0]]},
        "simulation": {"focus_radius": 3.0, "max_dt": 0.1},
        "output_dir": "unused"
    });
    if with_gauge {
        v["gauge"] = serde_json::json!({"truncation_radius": 200.0});
    }
    ExperimentConfig::from_json(&v.to_string()).unwrap()
}

#[test]
fn criterion_07_stability_verdict() {
    let start = Instant::now();
    let sub = run(&stability_config(0.5, 100_000, true)).unwrap().summary;
    let sub_fit = sub.fits.k_zero.clone().unwrap();
    let h_ok = sub.findings.iter().any(|f| f.check == "h-transform constants" && f.outcome == Outcome::Consistent);
    let sub_pass = sub.verdict == Outcome::Consistent && sub_fit.passed_upper && sub_fit.passed_lower && h_ok;

    let sup = run(&stability_config(2.0, 100_000, false)).unwrap().summary;
    let k0 = sup.fits.k_zero.clone().unwrap();
    let fk = sup.fits.free_k.clone().unwrap();
    let sup_pass = !k0.passed_upper && fk.k > 0.0 && sup.verdict != Outcome::Inconsistent;

    let pass = sub_pass && sup_pass && start.elapsed().as_secs() <= 1200;
    verdict_line(
        7,
        "stability verdicts at c = 0.5 and c = 2",
        pass,
        start,
        &format!(
            "c=0.5: {} (C₂ {:.3}, h range {:?}); c=2: k=0 upper {}, fitted k {:.3}, λ {:.3}",
            sub.message,
            sub_fit.C2,
            sub.gauge_range,
            k0.passed_upper,
            fk.k,
            sup.lambda.unwrap_or(f64::NAN)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_kato_classifier() {
    let start = Instant::now();
    let bm3 = ProcessSpec::brownian(3);
    let grid3 = axis_points(3, &(0..=12).map(|i| i as f64 * 0.25).collect::<Vec<_>>());
    let grid1: Vec<Vec<f64>> = (-12..=12).map(|i| vec![i as f64 * 0.25]).collect();

    let ball = classify(&MeasureSpec::well(1.0), &bm3, &LADDER, &grid3).unwrap();
    let f = &ball.flags;
    let ball_ok = [f.dynkin, f.green_bounded, f.kato, f.extended_kato].iter().all(|&x| x == TriState::Yes);
    // ∫_{B(0,1)} dy / (2π|y|) = 1
    let ball_oracle = (ball.green_sup - 1.0).abs() < 1e-6;

    let hardy = MeasureSpec::positive("hardy", Density::Power { c: 1.0, exponent: -2.0, radius: 1.0 });
    let h = classify(&hardy, &bm3, &LADDER, &grid3).unwrap();
    let hardy_ok = h.flags.kato == TriState::No && h.flags.dynkin == TriState::No;

    let line = classify(&MeasureSpec::well(1.0), &ProcessSpec::brownian(1), &LADDER, &grid1).unwrap();
    let line_ok = line.flags.kato == TriState::Yes && line.flags.green_bounded == TriState::No;
    // sup_x ∫_{−1}^{1} e^{−√2|x−y|}/√2 dy = 1 − e^{−√2} at α = 1
    let line_oracle = (line.sup_r_alpha[0].1 - (1.0 - (-(2f64).sqrt()).exp())).abs() < 1e-7;

    let pass = ball_ok && ball_oracle && hardy_ok && line_ok && line_oracle && start.elapsed().as_secs() <= 180;
    verdict_line(
        8,
        "Kato classifier cases",
        pass,
        start,
        &format!(
            "ball {:?} (G sup {:.8}); hardy kato {:?} dynkin {:?}; line kato {:?} green {:?} (R_1 sup {:.8})",
            ball.flags, ball.green_sup, h.flags.kato, h.flags.dynkin, line.flags.kato, line.flags.green_bounded, line.sup_r_alpha[0].1
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_cauchy_jump_example() {
    let start = Instant::now();
    let spec = ProcessSpec::stable(1.0).with_cutoff(1.0);
    let pairs = all_pairs(&axis_points(1, &[0.0, 0.5, 1.0, 2.0, 4.0]));
    let times = [0.5, 1.0, 2.0];
    let bw = 0.04;
    let free = fk_kernel(
        &spec,
        &Perturbation::default(),
        &times,
        &pairs,
        &KernelOptions::new(McOptions::new(1_000_000, 91, 1e-3)).with_bandwidth(bw),
    )
    .unwrap();
    let ti = free.t_values.iter().position(|&t| t == 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, (x, y)) in free.pairs.iter().enumerate() {
        let r = dist(x, y);
        let exact = 1.0 / (PI * (1.0 + r * r));
        worst = worst.max((free.values[ti][pi] - exact).abs() / (3.0 * free.ci_half_width[ti][pi]));
    }
    let kde_ok = worst <= 1.0;

    let fam = EnvelopeFamily::new(EnvelopeKind::JumpUpper, ScalingFunction::power(1.0), 1);
    let base = fit_envelope(&free, &fam, &FitOptions::default()).unwrap();
    let base_ok = base.passed_upper && base.passed_lower && base.k == 0.0;

    let pert = Perturbation { u: None, mu: MeasureSpec::zero(), jump: Some(JumpPerturbation::threshold(0.1, 1.0)) };
    let est = fk_kernel(
        &spec,
        &pert,
        &times,
        &pairs,
        &KernelOptions::new(McOptions::new(100_000, 92, 1e-3)).with_bandwidth(bw),
    )
    .unwrap();
    let fit = fit_envelope(&est, &fam, &FitOptions::default().with_k(true)).unwrap();
    let (q2, q1) = (fit.C2 / base.C2, fit.C1 / base.C1);
    let pert_ok =
        fit.passed_upper && fit.passed_lower && fit.k.is_finite() && (q2 - 1.0).abs() <= 0.25 && (q1 - 1.0).abs() <= 0.25;

    let pass = kde_ok && base_ok && pert_ok && start.elapsed().as_secs() <= 900;
    verdict_line(
        9,
        "Cauchy kernel, HK(φ) fit and threshold F",
        pass,
        start,
        &format!(
            "KDE max |err|/3CI = {worst:.3}; free fit two-sided {base_ok}; perturbed k = {:.3}, C₂/C₂⁰ = {q2:.3}, C₁/C₁⁰ = {q1:.3}",
            fit.k
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_invariant_suite() {
    let start = Instant::now();
    let mut failures: Vec<String> = Vec::new();
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("  {name}: {} ({detail})", if ok { "ok" } else { "FAILED" });
        if !ok {
            failures.push(name.to_string());
        }
    };

    // Symmetry of the perturbed kernel estimate.
    let spec1 = ProcessSpec::brownian(1);
    let pairs = vec![
        (vec![0.0], vec![0.7]),
        (vec![0.7], vec![0.0]),
        (vec![-0.4], vec![1.2]),
        (vec![1.2], vec![-0.4]),
    ];
    let opts = KernelOptions::new(McOptions::new(20_000, 3, 2e-3)).with_bandwidth(0.1);
    let est = fk_kernel(&spec1, &well(0.5), &[0.5, 1.0], &pairs, &opts).unwrap();
    let asym = (0..2)
        .flat_map(|ti| [(0, 1), (2, 3)].map(|(a, b)| (est.values[ti][a] - est.values[ti][b]).abs()))
        .fold(0.0, f64::max);
    check("symmetry", asym <= 1e-12, format!("max |p(x,y) − p(y,x)| = {asym:.1e}"));

    // Chapman–Kolmogorov for the closed-form kernels.
    let mut ck: f64 = 0.0;
    for spec in [ProcessSpec::brownian(1), ProcessSpec::stable(1.0)] {
        let f = |z: f64| {
            transition_density(&spec, 0.7, &[0.2], &[z]).unwrap() * transition_density(&spec, 1.1, &[z], &[-0.9]).unwrap()
        };
        let lhs = [(-4000.0, -40.0), (-40.0, 40.0), (40.0, 4000.0)]
            .iter()
            .map(|&(a, b)| integrate(f, a, b, 1e-15, 1e-12).value)
            .sum::<f64>()
            + 2.0 / (PI * PI) * 0.7 * 1.1 / (3.0 * 4000f64.powi(3));
        ck = ck.max((lhs - transition_density(&spec, 1.8, &[0.2], &[-0.9]).unwrap()).abs());
    }
    check("Chapman–Kolmogorov", ck < 1e-6, format!("max deviation {ck:.1e}"));

    // Khasminskii: sup R μ = c < 1 ⟹ E_x e^{A_t} ≤ 1/(1 − c).
    let spec3 = ProcessSpec::brownian(3);
    let (v, ci) =
        fk_semigroup(&spec3, &well(0.5), &|_: &[f64]| 1.0, 2.0, &[0.0; 3], &McOptions::new(20_000, 4, 2e-3)).unwrap();
    let sv = stollmann_voigt_check(&Density::uniform_ball(0.5, 1.0), 1.0, 1.0 / 64.0, 8.0, 200, 5).unwrap();
    check(
        "Khasminskii",
        v - ci <= 2.0 && v + ci >= 1.0 && sv.holds,
        format!("E_0 e^(A_2) = {v:.4} ± {ci:.4} ≤ 2; form bound ratio {:.4} ≤ {:.4}", sv.worst_ratio, sv.discrete_potential_sup),
    );

    // Resolvent equation R_a − R_b = (b − a) R_a R_b on 1_{[−1,1]}.
    let (a, b) = (0.5, 2.0);
    let rf = |alpha: f64, x: f64| integrate(|y| resolvent_kernel(&spec1, alpha, &[x], &[y]).unwrap(), -1.0, 1.0, 1e-14, 1e-12).value;
    let x = 0.3;
    let lhs = rf(a, x) - rf(b, x);
    let comp = integrate(|z| resolvent_kernel(&spec1, a, &[x], &[z]).unwrap() * rf(b, z), -40.0, 40.0, 1e-14, 1e-10).value;
    let re = (lhs - (b - a) * comp).abs();
    check("resolvent equation", re < 1e-5, format!("deviation {re:.1e}"));

    // Class lattice: Kato ⊂ extended Kato ⊂ Dynkin, and linearity of the potentials.
    let grid = axis_points(3, &(0..=8).map(|i| i as f64 * 0.25).collect::<Vec<_>>());
    let mut lattice = true;
    for (c, e) in [(0.1, -0.5), (1.0, -1.5), (10.0, -1.0), (0.5, -2.0), (3.0, 0.0)] {
        let nu = MeasureSpec::positive("p", Density::Power { c, exponent: e, radius: 1.0 });
        let f = classify(&nu, &spec3, &LADDER, &grid).unwrap().flags;
        lattice &= !(f.kato == TriState::Yes && f.extended_kato != TriState::Yes);
        lattice &= !(f.extended_kato == TriState::Yes && f.dynkin != TriState::Yes);
    }
    let one = classify(&MeasureSpec::well(1.0), &spec3, &LADDER, &grid).unwrap();
    let three = classify(&MeasureSpec::well(3.0), &spec3, &LADDER, &grid).unwrap();
    let linear = one.sup_r_alpha.iter().zip(&three.sup_r_alpha).all(|(p, q)| (q.1 - 3.0 * p.1).abs() <= 1e-9 * q.1);
    check("class lattice", lattice && linear, format!("implications {lattice}, linearity {linear}"));

    // Scaling monotonicities.
    let grid_s: Vec<(f64, f64)> = [(0.1, 0.5), (0.5, 2.0), (1.0, 10.0), (2.0, 2.5)].to_vec();
    let powers_ok = [0.5, 1.0, 2.0, 3.0].iter().all(|&beta| check_scaling(&ScalingFunction::power(beta), &grid_s).unwrap().passes());
    let phi = ScalingFunction::power(2.0);
    let mut mono = true;
    for i in 1..20 {
        let s = i as f64 * 0.3;
        mono &= phi_big(s, 1.0, &phi).unwrap() > phi_big(s - 0.3, 1.0, &phi).unwrap();
        mono &= phi_big(1.0, s, &phi).unwrap() < phi_big(1.0, s - 0.29, &phi).unwrap();
    }
    check("scaling monotonicity", powers_ok && mono, format!("power scalings {powers_ok}, Φ monotone {mono}"));

    // Determinism across worker counts and reruns.
    let run_with = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| fk_kernel(&spec1, &well(0.5), &[0.5, 1.0], &pairs, &opts).unwrap())
    };
    let (e1, e3) = (run_with(1), run_with(3));
    let same_kernel = e1.values == e3.values && e1.ci_half_width == e3.ci_half_width && e1.values == est.values;
    let cfg = ExperimentConfig::from_json(
        &serde_json::json!({
            "schema": 1,
            "mode": "extended_kato",
            "process": {"kind": "brownian", "dim": 1},
            "mu": {"pos": {"uniform_ball": {"c": 0.5, "radius": 1.0}}},
            "envelope": {"kind": "gaussian_UE", "phi": {"form": "power", "beta": 2.0}, "dim": 1},
            "n_paths": 2000,
            "seed": 9,
            "t_values": [0.5, 1.0, 2.0],
            "pairs": {"points": [[0.0], [0.5], [1.0], [1.5]]},
            "simulation": {"dt": 0.005, "bandwidth": 0.2},
            "output_dir": "unused"
        })
        .to_string(),
    )
    .unwrap();
    let r1 = render(&run(&cfg).unwrap()).unwrap();
    let r2 = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap().install(|| render(&run(&cfg).unwrap()).unwrap());
    check("determinism", same_kernel && r1 == r2, format!("kernel {same_kernel}, reports {}", r1 == r2));

    let pass = failures.is_empty() && start.elapsed().as_secs() <= 1800;
    verdict_line(10, "invariant suite", pass, start, &format!("failed: {failures:?}"));
    assert!(pass);
}
