//! Acceptance criteria. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line; exits non-zero if any fails.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rigidswim::bodyframe::{integrate_pose, BodyPose};
use rigidswim::cli::{domain_sweep, random_bump_tests, renormalized_residuals, simulate, summarize, Built, Simulation};
use rigidswim::config::Config;
use rigidswim::galerkin::{assemble_dissipation, assemble_forcing, assemble_mass, linear_midpoint_step, Operators, Problem};
use rigidswim::geometry::{chi_r, compute_mass_inertia, Shape, Vec3};
use rigidswim::transport::Renormalizer;
use rigidswim::verify::{weak_residuals, ConvectiveForm, TrajectoryView, WeakTest};

struct Outcome {
    pass: bool,
    detail: String,
}

fn config(name: &str) -> Config {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    Config::from_file(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn run(cfg: &Config) -> Simulation {
    simulate(cfg, false, true).unwrap_or_else(|e| panic!("simulation failed: {e}"))
}

fn energy(sim: &Simulation) -> (bool, String) {
    let ledger = &sim.trajectory.ledger;
    let floor = ledger.slack_floor();
    let min_slack = ledger.records.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);
    let last = ledger.last();
    // final: E(T) + D(T) <= E(0) + W(T), relative to the right-hand side
    let rhs = ledger.e0 + last.w_budget;
    let final_rel = (last.energy() + last.d_visc + last.d_slip - rhs) / rhs.abs().max(1.0);
    (min_slack >= floor && final_rel <= 1e-6, format!("min slack {min_slack:.3e} (floor {floor:.1e}), final excess {final_rel:.3e}"))
}

fn criterion_energy(default: &Simulation, squirmer: &Simulation) -> Outcome {
    let (a, da) = energy(default);
    let (b, db) = energy(squirmer);
    Outcome { pass: a && b, detail: format!("swirl: {da}; squirmer: {db}") }
}

fn criterion_zero() -> Outcome {
    let sim = run(&config("zero.toml"));
    let traj = &sim.trajectory;
    let steps = traj.reports.len();
    let rho0 = &traj.densities[0].values;
    let alpha_zero = traj.alphas.iter().all(|a| a.iter().all(|v| *v == 0.0));
    let pose_fixed = traj.poses.iter().all(|p| p.q == Matrix3::identity() && p.h == Vec3::zeros());
    let density_fixed = traj.densities.iter().all(|d| d.values == *rho0);
    Outcome {
        pass: steps >= 200 && alpha_zero && pose_fixed && density_fixed,
        detail: format!("{steps} steps, coefficients zero {alpha_zero}, pose fixed {pose_fixed}, density fixed {density_fixed}"),
    }
}

fn criterion_max_principle(layer: &Simulation) -> Outcome {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for d in &layer.trajectory.densities {
        for v in d.physical_values() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Outcome { pass: lo >= 1.0 && hi <= 2.0, detail: format!("density range [{lo:.15}, {hi:.15}]") }
}

fn criterion_mass(layer: &Simulation) -> Outcome {
    let err = summarize(&layer.trajectory).max_mass_error;
    Outcome { pass: err <= 1e-4, detail: format!("max relative mass change {err:.3e}") }
}

fn criterion_renormalized(cfg: &Config, sim: &Simulation) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let tests = random_bump_tests(&mut rng, cfg.body_radius, cfg.outer_radius, cfg.t_end, 5);
    let b = [Renormalizer::identity(), Renormalizer::square(), Renormalizer::sine()];
    let res = renormalized_residuals(sim, &tests, &b, cfg.quadrature_refine).unwrap();
    let worst = res.iter().map(|(_, r, n)| r / n).fold(0.0, f64::max);
    let zero_norm = res.iter().any(|(_, _, n)| !(*n > 0.0));
    Outcome { pass: worst <= 1e-4 && !zero_norm, detail: format!("worst residual / |phi| {worst:.3e} over {} pairs", res.len()) }
}

fn criterion_gyroscopic(default: &Simulation) -> Outcome {
    let worst = default.trajectory.reports.iter().map(|r| r.gyroscopic_contraction.0.abs()).fold(0.0, f64::max);
    Outcome { pass: worst <= 1e-10, detail: format!("max |contraction| {worst:.3e}") }
}

fn criterion_trilinear(default: &Simulation) -> Outcome {
    let worst = default
        .trajectory
        .reports
        .iter()
        .map(|r| {
            let (adv, rate, scale) = r.trilinear;
            (adv - rate).abs() / scale
        })
        .fold(0.0, f64::max);
    Outcome { pass: worst <= 1e-3, detail: format!("max relative identity residual {worst:.3e}") }
}

/// Exact solution of M a' = L a + C by the symmetric reduction
/// M = G G^T, S = G^-1 L G^-T = V diag(lambda) V^T.
fn exact_linear(m: &DMatrix<f64>, l: &DMatrix<f64>, c: &DVector<f64>, a0: &DVector<f64>, t: f64) -> DVector<f64> {
    let g = m.clone().cholesky().unwrap().l();
    let g_inv = g.clone().try_inverse().unwrap();
    let s = &g_inv * l * g_inv.transpose();
    let s = (&s + s.transpose()) * 0.5;
    let eig = s.symmetric_eigen();
    let steady = -l.clone().lu().solve(c).unwrap();
    let x0 = g.transpose() * (a0 - &steady);
    let coords = eig.eigenvectors.transpose() * x0;
    let evolved = DVector::from_fn(coords.len(), |i, _| coords[i] * (eig.eigenvalues[i] * t).exp());
    g_inv.transpose() * (&eig.eigenvectors * evolved) + steady
}

fn criterion_oracle() -> Outcome {
    let mut cfg = config("default.toml");
    cfg.n = 8;
    cfg.resolution = 0.5;
    let built = Built::new(&cfg).unwrap();
    let basis = built.basis.subset(&[6, 7]);
    let problem = Problem { basis: &basis, ..built.problem(&cfg) };
    let ops = Operators::new(&problem).unwrap();
    let rho = vec![1.0; built.disc.node_count()];
    let rho_surface = ops.surface_density(&rho);
    let m = assemble_mass(&basis, &built.disc, &built.geometry, &rho).unwrap();
    let l = assemble_dissipation(&problem, &ops, &rho, &rho_surface).unwrap().total();
    let c = assemble_forcing(&problem, &ops, 1.0, &rho_surface).unwrap();
    let a0 = DVector::from_vec(vec![0.3, -0.2]);
    let steps = 20_000;
    let dt = 1.0 / steps as f64;
    let mut a = a0.clone();
    let mut worst: f64 = 0.0;
    for k in 1..=steps {
        a = linear_midpoint_step(&m, &l, &c, &a, dt).unwrap();
        if k % 100 == 0 {
            let exact = exact_linear(&m, &l, &c, &a0, k as f64 * dt);
            worst = worst.max((&a - exact).amax());
        }
    }
    Outcome { pass: worst <= 1e-8, detail: format!("max coefficient difference {worst:.3e} over [0, 1]") }
}

fn rodrigues(w: &Vec3) -> Matrix3<f64> {
    let theta = w.norm();
    let k = w.cross_matrix() / theta;
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

fn criterion_so3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pose = BodyPose::default();
    let dt = 1e-2;
    for _ in 0..10_000 {
        let r = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        pose = integrate_pose(&pose, &Vec3::zeros(), &r, dt);
    }
    let defect = pose.orthogonality_defect();
    let r = Vec3::new(0.3, -1.1, 0.7);
    let mut q = BodyPose::default();
    let steps = 1000;
    for _ in 0..steps {
        q = integrate_pose(&q, &Vec3::zeros(), &r, dt);
    }
    let closed = rodrigues(&(r * (steps as f64 * dt)));
    let diff = (q.q - closed).norm();
    Outcome {
        pass: defect <= 1e-9 && diff <= 1e-10,
        detail: format!("orthogonality defect {defect:.3e} after 1e4 steps, Rodrigues difference {diff:.3e}"),
    }
}

fn worst_weak(cfg: &Config, sim: &Simulation) -> f64 {
    let problem = sim.problem(cfg);
    let traj = &sim.trajectory;
    let n = sim.built.basis.n;
    let dens: Vec<Vec<f64>> = traj.densities.iter().map(|d| d.values.clone()).collect();
    let view = TrajectoryView { times: &traj.times, alphas: &traj.alphas, densities: &dens };
    let tests: Vec<WeakTest> = (0..n)
        .map(|i| WeakTest { coeffs: DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 }), psi: [1.0, 0.0, 0.0, 0.0] })
        .collect();
    weak_residuals(&problem, &sim.ops, &view, &tests, ConvectiveForm::Skew)
        .iter()
        .map(|r| r.residual / r.scale)
        .fold(0.0, f64::max)
}

fn criterion_weak(cfg: &Config, default: &Simulation) -> Outcome {
    let tol = 10.0 * (1e-8 + cfg.dt * cfg.dt);
    let coarse = worst_weak(cfg, default);
    let mut half = cfg.clone();
    half.dt = cfg.dt / 2.0;
    let fine = worst_weak(&half, &run(&half));
    Outcome {
        pass: coarse <= tol && fine < coarse,
        detail: format!("max residual / scale {coarse:.3e} (tolerance {tol:.3e}), at dt/2 {fine:.3e}"),
    }
}

fn criterion_variable_viscosity() -> Outcome {
    let cfg = config("variable_viscosity.toml");
    let sim = run(&cfg);
    let visc = sim.built.problem(&cfg).params.viscosity;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for d in &sim.trajectory.densities {
        let rho = d.physical_values();
        for v in rho.iter().chain(sim.ops.surface_density(&rho).iter()) {
            let nu = visc.eval(*v);
            lo = lo.min(nu);
            hi = hi.max(nu);
        }
    }
    let ledger = &sim.trajectory.ledger;
    let mut worst = f64::INFINITY;
    let mut bracketed = true;
    for r in &ledger.records {
        match r.bracket {
            Some((_, _, budget, slack)) => worst = worst.min(slack / (ledger.e0 + budget).abs().max(1.0)),
            None => bracketed = false,
        }
    }
    Outcome {
        pass: bracketed && lo >= cfg.nu1 && hi <= cfg.nu2 && worst >= -1e-6,
        detail: format!("sampled viscosity in [{lo:.6}, {hi:.6}], min bracketed slack {worst:.3e} relative"),
    }
}

fn criterion_geometry() -> Outcome {
    let (mass, inertia) = compute_mass_inertia(&Shape::sphere(1.0), 1.0).unwrap();
    let m_exact = 4.0 * PI / 3.0;
    let i_exact = 0.4 * m_exact;
    let m_err = (mass - m_exact).abs() / m_exact;
    let i_err = (inertia - Matrix3::identity() * i_exact).amax() / i_exact;
    let inside = chi_r(&Vec3::new(1.5, -2.0, 0.25), 4.0) == Vec3::new(1.5, -2.0, 0.25);
    let outside = chi_r(&Vec3::new(0.0, 0.0, -8.0), 4.0) == Vec3::new(0.0, 0.0, -4.0);
    Outcome {
        pass: m_err <= 1e-3 && i_err <= 1e-3 && inside && outside,
        detail: format!("mass error {m_err:.3e}, inertia error {i_err:.3e}, truncation branches exact {}", inside && outside),
    }
}

fn criterion_domain_sweep() -> Outcome {
    let rep = domain_sweep(&config("default.toml"), &[3.0, 4.0, 6.0]).unwrap();
    Outcome {
        pass: rep.decreasing,
        detail: format!("successive max |l| differences {:?}", rep.velocity_differences.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>()),
    }
}

fn main() {
    let start = Instant::now();
    // ACCEPTANCE_ONLY=1,8 restricts the run to the listed criteria.
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |ids: &[usize]| only.as_ref().map_or(true, |o| ids.iter().any(|i| o.contains(i)));
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(&[id]) {
            return;
        }
        let t = Instant::now();
        let out = f();
        println!(
            "{} {id:>2} {name}: {} [{:.0}s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            t.elapsed().as_secs_f64()
        );
        results.push((id, name, out));
    };

    let default_cfg = config("default.toml");
    let default = wanted(&[1, 6, 7, 10]).then(|| run(&default_cfg));
    if wanted(&[1]) {
        let squirmer = run(&config("squirmer.toml"));
        record(1, "energy inequality", &mut || criterion_energy(default.as_ref().unwrap(), &squirmer));
    }
    record(2, "zero data stays zero", &mut criterion_zero);
    if wanted(&[3, 4]) {
        let layer = run(&config("layer.toml"));
        record(3, "maximum principle", &mut || criterion_max_principle(&layer));
        record(4, "mass conservation", &mut || criterion_mass(&layer));
    }
    if wanted(&[5]) {
        let rotation_cfg = config("rotation.toml");
        let rotation = run(&rotation_cfg);
        record(5, "renormalized continuity", &mut || criterion_renormalized(&rotation_cfg, &rotation));
    }
    if let Some(default) = &default {
        record(6, "gyroscopic neutrality", &mut || criterion_gyroscopic(default));
        record(7, "trilinear identity", &mut || criterion_trilinear(default));
    }
    record(8, "two-mode oracle", &mut criterion_oracle);
    record(9, "rotation integrity", &mut criterion_so3);
    if let Some(default) = &default {
        record(10, "weak-form orthogonality", &mut || criterion_weak(&default_cfg, default));
    }
    drop(default);
    record(11, "variable viscosity", &mut criterion_variable_viscosity);
    record(12, "geometry oracles", &mut criterion_geometry);
    record(13, "domain sweep", &mut criterion_domain_sweep);

    let failed: Vec<_> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("{} of {} criteria pass in {:.0}s", results.len() - failed.len(), results.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
