//! Scenario drivers behind the command line: single runs, domain and
//! refinement sweeps, the verification report, and output files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{build_basis_cached, BasisOptions, GalerkinBasis};
use crate::config::{Config, VelocityKind};
use crate::error::{Error, Result};
use crate::galerkin::{
    initial_state, relative_velocity_at, time_integrate, InitialData, InitialVelocity, Operators, PhysicalParams,
    PicardOptions, Problem, RunOptions, SimState, Trajectory,
};
use crate::geometry::{build_discretization, FluidDiscretization, RigidGeometry, Vec3};
use crate::propulsion::{family_flux, PropulsionFlux};
use crate::transport::{renormalized_residual_refined, BumpTest, DensityField, InitialDensity, Renormalizer};
use crate::verify::{
    lagrange_identity_check, recover_pressure, slip_reduction_check, weak_residuals, ConvectiveForm, TrajectoryView,
    VerificationReport, WeakTest,
};

/// Geometry, discretization, basis and propulsion flux of a scenario.
pub struct Built {
    pub geometry: RigidGeometry,
    pub disc: FluidDiscretization,
    pub basis: GalerkinBasis,
    pub flux: PropulsionFlux,
}

impl Built {
    pub fn new(cfg: &Config) -> Result<Built> {
        let geometry = RigidGeometry::sphere(cfg.body_radius, cfg.body_density)?;
        let disc = build_discretization(&geometry, cfg.outer_radius, cfg.resolution, cfg.surface_level)?;
        let opts = BasisOptions { potential_order: cfg.potential_order, reference_density: None };
        let basis = build_basis_cached(&geometry, &disc, cfg.n, &opts, cfg.cache_dir.as_deref().map(Path::new))?;
        let flux = family_flux(cfg.family, cfg.amplitude, &disc.surface_body, cfg.profile);
        Ok(Built { geometry, disc, basis, flux })
    }

    pub fn problem(&self, cfg: &Config) -> Problem<'_> {
        Problem {
            geometry: &self.geometry,
            disc: &self.disc,
            basis: &self.basis,
            params: PhysicalParams { viscosity: cfg.viscosity(), alpha: cfg.alpha },
            flux: &self.flux,
        }
    }
}

pub fn initial_velocity(cfg: &Config) -> InitialVelocity {
    match cfg.velocity {
        VelocityKind::Rest => InitialVelocity::rest(),
        VelocityKind::Vortex { amplitude } => InitialVelocity::vortex(amplitude),
        VelocityKind::Rigid { l, r } => InitialVelocity::rigid(l, r),
    }
}

pub fn initial_data(cfg: &Config) -> InitialData {
    InitialData {
        density: InitialDensity::Profile(cfg.density.clone()),
        shift: cfg.shift(),
        subsamples: cfg.subsamples,
        velocity: initial_velocity(cfg),
    }
}

pub fn run_options(cfg: &Config, hard: bool, keep_density: bool) -> RunOptions {
    RunOptions {
        dt: cfg.dt,
        t_end: cfg.t_end,
        picard: PicardOptions {
            tol: cfg.picard_tol,
            max_iter: cfg.picard_max_iter,
            freeze_density: cfg.freeze_density,
            transport_substeps: cfg.transport_substeps(),
        },
        hard_invariants: hard || cfg.hard_invariants,
        keep_density,
        positive_density: cfg.positive_density,
    }
}

/// A finished run with everything needed for reports.
pub struct Simulation {
    pub built: Built,
    pub ops: Operators,
    pub initial: SimState,
    pub trajectory: Trajectory,
}

impl Simulation {
    pub fn problem<'a>(&'a self, cfg: &Config) -> Problem<'a> {
        self.built.problem(cfg)
    }
}

pub fn simulate(cfg: &Config, hard: bool, keep_density: bool) -> Result<Simulation> {
    let built = Built::new(cfg)?;
    let problem = built.problem(cfg);
    let ops = Operators::new(&problem)?;
    let initial = initial_state(&problem, initial_data(cfg))?;
    let trajectory = time_integrate(&problem, &ops, initial.clone(), &run_options(cfg, hard, keep_density))?;
    Ok(Simulation { built, ops, initial, trajectory })
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: usize,
    pub final_energy: f64,
    pub min_slack: f64,
    pub final_slack: f64,
    pub max_mass_error: f64,
    pub density_range: (f64, f64),
    pub violations: Vec<String>,
    pub verification_passed: bool,
}

pub fn summarize(traj: &Trajectory) -> RunSummary {
    let m0 = traj.masses[0];
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for &(lo, hi) in &traj.density_range {
        range = (range.0.min(lo), range.1.max(hi));
    }
    let last = traj.ledger.last();
    RunSummary {
        steps: traj.reports.len(),
        final_energy: last.energy(),
        min_slack: traj.ledger.records.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min),
        final_slack: last.slack,
        max_mass_error: traj.masses.iter().map(|m| ((m - m0) / m0).abs()).fold(0.0, f64::max),
        density_range: range,
        violations: traj.violations.clone(),
        verification_passed: true,
    }
}

/// `run`: simulates, writes trajectory, ledger, diagnostics, density and
/// verification report into `out_dir`.
pub fn run_scenario(cfg: &Config, out_dir: &Path, hard: bool, seed: u64) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let sim = simulate(cfg, hard, true)?;
    let traj = &sim.trajectory;
    fs::write(out_dir.join("trajectory.csv"), trajectory_csv(&sim.built.basis, traj))?;
    fs::write(out_dir.join("ledger.csv"), ledger_csv(traj))?;
    fs::write(out_dir.join("diagnostics.csv"), diagnostics_csv(traj))?;
    fs::write(out_dir.join("density_final.vtk"), density_vtk(&sim.built.disc, &traj.final_state.density))?;
    let report = verification_report(cfg, &sim, seed)?;
    fs::write(out_dir.join("verification.csv"), report.to_csv())?;
    let mut summary = summarize(traj);
    summary.verification_passed = report.all_pass();
    Ok(summary)
}

pub fn trajectory_csv(basis: &GalerkinBasis, traj: &Trajectory) -> String {
    let mut s = String::from("# rigidswim trajectory v1\nt,h_x,h_y,h_z,q_w,q_x,q_y,q_z,l_x,l_y,l_z,r_x,r_y,r_z\n");
    for ((t, pose), alpha) in traj.times.iter().zip(&traj.poses).zip(&traj.alphas) {
        let q = pose.quaternion();
        let (l, r) = basis.rigid_velocity(alpha.as_slice());
        let _ = writeln!(
            s,
            "{t:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
            pose.h.x, pose.h.y, pose.h.z, q.w, q.i, q.j, q.k, l.x, l.y, l.z, r.x, r.y, r.z
        );
    }
    s
}

pub fn ledger_csv(traj: &Trajectory) -> String {
    let bracketed = traj.ledger.records[0].bracket.is_some();
    let mut s = String::from("# rigidswim ledger v1\nt,E_fluid,E_body,D_visc,D_slip,W_budget,slack");
    if bracketed {
        s.push_str(",D_visc_lo,D_slip_lo,W_budget_hi,slack_bracket");
    }
    s.push('\n');
    for r in &traj.ledger.records {
        let _ = write!(
            s,
            "{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
            r.t, r.e_fluid, r.e_body, r.d_visc, r.d_slip, r.w_budget, r.slack
        );
        if let Some((a, b, c, d)) = r.bracket {
            let _ = write!(s, ",{a:.10e},{b:.10e},{c:.10e},{d:.10e}");
        }
        s.push('\n');
    }
    s
}

pub fn diagnostics_csv(traj: &Trajectory) -> String {
    let mut s = String::from(
        "# rigidswim diagnostics v1\nt,picard_iterations,picard_increment,mass,rho_min,rho_max,gyro,gyro_scale,tri_adv,tri_rate,tri_scale,max_relative_speed\n",
    );
    for (k, r) in traj.reports.iter().enumerate() {
        let (lo, hi) = traj.density_range[k + 1];
        let _ = writeln!(
            s,
            "{:.10e},{},{:.3e},{:.12e},{:.10e},{:.10e},{:.3e},{:.3e},{:.6e},{:.6e},{:.6e},{:.6e}",
            r.t,
            r.picard_iterations,
            r.picard_increment,
            traj.masses[k + 1],
            lo,
            hi,
            r.gyroscopic_contraction.0,
            r.gyroscopic_contraction.1,
            r.trilinear.0,
            r.trilinear.1,
            r.trilinear.2,
            r.max_relative_speed
        );
    }
    s
}

/// Legacy VTK structured-points file of the density (shift removed); cells
/// without a fluid node carry -1.
pub fn density_vtk(disc: &FluidDiscretization, rho: &DensityField) -> String {
    let n = disc.cells_per_axis;
    let h = disc.spacing;
    let o = disc.origin + Vec3::repeat(0.5 * h);
    let mut s = format!(
        "# vtk DataFile Version 3.0\nrigidswim density t={:.6}\nASCII\nDATASET STRUCTURED_POINTS\nDIMENSIONS {n} {n} {n}\nORIGIN {} {} {}\nSPACING {h} {h} {h}\nPOINT_DATA {}\nSCALARS density double 1\nLOOKUP_TABLE default\n",
        rho.time,
        o.x,
        o.y,
        o.z,
        n * n * n
    );
    for k in 0..n as i64 {
        for j in 0..n as i64 {
            for i in 0..n as i64 {
                let v = disc.node_at(i, j, k).map(|id| rho.values[id] - rho.shift).unwrap_or(-1.0);
                let _ = writeln!(s, "{v:.8e}");
            }
        }
    }
    s
}

fn random_weak_test(rng: &mut ChaCha8Rng, n: usize, t_end: f64) -> WeakTest {
    let coeffs = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let psi = [
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0) / t_end,
        rng.gen_range(-1.0..1.0) / (t_end * t_end),
        rng.gen_range(-1.0..1.0) / (t_end * t_end * t_end),
    ];
    WeakTest { coeffs, psi }
}

/// Bump tests supported strictly inside F_0.
pub fn random_bump_tests(rng: &mut ChaCha8Rng, body_radius: f64, outer_radius: f64, t_end: f64, count: usize) -> Vec<BumpTest> {
    (0..count)
        .map(|_| {
            let radius = rng.gen_range(0.5..1.0);
            let lo = body_radius + radius + 0.1;
            let hi = outer_radius - radius - 0.1;
            let dist = rng.gen_range(lo..hi.max(lo + 1e-9));
            let dir = loop {
                let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let m = v.norm();
                if m > 0.1 && m <= 1.0 {
                    break v / m;
                }
            };
            BumpTest {
                center: dir * dist,
                radius,
                psi: [
                    rng.gen_range(0.5..1.5),
                    rng.gen_range(-1.0..1.0) / t_end,
                    rng.gen_range(-1.0..1.0) / (t_end * t_end),
                    rng.gen_range(-1.0..1.0) / (t_end * t_end * t_end),
                ],
            }
        })
        .collect()
}

/// Relative velocity at every node for each step, from the advecting
/// coefficients the scheme used.
pub fn relative_velocity_table(basis: &GalerkinBasis, disc: &FluidDiscretization, traj: &Trajectory) -> Vec<Vec<Vec3>> {
    traj.reports
        .iter()
        .map(|r| {
            disc.nodes
                .iter()
                .enumerate()
                .map(|(i, n)| relative_velocity_at(basis, &n.point, i, r.transport_coeffs.as_slice()).0)
                .collect()
        })
        .collect()
}

/// Renormalized continuity residuals: for each b and test, (residual, norm).
/// Spatial integrals use `refine` sub-points per axis and cell.
pub fn renormalized_residuals(
    sim: &Simulation,
    tests: &[BumpTest],
    renormalizers: &[Renormalizer],
    refine: usize,
) -> Result<Vec<(&'static str, f64, f64)>> {
    let traj = &sim.trajectory;
    let disc = &sim.built.disc;
    let table = relative_velocity_table(&sim.built.basis, disc, traj);
    let t_end = *traj.times.last().unwrap();
    let mut out = Vec::new();
    for b in renormalizers {
        for test in tests {
            let res = renormalized_residual_refined(
                disc,
                &traj.transports,
                &traj.times,
                &table,
                test,
                (test.center, test.radius),
                b,
                refine,
            )?;
            out.push((b.name, res, test.norm(disc, t_end)));
        }
    }
    Ok(out)
}

/// Builds the verification report for a finished run: weak residuals,
/// boundary identities, transport, invariants and pressure recovery.
pub fn verification_report(cfg: &Config, sim: &Simulation, seed: u64) -> Result<VerificationReport> {
    let problem = sim.problem(cfg);
    let traj = &sim.trajectory;
    let basis = &sim.built.basis;
    let disc = &sim.built.disc;
    let n = basis.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerificationReport::default();

    let dt = cfg.dt;
    let weak_tol = 10.0 * (cfg.picard_tol + dt * dt);
    if traj.densities.len() == traj.times.len() {
        let dens: Vec<Vec<f64>> = traj.densities.iter().map(|d| d.values.clone()).collect();
        let view = TrajectoryView { times: &traj.times, alphas: &traj.alphas, densities: &dens };
        let mut tests: Vec<WeakTest> = (0..n)
            .map(|i| WeakTest { coeffs: DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 }), psi: [1.0, 0.0, 0.0, 0.0] })
            .collect();
        for _ in 0..cfg.random_tests {
            tests.push(random_weak_test(&mut rng, n, cfg.t_end));
        }
        let res = weak_residuals(&problem, &sim.ops, &view, &tests, ConvectiveForm::Skew);
        let worst = res.iter().map(|r| if r.scale > 0.0 { r.residual / r.scale } else { r.residual }).fold(0.0, f64::max);
        report.at_most("weak_residual_relative", worst, weak_tol);

        let bumps = random_bump_tests(&mut rng, cfg.body_radius, cfg.outer_radius, cfg.t_end, cfg.random_tests);
        let renorm = renormalized_residuals(sim, &bumps, &[Renormalizer::identity(), Renormalizer::square(), Renormalizer::sine()], cfg.quadrature_refine)?;
        let worst = renorm.iter().map(|(_, r, norm)| r / norm).fold(0.0, f64::max);
        // A jump in the initial density limits the quadrature to first order.
        if cfg.density.is_sharp() {
            report.info("renormalized_continuity_relative", worst, 1e-4);
        } else {
            report.at_most("renormalized_continuity_relative", worst, 1e-4);
        }
    }

    let floor = traj.ledger.slack_floor();
    let min_slack = traj.ledger.records.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min);
    report.at_least("energy_slack_min", min_slack, floor);
    if traj.ledger.records[0].bracket.is_some() {
        let b = traj.ledger.records.iter().filter_map(|r| r.bracket.map(|x| x.3)).fold(f64::INFINITY, f64::min);
        report.at_least("bracketed_energy_slack_min", b, floor);
    }
    let summary = summarize(traj);
    let bounds = traj.final_state.density.bounds;
    report.at_most("density_below_initial_min", (bounds.0 - summary.density_range.0).max(0.0), 0.0);
    report.at_most("density_above_initial_max", (summary.density_range.1 - bounds.1).max(0.0), 0.0);
    report.at_most("mass_relative_change", summary.max_mass_error, 1e-4 * cfg.t_end.max(1.0));
    let gyro = traj.reports.iter().map(|r| r.gyroscopic_contraction.0.abs()).fold(0.0, f64::max);
    report.at_most("gyroscopic_contraction", gyro, 1e-10);
    let tri = traj
        .reports
        .iter()
        .map(|r| if r.trilinear.2 > 0.0 { (r.trilinear.0 - r.trilinear.1).abs() / r.trilinear.2 } else { 0.0 })
        .fold(0.0, f64::max);
    report.at_most("trilinear_identity_relative", tri, 1e-3);
    let orth = traj.poses.iter().map(|p| p.orthogonality_defect()).fold(0.0, f64::max);
    report.at_most("rotation_orthogonality", orth, 1e-9);

    // boundary identities on the final state and a random test field
    let alpha = &traj.final_state.alpha;
    let phi = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let (l, r) = basis.rigid_velocity(alpha.as_slice());
    let (lp, rp) = basis.rigid_velocity(phi.as_slice());
    let t_final = traj.final_state.t;
    let mut u = Vec::new();
    let mut us = Vec::new();
    let mut w = Vec::new();
    let mut ph = Vec::new();
    let mut phs = Vec::new();
    let mut normals = Vec::new();
    for (s, node) in disc.surface_body.iter().enumerate() {
        let tr = basis.body_trace_at(s);
        u.push(tr.iter().zip(alpha.iter()).map(|(z, a)| z * *a).sum::<Vec3>());
        ph.push(tr.iter().zip(phi.iter()).map(|(z, a)| z * *a).sum::<Vec3>());
        us.push(l + r.cross(&node.point));
        phs.push(lp + rp.cross(&node.point));
        w.push(problem.flux.at(s, t_final));
        normals.push(node.normal);
    }
    let slip = slip_reduction_check(&u, &us, &w, &ph, &phs, &normals, 1e-6);
    report.at_most("slip_reduction_normal_defect", slip.normal_defect, 1e-6);
    report.at_most("slip_reduction_excess", (slip.max_discrepancy - 2.0 * slip.normal_defect * slip.scale).max(0.0), 1e-12 * slip.scale.max(1.0).powi(2));
    let mut lag: f64 = 0.0;
    for _ in 0..1000 {
        let mut v = || Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let (a, b, c, d) = (v(), v(), v(), v());
        let scale = a.norm() * b.norm() * c.norm() * d.norm();
        lag = lag.max(lagrange_identity_check(&a, &b, &c, &d) / scale.max(1e-300));
    }
    report.at_most("lagrange_identity_relative", lag, 1e-12);

    if let (Some(last), true) = (traj.reports.last(), traj.densities.len() >= 2) {
        let k = traj.alphas.len() - 1;
        let d0 = &traj.densities[k - 1];
        let d1 = &traj.densities[k];
        let p = recover_pressure(&problem, &traj.alphas[k - 1], &traj.alphas[k], &d0.values, &d1.values, &last.transport_coeffs, traj.times[k] - traj.times[k - 1])?;
        let mean: f64 = disc.nodes.iter().zip(&p.values).map(|(n, v)| n.weight * v).sum();
        report.at_most("pressure_mean", mean.abs(), 1e-12);
        report.info("pressure_recovery_defect", p.defect, 0.05);
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct DomainSweepReport {
    pub radii: Vec<f64>,
    /// max over time |l_R - l_R'| between successive radii.
    pub velocity_differences: Vec<f64>,
    /// max over time |E_R - E_R'| between successive radii.
    pub energy_differences: Vec<f64>,
    pub decreasing: bool,
}

impl DomainSweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("# rigidswim domain sweep v1\nR_from,R_to,max_l_difference,max_energy_difference\n");
        for (k, (dv, de)) in self.velocity_differences.iter().zip(&self.energy_differences).enumerate() {
            let _ = writeln!(s, "{},{},{dv:.10e},{de:.10e}", self.radii[k], self.radii[k + 1]);
        }
        let _ = writeln!(s, "# decreasing,{}", self.decreasing);
        s
    }
}

/// Runs the scenario on each outer radius and compares successive
/// trajectories of the body translational velocity.
pub fn domain_sweep(cfg: &Config, radii: &[f64]) -> Result<DomainSweepReport> {
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("domain sweep radii must increase".into()));
    }
    let mut runs = Vec::new();
    for &r in radii {
        let mut c = cfg.clone();
        c.outer_radius = r;
        let sim = simulate(&c, false, false)
            .map_err(|e| Error::Config(format!("domain sweep at R = {r}: {e}")))?;
        let traj = sim.trajectory;
        let ls: Vec<Vec3> = traj.alphas.iter().map(|a| sim.built.basis.rigid_velocity(a.as_slice()).0).collect();
        let es: Vec<f64> = traj.ledger.records.iter().map(|r| r.energy()).collect();
        runs.push((ls, es));
    }
    let mut velocity_differences = Vec::new();
    let mut energy_differences = Vec::new();
    for w in runs.windows(2) {
        let dv = w[0].0.iter().zip(&w[1].0).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        let de = w[0].1.iter().zip(&w[1].1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        velocity_differences.push(dv);
        energy_differences.push(de);
    }
    let decreasing = velocity_differences.windows(2).all(|w| w[1] < w[0]);
    Ok(DomainSweepReport { radii: radii.to_vec(), velocity_differences, energy_differences, decreasing })
}

#[derive(Debug, Clone)]
pub struct RefinementRow {
    pub n: usize,
    pub dt: f64,
    pub weak_residual: f64,
    pub min_slack: f64,
    pub projection_error: f64,
    /// max over common times |alpha rigid part| difference to the previous row.
    pub trajectory_difference: Option<f64>,
}

/// H-norm of u_0 minus its projection.
pub fn projection_error(cfg: &Config, built: &Built, state: &SimState) -> f64 {
    let v = initial_velocity(cfg);
    let mut acc = 0.0;
    for (i, node) in built.disc.nodes.iter().enumerate() {
        let (u, _) = built.basis.combine_at(i, state.alpha.as_slice());
        acc += node.weight * state.density.values[i] * ((v.fluid)(&node.point) - u).norm_squared();
    }
    let (l, r) = built.basis.rigid_velocity(state.alpha.as_slice());
    let g = &built.geometry;
    acc += g.mass * (v.l - l).norm_squared() + (v.r - r).dot(&(g.inertia * (v.r - r)));
    acc.sqrt()
}

/// Runs every (N, dt) pair in order and tabulates weak residual, energy
/// slack, projection error and differences of the body velocity.
pub fn refinement_sweep(cfg: &Config, ns: &[usize], dts: &[f64]) -> Result<Vec<RefinementRow>> {
    let mut rows: Vec<RefinementRow> = Vec::new();
    let mut prev: Option<(Vec<f64>, Vec<Vec3>)> = None;
    for &n in ns {
        for &dt in dts {
            let mut c = cfg.clone();
            c.n = n;
            c.dt = dt;
            let sim = simulate(&c, false, true)?;
            let traj = &sim.trajectory;
            let problem = sim.problem(&c);
            let dens: Vec<Vec<f64>> = traj.densities.iter().map(|d| d.values.clone()).collect();
            let view = TrajectoryView { times: &traj.times, alphas: &traj.alphas, densities: &dens };
            let tests: Vec<WeakTest> = (0..n)
                .map(|i| WeakTest { coeffs: DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 }), psi: [1.0, 0.0, 0.0, 0.0] })
                .collect();
            let weak = weak_residuals(&problem, &sim.ops, &view, &tests, ConvectiveForm::Skew)
                .iter()
                .map(|r| if r.scale > 0.0 { r.residual / r.scale } else { r.residual })
                .fold(0.0, f64::max);
            let ls: Vec<Vec3> = traj.alphas.iter().map(|a| sim.built.basis.rigid_velocity(a.as_slice()).0).collect();
            let diff = prev.as_ref().map(|(times, prev_l)| {
                let mut worst: f64 = 0.0;
                for (t, l) in times.iter().zip(prev_l) {
                    if let Some(k) = traj.times.iter().position(|s| (s - t).abs() < 1e-9) {
                        worst = worst.max((ls[k] - l).norm());
                    }
                }
                worst
            });
            rows.push(RefinementRow {
                n,
                dt,
                weak_residual: weak,
                min_slack: summarize(traj).min_slack,
                projection_error: projection_error(&c, &sim.built, &sim.initial),
                trajectory_difference: diff,
            });
            prev = Some((traj.times.clone(), ls));
        }
    }
    Ok(rows)
}

pub fn refinement_csv(rows: &[RefinementRow]) -> String {
    let mut s = String::from("# rigidswim refinement sweep v1\nN,dt,weak_residual,min_slack,projection_error,trajectory_difference\n");
    for r in rows {
        let d = r.trajectory_difference.map(|d| format!("{d:.10e}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:.6e},{:.10e},{:.10e},{:.10e},{}", r.n, r.dt, r.weak_residual, r.min_slack, r.projection_error, d);
    }
    s
}

/// Parses "3,4,6" style lists.
pub fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| Error::Config(format!("cannot parse list entry {s:?}"))))
        .collect()
}
