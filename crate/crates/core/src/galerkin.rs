//! Galerkin assembly, the Picard fixed point over one time step, and the
//! energy ledger.
//!
//! Time stepping is an implicit midpoint rule written so that the discrete
//! energy balance closes to rounding. With rho_bar the step-averaged density
//! and a_bar = (a^n + a^{n+1}) / 2 the update is
//!
//! M_bar (a^{n+1} - a^n) = dt [ (A + K(v) + G(v)) a_bar + C ] - (M_f^{n+1} - M_f^n) a_bar / 2
//!
//! where K is the skew part of the convective form, G the (linearized)
//! rotational term and the last term is the symmetric part of convection
//! expressed through the density change. K and G are exactly antisymmetric,
//! so they do no work.

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::basis::GalerkinBasis;
use crate::bodyframe::{integrate_pose, relative_clearance, BodyPose};
use crate::error::{Error, Result};
use crate::geometry::{FluidDiscretization, RigidGeometry, Vec3};
use crate::propulsion::PropulsionFlux;
use crate::transport::{interpolate_anchored, DensityField, InitialDensity, TransportState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Viscosity {
    Constant(f64),
    /// nu(eta) = nu1 + (nu2 - nu1) eta / (1 + eta) for eta >= 0.
    DensityDependent { nu1: f64, nu2: f64 },
}

impl Viscosity {
    pub fn eval(&self, rho: f64) -> f64 {
        match *self {
            Viscosity::Constant(nu) => nu,
            Viscosity::DensityDependent { nu1, nu2 } => {
                let eta = rho.max(0.0);
                (nu1 + (nu2 - nu1) * eta / (1.0 + eta)).clamp(nu1.min(nu2), nu1.max(nu2))
            }
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Viscosity::Constant(nu) => (nu, nu),
            Viscosity::DensityDependent { nu1, nu2 } => (nu1.min(nu2), nu1.max(nu2)),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Viscosity::Constant(_))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PhysicalParams {
    pub viscosity: Viscosity,
    pub alpha: f64,
}

pub struct Problem<'a> {
    pub geometry: &'a RigidGeometry,
    pub disc: &'a FluidDiscretization,
    pub basis: &'a GalerkinBasis,
    pub params: PhysicalParams,
    pub flux: &'a PropulsionFlux,
}

/// Density independent pieces of the discrete operators.
pub struct Operators {
    pub body_mass: DMatrix<f64>,
    /// int D(z_j) : D(z_k).
    pub strain_gram: DMatrix<f64>,
    /// oint (z_j - z_Sj) . (z_k - z_Sk).
    pub slip_gram: DMatrix<f64>,
    /// oint w_0 . (z_j - z_Sj).
    pub forcing_base: DVector<f64>,
    /// oint |w_0|^2.
    pub flux_energy: f64,
    gaps: Vec<Vec3>,
    surface_stencils: Vec<Vec<(usize, f64)>>,
}

fn sym(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

fn check_finite(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::AssemblyNan(what))
    }
}

fn mirror_upper(flat: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |j, k| if j <= k { flat[j * n + k] } else { flat[k * n + j] })
}

impl Operators {
    pub fn new(problem: &Problem) -> Result<Operators> {
        let basis = problem.basis;
        let disc = problem.disc;
        let geo = problem.geometry;
        let n = basis.n;
        problem.flux.check_tangential(&disc.surface_body, 1e-10)?;
        if problem.flux.samples.len() != disc.surface_body.len() {
            return Err(Error::Config("flux samples do not match the surface quadrature".into()));
        }

        let body_mass = DMatrix::from_fn(n, n, |j, k| {
            let (lj, rj) = basis.rigid[j];
            let (lk, rk) = basis.rigid[k];
            geo.mass * lj.dot(&lk) + rj.dot(&(geo.inertia * rk))
        });

        let mut sg = vec![0.0; n * n];
        let mut d = vec![Matrix3::zeros(); n];
        for (i, node) in disc.nodes.iter().enumerate() {
            for (dk, g) in d.iter_mut().zip(basis.grads_at(i)) {
                *dk = sym(g);
            }
            for j in 0..n {
                for k in j..n {
                    sg[j * n + k] += node.weight * d[j].dot(&d[k]);
                }
            }
        }
        let strain_gram = mirror_upper(&sg, n);

        let mut gaps = Vec::with_capacity(disc.surface_body.len() * n);
        for (s, node) in disc.surface_body.iter().enumerate() {
            for (i, tr) in basis.body_trace_at(s).iter().enumerate() {
                let (l, r) = basis.rigid[i];
                gaps.push(tr - (l + r.cross(&node.point)));
            }
        }
        let mut slg = vec![0.0; n * n];
        let mut forcing_base = DVector::zeros(n);
        let mut flux_energy = 0.0;
        for (s, node) in disc.surface_body.iter().enumerate() {
            let g = &gaps[s * n..(s + 1) * n];
            let w = problem.flux.samples[s];
            flux_energy += node.weight * w.norm_squared();
            for j in 0..n {
                forcing_base[j] += node.weight * w.dot(&g[j]);
                for k in j..n {
                    slg[j * n + k] += node.weight * g[j].dot(&g[k]);
                }
            }
        }
        let slip_gram = mirror_upper(&slg, n);

        let surface_stencils = disc
            .surface_body
            .iter()
            .map(|s| surface_stencil(disc, &s.point))
            .collect::<Result<Vec<_>>>()?;

        for (m, what) in [(&strain_gram, "strain gram"), (&slip_gram, "slip gram"), (&body_mass, "body mass")] {
            check_finite(m, what)?;
        }
        Ok(Operators { body_mass, strain_gram, slip_gram, forcing_base, flux_energy, gaps, surface_stencils })
    }

    pub fn gaps_at(&self, s: usize, n: usize) -> &[Vec3] {
        &self.gaps[s * n..(s + 1) * n]
    }

    /// Density at the body surface nodes by convex interpolation.
    pub fn surface_density(&self, rho: &[f64]) -> Vec<f64> {
        self.surface_stencils.iter().map(|st| st.iter().map(|&(i, w)| w * rho[i]).sum()).collect()
    }
}

/// Convex weights reproducing `interpolate_anchored` at a fixed point.
fn surface_stencil(disc: &FluidDiscretization, p: &Vec3) -> Result<Vec<(usize, f64)>> {
    let (cell, offset) = disc.locate(p);
    let mut out = Vec::new();
    for di in -1..=1 {
        for dj in -1..=1 {
            for dk in -1..=1 {
                if let Some(id) = disc.node_at(cell[0] + di, cell[1] + dj, cell[2] + dk) {
                    out.push(id);
                }
            }
        }
    }
    // weights by probing the interpolant with indicator vectors
    let mut probe = vec![0.0; disc.node_count()];
    let mut weights = Vec::new();
    let mut total = 0.0;
    for &id in &out {
        probe[id] = 1.0;
        let w = interpolate_anchored(disc, &probe, cell, &offset).unwrap_or(0.0);
        probe[id] = 0.0;
        if w > 0.0 {
            weights.push((id, w));
            total += w;
        }
    }
    if weights.is_empty() {
        // nearest node
        let id = out
            .iter()
            .copied()
            .min_by(|&a, &b| {
                (disc.nodes[a].point - p).norm().partial_cmp(&(disc.nodes[b].point - p).norm()).unwrap()
            })
            .ok_or(Error::OutOfSampledDomain { x: p.x, y: p.y, z: p.z })?;
        return Ok(vec![(id, 1.0)]);
    }
    for w in weights.iter_mut() {
        w.1 /= total;
    }
    Ok(weights)
}

/// int rho z_j . z_k over the fluid.
pub fn assemble_fluid_mass(basis: &GalerkinBasis, disc: &FluidDiscretization, rho: &[f64]) -> Result<DMatrix<f64>> {
    let n = basis.n;
    let mut flat = vec![0.0; n * n];
    for (i, node) in disc.nodes.iter().enumerate() {
        let w = node.weight * rho[i];
        if w == 0.0 {
            continue;
        }
        let z = basis.values_at(i);
        for j in 0..n {
            let zj = z[j] * w;
            for k in j..n {
                flat[j * n + k] += zj.dot(&z[k]);
            }
        }
    }
    let m = mirror_upper(&flat, n);
    check_finite(&m, "mass matrix")?;
    Ok(m)
}

/// Full mass matrix int rho z_j . z_k + m l_j . l_k + J r_j . r_k.
pub fn assemble_mass(
    basis: &GalerkinBasis,
    disc: &FluidDiscretization,
    geometry: &RigidGeometry,
    rho: &[f64],
) -> Result<DMatrix<f64>> {
    if let Some((i, &v)) = rho.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::DensityNegative { node: i, value: v });
    }
    let fluid = assemble_fluid_mass(basis, disc, rho)?;
    let n = basis.n;
    let body = DMatrix::from_fn(n, n, |j, k| {
        let (lj, rj) = basis.rigid[j];
        let (lk, rk) = basis.rigid[k];
        geometry.mass * lj.dot(&lk) + rj.dot(&(geometry.inertia * rk))
    });
    Ok(fluid + body)
}

#[derive(Debug, Clone)]
pub struct Dissipation {
    /// -2 int nu D(z_j) : D(z_k).
    pub viscous: DMatrix<f64>,
    /// -2 alpha oint nu (z_j - z_Sj) . (z_k - z_Sk).
    pub slip: DMatrix<f64>,
}

impl Dissipation {
    pub fn total(&self) -> DMatrix<f64> {
        &self.viscous + &self.slip
    }
}

fn sampled_viscosity(visc: &Viscosity, rho: f64) -> Result<f64> {
    let nu = visc.eval(rho);
    let (lo, hi) = visc.bounds();
    if !(nu >= lo && nu <= hi) {
        return Err(Error::ViscosityBounds { value: nu, lower: lo, upper: hi });
    }
    Ok(nu)
}

/// Viscous and slip matrices; density samples are used only when the
/// viscosity depends on density.
pub fn assemble_dissipation(
    problem: &Problem,
    ops: &Operators,
    rho_nodes: &[f64],
    rho_surface: &[f64],
) -> Result<Dissipation> {
    let alpha = problem.params.alpha;
    let out = match problem.params.viscosity {
        Viscosity::Constant(nu) => Dissipation {
            viscous: &ops.strain_gram * (-2.0 * nu),
            slip: &ops.slip_gram * (-2.0 * alpha * nu),
        },
        visc => {
            let basis = problem.basis;
            let n = basis.n;
            let mut vg = vec![0.0; n * n];
            let mut d = vec![Matrix3::zeros(); n];
            for (i, node) in problem.disc.nodes.iter().enumerate() {
                let nu = sampled_viscosity(&visc, rho_nodes[i])?;
                for (dk, g) in d.iter_mut().zip(basis.grads_at(i)) {
                    *dk = sym(g);
                }
                let w = -2.0 * nu * node.weight;
                for j in 0..n {
                    for k in j..n {
                        vg[j * n + k] += w * d[j].dot(&d[k]);
                    }
                }
            }
            let mut sl = vec![0.0; n * n];
            for (s, node) in problem.disc.surface_body.iter().enumerate() {
                let nu = sampled_viscosity(&visc, rho_surface[s])?;
                let g = ops.gaps_at(s, n);
                let w = -2.0 * alpha * nu * node.weight;
                for j in 0..n {
                    for k in j..n {
                        sl[j * n + k] += w * g[j].dot(&g[k]);
                    }
                }
            }
            Dissipation { viscous: mirror_upper(&vg, n), slip: mirror_upper(&sl, n) }
        }
    };
    check_finite(&out.viscous, "viscous matrix")?;
    check_finite(&out.slip, "slip matrix")?;
    Ok(out)
}

/// C_j = 2 alpha oint nu g w_0 . (z_j - z_Sj).
pub fn assemble_forcing(problem: &Problem, ops: &Operators, g: f64, rho_surface: &[f64]) -> Result<DVector<f64>> {
    let alpha = problem.params.alpha;
    let out = match problem.params.viscosity {
        Viscosity::Constant(nu) => &ops.forcing_base * (2.0 * alpha * nu * g),
        visc => {
            let n = problem.basis.n;
            let mut c = DVector::zeros(n);
            for (s, node) in problem.disc.surface_body.iter().enumerate() {
                let nu = sampled_viscosity(&visc, rho_surface[s])?;
                let w = problem.flux.samples[s] * (2.0 * alpha * nu * g * node.weight);
                for (j, gap) in ops.gaps_at(s, n).iter().enumerate() {
                    c[j] += w.dot(gap);
                }
            }
            c
        }
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::AssemblyNan("forcing"));
    }
    Ok(out)
}

/// alpha oint nu |w_0|^2 at the given surface density.
pub fn flux_energy_rate(problem: &Problem, ops: &Operators, rho_surface: &[f64]) -> Result<f64> {
    let alpha = problem.params.alpha;
    match problem.params.viscosity {
        Viscosity::Constant(nu) => Ok(alpha * nu * ops.flux_energy),
        visc => {
            let mut acc = 0.0;
            for (s, node) in problem.disc.surface_body.iter().enumerate() {
                let nu = sampled_viscosity(&visc, rho_surface[s])?;
                acc += alpha * nu * node.weight * problem.flux.samples[s].norm_squared();
            }
            Ok(acc)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Advection {
    /// -1/2 [int rho (V.grad z_k).z_j - int rho (V.grad z_j).z_k].
    pub convective: DMatrix<f64>,
    /// Linearized rotational terms, fluid and body.
    pub gyroscopic: DMatrix<f64>,
}

impl Advection {
    pub fn total(&self) -> DMatrix<f64> {
        &self.convective + &self.gyroscopic
    }
}

/// Relative velocity V = v - v_S and its gradient at a node.
pub fn relative_velocity_at(basis: &GalerkinBasis, point: &Vec3, node: usize, v: &[f64]) -> (Vec3, Matrix3<f64>) {
    let (u, g) = basis.combine_at(node, v);
    let (l, r) = basis.rigid_velocity(v);
    (u - (l + r.cross(point)), g - r.cross_matrix())
}

fn antisym(flat: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |j, k| -0.5 * (flat[j * n + k] - flat[k * n + j]))
}

/// Advection operator for a frozen advecting coefficient vector `v`.
pub fn advection_operator(
    basis: &GalerkinBasis,
    disc: &FluidDiscretization,
    geometry: &RigidGeometry,
    rho: &[f64],
    v: &[f64],
) -> Result<Advection> {
    let n = basis.n;
    let (_, rv) = basis.rigid_velocity(v);
    let mut p = vec![0.0; n * n];
    let mut s = vec![0.0; n * n];
    let mut gk = vec![Vec3::zeros(); n];
    let mut ck = vec![Vec3::zeros(); n];
    for (i, node) in disc.nodes.iter().enumerate() {
        let w = node.weight * rho[i];
        if w == 0.0 {
            continue;
        }
        let (vel, _) = relative_velocity_at(basis, &node.point, i, v);
        let z = basis.values_at(i);
        let grads = basis.grads_at(i);
        for k in 0..n {
            gk[k] = grads[k] * vel;
            ck[k] = rv.cross(&z[k]);
        }
        for j in 0..n {
            let zj = z[j] * w;
            let row = j * n;
            for k in 0..n {
                p[row + k] += zj.dot(&gk[k]);
                s[row + k] += zj.dot(&ck[k]);
            }
        }
    }
    let convective = antisym(&p, n);
    // fluid rotational term -int rho det(r_v, z_k, z_j) = -S_jk, antisymmetrized
    let mut gyro = vec![0.0; n * n];
    for j in 0..n {
        for k in 0..n {
            let (lj, rj) = basis.rigid[j];
            let (lk, rk) = basis.rigid[k];
            let body = (lk * geometry.mass).dot(&rv.cross(&lj)) + (geometry.inertia * rv).dot(&rk.cross(&rj));
            // antisym() maps X to -(X - X^T)/2, so store -(fluid + body)
            gyro[j * n + k] = s[j * n + k] - body;
        }
    }
    let gyroscopic = antisym(&gyro, n);
    check_finite(&convective, "convective operator")?;
    check_finite(&gyroscopic, "gyroscopic operator")?;
    Ok(Advection { convective, gyroscopic })
}

/// B(u) for advecting field v: (K(v) + G(v)) u.
pub fn assemble_nonlinear(
    basis: &GalerkinBasis,
    disc: &FluidDiscretization,
    geometry: &RigidGeometry,
    rho: &[f64],
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(advection_operator(basis, disc, geometry, rho, v.as_slice())?.total() * u)
}

/// One implicit midpoint step of M a' = L a + C with constant M, L, C.
pub fn linear_midpoint_step(
    m: &DMatrix<f64>,
    l: &DMatrix<f64>,
    c: &DVector<f64>,
    alpha: &DVector<f64>,
    dt: f64,
) -> Option<DVector<f64>> {
    let lhs = m - l * (0.5 * dt);
    let rhs = (m + l * (0.5 * dt)) * alpha + c * dt;
    lhs.lu().solve(&rhs)
}

#[derive(Debug, Clone, Copy)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Advect the density only in the first sweep of each step.
    pub freeze_density: bool,
    /// RK4 substeps of the characteristic tracing per time step.
    pub transport_substeps: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { tol: 1e-8, max_iter: 50, freeze_density: false, transport_substeps: 4 }
    }
}

#[derive(Debug, Clone)]
pub struct SimState {
    pub step: usize,
    pub t: f64,
    pub alpha: DVector<f64>,
    pub transport: TransportState,
    pub density: DensityField,
    pub fluid_mass: DMatrix<f64>,
    pub pose: BodyPose,
}

/// Result of one application of the fixed-point map over a step.
pub struct FixedPointOutput {
    pub alpha_next: DVector<f64>,
    pub transport_next: TransportState,
    pub density_next: DensityField,
    pub fluid_mass_next: DMatrix<f64>,
    pub rho_bar: Vec<f64>,
    pub rho_surface_bar: Vec<f64>,
    pub dissipation: Dissipation,
    pub advection: Advection,
    pub forcing: DVector<f64>,
}

/// Applies the step map once: given the end-of-step iterate `v_end` the
/// advecting field over the step is (a^n + v_end) / 2.
pub fn fixed_point_map(
    problem: &Problem,
    ops: &Operators,
    state: &SimState,
    v_end: &DVector<f64>,
    dt: f64,
    opts: &PicardOptions,
    frozen: Option<(&TransportState, &DensityField, &DMatrix<f64>)>,
) -> Result<FixedPointOutput> {
    let basis = problem.basis;
    let disc = problem.disc;
    let vbar: DVector<f64> = (&state.alpha + v_end) * 0.5;

    let (transport_next, density_next, fluid_mass_next) = match frozen {
        Some((t, d, m)) => (t.clone(), d.clone(), m.clone()),
        None => {
            let field = |i: usize| relative_velocity_at(basis, &disc.nodes[i].point, i, vbar.as_slice());
            let tr = state.transport.step(disc, &field, dt, opts.transport_substeps)?;
            let rho = tr.density(disc)?;
            let mf = assemble_fluid_mass(basis, disc, &rho.values)?;
            (tr, rho, mf)
        }
    };

    let rho_bar: Vec<f64> =
        state.density.values.iter().zip(&density_next.values).map(|(a, b)| 0.5 * (a + b)).collect();
    let rho_surface_bar = ops.surface_density(&rho_bar);
    let m_bar = &ops.body_mass + (&state.fluid_mass + &fluid_mass_next) * 0.5;
    if m_bar.clone().cholesky().is_none() {
        return Err(Error::MassMatrixSingular { time: state.t });
    }
    let advection = advection_operator(basis, disc, problem.geometry, &rho_bar, vbar.as_slice())?;
    let dissipation = assemble_dissipation(problem, ops, &rho_bar, &rho_surface_bar)?;
    let g_bar = 0.5 * (problem.flux.profile.eval(state.t) + problem.flux.profile.eval(state.t + dt));
    let forcing = assemble_forcing(problem, ops, g_bar, &rho_surface_bar)?;

    let k_sym = (&fluid_mass_next - &state.fluid_mass) * (-0.5 / dt);
    let l_total = dissipation.total() + advection.total() + k_sym;
    let alpha_next = linear_midpoint_step(&m_bar, &l_total, &forcing, &state.alpha, dt)
        .ok_or(Error::MassMatrixSingular { time: state.t })?;
    if alpha_next.iter().any(|v| !v.is_finite()) {
        return Err(Error::AssemblyNan("step solution"));
    }
    Ok(FixedPointOutput {
        alpha_next,
        transport_next,
        density_next,
        fluid_mass_next,
        rho_bar,
        rho_surface_bar,
        dissipation,
        advection,
        forcing,
    })
}

/// Per-step energy increments.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepEnergetics {
    pub t: f64,
    pub e_fluid: f64,
    pub e_body: f64,
    pub d_visc: f64,
    pub d_slip: f64,
    pub w_budget: f64,
    /// Increments of the bracket ledger (variable viscosity): dissipation at
    /// the lower viscosity bound and budget at the upper bound.
    pub bracket: Option<(f64, f64, f64)>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LedgerRecord {
    pub t: f64,
    pub e_fluid: f64,
    pub e_body: f64,
    pub d_visc: f64,
    pub d_slip: f64,
    pub w_budget: f64,
    /// E(0) + W - (E + D_visc + D_slip), cumulative.
    pub slack: f64,
    pub slack_increment: f64,
    /// Cumulative (D_visc_lo, D_slip_lo, W_hi, slack) of the bracket ledger.
    pub bracket: Option<(f64, f64, f64, f64)>,
}

impl LedgerRecord {
    pub fn energy(&self) -> f64 {
        self.e_fluid + self.e_body
    }
}

#[derive(Debug, Clone, Default)]
pub struct EnergyLedger {
    pub e0: f64,
    pub records: Vec<LedgerRecord>,
}

impl EnergyLedger {
    pub fn new(e_fluid: f64, e_body: f64, bracketed: bool) -> EnergyLedger {
        let e0 = e_fluid + e_body;
        EnergyLedger {
            e0,
            records: vec![LedgerRecord {
                e_fluid,
                e_body,
                bracket: bracketed.then_some((0.0, 0.0, 0.0, 0.0)),
                ..Default::default()
            }],
        }
    }

    pub fn last(&self) -> &LedgerRecord {
        self.records.last().unwrap()
    }

    /// Tolerance for the slack: -1e-8 (1 + E(0)).
    pub fn slack_floor(&self) -> f64 {
        -1e-8 * (1.0 + self.e0)
    }
}

/// Appends the cumulative record after one step.
pub fn energy_ledger_step(ledger: &mut EnergyLedger, step: &StepEnergetics) -> LedgerRecord {
    let prev = *ledger.last();
    let d_visc = prev.d_visc + step.d_visc;
    let d_slip = prev.d_slip + step.d_slip;
    let w_budget = prev.w_budget + step.w_budget;
    let e = step.e_fluid + step.e_body;
    let slack = ledger.e0 + w_budget - (e + d_visc + d_slip);
    let bracket = match (prev.bracket, step.bracket) {
        (Some((a, b, c, _)), Some((da, db, dc))) => {
            let (a, b, c) = (a + da, b + db, c + dc);
            Some((a, b, c, ledger.e0 + c - (e + a + b)))
        }
        _ => None,
    };
    let rec = LedgerRecord {
        t: step.t,
        e_fluid: step.e_fluid,
        e_body: step.e_body,
        d_visc,
        d_slip,
        w_budget,
        slack,
        slack_increment: slack - prev.slack,
        bracket,
    };
    ledger.records.push(rec);
    rec
}

/// Energies (fluid, body) of a coefficient vector.
pub fn energies(basis: &GalerkinBasis, geometry: &RigidGeometry, fluid_mass: &DMatrix<f64>, alpha: &DVector<f64>) -> (f64, f64) {
    let ef = 0.5 * alpha.dot(&(fluid_mass * alpha));
    let (l, r) = basis.rigid_velocity(alpha.as_slice());
    let eb = 0.5 * geometry.mass * l.norm_squared() + 0.5 * r.dot(&(geometry.inertia * r));
    (ef, eb)
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: usize,
    pub t: f64,
    pub picard_iterations: usize,
    pub picard_increment: f64,
    /// Advecting coefficients used for transport over the step.
    pub transport_coeffs: DVector<f64>,
    pub energetics: StepEnergetics,
    /// a_bar^T G a_bar and the scale |a_bar|^2 ||G||.
    pub gyroscopic_contraction: (f64, f64),
    /// (int rho_bar (V.grad u).u, 1/2 int d_t rho |u|^2, int rho_bar |V||grad u||u|).
    pub trilinear: (f64, f64, f64),
    pub max_relative_speed: f64,
}

/// Advances one step with Picard iteration on the end-of-step coefficients.
pub fn advance(
    problem: &Problem,
    ops: &Operators,
    state: &SimState,
    dt: f64,
    opts: &PicardOptions,
) -> Result<(SimState, StepReport)> {
    let mut v = state.alpha.clone();
    let mut out: Option<FixedPointOutput> = None;
    let mut increment = f64::INFINITY;
    let mut iterations = 0;
    let mut v_used = v.clone();
    for k in 1..=opts.max_iter {
        iterations = k;
        let frozen = match (&out, opts.freeze_density) {
            (Some(o), true) => Some((&o.transport_next, &o.density_next, &o.fluid_mass_next)),
            _ => None,
        };
        let next = fixed_point_map(problem, ops, state, &v, dt, opts, frozen)?;
        increment = (&next.alpha_next - &v).amax();
        v_used = v;
        v = next.alpha_next.clone();
        out = Some(next);
        if increment <= opts.tol {
            break;
        }
    }
    if !(increment <= opts.tol) {
        return Err(Error::PicardStalled { step: state.step + 1, iterations, increment });
    }
    let out = out.unwrap();
    let basis = problem.basis;
    let disc = problem.disc;
    let alpha_next = out.alpha_next;
    let abar: DVector<f64> = (&state.alpha + &alpha_next) * 0.5;
    let vbar: DVector<f64> = (&state.alpha + &v_used) * 0.5;

    let (e_fluid, e_body) = energies(basis, problem.geometry, &out.fluid_mass_next, &alpha_next);
    let d_visc = -dt * abar.dot(&(&out.dissipation.viscous * &abar));
    let d_slip = -0.5 * dt * abar.dot(&(&out.dissipation.slip * &abar));
    let g0 = problem.flux.profile.eval(state.t);
    let g1 = problem.flux.profile.eval(state.t + dt);
    let g2 = 0.5 * dt * (g0 * g0 + g1 * g1);
    let w_budget = g2 * flux_energy_rate(problem, ops, &out.rho_surface_bar)?;
    let bracket = match problem.params.viscosity {
        Viscosity::Constant(_) => None,
        Viscosity::DensityDependent { .. } => {
            let (lo, hi) = problem.params.viscosity.bounds();
            let a = problem.params.alpha;
            Some((
                2.0 * dt * lo * abar.dot(&(&ops.strain_gram * &abar)),
                dt * lo * a * abar.dot(&(&ops.slip_gram * &abar)),
                g2 * hi * a * ops.flux_energy,
            ))
        }
    };
    let energetics = StepEnergetics { t: state.t + dt, e_fluid, e_body, d_visc, d_slip, w_budget, bracket };

    let gyro = abar.dot(&(&out.advection.gyroscopic * &abar));
    let gyro_scale = abar.norm_squared() * out.advection.gyroscopic.norm();

    let mut t_adv = 0.0;
    let mut t_rate = 0.0;
    let mut t_scale = 0.0;
    let mut vmax: f64 = 0.0;
    for (i, node) in disc.nodes.iter().enumerate() {
        let (u, gu) = basis.combine_at(i, abar.as_slice());
        let (vel, _) = relative_velocity_at(basis, &node.point, i, vbar.as_slice());
        vmax = vmax.max(vel.norm());
        let w = node.weight;
        t_adv += w * out.rho_bar[i] * (gu * vel).dot(&u);
        t_rate += 0.5 * w * (out.density_next.values[i] - state.density.values[i]) / dt * u.norm_squared();
        t_scale += w * out.rho_bar[i] * vel.norm() * gu.norm() * u.norm();
    }

    let (l, r) = basis.rigid_velocity(abar.as_slice());
    let pose = integrate_pose(&state.pose, &l, &r, dt);
    let next = SimState {
        step: state.step + 1,
        t: state.t + dt,
        alpha: alpha_next,
        transport: out.transport_next,
        density: out.density_next,
        fluid_mass: out.fluid_mass_next,
        pose,
    };
    let report = StepReport {
        step: next.step,
        t: next.t,
        picard_iterations: iterations,
        picard_increment: increment,
        transport_coeffs: vbar,
        energetics,
        gyroscopic_contraction: (gyro, gyro_scale),
        trilinear: (t_adv, t_rate, t_scale),
        max_relative_speed: vmax,
    };
    Ok((next, report))
}

/// Initial velocity: a fluid field in the body frame plus rigid velocities.
pub struct InitialVelocity {
    pub fluid: Box<dyn Fn(&Vec3) -> Vec3>,
    pub l: Vec3,
    pub r: Vec3,
}

impl InitialVelocity {
    pub fn rest() -> InitialVelocity {
        InitialVelocity { fluid: Box::new(|_| Vec3::zeros()), l: Vec3::zeros(), r: Vec3::zeros() }
    }

    /// The whole system moving rigidly with (l, r).
    pub fn rigid(l: Vec3, r: Vec3) -> InitialVelocity {
        InitialVelocity { fluid: Box::new(move |y| l + r.cross(y)), l, r }
    }

    /// Azimuthal ring A exp(-(|y| - 2)^2) e_3 x y / |y|, body at rest.
    pub fn vortex(amplitude: f64) -> InitialVelocity {
        InitialVelocity {
            fluid: Box::new(move |y| {
                let r = y.norm();
                Vec3::z().cross(y) * (amplitude * (-(r - 2.0) * (r - 2.0)).exp() / r)
            }),
            l: Vec3::zeros(),
            r: Vec3::zeros(),
        }
    }
}

pub struct InitialData {
    pub density: InitialDensity,
    pub shift: f64,
    pub subsamples: usize,
    pub velocity: InitialVelocity,
}

/// Projects the initial data: density by sampling, velocity by the
/// H-orthogonal projection onto the span of the basis.
pub fn initial_state(problem: &Problem, initial: InitialData) -> Result<SimState> {
    let disc = problem.disc;
    let basis = problem.basis;
    let geo = problem.geometry;
    let transport = TransportState::new(disc, initial.density, initial.shift, initial.subsamples);
    let density = transport.density(disc)?;
    if let Some((i, &v)) = density.values.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::DensityNegative { node: i, value: v });
    }
    let fluid_mass = assemble_fluid_mass(basis, disc, &density.values)?;
    let m = &fluid_mass
        + DMatrix::from_fn(basis.n, basis.n, |j, k| {
            let (lj, rj) = basis.rigid[j];
            let (lk, rk) = basis.rigid[k];
            geo.mass * lj.dot(&lk) + rj.dot(&(geo.inertia * rk))
        });
    let mut b = DVector::zeros(basis.n);
    for (i, node) in disc.nodes.iter().enumerate() {
        let u0 = (initial.velocity.fluid)(&node.point);
        let w = node.weight * density.values[i];
        for (j, z) in basis.values_at(i).iter().enumerate() {
            b[j] += w * u0.dot(z);
        }
    }
    for j in 0..basis.n {
        let (lj, rj) = basis.rigid[j];
        b[j] += geo.mass * initial.velocity.l.dot(&lj) + (geo.inertia * initial.velocity.r).dot(&rj);
    }
    let chol = m.cholesky().ok_or(Error::MassMatrixSingular { time: 0.0 })?;
    let alpha = chol.solve(&b);
    Ok(SimState { step: 0, t: 0.0, alpha, transport, density, fluid_mass, pose: BodyPose::default() })
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub dt: f64,
    pub t_end: f64,
    pub picard: PicardOptions,
    /// Abort on the first invariant breach instead of recording it.
    pub hard_invariants: bool,
    /// Keep every density snapshot in the trajectory.
    pub keep_density: bool,
    pub positive_density: bool,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub alphas: Vec<DVector<f64>>,
    pub poses: Vec<BodyPose>,
    pub densities: Vec<DensityField>,
    /// Flow maps per snapshot, kept together with the densities.
    pub transports: Vec<TransportState>,
    pub reports: Vec<StepReport>,
    pub ledger: EnergyLedger,
    pub masses: Vec<f64>,
    pub density_range: Vec<(f64, f64)>,
    pub violations: Vec<String>,
    pub final_state: SimState,
}

pub fn number_of_steps(t_end: f64, dt: f64) -> usize {
    ((t_end / dt) - 1e-9).ceil().max(0.0) as usize
}

/// Runs the scheme from `state` to `opts.t_end`.
pub fn time_integrate(problem: &Problem, ops: &Operators, state: SimState, opts: &RunOptions) -> Result<Trajectory> {
    let disc = problem.disc;
    let (ef, eb) = energies(problem.basis, problem.geometry, &state.fluid_mass, &state.alpha);
    let mut ledger = EnergyLedger::new(ef, eb, !problem.params.viscosity.is_constant());
    let mass = |d: &DensityField| -> f64 { disc.nodes.iter().zip(&d.values).map(|(n, v)| n.weight * (v - d.shift)).sum() };
    let mut traj = Trajectory {
        times: vec![state.t],
        alphas: vec![state.alpha.clone()],
        poses: vec![state.pose],
        densities: if opts.keep_density { vec![state.density.clone()] } else { Vec::new() },
        transports: if opts.keep_density { vec![state.transport.clone()] } else { Vec::new() },
        reports: Vec::new(),
        masses: vec![mass(&state.density)],
        density_range: vec![(state.density.min(), state.density.max())],
        ledger: EnergyLedger::default(),
        violations: Vec::new(),
        final_state: state.clone(),
    };
    let steps = number_of_steps(opts.t_end - state.t, opts.dt);
    let mut state = state;
    let mut cfl_warned = false;
    let mut clearance_warned = false;
    let body_radius = problem.geometry.shape.bounding_radius(&Vec3::zeros());
    for _ in 0..steps {
        let dt = opts.dt.min(opts.t_end - state.t);
        let (next, report) = advance(problem, ops, &state, dt, &opts.picard)?;
        let rec = energy_ledger_step(&mut ledger, &report.energetics);
        let mut breaches: Vec<(String, f64, f64)> = Vec::new();
        let floor = ledger.slack_floor();
        if rec.slack < floor {
            breaches.push(("energy slack below floor".into(), rec.slack, floor));
        }
        if let Some((_, _, _, bs)) = rec.bracket {
            if bs < floor {
                breaches.push(("bracketed energy slack below floor".into(), bs, floor));
            }
        }
        let (lo, hi) = (next.density.min(), next.density.max());
        let (blo, bhi) = next.density.bounds;
        if lo < blo || hi > bhi {
            breaches.push(("density outside initial bounds".into(), if lo < blo { lo } else { hi }, if lo < blo { blo } else { bhi }));
        }
        if opts.positive_density && !(lo > 0.0) {
            let node = next.density.values.iter().position(|v| !(*v > 0.0)).unwrap_or(0);
            return Err(Error::DensityNegative { node, value: lo });
        }
        for (what, value, bound) in breaches {
            if opts.hard_invariants {
                return Err(Error::InvariantBreach { step: next.step, what, value, bound });
            }
            log::warn!("step {}: {} ({:.3e} vs {:.3e})", next.step, what, value, bound);
            traj.violations.push(format!("step {}: {} ({:.6e} vs {:.6e})", next.step, what, value, bound));
        }
        if !cfl_warned && report.max_relative_speed * dt > 0.5 * disc.spacing {
            log::warn!("step {}: max |V| dt = {:.3e} exceeds half the lattice spacing", next.step, report.max_relative_speed * dt);
            cfl_warned = true;
        }
        if !clearance_warned && relative_clearance(&next.pose, body_radius, disc.outer_radius) < 0.1 {
            log::warn!("step {}: body within 0.1 R of the outer sphere in the inertial frame", next.step);
            clearance_warned = true;
        }
        traj.times.push(next.t);
        traj.alphas.push(next.alpha.clone());
        traj.poses.push(next.pose);
        traj.masses.push(mass(&next.density));
        traj.density_range.push((lo, hi));
        if opts.keep_density {
            traj.densities.push(next.density.clone());
            traj.transports.push(next.transport.clone());
        }
        traj.reports.push(report);
        state = next;
    }
    traj.ledger = ledger;
    traj.final_state = state;
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis, BasisOptions};
    use crate::geometry::build_discretization;
    use crate::propulsion::{family_flux, FluxFamily, TimeProfile};
    use crate::transport::DensityProfile;

    struct Setup {
        geo: RigidGeometry,
        disc: FluidDiscretization,
        basis: GalerkinBasis,
    }

    fn setup(n: usize) -> Setup {
        let geo = RigidGeometry::sphere(1.0, 1.0).unwrap();
        let disc = build_discretization(&geo, 4.0, 0.5, 2).unwrap();
        let basis = build_basis(&geo, &disc, n, &BasisOptions::default()).unwrap();
        Setup { geo, disc, basis }
    }

    fn problem<'a>(s: &'a Setup, flux: &'a PropulsionFlux, viscosity: Viscosity) -> Problem<'a> {
        Problem { geometry: &s.geo, disc: &s.disc, basis: &s.basis, params: PhysicalParams { viscosity, alpha: 1.0 }, flux }
    }

    fn blob() -> InitialDensity {
        InitialDensity::Profile(DensityProfile::Blob { background: 1.0, value: 2.0, center: Vec3::new(2.2, 0.0, 0.0), radius: 0.8 })
    }

    fn run_opts(dt: f64, t_end: f64) -> RunOptions {
        RunOptions { dt, t_end, picard: PicardOptions::default(), hard_invariants: true, keep_density: false, positive_density: true }
    }

    #[test]
    fn zero_data_stays_zero() {
        let s = setup(8);
        let flux = PropulsionFlux::zero(&s.disc);
        let p = problem(&s, &flux, Viscosity::Constant(1.0));
        let ops = Operators::new(&p).unwrap();
        let st = initial_state(&p, InitialData { density: blob(), shift: 0.0, subsamples: 1, velocity: InitialVelocity::rest() }).unwrap();
        let tr = time_integrate(&p, &ops, st, &run_opts(0.01, 0.2)).unwrap();
        assert!(tr.alphas.iter().all(|a| a.iter().all(|v| *v == 0.0)));
        assert!(tr.reports.iter().all(|r| r.picard_iterations == 1));
        assert!(tr.poses.iter().all(|q| q.h == Vec3::zeros() && q.q == Matrix3::identity()));
    }

    #[test]
    fn advection_operator_is_antisymmetric() {
        let s = setup(10);
        let rho: Vec<f64> = s.disc.nodes.iter().map(|n| 1.0 + 0.3 * n.point.x.sin()).collect();
        let v = DVector::from_fn(10, |i, _| (i as f64 * 0.7).cos());
        let a = advection_operator(&s.basis, &s.disc, &s.geo, &rho, v.as_slice()).unwrap();
        let t = a.total();
        assert_eq!((&t + t.transpose()).amax(), 0.0);
        assert!(a.convective.amax() > 0.0);
        let u = DVector::from_fn(10, |i, _| 1.0 / (1.0 + i as f64));
        assert!(u.dot(&(&t * &u)).abs() < 1e-14 * t.norm() * u.norm_squared());
    }

    #[test]
    fn mass_matrix_spd_and_negative_density_rejected() {
        let s = setup(8);
        let rho = vec![1.0; s.disc.node_count()];
        let m = assemble_fluid_mass(&s.basis, &s.disc, &rho).unwrap();
        assert!(m.cholesky().is_some());
        let mut bad = rho.clone();
        bad[5] = -0.1;
        assert!(matches!(assemble_mass(&s.basis, &s.disc, &s.geo, &bad), Err(Error::DensityNegative { node: 5, .. })));
    }

    #[test]
    fn energy_decays_without_propulsion() {
        let s = setup(12);
        let flux = PropulsionFlux::zero(&s.disc);
        let p = problem(&s, &flux, Viscosity::Constant(0.5));
        let ops = Operators::new(&p).unwrap();
        let st = initial_state(&p, InitialData { density: blob(), shift: 0.0, subsamples: 2, velocity: InitialVelocity::vortex(1.0) }).unwrap();
        let tr = time_integrate(&p, &ops, st, &run_opts(0.01, 0.2)).unwrap();
        let e: Vec<f64> = tr.ledger.records.iter().map(|r| r.energy()).collect();
        assert!(e[0] > 0.0);
        for w in e.windows(2) {
            assert!(w[1] <= w[0] + 1e-14 * e[0]);
        }
        assert!(tr.ledger.records.iter().all(|r| r.slack >= tr.ledger.slack_floor()));
    }

    #[test]
    fn cayley_step_preserves_norm() {
        let m = DMatrix::identity(2, 2);
        let l = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, -3.0, 0.0]);
        let c = DVector::zeros(2);
        let mut a = DVector::from_vec(vec![1.0, 0.5]);
        let n0 = a.norm();
        for _ in 0..1000 {
            a = linear_midpoint_step(&m, &l, &c, &a, 0.01).unwrap();
        }
        assert!((a.norm() - n0).abs() < 1e-12);
    }

    #[test]
    fn normal_flux_rejected() {
        let s = setup(8);
        let raw = PropulsionFlux { samples: s.disc.surface_body.iter().map(|n| n.normal).collect(), profile: TimeProfile::Constant };
        let p = problem(&s, &raw, Viscosity::Constant(1.0));
        assert!(matches!(Operators::new(&p), Err(Error::FluxNotTangential { .. })));
    }

    #[test]
    fn picard_map_contracts() {
        let s = setup(10);
        let flux = family_flux(FluxFamily::Swirl, 1.0, &s.disc.surface_body, TimeProfile::Constant);
        let p = problem(&s, &flux, Viscosity::Constant(1.0));
        let ops = Operators::new(&p).unwrap();
        let st = initial_state(&p, InitialData { density: blob(), shift: 0.0, subsamples: 1, velocity: InitialVelocity::vortex(0.5) }).unwrap();
        let opts = PicardOptions::default();
        let a = st.alpha.clone();
        let b = &st.alpha + DVector::from_element(10, 0.05);
        let fa = fixed_point_map(&p, &ops, &st, &a, 0.01, &opts, None).unwrap().alpha_next;
        let fb = fixed_point_map(&p, &ops, &st, &b, 0.01, &opts, None).unwrap().alpha_next;
        assert!((&fa - &fb).norm() < 0.5 * (&a - &b).norm());
    }

    #[test]
    fn variable_viscosity_clamped() {
        let v = Viscosity::DensityDependent { nu1: 0.5, nu2: 2.0 };
        assert_eq!(v.eval(0.0), 0.5);
        assert!(v.eval(1e12) <= 2.0);
        assert!((v.eval(1.0) - 1.25).abs() < 1e-15);
        assert_eq!(v.bounds(), (0.5, 2.0));
    }
}
