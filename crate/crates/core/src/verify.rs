//! Verification tools: identities behind the slip reduction, the weak
//! residual of a computed trajectory, and pressure recovery.

use nalgebra::{DVector, Matrix3};

use crate::error::Result;
use crate::galerkin::{relative_velocity_at, Operators, Problem, Viscosity};
use crate::geometry::{FluidDiscretization, Vec3};

/// |(A x B).(C x D) - (A.C)(B.D) + (A.D)(B.C)|.
pub fn lagrange_identity_check(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    (a.cross(b).dot(&c.cross(d)) - a.dot(c) * b.dot(d) + a.dot(d) * b.dot(c)).abs()
}

#[derive(Debug, Clone)]
pub struct SlipReductionReport {
    /// Largest |[(u - u_S - w) x n].[(phi - phi_S) x n] - (u - u_S - w).(phi - phi_S)|.
    pub max_discrepancy: f64,
    /// Largest normal component among both gaps.
    pub normal_defect: f64,
    /// Largest gap magnitude, used to scale the bound.
    pub scale: f64,
    /// Nodes whose gaps have a normal component above the tolerance, with
    /// that component.
    pub violations: Vec<(usize, f64)>,
}

impl SlipReductionReport {
    /// The discrepancy is bounded by twice the normal defect times the scale.
    pub fn within_bound(&self) -> bool {
        self.max_discrepancy <= 2.0 * self.normal_defect * self.scale + 1e-12 * self.scale * self.scale
    }
}

/// Nodewise check that the cross-product form of the slip pairing equals the
/// dot-product form when both gaps are tangent.
pub fn slip_reduction_check(
    u: &[Vec3],
    u_s: &[Vec3],
    w: &[Vec3],
    phi: &[Vec3],
    phi_s: &[Vec3],
    normals: &[Vec3],
    tol: f64,
) -> SlipReductionReport {
    let mut rep = SlipReductionReport { max_discrepancy: 0.0, normal_defect: 0.0, scale: 0.0, violations: Vec::new() };
    for i in 0..normals.len() {
        let n = normals[i];
        let a = u[i] - u_s[i] - w[i];
        let b = phi[i] - phi_s[i];
        let d = (a.cross(&n).dot(&b.cross(&n)) - a.dot(&b)).abs();
        rep.max_discrepancy = rep.max_discrepancy.max(d);
        rep.scale = rep.scale.max(a.norm()).max(b.norm());
        let defect = a.dot(&n).abs().max(b.dot(&n).abs());
        rep.normal_defect = rep.normal_defect.max(defect);
        if defect > tol {
            rep.violations.push((i, defect));
        }
    }
    rep
}

/// Test function phi(y, t) = psi(t) xi(y) with xi = sum c_i z_i.
#[derive(Debug, Clone)]
pub struct WeakTest {
    pub coeffs: DVector<f64>,
    /// Cubic psi(t) = psi[0] + psi[1] t + psi[2] t^2 + psi[3] t^3.
    pub psi: [f64; 4],
}

impl WeakTest {
    fn psi(&self, t: f64) -> (f64, f64) {
        let [a, b, c, d] = self.psi;
        (a + t * (b + t * (c + t * d)), b + t * (2.0 * c + 3.0 * d * t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvectiveForm {
    /// Skew form plus the density-rate term; the form the scheme is
    /// built on.
    Skew,
    /// int rho ((V.grad) phi) . u as written in the weak formulation.
    Literal,
}

#[derive(Debug, Clone)]
pub struct WeakResidual {
    pub residual: f64,
    /// Inertial, convective, rotational, body and viscous/slip/propulsion
    /// contributions, in that order.
    pub terms: [f64; 5],
    /// Largest magnitude among the individual contributions.
    pub scale: f64,
}

pub struct TrajectoryView<'a> {
    pub times: &'a [f64],
    pub alphas: &'a [DVector<f64>],
    pub densities: &'a [Vec<f64>],
}

const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_31, 5.0 / 18.0),
    (0.5, 8.0 / 18.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

struct Snapshot {
    u: Vec<Vec3>,
    gu: Vec<Matrix3<f64>>,
    gap: Vec<Vec3>,
    l: Vec3,
    r: Vec3,
}

fn snapshot(problem: &Problem, ops: &Operators, alpha: &DVector<f64>) -> Snapshot {
    let basis = problem.basis;
    let n = basis.n;
    let mut u = Vec::with_capacity(problem.disc.node_count());
    let mut gu = Vec::with_capacity(problem.disc.node_count());
    for i in 0..problem.disc.node_count() {
        let (v, g) = basis.combine_at(i, alpha.as_slice());
        u.push(v);
        gu.push(g);
    }
    let gap = (0..problem.disc.surface_body.len())
        .map(|s| ops.gaps_at(s, n).iter().zip(alpha.iter()).map(|(g, a)| g * *a).sum())
        .collect();
    let (l, r) = basis.rigid_velocity(alpha.as_slice());
    Snapshot { u, gu, gap, l, r }
}

fn sym(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Walks every quadrature contribution of the weak residual for each test
/// and hands it to `sink(test, term, value)`.
fn walk_weak_residual(
    problem: &Problem,
    ops: &Operators,
    traj: &TrajectoryView,
    tests: &[WeakTest],
    form: ConvectiveForm,
    sink: &mut dyn FnMut(usize, usize, f64),
) {
    let disc = problem.disc;
    let geo = problem.geometry;
    let alpha_c = problem.params.alpha;
    let visc = problem.params.viscosity;
    let xis: Vec<Snapshot> = tests.iter().map(|t| snapshot(problem, ops, &t.coeffs)).collect();
    let d_xis: Vec<Vec<Matrix3<f64>>> = xis.iter().map(|x| x.gu.iter().map(sym).collect()).collect();
    let k = traj.times.len() - 1;

    // boundary terms
    for (idx, sign) in [(k, 1.0), (0, -1.0)] {
        let s = snapshot(problem, ops, &traj.alphas[idx]);
        for (q, (test, xi)) in tests.iter().zip(&xis).enumerate() {
            let (psi, _) = test.psi(traj.times[idx]);
            for (i, node) in disc.nodes.iter().enumerate() {
                sink(q, 0, sign * psi * node.weight * traj.densities[idx][i] * s.u[i].dot(&xi.u[i]));
            }
            sink(q, 3, sign * psi * (geo.mass * s.l.dot(&xi.l) + (geo.inertia * s.r).dot(&xi.r)));
        }
    }

    let mut prev = snapshot(problem, ops, &traj.alphas[0]);
    for j in 0..k {
        let next = snapshot(problem, ops, &traj.alphas[j + 1]);
        let (t0, t1) = (traj.times[j], traj.times[j + 1]);
        let dt = t1 - t0;
        let (r0, r1) = (&traj.densities[j], &traj.densities[j + 1]);
        let rho_s0 = ops.surface_density(r0);
        let rho_s1 = ops.surface_density(r1);
        for &(theta, gw) in &GAUSS3 {
            let t = t0 + theta * dt;
            let w_t = gw * dt;
            let psis: Vec<(f64, f64)> = tests.iter().map(|q| q.psi(t)).collect();
            let lerp = |a: &Vec3, b: &Vec3| a * (1.0 - theta) + b * theta;
            let l = lerp(&prev.l, &next.l);
            let r = lerp(&prev.r, &next.r);
            for (i, node) in disc.nodes.iter().enumerate() {
                let w = w_t * node.weight;
                let rho = (1.0 - theta) * r0[i] + theta * r1[i];
                let drho = (r1[i] - r0[i]) / dt;
                let u = lerp(&prev.u[i], &next.u[i]);
                let gu = prev.gu[i] * (1.0 - theta) + next.gu[i] * theta;
                let du = sym(&gu);
                let vel = u - (l + r.cross(&node.point));
                let guv = gu * vel;
                let nu = visc.eval(rho);
                let ru = r.cross(&u);
                for (q, xi) in xis.iter().enumerate() {
                    let (psi, dpsi) = psis[q];
                    let x = xi.u[i];
                    sink(q, 0, -w * rho * u.dot(&x) * dpsi);
                    let conv = match form {
                        ConvectiveForm::Skew => 0.5 * rho * ((xi.gu[i] * vel).dot(&u) - guv.dot(&x)) + 0.5 * drho * u.dot(&x),
                        ConvectiveForm::Literal => rho * (xi.gu[i] * vel).dot(&u),
                    };
                    sink(q, 1, -w * conv * psi);
                    sink(q, 2, w * rho * ru.dot(&x) * psi);
                    sink(q, 4, w * 2.0 * nu * du.dot(&d_xis[q][i]) * psi);
                }
            }
            let g = problem.flux.profile.eval(t);
            for (q, xi) in xis.iter().enumerate() {
                let (psi, dpsi) = psis[q];
                sink(q, 3, -w_t * (geo.mass * l.dot(&xi.l) + (geo.inertia * r).dot(&xi.r)) * dpsi);
                sink(q, 3, -w_t * ((l * geo.mass).dot(&r.cross(&xi.l)) + (geo.inertia * r).dot(&r.cross(&xi.r))) * psi);
            }
            for (s, node) in disc.surface_body.iter().enumerate() {
                let nu = match visc {
                    Viscosity::Constant(nu) => nu,
                    v => v.eval((1.0 - theta) * rho_s0[s] + theta * rho_s1[s]),
                };
                let gap = lerp(&prev.gap[s], &next.gap[s]) - problem.flux.samples[s] * g;
                for (q, xi) in xis.iter().enumerate() {
                    sink(q, 4, w_t * node.weight * 2.0 * alpha_c * nu * gap.dot(&xi.gap[s]) * psis[q].0);
                }
            }
        }
        prev = next;
    }
}

/// Weak residuals at the final time of the trajectory, one per test. Each
/// residual is accumulated in a single running sum; the scale is the largest
/// of the five accumulated absolute contributions.
pub fn weak_residuals(
    problem: &Problem,
    ops: &Operators,
    traj: &TrajectoryView,
    tests: &[WeakTest],
    form: ConvectiveForm,
) -> Vec<WeakResidual> {
    let mut total = vec![0.0; tests.len()];
    let mut pieces = vec![[0.0f64; 5]; tests.len()];
    let mut abs = vec![[0.0f64; 5]; tests.len()];
    walk_weak_residual(problem, ops, traj, tests, form, &mut |q, term, v| {
        total[q] += v;
        pieces[q][term] += v;
        abs[q][term] += v.abs();
    });
    (0..tests.len())
        .map(|q| WeakResidual {
            residual: total[q].abs(),
            terms: pieces[q],
            scale: abs[q].iter().copied().fold(0.0, f64::max),
        })
        .collect()
}

pub fn weak_residual(
    problem: &Problem,
    ops: &Operators,
    traj: &TrajectoryView,
    test: &WeakTest,
    form: ConvectiveForm,
) -> WeakResidual {
    weak_residuals(problem, ops, traj, std::slice::from_ref(test), form).remove(0)
}

fn term_evaluator(problem: &Problem, ops: &Operators, traj: &TrajectoryView, test: &WeakTest, form: ConvectiveForm, term: usize) -> f64 {
    let mut acc = 0.0;
    walk_weak_residual(problem, ops, traj, std::slice::from_ref(test), form, &mut |_, t, v| {
        if t == term {
            acc += v;
        }
    });
    acc
}

/// Inertial term: boundary values and -int rho u . d_t phi.
pub fn inertial_term(problem: &Problem, ops: &Operators, traj: &TrajectoryView, test: &WeakTest, form: ConvectiveForm) -> f64 {
    term_evaluator(problem, ops, traj, test, form, 0)
}

/// Convective term.
pub fn convective_term(problem: &Problem, ops: &Operators, traj: &TrajectoryView, test: &WeakTest, form: ConvectiveForm) -> f64 {
    term_evaluator(problem, ops, traj, test, form, 1)
}

/// Fluid rotation term int rho det(r, u, phi).
pub fn rotation_term(problem: &Problem, ops: &Operators, traj: &TrajectoryView, test: &WeakTest, form: ConvectiveForm) -> f64 {
    term_evaluator(problem, ops, traj, test, form, 2)
}

/// Rigid-body momentum and its determinant terms.
pub fn body_term(problem: &Problem, ops: &Operators, traj: &TrajectoryView, test: &WeakTest, form: ConvectiveForm) -> f64 {
    term_evaluator(problem, ops, traj, test, form, 3)
}

/// Viscous, slip and propulsion terms.
pub fn dissipative_term(problem: &Problem, ops: &Operators, traj: &TrajectoryView, test: &WeakTest, form: ConvectiveForm) -> f64 {
    term_evaluator(problem, ops, traj, test, form, 4)
}

/// The five term evaluators in order.
pub fn weak_residual_terms(
    problem: &Problem,
    ops: &Operators,
    traj: &TrajectoryView,
    test: &WeakTest,
    form: ConvectiveForm,
) -> [f64; 5] {
    [
        inertial_term(problem, ops, traj, test, form),
        convective_term(problem, ops, traj, test, form),
        rotation_term(problem, ops, traj, test, form),
        body_term(problem, ops, traj, test, form),
        dissipative_term(problem, ops, traj, test, form),
    ]
}

#[derive(Debug, Clone)]
pub struct PressureField {
    pub values: Vec<f64>,
    /// Relative least-squares defect of the edge differences.
    pub defect: f64,
    pub degraded: bool,
}

/// Least-squares potential p with grad p ~ f on the lattice graph, zero mean.
pub fn pressure_from_gradient(disc: &FluidDiscretization, f: &[Vec3]) -> PressureField {
    let m = disc.node_count();
    let edges = disc.lattice_edges();
    let mut g = Vec::with_capacity(edges.len());
    let mut d = vec![0.0; m];
    let mut degree = vec![0.0; m];
    for &(a, b) in &edges {
        let ge = 0.5 * (f[a] + f[b]).dot(&(disc.nodes[b].point - disc.nodes[a].point));
        g.push(ge);
        d[b] += ge;
        d[a] -= ge;
        degree[a] += 1.0;
        degree[b] += 1.0;
    }
    let apply = |p: &[f64], out: &mut [f64]| {
        for (o, (pi, di)) in out.iter_mut().zip(p.iter().zip(&degree)) {
            *o = di * pi;
        }
        for &(a, b) in &edges {
            out[a] -= p[b];
            out[b] -= p[a];
        }
    };
    let mean0 = |v: &mut [f64]| {
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mu);
    };
    mean0(&mut d);
    let dn = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut p = vec![0.0; m];
    if dn > 0.0 {
        let mut r = d.clone();
        let mut dir = r.clone();
        let mut ap = vec![0.0; m];
        let mut rr = dn * dn;
        for _ in 0..20 * m.max(1) {
            apply(&dir, &mut ap);
            let pap: f64 = dir.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                break;
            }
            let step = rr / pap;
            for i in 0..m {
                p[i] += step * dir[i];
                r[i] -= step * ap[i];
            }
            mean0(&mut r);
            let rr_new: f64 = r.iter().map(|x| x * x).sum();
            if rr_new.sqrt() <= 1e-13 * dn {
                break;
            }
            let beta = rr_new / rr;
            rr = rr_new;
            for i in 0..m {
                dir[i] = r[i] + beta * dir[i];
            }
        }
    }
    let vol: f64 = disc.nodes.iter().map(|n| n.weight).sum();
    let mean: f64 = disc.nodes.iter().zip(&p).map(|(n, v)| n.weight * v).sum::<f64>() / vol;
    p.iter_mut().for_each(|v| *v -= mean);
    let mut res = 0.0;
    let mut gn = 0.0;
    for (&(a, b), ge) in edges.iter().zip(&g) {
        res += (p[b] - p[a] - ge).powi(2);
        gn += ge * ge;
    }
    let defect = if gn > 0.0 { (res / gn).sqrt() } else { 0.0 };
    let degraded = defect > 0.05;
    if degraded {
        log::warn!("pressure recovery degraded: relative defect {defect:.3e}");
    }
    PressureField { values: p, defect, degraded }
}

/// Pressure over one step from the momentum balance
/// grad p = -rho (d_t u + (V.grad) u + r x u) + nu Lap u, with the
/// Laplacian taken by central differences of the analytic gradients.
pub fn recover_pressure(
    problem: &Problem,
    alpha0: &DVector<f64>,
    alpha1: &DVector<f64>,
    rho0: &[f64],
    rho1: &[f64],
    transport_coeffs: &DVector<f64>,
    dt: f64,
) -> Result<PressureField> {
    let basis = problem.basis;
    let disc = problem.disc;
    let abar: DVector<f64> = (alpha0 + alpha1) * 0.5;
    let (_, r) = basis.rigid_velocity(abar.as_slice());
    let eps = 1e-3 * disc.spacing.max(basis.body_radius * 1e-2);
    let mut f = Vec::with_capacity(disc.node_count());
    for (i, node) in disc.nodes.iter().enumerate() {
        let (u0, _) = basis.combine_at(i, alpha0.as_slice());
        let (u1, _) = basis.combine_at(i, alpha1.as_slice());
        let (u, gu) = basis.combine_at(i, abar.as_slice());
        let (vel, _) = relative_velocity_at(basis, &node.point, i, transport_coeffs.as_slice());
        let rho = 0.5 * (rho0[i] + rho1[i]);
        let nu = problem.params.viscosity.eval(rho);
        let mut lap = Vec3::zeros();
        for d in 0..3 {
            let e = Vec3::ith(d, eps);
            let gp: Matrix3<f64> = basis.evaluate(&(node.point + e)).iter().zip(abar.iter()).map(|((_, g), a)| g * *a).sum();
            let gm: Matrix3<f64> = basis.evaluate(&(node.point - e)).iter().zip(abar.iter()).map(|((_, g), a)| g * *a).sum();
            lap += (gp.column(d) - gm.column(d)) / (2.0 * eps);
        }
        f.push(-rho * ((u1 - u0) / dt + gu * vel + r.cross(&u)) + lap * nu);
    }
    Ok(pressure_from_gradient(disc, &f))
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Reported only; does not enter `all_pass`.
    pub informational: bool,
}

#[derive(Debug, Clone, Default)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
}

impl VerificationReport {
    /// Records `value <= tolerance`.
    pub fn at_most(&mut self, name: &str, value: f64, tolerance: f64) {
        self.checks.push(Check { name: name.into(), value, tolerance, pass: value <= tolerance, informational: false });
    }

    /// Records `value >= tolerance`.
    pub fn at_least(&mut self, name: &str, value: f64, tolerance: f64) {
        self.checks.push(Check { name: name.into(), value, tolerance, pass: value >= tolerance, informational: false });
    }

    /// Records `value <= tolerance` without making the report fail.
    pub fn info(&mut self, name: &str, value: f64, tolerance: f64) {
        self.checks.push(Check { name: name.into(), value, tolerance, pass: value <= tolerance, informational: true });
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass || c.informational)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# rigidswim verification v1\nname,value,tolerance,pass,informational\n");
        for c in &self.checks {
            s.push_str(&format!("{},{:.6e},{:.6e},{},{}\n", c.name, c.value, c.tolerance, c.pass, c.informational));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_discretization, RigidGeometry};

    #[test]
    fn lagrange_identity_basis_vectors() {
        let (e1, e2) = (Vec3::x(), Vec3::y());
        assert_eq!(lagrange_identity_check(&e1, &e2, &e1, &e2), 0.0);
        let n = Vec3::new(1.0, 2.0, -2.0).normalize();
        let a = Vec3::new(0.3, -1.2, 2.0);
        let b = Vec3::new(-0.7, 0.4, 0.9);
        assert!(lagrange_identity_check(&a, &n, &b, &n) < 1e-14);
    }

    #[test]
    fn slip_reduction_reports_normal_defect() {
        let n = vec![Vec3::z(); 2];
        let zero = vec![Vec3::zeros(); 2];
        let u = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 1e-3)];
        let phi = vec![Vec3::new(0.5, 0.5, 0.0), Vec3::new(0.0, 2.0, 0.0)];
        let rep = slip_reduction_check(&u, &zero, &zero, &phi, &zero, &n, 1e-10);
        assert_eq!(rep.violations.len(), 1);
        assert_eq!(rep.violations[0].0, 1);
        assert!(rep.max_discrepancy < 1e-15);
        assert!(rep.within_bound());
    }

    #[test]
    fn pressure_of_linear_gradient() {
        let g = RigidGeometry::sphere(1.0, 1.0).unwrap();
        let d = build_discretization(&g, 4.0, 0.5, 1).unwrap();
        let f = vec![Vec3::x(); d.node_count()];
        let p = pressure_from_gradient(&d, &f);
        let vol = d.volume();
        let mean: f64 = d.nodes.iter().map(|n| n.weight * n.point.x).sum::<f64>() / vol;
        for (node, v) in d.nodes.iter().zip(&p.values) {
            assert!((v - (node.point.x - mean)).abs() < 1e-6);
        }
        let integral: f64 = d.nodes.iter().zip(&p.values).map(|(n, v)| n.weight * v).sum();
        assert!(integral.abs() < 1e-10);
        assert!(!p.degraded);
    }

    #[test]
    fn pressure_of_curl_field_is_degraded() {
        let g = RigidGeometry::sphere(1.0, 1.0).unwrap();
        let d = build_discretization(&g, 4.0, 0.5, 1).unwrap();
        let f: Vec<Vec3> = d.nodes.iter().map(|n| Vec3::z().cross(&n.point)).collect();
        let p = pressure_from_gradient(&d, &f);
        assert!(p.degraded && p.defect > 0.5);
    }

    #[test]
    fn report_csv() {
        let mut r = VerificationReport::default();
        r.at_most("a", 1.0, 2.0);
        r.at_least("b", 1.0, 2.0);
        assert!(!r.all_pass());
        assert!(r.to_csv().contains("b,1.000000e0,2.000000e0,false,false"));
        r.checks.pop();
        r.info("c", 3.0, 2.0);
        assert!(r.all_pass());
    }
}
