//! Divergence-free Galerkin basis for the coupled fluid/body velocity space.
//!
//! Every basis field is the curl of an analytic vector potential, so its
//! divergence vanishes identically. Six lifting modes carry the rigid
//! velocities: on the body surface they equal l + r x y exactly and they
//! vanish with their gradient on the outer sphere. Interior modes have a
//! potential that vanishes to first order on the body, which leaves their
//! normal component zero there while allowing tangential slip.
//!
//! Candidates are orthonormalized in the form
//! (phi, psi)_H + int grad phi : grad psi, interior candidates first, so the
//! interior modes keep a zero rigid part.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, Matrix3, Vector3};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{FluidDiscretization, RigidGeometry, Vec3};
use crate::jet::{curl, Dual2, Jet2};

const RADIAL_ORDERS: usize = 3;
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Constant direction e_c.
    Const(usize),
    /// e_i x y / a.
    Rot(usize),
    /// Symmetric traceless linear map applied to y / a.
    Strain(usize),
    /// e_c y_i y_j / a^2.
    Quad(usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Candidate {
    Translation(usize),
    Rotation(usize),
    Interior { radial: usize, pattern: Pattern },
}

#[derive(Debug, Clone)]
pub struct BasisOptions {
    /// Highest polynomial degree of the interior potentials (0, 1 or 2).
    pub potential_order: usize,
    /// Density used in the orthonormalization form, one value per node.
    /// `None` means unit density.
    pub reference_density: Option<Vec<f64>>,
}

impl Default for BasisOptions {
    fn default() -> Self {
        BasisOptions { potential_order: 1, reference_density: None }
    }
}

/// One basis function sampled on the discretization.
#[derive(Debug, Clone)]
pub struct BasisFunction {
    pub values: Vec<Vec3>,
    pub gradients: Vec<Matrix3<f64>>,
    /// Rigid part (l, r).
    pub rigid_part: (Vec3, Vec3),
    pub body_trace: Vec<Vec3>,
    /// D(z) n on the body surface.
    pub body_strain_trace: Vec<Vec3>,
    pub outer_trace: Vec<Vec3>,
}

#[derive(Debug, Clone)]
pub struct GalerkinBasis {
    pub n: usize,
    pub body_radius: f64,
    pub outer_radius: f64,
    candidates: Vec<Candidate>,
    /// Row i holds the candidate coefficients of basis function i.
    coeffs: DMatrix<f64>,
    pub rigid: Vec<(Vec3, Vec3)>,
    node_values: Vec<Vec3>,
    node_grads: Vec<Matrix3<f64>>,
    body_trace: Vec<Vec3>,
    body_strain_trace: Vec<Vec3>,
    outer_trace: Vec<Vec3>,
    /// Condition number of the Gram matrix of the selected raw candidates.
    pub raw_gram_condition: f64,
}

fn beta_dual(r: f64, a: f64, big: f64) -> Dual2 {
    Dual2::rescaled(
        |t| ((1.0 - t) * (1.0 - t) * (1.0 + 2.0 * t), -6.0 * t * (1.0 - t), -6.0 + 12.0 * t),
        r,
        a,
        big - a,
    )
}

fn eta_dual(r: f64, a: f64, big: f64, p: usize) -> Dual2 {
    let e = (p + 1) as f64;
    let s = Dual2::new(r - a, 1.0, 0.0);
    let f = (a / r).powf(e);
    let pw = Dual2::new(f, -e * f / r, e * (e + 1.0) * f / (r * r));
    let cut = Dual2::rescaled(
        |t| {
            let q = 1.0 - t * t;
            (q * q, -4.0 * t * q, -4.0 + 12.0 * t * t)
        },
        r,
        a,
        big - a,
    );
    s.mul(pw).mul(cut)
}

fn strain_matrix(s: usize) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    match s {
        0 => {
            m[(0, 1)] = 1.0;
            m[(1, 0)] = 1.0;
        }
        1 => {
            m[(1, 2)] = 1.0;
            m[(2, 1)] = 1.0;
        }
        2 => {
            m[(0, 2)] = 1.0;
            m[(2, 0)] = 1.0;
        }
        3 => {
            m[(0, 0)] = 1.0;
            m[(1, 1)] = -1.0;
        }
        _ => {
            let c = 1.0 / 3f64.sqrt();
            m[(0, 0)] = c;
            m[(1, 1)] = c;
            m[(2, 2)] = -2.0 * c;
        }
    }
    m
}

fn linear_components(p: &Matrix3<f64>, y: &Vec3, scale: f64) -> [Jet2; 3] {
    [0, 1, 2].map(|k| Jet2::linear(&(p.row(k).transpose() * scale), y))
}

/// Interior candidates in selection order.
pub fn interior_candidates(potential_order: usize) -> Vec<Candidate> {
    let mut out = Vec::new();
    for radial in 0..RADIAL_ORDERS {
        for pattern in [Pattern::Const(2), Pattern::Const(0), Pattern::Const(1)] {
            out.push(Candidate::Interior { radial, pattern });
        }
        if potential_order >= 1 {
            for pattern in [Pattern::Rot(2), Pattern::Rot(0), Pattern::Rot(1)] {
                out.push(Candidate::Interior { radial, pattern });
            }
        }
    }
    if potential_order >= 1 {
        for radial in 0..RADIAL_ORDERS {
            for s in 0..5 {
                out.push(Candidate::Interior { radial, pattern: Pattern::Strain(s) });
            }
        }
    }
    if potential_order >= 2 {
        for radial in 0..RADIAL_ORDERS {
            for c in 0..3 {
                for i in 0..3 {
                    for j in i..3 {
                        out.push(Candidate::Interior { radial, pattern: Pattern::Quad(c, i, j) });
                    }
                }
            }
        }
    }
    out
}

fn lifting_candidates() -> Vec<Candidate> {
    (0..3).map(Candidate::Translation).chain((0..3).map(Candidate::Rotation)).collect()
}

impl Candidate {
    pub fn rigid_part(&self) -> (Vec3, Vec3) {
        match *self {
            Candidate::Translation(i) => (Vec3::ith(i, 1.0), Vec3::zeros()),
            Candidate::Rotation(i) => (Vec3::zeros(), Vec3::ith(i, 1.0)),
            Candidate::Interior { .. } => (Vec3::zeros(), Vec3::zeros()),
        }
    }
}

/// Evaluates a list of candidates (value and gradient) at a point of the
/// fluid region, sharing the radial factors.
fn eval_candidates(cands: &[Candidate], a: f64, big: f64, y: &Vec3, out: &mut Vec<(Vec3, Matrix3<f64>)>) {
    out.clear();
    let r = y.norm();
    let beta = Jet2::radial(y, beta_dual(r, a, big));
    let etas: [Jet2; RADIAL_ORDERS] = [0, 1, 2].map(|p| Jet2::radial(y, eta_dual(r, a, big, p)));
    let zero = Jet2::zero();
    for c in cands {
        let pot: [Jet2; 3] = match *c {
            Candidate::Translation(i) => {
                let lin = linear_components(&Vector3::ith(i, 1.0).cross_matrix(), y, 0.5);
                [0, 1, 2].map(|k| beta.mul(&lin[k]))
            }
            Candidate::Rotation(i) => {
                let q = Jet2 { v: -0.5 * y.norm_squared(), g: -y, h: -Matrix3::identity() };
                let mut p = [zero; 3];
                p[i] = beta.mul(&q);
                p
            }
            Candidate::Interior { radial, pattern } => {
                let eta = &etas[radial];
                match pattern {
                    Pattern::Const(k) => {
                        let mut p = [zero; 3];
                        p[k] = *eta;
                        p
                    }
                    Pattern::Rot(i) => {
                        let lin = linear_components(&Vector3::ith(i, 1.0).cross_matrix(), y, 1.0 / a);
                        [0, 1, 2].map(|k| eta.mul(&lin[k]))
                    }
                    Pattern::Strain(s) => {
                        let lin = linear_components(&strain_matrix(s), y, 1.0 / a);
                        [0, 1, 2].map(|k| eta.mul(&lin[k]))
                    }
                    Pattern::Quad(k, i, j) => {
                        let yi = Jet2::linear(&Vec3::ith(i, 1.0 / a), y);
                        let yj = Jet2::linear(&Vec3::ith(j, 1.0 / a), y);
                        let mut p = [zero; 3];
                        p[k] = eta.mul(&yi.mul(&yj));
                        p
                    }
                }
            }
        };
        out.push(curl(&pot));
    }
}

fn sym(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Builds and orthonormalizes an N-dimensional basis. Requires a spherical
/// body centered at the origin.
pub fn build_basis(
    geometry: &RigidGeometry,
    disc: &FluidDiscretization,
    n: usize,
    opts: &BasisOptions,
) -> Result<GalerkinBasis> {
    let a = geometry
        .sphere_radius()
        .ok_or_else(|| Error::UnsupportedShape("basis construction requires a spherical body".into()))?;
    if n < 6 {
        return Err(Error::Config(format!("basis size N = {n} must be at least 6")));
    }
    if let Some(rho) = &opts.reference_density {
        if rho.len() != disc.node_count() {
            return Err(Error::Config("reference density has wrong length".into()));
        }
        if let Some((i, &v)) = rho.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(Error::DensityNegative { node: i, value: v });
        }
    }
    let big = disc.outer_radius;
    let interior = interior_candidates(opts.potential_order);
    let lifting = lifting_candidates();
    let cands: Vec<Candidate> = interior.iter().chain(lifting.iter()).copied().collect();
    let nc = cands.len();

    // Raw Gram matrix in the orthonormalization form.
    let mut gram = DMatrix::<f64>::zeros(nc, nc);
    let mut buf = Vec::with_capacity(nc);
    let mut strain: Vec<Matrix3<f64>> = Vec::with_capacity(nc);
    for (idx, node) in disc.nodes.iter().enumerate() {
        eval_candidates(&cands, a, big, &node.point, &mut buf);
        let rho = opts.reference_density.as_ref().map_or(1.0, |r| r[idx]);
        strain.clear();
        strain.extend(buf.iter().map(|(_, g)| *g));
        for k in 0..nc {
            for l in k..nc {
                let v = rho * buf[k].0.dot(&buf[l].0) + strain[k].dot(&strain[l]);
                gram[(k, l)] += node.weight * v;
            }
        }
    }
    for k in 0..nc {
        let (lk, rk) = cands[k].rigid_part();
        for l in k..nc {
            let (ll, rl) = cands[l].rigid_part();
            gram[(k, l)] += geometry.mass * lk.dot(&ll) + rk.dot(&(geometry.inertia * rl));
            gram[(l, k)] = gram[(k, l)];
        }
    }
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::AssemblyNan("basis gram matrix"));
    }

    // Modified Gram-Schmidt with one re-orthogonalization pass.
    let inner = |x: &nalgebra::DVector<f64>, y: &nalgebra::DVector<f64>| x.dot(&(&gram * y));
    let mut accepted: Vec<nalgebra::DVector<f64>> = Vec::new();
    let mut selected: Vec<usize> = Vec::new();
    let n_interior_needed = n - 6;
    let try_accept = |k: usize, accepted: &mut Vec<nalgebra::DVector<f64>>| -> bool {
        let mut c = nalgebra::DVector::<f64>::zeros(nc);
        c[k] = 1.0;
        for _ in 0..2 {
            for q in accepted.iter() {
                let p = inner(q, &c);
                c -= q * p;
            }
        }
        let nrm2 = inner(&c, &c);
        if nrm2 <= RANK_TOL * gram[(k, k)] {
            return false;
        }
        accepted.push(c / nrm2.sqrt());
        true
    };
    let mut interior_count = 0;
    for k in 0..interior.len() {
        if interior_count == n_interior_needed {
            break;
        }
        if try_accept(k, &mut accepted) {
            selected.push(k);
            interior_count += 1;
        }
    }
    if interior_count < n_interior_needed {
        return Err(Error::BasisRankDeficient { achieved: 6 + interior_count, requested: n });
    }
    for k in interior.len()..nc {
        if !try_accept(k, &mut accepted) {
            return Err(Error::BasisRankDeficient { achieved: accepted.len(), requested: n });
        }
        selected.push(k);
    }

    let sub = DMatrix::from_fn(selected.len(), selected.len(), |i, j| gram[(selected[i], selected[j])]);
    let eig = sub.symmetric_eigenvalues();
    let raw_gram_condition = eig.max() / eig.min().max(f64::MIN_POSITIVE);

    // Storage order: lifting modes first.
    let mut coeffs = DMatrix::<f64>::zeros(n, nc);
    let order: Vec<usize> = (n_interior_needed..n).chain(0..n_interior_needed).collect();
    for (row, &src) in order.iter().enumerate() {
        coeffs.row_mut(row).copy_from(&accepted[src].transpose());
    }

    let mut basis = GalerkinBasis {
        n,
        body_radius: a,
        outer_radius: big,
        candidates: cands,
        coeffs,
        rigid: Vec::new(),
        node_values: Vec::new(),
        node_grads: Vec::new(),
        body_trace: Vec::new(),
        body_strain_trace: Vec::new(),
        outer_trace: Vec::new(),
        raw_gram_condition,
    };
    basis.sample(disc);
    Ok(basis)
}

impl GalerkinBasis {
    fn sample(&mut self, disc: &FluidDiscretization) {
        let n = self.n;
        self.rigid = (0..n)
            .map(|i| {
                let mut l = Vec3::zeros();
                let mut r = Vec3::zeros();
                for (k, c) in self.candidates.iter().enumerate() {
                    let (cl, cr) = c.rigid_part();
                    l += cl * self.coeffs[(i, k)];
                    r += cr * self.coeffs[(i, k)];
                }
                (l, r)
            })
            .collect();
        self.node_values = Vec::with_capacity(disc.node_count() * n);
        self.node_grads = Vec::with_capacity(disc.node_count() * n);
        let mut out = Vec::new();
        for node in &disc.nodes {
            self.evaluate_into(&node.point, &mut out);
            for (v, g) in &out {
                self.node_values.push(*v);
                self.node_grads.push(*g);
            }
        }
        self.body_trace.clear();
        self.body_strain_trace.clear();
        for s in &disc.surface_body {
            self.evaluate_into(&s.point, &mut out);
            for (v, g) in &out {
                self.body_trace.push(*v);
                self.body_strain_trace.push(sym(g) * s.normal);
            }
        }
        self.outer_trace.clear();
        for s in &disc.surface_outer {
            self.evaluate_into(&s.point, &mut out);
            self.outer_trace.extend(out.iter().map(|(v, _)| *v));
        }
    }

    /// Values and gradients of all basis functions at an arbitrary point of
    /// the closed fluid region (and its analytic extension nearby).
    pub fn evaluate(&self, y: &Vec3) -> Vec<(Vec3, Matrix3<f64>)> {
        let mut out = Vec::new();
        self.evaluate_into(y, &mut out);
        out
    }

    fn evaluate_into(&self, y: &Vec3, out: &mut Vec<(Vec3, Matrix3<f64>)>) {
        let mut raw = Vec::with_capacity(self.candidates.len());
        eval_candidates(&self.candidates, self.body_radius, self.outer_radius, y, &mut raw);
        out.clear();
        for i in 0..self.n {
            let mut v = Vec3::zeros();
            let mut g = Matrix3::zeros();
            for (k, (cv, cg)) in raw.iter().enumerate() {
                let c = self.coeffs[(i, k)];
                if c != 0.0 {
                    v += cv * c;
                    g += cg * c;
                }
            }
            out.push((v, g));
        }
    }

    pub fn values_at(&self, node: usize) -> &[Vec3] {
        &self.node_values[node * self.n..(node + 1) * self.n]
    }

    pub fn grads_at(&self, node: usize) -> &[Matrix3<f64>] {
        &self.node_grads[node * self.n..(node + 1) * self.n]
    }

    pub fn body_trace_at(&self, s: usize) -> &[Vec3] {
        &self.body_trace[s * self.n..(s + 1) * self.n]
    }

    pub fn body_strain_at(&self, s: usize) -> &[Vec3] {
        &self.body_strain_trace[s * self.n..(s + 1) * self.n]
    }

    pub fn outer_trace_at(&self, s: usize) -> &[Vec3] {
        &self.outer_trace[s * self.n..(s + 1) * self.n]
    }

    pub fn function(&self, i: usize) -> BasisFunction {
        let nodes = self.node_values.len() / self.n;
        let pick = |v: &[Vec3], count: usize| (0..count).map(|k| v[k * self.n + i]).collect::<Vec<_>>();
        BasisFunction {
            values: pick(&self.node_values, nodes),
            gradients: (0..nodes).map(|k| self.node_grads[k * self.n + i]).collect(),
            rigid_part: self.rigid[i],
            body_trace: pick(&self.body_trace, self.body_trace.len() / self.n),
            body_strain_trace: pick(&self.body_strain_trace, self.body_strain_trace.len() / self.n),
            outer_trace: pick(&self.outer_trace, self.outer_trace.len() / self.n),
        }
    }

    /// Basis restricted to the listed functions (no re-orthonormalization).
    pub fn subset(&self, indices: &[usize]) -> GalerkinBasis {
        let m = indices.len();
        let pick = |v: &Vec<Vec3>| -> Vec<Vec3> {
            let count = v.len() / self.n;
            (0..count).flat_map(|k| indices.iter().map(move |&i| v[k * self.n + i])).collect()
        };
        let nodes = self.node_grads.len() / self.n;
        GalerkinBasis {
            n: m,
            body_radius: self.body_radius,
            outer_radius: self.outer_radius,
            candidates: self.candidates.clone(),
            coeffs: DMatrix::from_fn(m, self.candidates.len(), |r, c| self.coeffs[(indices[r], c)]),
            rigid: indices.iter().map(|&i| self.rigid[i]).collect(),
            node_values: pick(&self.node_values),
            node_grads: (0..nodes).flat_map(|k| indices.iter().map(move |&i| self.node_grads[k * self.n + i])).collect(),
            body_trace: pick(&self.body_trace),
            body_strain_trace: pick(&self.body_strain_trace),
            outer_trace: pick(&self.outer_trace),
            raw_gram_condition: self.raw_gram_condition,
        }
    }

    /// Rigid velocity l + r x y of a coefficient vector.
    pub fn rigid_velocity(&self, coeffs: &[f64]) -> (Vec3, Vec3) {
        let mut l = Vec3::zeros();
        let mut r = Vec3::zeros();
        for (c, (li, ri)) in coeffs.iter().zip(&self.rigid) {
            l += li * *c;
            r += ri * *c;
        }
        (l, r)
    }

    /// Velocity and gradient of a coefficient vector at a node.
    pub fn combine_at(&self, node: usize, coeffs: &[f64]) -> (Vec3, Matrix3<f64>) {
        let vals = self.values_at(node);
        let grads = self.grads_at(node);
        let mut v = Vec3::zeros();
        let mut g = Matrix3::zeros();
        for i in 0..self.n {
            v += vals[i] * coeffs[i];
            g += grads[i] * coeffs[i];
        }
        (v, g)
    }

    pub fn save(&self, path: &Path, key: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"RSWB")?;
        f.write_u32::<LittleEndian>(1)?;
        let kb = key.as_bytes();
        f.write_u32::<LittleEndian>(kb.len() as u32)?;
        f.write_all(kb)?;
        f.write_u64::<LittleEndian>(self.n as u64)?;
        f.write_f64::<LittleEndian>(self.body_radius)?;
        f.write_f64::<LittleEndian>(self.outer_radius)?;
        f.write_f64::<LittleEndian>(self.raw_gram_condition)?;
        f.write_u64::<LittleEndian>(self.candidates.len() as u64)?;
        for c in &self.candidates {
            let code: [u8; 5] = match *c {
                Candidate::Translation(i) => [0, i as u8, 0, 0, 0],
                Candidate::Rotation(i) => [1, i as u8, 0, 0, 0],
                Candidate::Interior { radial, pattern } => match pattern {
                    Pattern::Const(k) => [2, radial as u8, k as u8, 0, 0],
                    Pattern::Rot(k) => [3, radial as u8, k as u8, 0, 0],
                    Pattern::Strain(k) => [4, radial as u8, k as u8, 0, 0],
                    Pattern::Quad(k, i, j) => [5 + k as u8, radial as u8, i as u8, j as u8, 0],
                },
            };
            f.write_all(&code)?;
        }
        for v in self.coeffs.iter() {
            f.write_f64::<LittleEndian>(*v)?;
        }
        f.flush()?;
        Ok(())
    }

    /// Loads a cached basis and resamples it on `disc`. Returns `Ok(None)`
    /// when the file's key does not match.
    pub fn load(path: &Path, key: &str, disc: &FluidDiscretization) -> Result<Option<GalerkinBasis>> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"RSWB" || f.read_u32::<LittleEndian>()? != 1 {
            return Err(Error::Cache(format!("{} is not a basis cache file", path.display())));
        }
        let klen = f.read_u32::<LittleEndian>()? as usize;
        let mut kb = vec![0u8; klen];
        f.read_exact(&mut kb)?;
        if kb != key.as_bytes() {
            return Ok(None);
        }
        let n = f.read_u64::<LittleEndian>()? as usize;
        let body_radius = f.read_f64::<LittleEndian>()?;
        let outer_radius = f.read_f64::<LittleEndian>()?;
        let raw_gram_condition = f.read_f64::<LittleEndian>()?;
        let nc = f.read_u64::<LittleEndian>()? as usize;
        let mut candidates = Vec::with_capacity(nc);
        for _ in 0..nc {
            let mut c = [0u8; 5];
            f.read_exact(&mut c)?;
            let (r, k) = (c[1] as usize, c[2] as usize);
            candidates.push(match c[0] {
                0 => Candidate::Translation(r),
                1 => Candidate::Rotation(r),
                2 => Candidate::Interior { radial: r, pattern: Pattern::Const(k) },
                3 => Candidate::Interior { radial: r, pattern: Pattern::Rot(k) },
                4 => Candidate::Interior { radial: r, pattern: Pattern::Strain(k) },
                5..=7 => Candidate::Interior {
                    radial: r,
                    pattern: Pattern::Quad((c[0] - 5) as usize, k, c[3] as usize),
                },
                _ => return Err(Error::Cache("corrupt candidate code".into())),
            });
        }
        let mut data = vec![0.0; n * nc];
        for v in data.iter_mut() {
            *v = f.read_f64::<LittleEndian>()?;
        }
        let mut basis = GalerkinBasis {
            n,
            body_radius,
            outer_radius,
            candidates,
            coeffs: DMatrix::from_vec(n, nc, data),
            rigid: Vec::new(),
            node_values: Vec::new(),
            node_grads: Vec::new(),
            body_trace: Vec::new(),
            body_strain_trace: Vec::new(),
            outer_trace: Vec::new(),
            raw_gram_condition,
        };
        basis.sample(disc);
        Ok(Some(basis))
    }
}

/// Hex digest identifying a basis build.
pub fn cache_key(geometry: &RigidGeometry, disc: &FluidDiscretization, n: usize, opts: &BasisOptions) -> String {
    let mut h = Sha256::new();
    h.update(b"rigidswim-basis-v1");
    for v in [
        geometry.sphere_radius().unwrap_or(-1.0),
        geometry.mass,
        disc.outer_radius,
        disc.spacing,
        disc.surface_body.len() as f64,
        n as f64,
        opts.potential_order as f64,
    ] {
        h.update(v.to_le_bytes());
    }
    for row in geometry.inertia.iter() {
        h.update(row.to_le_bytes());
    }
    if let Some(rho) = &opts.reference_density {
        for v in rho {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds a basis, reusing a cached copy from `dir` when one matches.
pub fn build_basis_cached(
    geometry: &RigidGeometry,
    disc: &FluidDiscretization,
    n: usize,
    opts: &BasisOptions,
    dir: Option<&Path>,
) -> Result<GalerkinBasis> {
    let Some(dir) = dir else {
        return build_basis(geometry, disc, n, opts);
    };
    let key = cache_key(geometry, disc, n, opts);
    let path = dir.join(format!("basis-{}.bin", &key[..16]));
    if path.exists() {
        if let Some(b) = GalerkinBasis::load(&path, &key, disc)? {
            log::info!("loaded basis from {}", path.display());
            return Ok(b);
        }
    }
    let b = build_basis(geometry, disc, n, opts)?;
    std::fs::create_dir_all(dir)?;
    b.save(&path, &key)?;
    Ok(b)
}

/// Least-squares fit of a rigid field l + r x y to point samples.
pub fn rigid_part_extraction(samples: &[(Vec3, Vec3)]) -> Result<(Vec3, Vec3)> {
    let m = samples.len();
    if m < 3 {
        return Err(Error::RigidFitDegenerate(format!("{m} samples")));
    }
    let mut a = DMatrix::<f64>::zeros(3 * m, 6);
    let mut b = nalgebra::DVector::<f64>::zeros(3 * m);
    for (s, (y, v)) in samples.iter().enumerate() {
        let hat = y.cross_matrix();
        for i in 0..3 {
            a[(3 * s + i, i)] = 1.0;
            for j in 0..3 {
                a[(3 * s + i, 3 + j)] = -hat[(i, j)];
            }
            b[3 * s + i] = v[i];
        }
    }
    let svd = a.svd(true, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-10 * smax) {
        return Err(Error::RigidFitDegenerate(format!("sample configuration has rank < 6 (sigma ratio {:.2e})", smin / smax)));
    }
    let x = svd.solve(&b, 0.0).map_err(|e| Error::RigidFitDegenerate(e.to_string()))?;
    Ok((Vec3::new(x[0], x[1], x[2]), Vec3::new(x[3], x[4], x[5])))
}

/// The energy inner product int rho a.b + m l_a.l_b + J r_a.r_b.
pub fn inner_product_h(
    disc: &FluidDiscretization,
    geometry: &RigidGeometry,
    rho: &[f64],
    a: &BasisFunction,
    b: &BasisFunction,
) -> Result<f64> {
    let mut s = 0.0;
    for (i, node) in disc.nodes.iter().enumerate() {
        if !(rho[i] >= 0.0) {
            return Err(Error::DensityNegative { node: i, value: rho[i] });
        }
        s += node.weight * rho[i] * a.values[i].dot(&b.values[i]);
    }
    let (la, ra) = a.rigid_part;
    let (lb, rb) = b.rigid_part;
    Ok(s + geometry.mass * la.dot(&lb) + ra.dot(&(geometry.inertia * rb)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_discretization;

    fn setup(n: usize) -> (RigidGeometry, FluidDiscretization, GalerkinBasis) {
        let g = RigidGeometry::sphere(1.0, 1.0).unwrap();
        let d = build_discretization(&g, 4.0, 0.5, 2).unwrap();
        let b = build_basis(&g, &d, n, &BasisOptions::default()).unwrap();
        (g, d, b)
    }

    #[test]
    fn minimal_basis_spans_rigid_motions() {
        let (_, _, b) = setup(6);
        let mut m = DMatrix::<f64>::zeros(6, 6);
        for (i, (l, r)) in b.rigid.iter().enumerate() {
            for k in 0..3 {
                m[(k, i)] = l[k];
                m[(3 + k, i)] = r[k];
            }
        }
        assert_eq!(m.rank(1e-10), 6);
    }

    #[test]
    fn lifting_modes_match_rigid_motion_on_body() {
        let (_, d, b) = setup(12);
        for (s, node) in d.surface_body.iter().enumerate() {
            for i in 0..b.n {
                let (l, r) = b.rigid[i];
                let gap = b.body_trace_at(s)[i] - (l + r.cross(&node.point));
                assert!(gap.dot(&node.normal).abs() < 1e-12, "normal gap");
            }
            let mut raw = Vec::new();
            eval_candidates(&lifting_candidates(), 1.0, 4.0, &node.point, &mut raw);
            for (c, (v, _)) in lifting_candidates().iter().zip(&raw) {
                let (l, r) = c.rigid_part();
                assert!((v - (l + r.cross(&node.point))).norm() < 1e-12);
            }
            for v in b.outer_trace_at(s.min(d.surface_outer.len() - 1)) {
                assert!(v.norm() < 1e-12);
            }
        }
        for i in 6..b.n {
            assert!(b.rigid[i].0.norm() < 1e-12 && b.rigid[i].1.norm() < 1e-12);
        }
    }

    #[test]
    fn fields_are_divergence_free() {
        let (_, d, b) = setup(20);
        for k in 0..d.node_count() {
            for g in b.grads_at(k) {
                assert!(g.trace().abs() <= 1e-6 * g.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn oversized_basis_is_rank_deficient() {
        let g = RigidGeometry::sphere(1.0, 1.0).unwrap();
        let d = build_discretization(&g, 4.0, 0.5, 1).unwrap();
        let opts = BasisOptions { potential_order: 0, reference_density: None };
        let err = build_basis(&g, &d, 16, &opts).unwrap_err();
        assert!(matches!(err, Error::BasisRankDeficient { achieved: 15, requested: 16 }));
    }

    #[test]
    fn rigid_fit_recovers_exact_field() {
        let l = Vec3::new(0.3, -1.0, 2.0);
        let r = Vec3::new(-0.5, 0.25, 1.5);
        let pts = [Vec3::x(), Vec3::y(), Vec3::z(), Vec3::new(1.0, 1.0, 1.0), Vec3::new(-2.0, 0.5, 0.1)];
        let samples: Vec<_> = pts.iter().map(|p| (*p, l + r.cross(p))).collect();
        let (lf, rf) = rigid_part_extraction(&samples).unwrap();
        assert!((lf - l).norm() < 1e-12 && (rf - r).norm() < 1e-12);
    }

    #[test]
    fn collinear_samples_are_degenerate() {
        let samples: Vec<_> = (0..5).map(|k| (Vec3::x() * k as f64, Vec3::zeros())).collect();
        assert!(matches!(rigid_part_extraction(&samples), Err(Error::RigidFitDegenerate(_))));
    }

    #[test]
    fn negative_density_is_rejected() {
        let (g, d, b) = setup(6);
        let mut rho = vec![1.0; d.node_count()];
        rho[3] = -0.1;
        let f = b.function(0);
        assert!(matches!(inner_product_h(&d, &g, &rho, &f, &f), Err(Error::DensityNegative { node: 3, .. })));
    }

    #[test]
    fn cache_roundtrip() {
        let (g, d, b) = setup(8);
        let dir = tempfile::tempdir().unwrap();
        let opts = BasisOptions::default();
        let key = cache_key(&g, &d, 8, &opts);
        let path = dir.path().join("b.bin");
        b.save(&path, &key).unwrap();
        let c = GalerkinBasis::load(&path, &key, &d).unwrap().unwrap();
        assert_eq!(b.values_at(7), c.values_at(7));
        assert!(GalerkinBasis::load(&path, "other", &d).unwrap().is_none());
    }
}
