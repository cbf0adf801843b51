//! Density transport along backward characteristics of the relative
//! velocity v - v_S.
//!
//! The production path keeps the backward flow map x -> Y_{x,t}(0) as a
//! displacement field on the lattice and composes it one step at a time; the
//! density at a node is the initial density evaluated at the foot of the
//! characteristic. Since every node value is a value (or an average of
//! values) of the initial density, the discrete maximum principle holds
//! exactly.

use std::sync::Arc;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geometry::{FluidDiscretization, Vec3};

#[derive(Debug, Clone)]
pub struct DensityField {
    pub values: Vec<f64>,
    /// Bounds inherited from the initial density (shift included).
    pub bounds: (f64, f64),
    pub time: f64,
    /// Constant added at initialization to keep the density positive.
    pub shift: f64,
}

impl DensityField {
    pub fn uniform(disc: &FluidDiscretization, value: f64) -> DensityField {
        DensityField { values: vec![value; disc.node_count()], bounds: (value, value), time: 0.0, shift: 0.0 }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Values with the positivity shift removed.
    pub fn physical_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| v - self.shift).collect()
    }
}

pub trait VelocitySampler {
    fn velocity(&self, p: &Vec3, t: f64) -> Vec3;
}

impl<F: Fn(&Vec3, f64) -> Vec3> VelocitySampler for F {
    fn velocity(&self, p: &Vec3, t: f64) -> Vec3 {
        self(p, t)
    }
}

/// Affine field value + grad (p - base), frozen in time.
#[derive(Debug, Clone, Copy)]
pub struct LinearField {
    pub base: Vec3,
    pub value: Vec3,
    pub grad: Matrix3<f64>,
}

impl VelocitySampler for LinearField {
    fn velocity(&self, p: &Vec3, _t: f64) -> Vec3 {
        self.value + self.grad * (p - self.base)
    }
}

/// Initial density given as a function of position.
#[derive(Debug, Clone)]
pub enum DensityProfile {
    Uniform(f64),
    /// `value` inside the ball B(center, radius), `background` elsewhere.
    Blob { background: f64, value: f64, center: Vec3, radius: f64 },
    /// `below` where y . normal < offset, `above` otherwise.
    Layer { below: f64, above: f64, normal: Vec3, offset: f64 },
    /// background + amplitude exp(-((|y| - shell_radius) / width)^2).
    RadialBump { background: f64, amplitude: f64, shell_radius: f64, width: f64 },
}

impl DensityProfile {
    pub fn eval(&self, p: &Vec3) -> f64 {
        match *self {
            DensityProfile::Uniform(v) => v,
            DensityProfile::Blob { background, value, center, radius } => {
                if (p - center).norm() < radius {
                    value
                } else {
                    background
                }
            }
            DensityProfile::Layer { below, above, normal, offset } => {
                if p.dot(&normal) < offset {
                    below
                } else {
                    above
                }
            }
            DensityProfile::RadialBump { background, amplitude, shell_radius, width } => {
                let s = (p.norm() - shell_radius) / width;
                background + amplitude * (-s * s).exp()
            }
        }
    }

    pub fn is_sharp(&self) -> bool {
        matches!(self, DensityProfile::Blob { .. } | DensityProfile::Layer { .. })
    }

    /// For piecewise-constant profiles: (value where phi < 0, value where
    /// phi >= 0, phi, grad phi) at p.
    pub fn interface(&self, p: &Vec3) -> Option<(f64, f64, f64, Vec3)> {
        match *self {
            DensityProfile::Blob { background, value, center, radius } => {
                let d = p - center;
                let r = d.norm();
                let g = if r > 0.0 { d / r } else { Vec3::x() };
                Some((value, background, r - radius, g))
            }
            DensityProfile::Layer { below, above, normal, offset } => Some((below, above, p.dot(&normal) - offset, normal)),
            _ => None,
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            DensityProfile::Uniform(v) => (v, v),
            DensityProfile::Blob { background, value, .. } => (background.min(value), background.max(value)),
            DensityProfile::Layer { below, above, .. } => (below.min(above), below.max(above)),
            DensityProfile::RadialBump { background, amplitude, .. } => {
                (background.min(background + amplitude), background.max(background + amplitude))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum InitialDensity {
    Profile(DensityProfile),
    Nodal(DensityField),
}

impl InitialDensity {
    fn eval(&self, disc: &FluidDiscretization, p: &Vec3) -> Result<f64> {
        match self {
            InitialDensity::Profile(f) => Ok(f.eval(p)),
            InitialDensity::Nodal(field) => interpolate(disc, &field.values, p),
        }
    }

    /// Average over the cube of side `side` centred at the preimage point,
    /// pulled back through the affine map with Jacobian `jac` and image
    /// `p`. Exact for planar interfaces.
    fn cell_average(&self, disc: &FluidDiscretization, p: &Vec3, jac: &Matrix3<f64>, side: f64) -> Result<f64> {
        let InitialDensity::Profile(f) = self else {
            return self.eval(disc, p);
        };
        let Some((neg, pos, phi, grad)) = f.interface(p) else {
            return Ok(f.eval(p));
        };
        let a = jac.transpose() * grad * side;
        let spread = 0.5 * (a.x.abs() + a.y.abs() + a.z.abs());
        if phi >= spread {
            return Ok(pos);
        }
        if phi < -spread {
            return Ok(neg);
        }
        let below = box_cdf(&[a.x.abs(), a.y.abs(), a.z.abs()], spread - phi);
        Ok(neg + (pos - neg) * (1.0 - below))
    }

    fn bounds(&self) -> (f64, f64) {
        match self {
            InitialDensity::Profile(f) => f.bounds(),
            InitialDensity::Nodal(field) => field.bounds,
        }
    }
}

/// P(sum b_d V_d <= t) for independent V_d uniform on [0, 1]. Widths much
/// smaller than the largest are dropped together with their mean, which is
/// second-order accurate.
fn box_cdf(b: &[f64; 3], t: f64) -> f64 {
    let bmax = b.iter().copied().fold(0.0, f64::max);
    if bmax == 0.0 {
        return if t >= 0.0 { 1.0 } else { 0.0 };
    }
    let mut kept = [0.0; 3];
    let mut k = 0;
    let mut t = t;
    for &w in b {
        if w >= 1e-3 * bmax {
            kept[k] = w;
            k += 1;
        } else {
            t -= 0.5 * w;
        }
    }
    let total: f64 = kept[..k].iter().sum();
    if t <= 0.0 {
        return 0.0;
    }
    if t >= total {
        return 1.0;
    }
    let mut acc = 0.0;
    for mask in 0..(1usize << k) {
        let mut shift = 0.0;
        let mut sign = 1.0;
        for (d, w) in kept[..k].iter().enumerate() {
            if mask & (1 << d) != 0 {
                shift += w;
                sign = -sign;
            }
        }
        let x = t - shift;
        if x > 0.0 {
            acc += sign * x.powi(k as i32);
        }
    }
    let denom: f64 = kept[..k].iter().product::<f64>() * (1..=k).product::<usize>() as f64;
    (acc / denom).clamp(0.0, 1.0)
}

fn cubic_weights(f: f64) -> [f64; 4] {
    [
        -f * (f - 1.0) * (f - 2.0) / 6.0,
        (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0,
        -(f + 1.0) * f * (f - 2.0) / 2.0,
        (f + 1.0) * f * (f - 1.0) / 6.0,
    ]
}

fn split(cell: [i64; 3], offset: &Vec3, h: f64) -> ([i64; 3], [f64; 3]) {
    let mut base = cell;
    let mut frac = [0.0; 3];
    for d in 0..3 {
        let t = offset[d] / h;
        let fl = t.floor();
        base[d] += fl as i64;
        frac[d] = t - fl;
    }
    (base, frac)
}

/// Convex trilinear interpolation of node values at `cell center + offset`.
/// Missing corners are dropped and the weights renormalized; the result is
/// clamped to the range of the contributing values.
pub fn interpolate_anchored(
    disc: &FluidDiscretization,
    values: &[f64],
    cell: [i64; 3],
    offset: &Vec3,
) -> Option<f64> {
    let (base, f) = split(cell, offset, disc.spacing);
    let mut acc = 0.0;
    let mut wsum = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in 0..8 {
        let bits = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
        let mut w = 1.0;
        for d in 0..3 {
            w *= if bits[d] == 1 { f[d] } else { 1.0 - f[d] };
        }
        if w == 0.0 {
            continue;
        }
        if let Some(id) = disc.node_at(base[0] + bits[0] as i64, base[1] + bits[1] as i64, base[2] + bits[2] as i64) {
            acc += w * values[id];
            wsum += w;
            lo = lo.min(values[id]);
            hi = hi.max(values[id]);
        }
    }
    if wsum <= 1e-12 {
        return None;
    }
    Some((acc / wsum).clamp(lo, hi))
}

/// Convex interpolation at an arbitrary point; falls back to the nearest
/// node within two cells when no lattice corner carries a node.
pub fn interpolate(disc: &FluidDiscretization, values: &[f64], p: &Vec3) -> Result<f64> {
    let (cell, offset) = disc.locate(p);
    if let Some(v) = interpolate_anchored(disc, values, cell, &offset) {
        return Ok(v);
    }
    nearest_node(disc, p, cell).map(|id| values[id]).ok_or(Error::OutOfSampledDomain { x: p.x, y: p.y, z: p.z })
}

fn nearest_node(disc: &FluidDiscretization, p: &Vec3, cell: [i64; 3]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for di in -2..=2 {
        for dj in -2..=2 {
            for dk in -2..=2 {
                if let Some(id) = disc.node_at(cell[0] + di, cell[1] + dj, cell[2] + dk) {
                    let d = (disc.nodes[id].point - p).norm_squared();
                    if best.map_or(true, |(_, bd)| d < bd) {
                        best = Some((id, d));
                    }
                }
            }
        }
    }
    best.map(|b| b.0)
}

/// Interpolation of a smooth vector field (the flow map displacement):
/// tricubic when the full stencil is present, trilinear when the cell is
/// complete, otherwise a first-order Taylor expansion about the anchor node.
fn interpolate_smooth(disc: &FluidDiscretization, field: &[Vec3], anchor: usize, offset: &Vec3) -> Vec3 {
    let cell = disc.nodes[anchor].cell.map(|v| v as i64);
    let (base, f) = split(cell, offset, disc.spacing);
    let node = |d: [i64; 3]| disc.node_at(base[0] + d[0], base[1] + d[1], base[2] + d[2]);

    let wx = cubic_weights(f[0]);
    let wy = cubic_weights(f[1]);
    let wz = cubic_weights(f[2]);
    let mut acc = Vec3::zeros();
    let mut complete = true;
    'cubic: for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                match node([a - 1, b - 1, c - 1]) {
                    Some(id) => acc += field[id] * (wx[a as usize] * wy[b as usize] * wz[c as usize]),
                    None => {
                        complete = false;
                        break 'cubic;
                    }
                }
            }
        }
    }
    if complete {
        return acc;
    }

    let mut acc = Vec3::zeros();
    let mut complete = true;
    'linear: for c in 0..8 {
        let bits = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
        match node(bits) {
            Some(id) => {
                let mut w = 1.0;
                for d in 0..3 {
                    w *= if bits[d] == 1 { f[d] } else { 1.0 - f[d] };
                }
                acc += field[id] * w;
            }
            None => {
                complete = false;
                break 'linear;
            }
        }
    }
    if complete {
        return acc;
    }

    let h = disc.spacing;
    let mut out = field[anchor];
    for d in 0..3 {
        let mut plus = cell;
        plus[d] += 1;
        let mut minus = cell;
        minus[d] -= 1;
        let p = disc.node_at(plus[0], plus[1], plus[2]);
        let m = disc.node_at(minus[0], minus[1], minus[2]);
        let deriv = match (p, m) {
            (Some(p), Some(m)) => (field[p] - field[m]) / (2.0 * h),
            (Some(p), None) => (field[p] - field[anchor]) / h,
            (None, Some(m)) => (field[anchor] - field[m]) / h,
            (None, None) => Vec3::zeros(),
        };
        out += deriv * offset[d];
    }
    out
}

fn rk4_back(sampler: &dyn VelocitySampler, y: Vec3, t: f64, h: f64) -> Vec3 {
    let k1 = sampler.velocity(&y, t);
    let k2 = sampler.velocity(&(y - k1 * (0.5 * h)), t - 0.5 * h);
    let k3 = sampler.velocity(&(y - k2 * (0.5 * h)), t - 0.5 * h);
    let k4 = sampler.velocity(&(y - k3 * h), t - h);
    y - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Traces the characteristic through (x, t_from) back to time t_to with
/// RK4 substeps no longer than dt_sub. Feet that leave F_0 by less than a
/// tenth of the lattice spacing are projected back onto the boundary.
pub fn trace_between(
    disc: &FluidDiscretization,
    x: &Vec3,
    t_from: f64,
    t_to: f64,
    sampler: &dyn VelocitySampler,
    dt_sub: f64,
) -> std::result::Result<Vec3, f64> {
    let span = t_from - t_to;
    if span <= 0.0 {
        return Ok(*x);
    }
    let steps = (span / dt_sub).ceil().max(1.0) as usize;
    let h = span / steps as f64;
    let limit = 0.1 * disc.spacing;
    let mut y = *x;
    for k in 0..steps {
        y = rk4_back(sampler, y, t_from - k as f64 * h, h);
        let pen = disc.penetration(&y);
        if pen > limit {
            return Err(pen);
        }
        if pen > 0.0 {
            y = disc.project(&y);
        }
    }
    Ok(y)
}

/// Foot at time 0 of the characteristic through (x, t).
pub fn trace_characteristic(
    disc: &FluidDiscretization,
    x: &Vec3,
    t: f64,
    sampler: &dyn VelocitySampler,
    dt_sub: f64,
) -> Result<Vec3> {
    trace_between(disc, x, t, 0.0, sampler, dt_sub).map_err(|penetration| Error::CharacteristicEscape {
        node: usize::MAX,
        penetration,
        limit: 0.1 * disc.spacing,
    })
}

/// rho(x, t) = interpolate(rho_0, foot(x)) at every node.
pub fn advect_density(
    rho0: &DensityField,
    disc: &FluidDiscretization,
    sampler: &dyn VelocitySampler,
    t: f64,
    dt_sub: f64,
) -> Result<DensityField> {
    let mut values = Vec::with_capacity(disc.node_count());
    for (i, node) in disc.nodes.iter().enumerate() {
        let foot = trace_between(disc, &node.point, t, 0.0, sampler, dt_sub).map_err(|penetration| {
            Error::CharacteristicEscape { node: i, penetration, limit: 0.1 * disc.spacing }
        })?;
        let cell = node.cell.map(|v| v as i64);
        let v = match interpolate_anchored(disc, &rho0.values, cell, &(foot - node.point)) {
            Some(v) => v,
            None => interpolate(disc, &rho0.values, &foot)?,
        };
        values.push(v.clamp(rho0.bounds.0, rho0.bounds.1));
    }
    Ok(DensityField { values, bounds: rho0.bounds, time: rho0.time + t, shift: rho0.shift })
}

pub fn mass_integral(rho: &DensityField, disc: &FluidDiscretization) -> f64 {
    disc.nodes.iter().zip(&rho.values).map(|(n, v)| n.weight * v).sum()
}

/// Backward flow map stored as the displacement Y_{x,t}(0) - x at nodes,
/// together with the initial density it pulls back.
#[derive(Debug, Clone)]
pub struct TransportState {
    pub initial: Arc<InitialDensity>,
    pub shift: f64,
    /// Sub-cell samples per axis used to form node densities.
    pub subsamples: usize,
    pub displacement: Vec<Vec3>,
    pub time: f64,
}

impl TransportState {
    pub fn new(disc: &FluidDiscretization, initial: InitialDensity, shift: f64, subsamples: usize) -> TransportState {
        TransportState {
            initial: Arc::new(initial),
            shift,
            subsamples: subsamples.max(1),
            displacement: vec![Vec3::zeros(); disc.node_count()],
            time: 0.0,
        }
    }

    fn sub_offsets(&self, h: f64) -> Vec<Vec3> {
        let k = self.subsamples;
        let o = |j: usize| ((j as f64 + 0.5) / k as f64 - 0.5) * h;
        let mut out = Vec::with_capacity(k * k * k);
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    out.push(Vec3::new(o(a), o(b), o(c)));
                }
            }
        }
        out
    }

    /// Lattice differences of the displacement at node i; one-sided where a
    /// neighbour is missing.
    fn displacement_gradient(&self, disc: &FluidDiscretization, i: usize) -> Matrix3<f64> {
        let c = disc.nodes[i].cell;
        let (ci, cj, ck) = (c[0] as i64, c[1] as i64, c[2] as i64);
        let mut g = Matrix3::zeros();
        for d in 0..3 {
            let mut lo = [ci, cj, ck];
            let mut hi = lo;
            lo[d] -= 1;
            hi[d] += 1;
            let lo = disc.node_at(lo[0], lo[1], lo[2]);
            let hi = disc.node_at(hi[0], hi[1], hi[2]);
            let col = match (lo, hi) {
                (Some(a), Some(b)) => (self.displacement[b] - self.displacement[a]) / (2.0 * disc.spacing),
                (None, Some(b)) => (self.displacement[b] - self.displacement[i]) / disc.spacing,
                (Some(a), None) => (self.displacement[i] - self.displacement[a]) / disc.spacing,
                (None, None) => Vec3::zeros(),
            };
            g.set_column(d, &col);
        }
        g
    }

    pub fn bounds(&self) -> (f64, f64) {
        let (lo, hi) = self.initial.bounds();
        (lo + self.shift, hi + self.shift)
    }

    /// Node densities: averages of the initial density over the pulled-back
    /// sub-cell samples lying in F_0, plus the shift.
    pub fn density(&self, disc: &FluidDiscretization) -> Result<DensityField> {
        let offsets = self.sub_offsets(disc.spacing);
        let side = disc.spacing / self.subsamples as f64;
        let bounds = self.bounds();
        let mut values = Vec::with_capacity(disc.node_count());
        for (i, node) in disc.nodes.iter().enumerate() {
            let jac = Matrix3::identity() + self.displacement_gradient(disc, i);
            let mut acc = 0.0;
            let mut count = 0usize;
            for o in &offsets {
                let p = node.point + o;
                if !disc.contains(&p) {
                    continue;
                }
                let disp = if o.norm_squared() == 0.0 {
                    self.displacement[i]
                } else {
                    interpolate_smooth(disc, &self.displacement, i, o)
                };
                acc += self.initial.cell_average(disc, &(p + disp), &jac, side)?;
                count += 1;
            }
            if count == 0 {
                acc = self.initial.eval(disc, &(node.point + self.displacement[i]))?;
                count = 1;
            }
            let v = (acc / count as f64 + self.shift).clamp(bounds.0, bounds.1);
            values.push(v);
        }
        Ok(DensityField { values, bounds, time: self.time, shift: self.shift })
    }

    /// Physical density (shift removed) at `node point + offset`, averaged
    /// over a cube of side `side` pulled back through the flow map.
    pub fn density_at(&self, disc: &FluidDiscretization, anchor: usize, offset: &Vec3, side: f64) -> Result<f64> {
        let jac = Matrix3::identity() + self.displacement_gradient(disc, anchor);
        let disp = interpolate_smooth(disc, &self.displacement, anchor, offset);
        let p = disc.nodes[anchor].point + offset;
        let (lo, hi) = self.initial.bounds();
        Ok(self.initial.cell_average(disc, &(p + disp), &jac, side)?.clamp(lo, hi))
    }

    /// Composes the flow map with one step of length dt of the relative
    /// velocity, linearized at each node: `field(i)` returns its value and
    /// gradient at node i.
    pub fn step(
        &self,
        disc: &FluidDiscretization,
        field: &dyn Fn(usize) -> (Vec3, Matrix3<f64>),
        dt: f64,
        substeps: usize,
    ) -> Result<TransportState> {
        let dt_sub = dt / substeps.max(1) as f64;
        let mut next = Vec::with_capacity(disc.node_count());
        for (i, node) in disc.nodes.iter().enumerate() {
            let (value, grad) = field(i);
            let sampler = LinearField { base: node.point, value, grad };
            let foot = trace_between(disc, &node.point, dt, 0.0, &sampler, dt_sub).map_err(|penetration| {
                Error::CharacteristicEscape { node: i, penetration, limit: 0.1 * disc.spacing }
            })?;
            let offset = foot - node.point;
            let disp = if offset.norm_squared() == 0.0 {
                self.displacement[i]
            } else {
                interpolate_smooth(disc, &self.displacement, i, &offset)
            };
            next.push(offset + disp);
        }
        Ok(TransportState {
            initial: Arc::clone(&self.initial),
            shift: self.shift,
            subsamples: self.subsamples,
            displacement: next,
            time: self.time + dt,
        })
    }
}

/// A renormalization function b with its derivative.
#[derive(Clone, Copy)]
pub struct Renormalizer {
    pub name: &'static str,
    pub b: fn(f64) -> f64,
    pub db: fn(f64) -> f64,
}

impl Renormalizer {
    pub fn identity() -> Renormalizer {
        Renormalizer { name: "identity", b: |s| s, db: |_| 1.0 }
    }
    pub fn square() -> Renormalizer {
        Renormalizer { name: "square", b: |s| s * s, db: |s| 2.0 * s }
    }
    pub fn sine() -> Renormalizer {
        Renormalizer { name: "sine", b: f64::sin, db: f64::cos }
    }
}

/// Space-time test function.
pub trait SpaceTimeTest {
    fn value(&self, p: &Vec3, t: f64) -> f64;
    fn grad(&self, p: &Vec3, t: f64) -> Vec3;
    fn time_derivative(&self, p: &Vec3, t: f64) -> f64;
}

/// psi(t) (1 - |y - c|^2 / s^2)^4 on the ball |y - c| < s, with psi a cubic.
#[derive(Debug, Clone, Copy)]
pub struct BumpTest {
    pub center: Vec3,
    pub radius: f64,
    pub psi: [f64; 4],
}

impl BumpTest {
    fn psi(&self, t: f64) -> (f64, f64) {
        let [a, b, c, d] = self.psi;
        (a + t * (b + t * (c + t * d)), b + t * (2.0 * c + 3.0 * d * t))
    }

    fn bump(&self, p: &Vec3) -> (f64, Vec3) {
        let d = p - self.center;
        let q = 1.0 - d.norm_squared() / (self.radius * self.radius);
        if q <= 0.0 {
            return (0.0, Vec3::zeros());
        }
        (q.powi(4), d * (-8.0 * q.powi(3) / (self.radius * self.radius)))
    }

    /// Space-time norm ||phi||_L2 + ||grad phi||_L2 + ||d_t phi||_L2 over
    /// F_0 x (0, t_end), by node quadrature and a 64-point time rule.
    pub fn norm(&self, disc: &FluidDiscretization, t_end: f64) -> f64 {
        let m = 64;
        let (mut a, mut g, mut d) = (0.0, 0.0, 0.0);
        for k in 0..m {
            let t = (k as f64 + 0.5) * t_end / m as f64;
            let w = t_end / m as f64;
            for node in &disc.nodes {
                a += w * node.weight * self.value(&node.point, t).powi(2);
                g += w * node.weight * self.grad(&node.point, t).norm_squared();
                d += w * node.weight * self.time_derivative(&node.point, t).powi(2);
            }
        }
        a.sqrt() + g.sqrt() + d.sqrt()
    }
}

impl SpaceTimeTest for BumpTest {
    fn value(&self, p: &Vec3, t: f64) -> f64 {
        self.psi(t).0 * self.bump(p).0
    }
    fn grad(&self, p: &Vec3, t: f64) -> Vec3 {
        self.bump(p).1 * self.psi(t).0
    }
    fn time_derivative(&self, p: &Vec3, t: f64) -> f64 {
        self.psi(t).1 * self.bump(p).0
    }
}

/// |[int b(rho) phi]_0^T - int int b(rho) (d_s phi + V . grad phi)| for a
/// density history given as snapshots at `times`. Between snapshots the
/// density is linear in time; each interval uses two-point Gauss
/// quadrature. `velocity(node, t)` returns the relative velocity.
pub fn renormalized_residual(
    disc: &FluidDiscretization,
    snapshots: &[DensityField],
    times: &[f64],
    velocity: &dyn Fn(usize, f64) -> Vec3,
    test: &dyn SpaceTimeTest,
    b: &Renormalizer,
) -> f64 {
    assert_eq!(snapshots.len(), times.len());
    let k = snapshots.len() - 1;
    let boundary = |idx: usize| -> f64 {
        let s = &snapshots[idx];
        disc.nodes
            .iter()
            .zip(&s.values)
            .map(|(n, v)| n.weight * (b.b)(v - s.shift) * test.value(&n.point, times[idx]))
            .sum()
    };
    let mut bulk = 0.0;
    let g = 0.5 / 3f64.sqrt();
    for j in 0..k {
        let (t0, t1) = (times[j], times[j + 1]);
        let dt = t1 - t0;
        for theta in [0.5 - g, 0.5 + g] {
            let t = t0 + theta * dt;
            let (r0, r1) = (&snapshots[j], &snapshots[j + 1]);
            let mut acc = 0.0;
            for (i, node) in disc.nodes.iter().enumerate() {
                let rho = (1.0 - theta) * (r0.values[i] - r0.shift) + theta * (r1.values[i] - r1.shift);
                let v = velocity(i, t);
                acc += node.weight
                    * (b.b)(rho)
                    * (test.time_derivative(&node.point, t) + v.dot(&test.grad(&node.point, t)));
            }
            bulk += 0.5 * dt * acc;
        }
    }
    (boundary(k) - boundary(0) - bulk).abs()
}

/// Renormalized residual with the spatial integrals on a sub-lattice of
/// `refine` points per axis and cell. Densities come from the stored flow
/// maps, velocities from tricubic interpolation of `velocity[j]`, the node
/// relative velocity on interval j. Only cells meeting the test support
/// contribute, so `test_support` is (center, radius).
#[allow(clippy::too_many_arguments)]
pub fn renormalized_residual_refined(
    disc: &FluidDiscretization,
    states: &[TransportState],
    times: &[f64],
    velocity: &[Vec<Vec3>],
    test: &dyn SpaceTimeTest,
    test_support: (Vec3, f64),
    b: &Renormalizer,
    refine: usize,
) -> Result<f64> {
    assert_eq!(states.len(), times.len());
    assert_eq!(velocity.len() + 1, times.len());
    let m = refine.max(1);
    let h = disc.spacing;
    let side = h / m as f64;
    let reach = test_support.1 + h;
    let mut points = Vec::new();
    for (i, node) in disc.nodes.iter().enumerate() {
        if node.weight == 0.0 || (node.point - test_support.0).norm() > reach {
            continue;
        }
        let w = node.weight / (m * m * m) as f64;
        for a in 0..m {
            for bb in 0..m {
                for c in 0..m {
                    let o = |j: usize| ((j as f64 + 0.5) / m as f64 - 0.5) * h;
                    let off = Vec3::new(o(a), o(bb), o(c));
                    if disc.contains(&(node.point + off)) {
                        points.push((i, off, w));
                    }
                }
            }
        }
    }
    let sample = |state: &TransportState| -> Result<Vec<f64>> {
        points.iter().map(|(i, off, _)| state.density_at(disc, *i, off, side)).collect()
    };
    let boundary = |rho: &[f64], t: f64| -> f64 {
        points
            .iter()
            .zip(rho)
            .map(|((i, off, w), r)| w * (b.b)(*r) * test.value(&(disc.nodes[*i].point + off), t))
            .sum()
    };
    let first = sample(&states[0])?;
    let start = boundary(&first, times[0]);
    let mut prev = first;
    let mut bulk = 0.0;
    let g = 0.5 / 3f64.sqrt();
    for j in 0..velocity.len() {
        let next = sample(&states[j + 1])?;
        let (t0, t1) = (times[j], times[j + 1]);
        let vel: Vec<Vec3> = points.iter().map(|(i, off, _)| interpolate_smooth(disc, &velocity[j], *i, off)).collect();
        for theta in [0.5 - g, 0.5 + g] {
            let t = t0 + theta * (t1 - t0);
            let mut acc = 0.0;
            for (q, (i, off, w)) in points.iter().enumerate() {
                let p = disc.nodes[*i].point + off;
                let rho = (1.0 - theta) * prev[q] + theta * next[q];
                acc += w * (b.b)(rho) * (test.time_derivative(&p, t) + vel[q].dot(&test.grad(&p, t)));
            }
            bulk += 0.5 * (t1 - t0) * acc;
        }
        prev = next;
    }
    Ok((boundary(&prev, times[times.len() - 1]) - start - bulk).abs())
}
