//! Rigid body shape, mass properties, and the truncated fluid domain.
//!
//! The fluid domain is F_0 = B(0, R) minus the body S_0, written in the body
//! frame with the body's mass center at the origin. Volume quadrature lives on
//! a uniform lattice of cell centers; boundary cells carry clipped weights.
//! Surface quadrature on spheres uses a geodesic icosphere with exact
//! spherical-triangle areas.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Triangulated closed surface with outward-oriented (counter-clockwise) faces.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

#[derive(Debug, Clone)]
pub enum Shape {
    Sphere { radius: f64, center: Vec3 },
    Mesh(TriMesh),
}

#[derive(Debug, Clone, Copy)]
pub struct VolumeNode {
    pub point: Vec3,
    pub weight: f64,
    pub cell: [usize; 3],
}

/// Surface quadrature node. On the body surface the normal points into the
/// body; on the outer sphere it points out of the domain.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceNode {
    pub point: Vec3,
    pub weight: f64,
    pub normal: Vec3,
}

#[derive(Debug, Clone)]
pub struct RigidGeometry {
    pub shape: Shape,
    pub density: f64,
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    /// Mass center of the shape as originally given; the stored shape has
    /// been translated so the mass center is the origin.
    pub original_center: Vec3,
}

#[derive(Debug, Clone)]
pub struct FluidDiscretization {
    pub outer_radius: f64,
    pub spacing: f64,
    pub cells_per_axis: usize,
    /// Lower corner of the lattice box.
    pub origin: Vec3,
    pub nodes: Vec<VolumeNode>,
    pub surface_body: Vec<SurfaceNode>,
    pub surface_outer: Vec<SurfaceNode>,
    pub body: Shape,
    /// Fluid volume of cells whose center lies outside F_0 and that had no
    /// node in reach to absorb it.
    pub lost_volume: f64,
    cell_to_node: Vec<u32>,
}

const NO_NODE: u32 = u32::MAX;

/// Radial truncation y -> y if |y| < R, else R y / |y|.
pub fn chi_r(y: &Vec3, outer_radius: f64) -> Vec3 {
    let r = y.norm();
    if r < outer_radius {
        *y
    } else {
        y * (outer_radius / r)
    }
}

impl TriMesh {
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let (a, b, c) = self.corners(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    fn corners(&self, t: &[usize; 3]) -> (Vec3, Vec3, Vec3) {
        (self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]])
    }

    /// Ray-parity containment test along a fixed generic direction.
    pub fn contains(&self, p: &Vec3) -> bool {
        let dir = Vec3::new(0.577_215_664_9, 0.618_033_988_7, 0.529_177_210_9).normalize();
        let mut crossings = 0usize;
        for t in &self.triangles {
            let (a, b, c) = self.corners(t);
            if ray_hits_triangle(p, &dir, &a, &b, &c) {
                crossings += 1;
            }
        }
        crossings % 2 == 1
    }

    pub fn closest_point(&self, p: &Vec3) -> Vec3 {
        let mut best = self.vertices[0];
        let mut best_d = f64::INFINITY;
        for t in &self.triangles {
            let (a, b, c) = self.corners(t);
            let q = closest_point_on_triangle(p, &a, &b, &c);
            let d = (q - p).norm_squared();
            if d < best_d {
                best_d = d;
                best = q;
            }
        }
        best
    }

    fn translated(&self, offset: &Vec3) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| v + offset).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Unit-density mass, first moment and second moment tensor integral of
    /// y y^T, from the signed tetrahedra fanned at the origin.
    fn moments(&self) -> (f64, Vec3, Matrix3<f64>) {
        let mut vol = 0.0;
        let mut first = Vec3::zeros();
        let mut second = Matrix3::zeros();
        for t in &self.triangles {
            let (a, b, c) = self.corners(t);
            let det = a.dot(&b.cross(&c));
            let v = det / 6.0;
            vol += v;
            first += v * (a + b + c) / 4.0;
            // Integral of x x^T over tetra (0,a,b,c) = det/120 * (sum_i v_i v_i^T + s s^T)
            let s = a + b + c;
            second += (det / 120.0) * (a * a.transpose() + b * b.transpose() + c * c.transpose() + s * s.transpose());
        }
        (vol, first, second)
    }
}

fn ray_hits_triangle(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> bool {
    let e1 = b - a;
    let e2 = c - a;
    let pv = d.cross(&e2);
    let det = e1.dot(&pv);
    if det.abs() < 1e-14 {
        return false;
    }
    let inv = 1.0 / det;
    let tv = o - a;
    let u = tv.dot(&pv) * inv;
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let qv = tv.cross(&e1);
    let v = d.dot(&qv) * inv;
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    e2.dot(&qv) * inv > 0.0
}

fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

impl Shape {
    pub fn sphere(radius: f64) -> Shape {
        Shape::Sphere { radius, center: Vec3::zeros() }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Shape::Sphere { radius, center } => (p - center).norm() < *radius,
            Shape::Mesh(m) => m.contains(p),
        }
    }

    /// Largest distance from `about` to a point of the shape.
    pub fn bounding_radius(&self, about: &Vec3) -> f64 {
        match self {
            Shape::Sphere { radius, center } => (center - about).norm() + radius,
            Shape::Mesh(m) => m.vertices.iter().map(|v| (v - about).norm()).fold(0.0, f64::max),
        }
    }

    /// Depth of `p` inside the shape (zero when outside).
    pub fn penetration(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Sphere { radius, center } => (radius - (p - center).norm()).max(0.0),
            Shape::Mesh(m) => {
                if m.contains(p) {
                    (m.closest_point(p) - p).norm()
                } else {
                    0.0
                }
            }
        }
    }

    pub fn project_to_surface(&self, p: &Vec3) -> Vec3 {
        match self {
            Shape::Sphere { radius, center } => {
                let d = p - center;
                let n = d.norm();
                if n == 0.0 {
                    center + Vec3::new(*radius, 0.0, 0.0)
                } else {
                    center + d * (radius / n)
                }
            }
            Shape::Mesh(m) => m.closest_point(p),
        }
    }

    pub fn translated(&self, offset: &Vec3) -> Shape {
        match self {
            Shape::Sphere { radius, center } => Shape::Sphere { radius: *radius, center: center + offset },
            Shape::Mesh(m) => Shape::Mesh(m.translated(offset)),
        }
    }

    /// Surface quadrature with normals pointing into the shape.
    pub fn surface_quadrature(&self, level: usize) -> Vec<SurfaceNode> {
        match self {
            Shape::Sphere { radius, center } => icosphere_quadrature(level)
                .into_iter()
                .map(|(dir, area)| SurfaceNode {
                    point: center + dir * *radius,
                    weight: area * radius * radius,
                    normal: -dir,
                })
                .collect(),
            Shape::Mesh(m) => m
                .triangles
                .iter()
                .filter_map(|t| {
                    let (a, b, c) = m.corners(t);
                    let cr = (b - a).cross(&(c - a));
                    let area = 0.5 * cr.norm();
                    (area > 0.0).then(|| SurfaceNode {
                        point: (a + b + c) / 3.0,
                        weight: area,
                        normal: -cr / cr.norm(),
                    })
                })
                .collect(),
        }
    }
}

/// Centroid directions and exact spherical areas of a geodesic icosphere on
/// the unit sphere. Areas sum to 4 pi.
pub fn icosphere_quadrature(level: usize) -> Vec<(Vec3, f64)> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache = std::collections::HashMap::new();
        let mut midpoint = |i: usize, j: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (i.min(j), i.max(j));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[i] + verts[j]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let a = midpoint(f[0], f[1], &mut verts);
            let b = midpoint(f[1], f[2], &mut verts);
            let c = midpoint(f[2], f[0], &mut verts);
            next.push([f[0], a, c]);
            next.push([f[1], b, a]);
            next.push([f[2], c, b]);
            next.push([a, b, c]);
        }
        faces = next;
    }
    faces
        .iter()
        .map(|f| {
            let (a, b, c) = (verts[f[0]], verts[f[1]], verts[f[2]]);
            let num = a.dot(&b.cross(&c)).abs();
            let den = 1.0 + a.dot(&b) + b.dot(&c) + c.dot(&a);
            let area = 2.0 * num.atan2(den);
            ((a + b + c).normalize(), area)
        })
        .collect()
}

/// Mass and inertia tensor about the mass center, for uniform density.
pub fn compute_mass_inertia(shape: &Shape, density: f64) -> Result<(f64, Matrix3<f64>)> {
    let (mass, _, inertia) = mass_properties(shape, density)?;
    Ok((mass, inertia))
}

fn mass_properties(shape: &Shape, density: f64) -> Result<(f64, Vec3, Matrix3<f64>)> {
    if !(density > 0.0) || !density.is_finite() {
        return Err(Error::Config(format!("body density must be positive, got {density}")));
    }
    let (vol, center, second) = match shape {
        Shape::Sphere { radius, center } => {
            if !(*radius > 0.0) {
                return Err(Error::DegenerateBody(format!("sphere radius {radius}")));
            }
            let (vol, second) = sphere_lattice_moments(*radius);
            (vol, *center, second)
        }
        Shape::Mesh(m) => {
            let (vol, first, second0) = m.moments();
            if !(vol.abs() > 1e-14) {
                return Err(Error::DegenerateBody(format!("mesh volume {vol}")));
            }
            if vol < 0.0 {
                return Err(Error::DegenerateBody("mesh faces are inward oriented".into()));
            }
            let c = first / vol;
            // shift second moment to the mass center
            (vol, c, second0 - vol * c * c.transpose())
        }
    };
    if !(vol > 0.0) {
        return Err(Error::DegenerateBody(format!("volume {vol}")));
    }
    let mass = density * vol;
    let second = density * second;
    let mut inertia = Matrix3::identity() * second.trace() - second;
    inertia = (inertia + inertia.transpose()) * 0.5;
    Ok((mass, center, inertia))
}

/// Lattice quadrature of the volume and of the second moment of a centered
/// ball. Interior cells use 2x2x2 Gauss points, cut cells are subsampled.
fn sphere_lattice_moments(radius: f64) -> (f64, Matrix3<f64>) {
    let n = 48usize;
    let h = 2.0 * radius / n as f64;
    let g = h / (2.0 * 3f64.sqrt());
    let sub = 8usize;
    let hs = h / sub as f64;
    let mut vol = 0.0;
    let mut second = Matrix3::zeros();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let c = Vec3::new(
                    -radius + (i as f64 + 0.5) * h,
                    -radius + (j as f64 + 0.5) * h,
                    -radius + (k as f64 + 0.5) * h,
                );
                let (dmin, dmax) = box_distance_range(&c, h);
                if dmin >= radius {
                    continue;
                }
                if dmax <= radius {
                    let w = h * h * h / 8.0;
                    for sx in [-g, g] {
                        for sy in [-g, g] {
                            for sz in [-g, g] {
                                let p = c + Vec3::new(sx, sy, sz);
                                vol += w;
                                second += w * p * p.transpose();
                            }
                        }
                    }
                } else {
                    let w = hs * hs * hs;
                    for a in 0..sub {
                        for b in 0..sub {
                            for d in 0..sub {
                                let p = c + Vec3::new(
                                    (a as f64 + 0.5) * hs - 0.5 * h,
                                    (b as f64 + 0.5) * hs - 0.5 * h,
                                    (d as f64 + 0.5) * hs - 0.5 * h,
                                );
                                if p.norm() < radius {
                                    vol += w;
                                    second += w * p * p.transpose();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (vol, second)
}

/// Smallest and largest distance from the origin to an axis-aligned cube.
fn box_distance_range(center: &Vec3, h: f64) -> (f64, f64) {
    let mut near = 0.0;
    let mut far = 0.0;
    for d in 0..3 {
        let lo = center[d] - 0.5 * h;
        let hi = center[d] + 0.5 * h;
        let n = if lo > 0.0 {
            lo
        } else if hi < 0.0 {
            -hi
        } else {
            0.0
        };
        let f = lo.abs().max(hi.abs());
        near += n * n;
        far += f * f;
    }
    (near.sqrt(), far.sqrt())
}

impl RigidGeometry {
    /// Computes mass properties and recenters the shape at its mass center.
    pub fn new(shape: Shape, density: f64) -> Result<RigidGeometry> {
        let (mass, center, inertia) = mass_properties(&shape, density)?;
        Ok(RigidGeometry {
            shape: shape.translated(&-center),
            density,
            mass,
            inertia,
            original_center: center,
        })
    }

    pub fn sphere(radius: f64, density: f64) -> Result<RigidGeometry> {
        RigidGeometry::new(Shape::sphere(radius), density)
    }

    /// Radius of the body if it is a sphere centered at the origin.
    pub fn sphere_radius(&self) -> Option<f64> {
        match &self.shape {
            Shape::Sphere { radius, center } if center.norm() < 1e-12 * radius => Some(*radius),
            _ => None,
        }
    }
}

/// Builds the lattice volume quadrature and the two surface quadratures.
pub fn build_discretization(
    geometry: &RigidGeometry,
    outer_radius: f64,
    spacing: f64,
    surface_level: usize,
) -> Result<FluidDiscretization> {
    if !(spacing > 0.0) || !(outer_radius > 0.0) {
        return Err(Error::Config(format!("invalid domain: R = {outer_radius}, h = {spacing}")));
    }
    let body = geometry.shape.clone();
    let body_radius = body.bounding_radius(&Vec3::zeros());
    if body_radius >= 0.5 * outer_radius {
        return Err(Error::GeometryOverlap { body_radius, half_radius: 0.5 * outer_radius });
    }
    let half = (outer_radius / spacing).ceil() as usize;
    let n = 2 * half;
    let origin = Vec3::repeat(-(half as f64) * spacing);
    let sub = 8usize;
    let hs = spacing / sub as f64;
    let cell_vol = spacing * spacing * spacing;

    let center_of = |i: usize, j: usize, k: usize| -> Vec3 {
        origin + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * spacing
    };
    let in_fluid = |p: &Vec3| -> bool {
        let r = p.norm();
        r < outer_radius * (1.0 - 1e-12) && r > 0.0 && !body.contains(p) && body.penetration(p) == 0.0
    };

    // (cell, fluid volume, fluid centroid) for cells with positive fluid volume
    let mut cell_to_node = vec![NO_NODE; n * n * n];
    let mut nodes = Vec::new();
    let mut orphans: Vec<([usize; 3], f64, Vec3)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let c = center_of(i, j, k);
                let (dmin, dmax) = box_distance_range(&c, spacing);
                if dmin >= outer_radius || dmax <= 0.0 {
                    continue;
                }
                let touches_body = dmin <= body_radius;
                let full = dmax < outer_radius && !touches_body;
                let (vol, centroid) = if full {
                    (cell_vol, c)
                } else {
                    let mut count = 0usize;
                    let mut acc = Vec3::zeros();
                    for a in 0..sub {
                        for b in 0..sub {
                            for d in 0..sub {
                                let p = c + Vec3::new(
                                    (a as f64 + 0.5) * hs - 0.5 * spacing,
                                    (b as f64 + 0.5) * hs - 0.5 * spacing,
                                    (d as f64 + 0.5) * hs - 0.5 * spacing,
                                );
                                let r = p.norm();
                                if r < outer_radius && !(touches_body && body.contains(&p)) {
                                    count += 1;
                                    acc += p;
                                }
                            }
                        }
                    }
                    if count == 0 {
                        continue;
                    }
                    (count as f64 * hs * hs * hs, acc / count as f64)
                };
                if in_fluid(&c) {
                    cell_to_node[(i * n + j) * n + k] = nodes.len() as u32;
                    nodes.push(VolumeNode { point: c, weight: vol, cell: [i, j, k] });
                } else {
                    orphans.push(([i, j, k], vol, centroid));
                }
            }
        }
    }
    if nodes.is_empty() {
        return Err(Error::DegenerateBody("no fluid nodes in domain".into()));
    }

    let mut lost_volume = 0.0;
    for (cell, vol, centroid) in orphans {
        // nearest nodes to the orphan's fluid centroid; ties share the volume
        let mut near: Vec<(usize, f64)> = Vec::new();
        for reach in 1..=2i64 {
            for di in -reach..=reach {
                for dj in -reach..=reach {
                    for dk in -reach..=reach {
                        let ii = cell[0] as i64 + di;
                        let jj = cell[1] as i64 + dj;
                        let kk = cell[2] as i64 + dk;
                        if ii < 0 || jj < 0 || kk < 0 || ii >= n as i64 || jj >= n as i64 || kk >= n as i64 {
                            continue;
                        }
                        let id = cell_to_node[((ii as usize) * n + jj as usize) * n + kk as usize];
                        if id != NO_NODE {
                            near.push((id as usize, (nodes[id as usize].point - centroid).norm_squared()));
                        }
                    }
                }
            }
            if !near.is_empty() {
                break;
            }
        }
        let best = near.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        let tied: Vec<usize> = near.iter().filter(|x| x.1 <= best * (1.0 + 1e-9) + 1e-300).map(|x| x.0).collect();
        if tied.is_empty() {
            lost_volume += vol;
        } else {
            let share = vol / tied.len() as f64;
            for id in tied {
                nodes[id].weight += share;
            }
        }
    }

    let surface_body = body.surface_quadrature(surface_level);
    let surface_outer = icosphere_quadrature(surface_level)
        .into_iter()
        .map(|(dir, area)| SurfaceNode {
            point: dir * outer_radius,
            weight: area * outer_radius * outer_radius,
            normal: dir,
        })
        .collect();

    Ok(FluidDiscretization {
        outer_radius,
        spacing,
        cells_per_axis: n,
        origin,
        nodes,
        surface_body,
        surface_outer,
        body,
        lost_volume,
        cell_to_node,
    })
}

impl FluidDiscretization {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn volume(&self) -> f64 {
        self.nodes.iter().map(|n| n.weight).sum()
    }

    /// Node index of lattice cell (i, j, k), if the cell carries a node.
    pub fn node_at(&self, i: i64, j: i64, k: i64) -> Option<usize> {
        let n = self.cells_per_axis as i64;
        if i < 0 || j < 0 || k < 0 || i >= n || j >= n || k >= n {
            return None;
        }
        let id = self.cell_to_node[((i * n + j) * n + k) as usize];
        (id != NO_NODE).then_some(id as usize)
    }

    pub fn cell_center(&self, cell: [i64; 3]) -> Vec3 {
        self.origin
            + Vec3::new(cell[0] as f64 + 0.5, cell[1] as f64 + 0.5, cell[2] as f64 + 0.5) * self.spacing
    }

    /// Nearest lattice cell to `p` and the offset of `p` from its center.
    pub fn locate(&self, p: &Vec3) -> ([i64; 3], Vec3) {
        let s = (p - self.origin) / self.spacing;
        let cell = [
            (s.x - 0.5).round() as i64,
            (s.y - 0.5).round() as i64,
            (s.z - 0.5).round() as i64,
        ];
        (cell, p - self.cell_center(cell))
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let r = p.norm();
        r < self.outer_radius && self.body.penetration(p) == 0.0 && !self.body.contains(p)
    }

    /// Distance by which `p` lies outside the closure of F_0.
    pub fn penetration(&self, p: &Vec3) -> f64 {
        (p.norm() - self.outer_radius).max(0.0).max(self.body.penetration(p))
    }

    /// Moves a point that lies outside F_0 onto the nearest boundary.
    pub fn project(&self, p: &Vec3) -> Vec3 {
        let r = p.norm();
        if r > self.outer_radius {
            return p * (self.outer_radius / r);
        }
        if self.body.penetration(p) > 0.0 {
            return self.body.project_to_surface(p);
        }
        *p
    }

    /// Face-adjacent node pairs (a < b).
    pub fn lattice_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for (a, node) in self.nodes.iter().enumerate() {
            let c = node.cell.map(|v| v as i64);
            for d in 0..3 {
                let mut nb = c;
                nb[d] += 1;
                if let Some(b) = self.node_at(nb[0], nb[1], nb[2]) {
                    edges.push((a, b));
                }
            }
        }
        edges
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit_cube_mesh(side: f64) -> TriMesh {
        let s = side;
        let v = |x: f64, y: f64, z: f64| Vec3::new(x * s, y * s, z * s);
        TriMesh {
            vertices: vec![
                v(0., 0., 0.),
                v(1., 0., 0.),
                v(1., 1., 0.),
                v(0., 1., 0.),
                v(0., 0., 1.),
                v(1., 0., 1.),
                v(1., 1., 1.),
                v(0., 1., 1.),
            ],
            triangles: vec![
                [0, 2, 1],
                [0, 3, 2],
                [4, 5, 6],
                [4, 6, 7],
                [0, 1, 5],
                [0, 5, 4],
                [2, 3, 7],
                [2, 7, 6],
                [1, 2, 6],
                [1, 6, 5],
                [0, 4, 7],
                [0, 7, 3],
            ],
        }
    }

    #[test]
    fn unit_sphere_mass_and_inertia() {
        let (m, j) = compute_mass_inertia(&Shape::sphere(1.0), 1.0).unwrap();
        let vol = 4.0 * PI / 3.0;
        assert!((m - vol).abs() / vol < 1e-3, "mass {m}");
        let expect = 0.4 * vol;
        for i in 0..3 {
            assert!((j[(i, i)] - expect).abs() / expect < 1e-3);
            for k in 0..3 {
                if i != k {
                    assert!(j[(i, k)].abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn shifted_sphere_recenters_with_same_inertia() {
        let g0 = RigidGeometry::sphere(1.0, 2.0).unwrap();
        let g1 = RigidGeometry::new(Shape::Sphere { radius: 1.0, center: Vec3::new(0.3, -0.2, 0.7) }, 2.0).unwrap();
        assert!((g0.inertia - g1.inertia).norm() < 1e-12);
        assert!(g1.sphere_radius().is_some());
        assert!((g1.original_center - Vec3::new(0.3, -0.2, 0.7)).norm() < 1e-14);
    }

    #[test]
    fn cube_mesh_mass_properties() {
        let (m, j) = compute_mass_inertia(&Shape::Mesh(unit_cube_mesh(2.0)), 1.5).unwrap();
        let mass = 1.5 * 8.0;
        assert!((m - mass).abs() < 1e-12);
        // cube of side s: J = m s^2 / 6
        for i in 0..3 {
            assert!((j[(i, i)] - mass * 4.0 / 6.0).abs() < 1e-10);
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(compute_mass_inertia(&Shape::sphere(0.0), 1.0), Err(Error::DegenerateBody(_))));
        let flat = TriMesh {
            vertices: vec![Vec3::zeros(), Vec3::x(), Vec3::y()],
            triangles: vec![[0, 1, 2], [0, 2, 1]],
        };
        assert!(matches!(compute_mass_inertia(&Shape::Mesh(flat), 1.0), Err(Error::DegenerateBody(_))));
    }

    #[test]
    fn mesh_containment_and_closest_point() {
        let m = unit_cube_mesh(1.0);
        assert!(m.contains(&Vec3::new(0.5, 0.5, 0.5)));
        assert!(!m.contains(&Vec3::new(1.5, 0.5, 0.5)));
        let q = m.closest_point(&Vec3::new(0.5, 0.5, 0.9));
        assert!((q - Vec3::new(0.5, 0.5, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn icosphere_areas_sum_to_four_pi() {
        for level in 0..4 {
            let total: f64 = icosphere_quadrature(level).iter().map(|q| q.1).sum();
            assert!((total - 4.0 * PI).abs() < 1e-12, "level {level}: {total}");
        }
    }

    #[test]
    fn volume_quadrature_matches_shell_volume() {
        let g = RigidGeometry::sphere(1.0, 1.0).unwrap();
        let d = build_discretization(&g, 4.0, 0.25, 3).unwrap();
        let exact = 4.0 * PI / 3.0 * (64.0 - 1.0);
        assert!((d.volume() - exact).abs() / exact < 1e-3, "{}", d.volume());
        assert_eq!(d.lost_volume, 0.0);
        let first: Vec3 = d.nodes.iter().map(|n| n.point * n.weight).sum();
        assert!(first.norm() < 1e-4 * exact, "{}", first.norm());
        let body_area: f64 = d.surface_body.iter().map(|s| s.weight).sum();
        assert!((body_area - 4.0 * PI).abs() < 1e-12);
        for s in &d.surface_body {
            assert!((s.normal + s.point.normalize()).norm() < 1e-14);
        }
    }

    #[test]
    fn overlap_is_rejected() {
        let g = RigidGeometry::sphere(1.0, 1.0).unwrap();
        assert!(matches!(build_discretization(&g, 1.0, 0.25, 2), Err(Error::GeometryOverlap { .. })));
    }

    #[test]
    fn chi_r_truncates_radially() {
        let y = Vec3::new(3.0, 4.0, 0.0);
        assert_eq!(chi_r(&y, 10.0), y);
        assert!((chi_r(&y, 2.5) - Vec3::new(1.5, 2.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn projection_and_penetration() {
        let g = RigidGeometry::sphere(1.0, 1.0).unwrap();
        let d = build_discretization(&g, 4.0, 0.5, 1).unwrap();
        let p = Vec3::new(0.98, 0.0, 0.0);
        assert!((d.penetration(&p) - 0.02).abs() < 1e-14);
        assert!((d.project(&p) - Vec3::x()).norm() < 1e-14);
        let q = Vec3::new(0.0, 4.1, 0.0);
        assert!((d.penetration(&q) - 0.1).abs() < 1e-12);
        assert!(d.contains(&Vec3::new(2.0, 0.0, 0.0)));
    }
}
