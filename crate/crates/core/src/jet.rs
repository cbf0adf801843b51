//! Second-order jets: value, gradient and Hessian of scalar fields in 3D.
//!
//! Products keep the Hessian exactly symmetric, so the curl of a vector of
//! jets has a gradient whose trace vanishes up to rounding.

use nalgebra::{Matrix3, Vector3};

type Vec3 = Vector3<f64>;

/// Value and first two derivatives of a function of one variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual2 {
    pub f: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Dual2 {
    pub fn new(f: f64, d1: f64, d2: f64) -> Dual2 {
        Dual2 { f, d1, d2 }
    }

    pub fn mul(self, o: Dual2) -> Dual2 {
        Dual2 {
            f: self.f * o.f,
            d1: self.d1 * o.f + self.f * o.d1,
            d2: self.d2 * o.f + 2.0 * self.d1 * o.d1 + self.f * o.d2,
        }
    }

    /// Composition with an affine inner map s -> (s - shift) / scale.
    pub fn rescaled(f: impl Fn(f64) -> (f64, f64, f64), s: f64, shift: f64, scale: f64) -> Dual2 {
        let (v, d1, d2) = f((s - shift) / scale);
        Dual2 { f: v, d1: d1 / scale, d2: d2 / (scale * scale) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet2 {
    pub v: f64,
    pub g: Vec3,
    pub h: Matrix3<f64>,
}

impl Jet2 {
    pub fn zero() -> Jet2 {
        Jet2 { v: 0.0, g: Vec3::zeros(), h: Matrix3::zeros() }
    }

    pub fn constant(c: f64) -> Jet2 {
        Jet2 { v: c, ..Jet2::zero() }
    }

    /// The linear function y -> a . y evaluated at `y`.
    pub fn linear(a: &Vec3, y: &Vec3) -> Jet2 {
        Jet2 { v: a.dot(y), g: *a, h: Matrix3::zeros() }
    }

    /// A radial function f(|y|) given its derivatives in r.
    pub fn radial(y: &Vec3, f: Dual2) -> Jet2 {
        let r = y.norm();
        let u = y / r;
        let uu = u * u.transpose();
        Jet2 {
            v: f.f,
            g: u * f.d1,
            h: uu * f.d2 + (Matrix3::identity() - uu) * (f.d1 / r),
        }
    }

    pub fn mul(&self, o: &Jet2) -> Jet2 {
        let cross = self.g * o.g.transpose();
        Jet2 {
            v: self.v * o.v,
            g: self.g * o.v + o.g * self.v,
            h: self.h * o.v + o.h * self.v + (cross + cross.transpose()),
        }
    }

    pub fn add(&self, o: &Jet2) -> Jet2 {
        Jet2 { v: self.v + o.v, g: self.g + o.g, h: self.h + o.h }
    }

    pub fn scale(&self, c: f64) -> Jet2 {
        Jet2 { v: self.v * c, g: self.g * c, h: self.h * c }
    }
}

/// Curl of a vector potential given componentwise as jets. Returns the field
/// value and its gradient, `grad[(i, m)] = d z_i / d y_m`.
pub fn curl(a: &[Jet2; 3]) -> (Vec3, Matrix3<f64>) {
    let z = Vec3::new(a[2].g[1] - a[1].g[2], a[0].g[2] - a[2].g[0], a[1].g[0] - a[0].g[1]);
    let mut grad = Matrix3::zeros();
    for m in 0..3 {
        grad[(0, m)] = a[2].h[(m, 1)] - a[1].h[(m, 2)];
        grad[(1, m)] = a[0].h[(m, 2)] - a[2].h[(m, 0)];
        grad[(2, m)] = a[1].h[(m, 0)] - a[0].h[(m, 1)];
    }
    (z, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_at(f: &dyn Fn(&Vec3) -> f64, y: &Vec3) -> (f64, Vec3, Matrix3<f64>) {
        let e = 1e-4;
        let mut g = Vec3::zeros();
        let mut h = Matrix3::zeros();
        for i in 0..3 {
            let di = Vec3::ith(i, e);
            g[i] = (f(&(y + di)) - f(&(y - di))) / (2.0 * e);
            for j in 0..3 {
                let dj = Vec3::ith(j, e);
                h[(i, j)] = (f(&(y + di + dj)) - f(&(y + di - dj)) - f(&(y - di + dj)) + f(&(y - di - dj)))
                    / (4.0 * e * e);
            }
        }
        (f(y), g, h)
    }

    #[test]
    fn radial_product_matches_finite_differences() {
        let y = Vec3::new(0.7, -1.1, 0.4);
        let r = y.norm();
        let rad = Jet2::radial(&y, Dual2::new(r.powi(3), 3.0 * r * r, 6.0 * r));
        let lin = Jet2::linear(&Vec3::new(1.0, 2.0, -0.5), &y);
        let prod = rad.mul(&lin);
        let f = |p: &Vec3| p.norm().powi(3) * (p.x + 2.0 * p.y - 0.5 * p.z);
        let (v, g, h) = scalar_at(&f, &y);
        assert!((prod.v - v).abs() < 1e-12);
        assert!((prod.g - g).norm() < 1e-6);
        assert!((prod.h - h).norm() < 1e-4);
        assert_eq!(prod.h, prod.h.transpose());
    }

    #[test]
    fn curl_is_divergence_free() {
        let y = Vec3::new(1.3, 0.2, -0.9);
        let r = y.norm();
        let rad = Jet2::radial(&y, Dual2::new((-r).exp(), -(-r).exp(), (-r).exp()));
        let a = [
            rad.mul(&Jet2::linear(&Vec3::new(0.0, 1.0, 2.0), &y)),
            rad.mul(&Jet2::linear(&Vec3::new(-1.0, 0.3, 0.0), &y)),
            rad.mul(&rad),
        ];
        let (_, grad) = curl(&a);
        assert!(grad.trace().abs() < 1e-15 * grad.norm().max(1.0) * 10.0);
    }
}
