//! Body pose (Q, h) and the change of variables between the body frame and
//! the inertial frame.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyPose {
    pub q: Matrix3<f64>,
    pub h: Vec3,
    pub t: f64,
}

impl Default for BodyPose {
    fn default() -> Self {
        BodyPose { q: Matrix3::identity(), h: Vec3::zeros(), t: 0.0 }
    }
}

fn exp_so3(w: &Vec3) -> Matrix3<f64> {
    *Rotation3::from_scaled_axis(*w).matrix()
}

/// Nearest rotation to `m` (polar factor).
fn reorthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    u * vt
}

impl BodyPose {
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.q))
    }

    pub fn orthogonality_defect(&self) -> f64 {
        (self.q.transpose() * self.q - Matrix3::identity()).norm()
    }
}

/// Q' = Q exp(hat(r) dt), h' = h + dt Q_mid l with Q_mid = Q exp(hat(r) dt / 2),
/// for body-frame velocities (l, r) held constant over the step.
pub fn integrate_pose(pose: &BodyPose, l: &Vec3, r: &Vec3, dt: f64) -> BodyPose {
    let q_mid = pose.q * exp_so3(&(r * (0.5 * dt)));
    let q = reorthonormalize(&(pose.q * exp_so3(&(r * dt))));
    BodyPose { q, h: pose.h + q_mid * l * dt, t: pose.t + dt }
}

/// U(x) = Q u(Q^T (x - h)). `body_field` returns None outside the sampled
/// body-frame domain.
pub fn map_to_inertial(pose: &BodyPose, x: &Vec3, body_field: &dyn Fn(&Vec3) -> Option<Vec3>) -> Result<Vec3> {
    let y = pose.q.transpose() * (x - pose.h);
    body_field(&y).map(|u| pose.q * u).ok_or(Error::OutOfSampledDomain { x: x.x, y: x.y, z: x.z })
}

/// u(y) = Q^T U(Q y + h).
pub fn map_to_body(pose: &BodyPose, y: &Vec3, inertial_field: &dyn Fn(&Vec3) -> Option<Vec3>) -> Result<Vec3> {
    let x = pose.q * y + pose.h;
    inertial_field(&x).map(|u| pose.q.transpose() * u).ok_or(Error::OutOfSampledDomain { x: y.x, y: y.y, z: y.z })
}

/// Inertial rigid velocity h' + (Q r) x (x - h), with h' = Q l.
pub fn inertial_rigid_velocity(pose: &BodyPose, l: &Vec3, r: &Vec3, x: &Vec3) -> Vec3 {
    pose.q * l + (pose.q * r).cross(&(x - pose.h))
}

/// Gap between the body surface and the outer sphere in the inertial frame,
/// relative to R.
pub fn relative_clearance(pose: &BodyPose, body_radius: f64, outer_radius: f64) -> f64 {
    (outer_radius - pose.h.norm() - body_radius) / outer_radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn constant_spin_returns_to_identity() {
        let mut p = BodyPose::default();
        let r = Vec3::new(0.0, 0.0, 1.0);
        let n = 1000;
        let dt = 2.0 * PI / n as f64;
        for _ in 0..n {
            p = integrate_pose(&p, &Vec3::zeros(), &r, dt);
        }
        assert!((p.q - Matrix3::identity()).norm() < 1e-12);
    }

    #[test]
    fn long_integration_stays_orthonormal() {
        let mut p = BodyPose::default();
        for k in 0..10_000 {
            let s = k as f64 * 1e-3;
            let r = Vec3::new(s.sin(), 0.3 * s.cos(), 1.1);
            p = integrate_pose(&p, &Vec3::new(1.0, 0.0, 0.0), &r, 1e-3);
        }
        assert!(p.orthogonality_defect() <= 1e-9);
        assert!((p.q.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn translation_without_rotation() {
        let p = integrate_pose(&BodyPose::default(), &Vec3::new(1.0, 2.0, 3.0), &Vec3::zeros(), 0.5);
        assert!((p.h - Vec3::new(0.5, 1.0, 1.5)).norm() < 1e-15);
    }

    #[test]
    fn maps_are_inverse() {
        let p = BodyPose { q: exp_so3(&Vec3::new(0.3, -0.4, 0.9)), h: Vec3::new(1.0, -2.0, 0.5), t: 0.0 };
        let u = |y: &Vec3| Some(Vec3::new(y.y, -y.x, 0.2 * y.z));
        let x = Vec3::new(0.7, 0.1, -0.3);
        let ui = map_to_inertial(&p, &x, &u).unwrap();
        let inertial = |xx: &Vec3| map_to_inertial(&p, xx, &u).ok();
        let y = p.q.transpose() * (x - p.h);
        let back = map_to_body(&p, &y, &inertial).unwrap();
        assert!((back - u(&y).unwrap()).norm() < 1e-14);
        assert!((p.q.transpose() * ui - u(&y).unwrap()).norm() < 1e-14);
        let none = |_: &Vec3| None;
        assert!(matches!(map_to_inertial(&p, &x, &none), Err(Error::OutOfSampledDomain { .. })));
    }

    #[test]
    fn rigid_body_frame_field_maps_to_rigid_inertial_field() {
        let p = BodyPose { q: exp_so3(&Vec3::new(0.1, 0.2, -0.3)), h: Vec3::new(0.5, 0.0, 1.0), t: 0.0 };
        let l = Vec3::new(0.2, -0.1, 0.4);
        let r = Vec3::new(0.0, 1.0, 0.5);
        let u = |y: &Vec3| Some(l + r.cross(y));
        let x = Vec3::new(2.0, 1.0, -1.0);
        let got = map_to_inertial(&p, &x, &u).unwrap();
        assert!((got - inertial_rigid_velocity(&p, &l, &r, &x)).norm() < 1e-14);
    }
}
