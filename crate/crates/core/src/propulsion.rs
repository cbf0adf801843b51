//! Tangential propulsion flux w on the body surface and its energy budget.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{FluidDiscretization, SurfaceNode, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeProfile {
    Constant,
    /// Linear ramp from 0 to 1 over `duration`, then constant.
    Ramp { duration: f64 },
    /// sin(2 pi t / period).
    Sinusoid { period: f64 },
}

impl TimeProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            TimeProfile::Constant => 1.0,
            TimeProfile::Ramp { duration } => (t / duration).clamp(0.0, 1.0),
            TimeProfile::Sinusoid { period } => (2.0 * PI * t / period).sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FluxFamily {
    None,
    /// Azimuthal swirl e_3 x n.
    Swirl,
    /// Unit azimuthal direction (e_3 x n) / |e_3 x n|.
    UnitSwirl,
    /// Tangential part of e_3 (squirmer-like).
    Squirmer,
}

/// w(s, t) = g(t) w_0(s) sampled at the body surface nodes.
#[derive(Debug, Clone)]
pub struct PropulsionFlux {
    pub samples: Vec<Vec3>,
    pub profile: TimeProfile,
}

impl PropulsionFlux {
    pub fn zero(disc: &FluidDiscretization) -> PropulsionFlux {
        PropulsionFlux { samples: vec![Vec3::zeros(); disc.surface_body.len()], profile: TimeProfile::Constant }
    }

    pub fn at(&self, s: usize, t: f64) -> Vec3 {
        self.samples[s] * self.profile.eval(t)
    }

    pub fn is_zero(&self) -> bool {
        self.samples.iter().all(|w| w.norm_squared() == 0.0)
    }

    /// Largest |w_0 . n| over the surface.
    pub fn normal_defect(&self, surface: &[SurfaceNode]) -> f64 {
        self.samples.iter().zip(surface).map(|(w, s)| w.dot(&s.normal).abs()).fold(0.0, f64::max)
    }

    /// Checks tangency to the given tolerance.
    pub fn check_tangential(&self, surface: &[SurfaceNode], tol: f64) -> Result<()> {
        let scale = self.samples.iter().map(|w| w.norm()).fold(0.0, f64::max).max(1.0);
        for (i, (w, s)) in self.samples.iter().zip(surface).enumerate() {
            let c = w.dot(&s.normal).abs();
            if c > tol * scale {
                return Err(Error::FluxNotTangential { node: i, normal_component: c });
            }
        }
        Ok(())
    }
}

/// Projects raw surface samples onto the tangent planes.
pub fn make_tangential_flux(raw: &[Vec3], surface: &[SurfaceNode], profile: TimeProfile) -> PropulsionFlux {
    let samples = raw
        .iter()
        .zip(surface)
        .map(|(w, s)| {
            let t = w - s.normal * w.dot(&s.normal);
            t - s.normal * t.dot(&s.normal)
        })
        .collect();
    PropulsionFlux { samples, profile }
}

pub fn family_flux(
    family: FluxFamily,
    amplitude: f64,
    surface: &[SurfaceNode],
    profile: TimeProfile,
) -> PropulsionFlux {
    let e3 = Vec3::z();
    let raw: Vec<Vec3> = surface
        .iter()
        .map(|s| {
            let n = s.normal;
            amplitude
                * match family {
                    FluxFamily::None => Vec3::zeros(),
                    FluxFamily::Swirl => e3.cross(&n),
                    FluxFamily::UnitSwirl => {
                        let v = e3.cross(&n);
                        let m = v.norm();
                        if m > 0.0 {
                            v / m
                        } else {
                            Vec3::zeros()
                        }
                    }
                    FluxFamily::Squirmer => e3 - n * e3.dot(&n),
                }
        })
        .collect();
    make_tangential_flux(&raw, surface, profile)
}

/// nu alpha int_0^t int_{dS_0} |w|^2, trapezoid rule on the time grid
/// 0, dt, ..., t (last interval shortened to end at t).
pub fn propulsion_budget(flux: &PropulsionFlux, surface: &[SurfaceNode], nu: f64, alpha: f64, t: f64, dt: f64) -> f64 {
    let area_integral: f64 = flux.samples.iter().zip(surface).map(|(w, s)| s.weight * w.norm_squared()).sum();
    let steps = (t / dt - 1e-9).ceil().max(0.0) as usize;
    let mut acc = 0.0;
    let mut t0 = 0.0;
    for _ in 0..steps {
        let t1 = (t0 + dt).min(t);
        let g0 = flux.profile.eval(t0);
        let g1 = flux.profile.eval(t1);
        acc += 0.5 * (t1 - t0) * (g0 * g0 + g1 * g1);
        t0 = t1;
    }
    nu * alpha * area_integral * acc
}
