//! Scenario configuration: flat dotted keys in a TOML file.
//!
//! Every accepted key is listed in [`KNOWN_KEYS`]; anything else is
//! rejected together with the full list of offending keys.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::galerkin::Viscosity;
use crate::geometry::Vec3;
use crate::propulsion::{FluxFamily, TimeProfile};
use crate::transport::DensityProfile;

pub const KNOWN_KEYS: &[&str] = &[
    "body.radius",
    "body.density",
    "domain.R",
    "domain.resolution",
    "domain.surface_level",
    "basis.N",
    "basis.potential_order",
    "basis.cache_dir",
    "transport.eps_shift",
    "transport.dt_sub_factor",
    "transport.subsamples",
    "fluid.nu",
    "fluid.nu1",
    "fluid.nu2",
    "fluid.variable_viscosity",
    "coupling.alpha",
    "time.T",
    "time.dt",
    "picard.tol",
    "picard.max_iter",
    "picard.freeze_density",
    "mode.positive_density",
    "mode.hard_invariants",
    "propulsion.family",
    "propulsion.amplitude",
    "propulsion.profile",
    "propulsion.profile_time",
    "initial.density",
    "initial.rho_background",
    "initial.rho_value",
    "initial.center",
    "initial.radius",
    "initial.normal",
    "initial.offset",
    "initial.shell_radius",
    "initial.width",
    "initial.velocity",
    "initial.amplitude",
    "initial.l",
    "initial.r",
    "verify.random_tests",
    "verify.seed",
    "verify.quadrature_refine",
];

#[derive(Debug, Clone, PartialEq)]
pub enum VelocityKind {
    Rest,
    Vortex { amplitude: f64 },
    Rigid { l: Vec3, r: Vec3 },
}

#[derive(Debug, Clone)]
pub struct Config {
    pub body_radius: f64,
    pub body_density: f64,
    pub outer_radius: f64,
    pub resolution: f64,
    pub surface_level: usize,
    pub n: usize,
    pub potential_order: usize,
    pub cache_dir: Option<String>,
    /// None means 1/N.
    pub eps_shift: Option<f64>,
    pub dt_sub_factor: f64,
    pub subsamples: usize,
    pub nu: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub variable_viscosity: bool,
    pub alpha: f64,
    pub t_end: f64,
    pub dt: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub freeze_density: bool,
    pub positive_density: bool,
    pub hard_invariants: bool,
    pub family: FluxFamily,
    pub amplitude: f64,
    pub profile: TimeProfile,
    pub density: DensityProfile,
    pub velocity: VelocityKind,
    pub random_tests: usize,
    /// Sub-points per axis and cell for the renormalized continuity check.
    pub quadrature_refine: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            body_radius: 1.0,
            body_density: 1.0,
            outer_radius: 4.0,
            resolution: 0.25,
            surface_level: 3,
            n: 20,
            potential_order: 1,
            cache_dir: None,
            eps_shift: None,
            dt_sub_factor: 0.25,
            subsamples: 2,
            nu: 1.0,
            nu1: 0.5,
            nu2: 2.0,
            variable_viscosity: false,
            alpha: 1.0,
            t_end: 1.0,
            dt: 5e-3,
            picard_tol: 1e-8,
            picard_max_iter: 50,
            freeze_density: false,
            positive_density: false,
            hard_invariants: false,
            family: FluxFamily::Swirl,
            amplitude: 1.0,
            profile: TimeProfile::Constant,
            density: DensityProfile::Uniform(1.0),
            velocity: VelocityKind::Rest,
            random_tests: 5,
            quadrature_refine: 2,
            seed: 0,
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

struct Reader {
    map: BTreeMap<String, toml::Value>,
}

impl Reader {
    fn float(&self, key: &str, default: f64) -> Result<f64> {
        match self.map.get(key) {
            None => Ok(default),
            Some(toml::Value::Float(f)) => Ok(*f),
            Some(toml::Value::Integer(i)) => Ok(*i as f64),
            Some(v) => Err(Error::Config(format!("{key}: expected a number, got {v}"))),
        }
    }

    fn uint(&self, key: &str, default: usize) -> Result<usize> {
        match self.map.get(key) {
            None => Ok(default),
            Some(toml::Value::Integer(i)) if *i >= 0 => Ok(*i as usize),
            Some(v) => Err(Error::Config(format!("{key}: expected a non-negative integer, got {v}"))),
        }
    }

    fn boolean(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key) {
            None => Ok(default),
            Some(toml::Value::Boolean(b)) => Ok(*b),
            Some(v) => Err(Error::Config(format!("{key}: expected true or false, got {v}"))),
        }
    }

    fn string(&self, key: &str) -> Result<Option<String>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(Error::Config(format!("{key}: expected a string, got {v}"))),
        }
    }

    fn vector(&self, key: &str, default: Vec3) -> Result<Vec3> {
        match self.map.get(key) {
            None => Ok(default),
            Some(toml::Value::Array(a)) if a.len() == 3 => {
                let mut v = Vec3::zeros();
                for (i, x) in a.iter().enumerate() {
                    v[i] = match x {
                        toml::Value::Float(f) => *f,
                        toml::Value::Integer(n) => *n as f64,
                        _ => return Err(Error::Config(format!("{key}: expected three numbers"))),
                    };
                }
                Ok(v)
            }
            Some(_) => Err(Error::Config(format!("{key}: expected three numbers"))),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut map = BTreeMap::new();
        flatten("", &table, &mut map);
        let unknown: Vec<String> = map.keys().filter(|k| !KNOWN_KEYS.contains(&k.as_str())).cloned().collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownKeys(unknown));
        }
        let r = Reader { map };
        let d = Config::default();
        let profile_time = r.float("propulsion.profile_time", 1.0)?;
        let profile = match r.string("propulsion.profile")?.as_deref() {
            None | Some("constant") => TimeProfile::Constant,
            Some("ramp") => TimeProfile::Ramp { duration: profile_time },
            Some("sinusoid") => TimeProfile::Sinusoid { period: profile_time },
            Some(other) => return Err(Error::Config(format!("propulsion.profile: unknown profile {other:?}"))),
        };
        let family = match r.string("propulsion.family")?.as_deref() {
            None | Some("swirl") => FluxFamily::Swirl,
            Some("none") => FluxFamily::None,
            Some("unit_swirl") => FluxFamily::UnitSwirl,
            Some("squirmer") => FluxFamily::Squirmer,
            Some(other) => return Err(Error::Config(format!("propulsion.family: unknown family {other:?}"))),
        };
        let background = r.float("initial.rho_background", 1.0)?;
        let value = r.float("initial.rho_value", 2.0)?;
        let density = match r.string("initial.density")?.as_deref() {
            None | Some("uniform") => DensityProfile::Uniform(background),
            Some("blob") => DensityProfile::Blob {
                background,
                value,
                center: r.vector("initial.center", Vec3::new(2.2, 0.0, 0.0))?,
                radius: r.float("initial.radius", 0.8)?,
            },
            Some("layer") => DensityProfile::Layer {
                below: background,
                above: value,
                normal: r.vector("initial.normal", Vec3::x())?,
                offset: r.float("initial.offset", 0.0)?,
            },
            Some("radial") => DensityProfile::RadialBump {
                background,
                amplitude: value - background,
                shell_radius: r.float("initial.shell_radius", 2.5)?,
                width: r.float("initial.width", 0.5)?,
            },
            Some(other) => return Err(Error::Config(format!("initial.density: unknown profile {other:?}"))),
        };
        let velocity = match r.string("initial.velocity")?.as_deref() {
            None | Some("rest") => VelocityKind::Rest,
            Some("vortex") => VelocityKind::Vortex { amplitude: r.float("initial.amplitude", 1.0)? },
            Some("rigid") => VelocityKind::Rigid {
                l: r.vector("initial.l", Vec3::zeros())?,
                r: r.vector("initial.r", Vec3::zeros())?,
            },
            Some(other) => return Err(Error::Config(format!("initial.velocity: unknown kind {other:?}"))),
        };
        let eps_shift = match r.map.get("transport.eps_shift") {
            None => None,
            Some(_) => Some(r.float("transport.eps_shift", 0.0)?),
        };
        let cfg = Config {
            body_radius: r.float("body.radius", d.body_radius)?,
            body_density: r.float("body.density", d.body_density)?,
            outer_radius: r.float("domain.R", d.outer_radius)?,
            resolution: r.float("domain.resolution", d.resolution)?,
            surface_level: r.uint("domain.surface_level", d.surface_level)?,
            n: r.uint("basis.N", d.n)?,
            potential_order: r.uint("basis.potential_order", d.potential_order)?,
            cache_dir: r.string("basis.cache_dir")?,
            eps_shift,
            dt_sub_factor: r.float("transport.dt_sub_factor", d.dt_sub_factor)?,
            subsamples: r.uint("transport.subsamples", d.subsamples)?,
            nu: r.float("fluid.nu", d.nu)?,
            nu1: r.float("fluid.nu1", d.nu1)?,
            nu2: r.float("fluid.nu2", d.nu2)?,
            variable_viscosity: r.boolean("fluid.variable_viscosity", d.variable_viscosity)?,
            alpha: r.float("coupling.alpha", d.alpha)?,
            t_end: r.float("time.T", d.t_end)?,
            dt: r.float("time.dt", d.dt)?,
            picard_tol: r.float("picard.tol", d.picard_tol)?,
            picard_max_iter: r.uint("picard.max_iter", d.picard_max_iter)?,
            freeze_density: r.boolean("picard.freeze_density", d.freeze_density)?,
            positive_density: r.boolean("mode.positive_density", d.positive_density)?,
            hard_invariants: r.boolean("mode.hard_invariants", d.hard_invariants)?,
            family,
            amplitude: r.float("propulsion.amplitude", d.amplitude)?,
            profile,
            density,
            velocity,
            random_tests: r.uint("verify.random_tests", d.random_tests)?,
            quadrature_refine: r.uint("verify.quadrature_refine", d.quadrature_refine)?.max(1),
            seed: r.uint("verify.seed", 0)? as u64,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        Config::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("body.radius", self.body_radius),
            ("body.density", self.body_density),
            ("domain.R", self.outer_radius),
            ("domain.resolution", self.resolution),
            ("transport.dt_sub_factor", self.dt_sub_factor),
            ("time.T", self.t_end),
            ("time.dt", self.dt),
            ("picard.tol", self.picard_tol),
            ("propulsion.profile_time", self.profile_time()),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be positive, got {v}")));
            }
        }
        if self.variable_viscosity {
            if !(self.nu1 > 0.0 && self.nu2 > 0.0) {
                return Err(Error::Config(format!("fluid.nu1 and fluid.nu2 must be positive, got {} and {}", self.nu1, self.nu2)));
            }
        } else if !(self.nu > 0.0 && self.nu.is_finite()) {
            return Err(Error::Config(format!("fluid.nu must be positive, got {}", self.nu)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("coupling.alpha must be non-negative, got {}", self.alpha)));
        }
        if self.n == 0 {
            return Err(Error::Config("basis.N must be at least 1".into()));
        }
        if self.picard_max_iter == 0 || self.subsamples == 0 {
            return Err(Error::Config("picard.max_iter and transport.subsamples must be at least 1".into()));
        }
        if let Some(e) = self.eps_shift {
            if !(e >= 0.0) {
                return Err(Error::Config(format!("transport.eps_shift must be non-negative, got {e}")));
            }
        }
        let (lo, _) = self.density.bounds();
        if lo < 0.0 {
            return Err(Error::Config(format!("initial density must be non-negative, got minimum {lo}")));
        }
        if self.positive_density && !(lo > 0.0) {
            return Err(Error::Config("mode.positive_density requires a positive initial density".into()));
        }
        Ok(())
    }

    fn profile_time(&self) -> f64 {
        match self.profile {
            TimeProfile::Constant => 1.0,
            TimeProfile::Ramp { duration } => duration,
            TimeProfile::Sinusoid { period } => period,
        }
    }

    pub fn viscosity(&self) -> Viscosity {
        if self.variable_viscosity {
            Viscosity::DensityDependent { nu1: self.nu1, nu2: self.nu2 }
        } else {
            Viscosity::Constant(self.nu)
        }
    }

    /// Density shift: 0 in positive-density mode, else eps_shift or 1/N.
    pub fn shift(&self) -> f64 {
        if self.positive_density {
            0.0
        } else {
            self.eps_shift.unwrap_or(1.0 / self.n as f64)
        }
    }

    /// RK4 substeps per time step for the characteristics.
    pub fn transport_substeps(&self) -> usize {
        (1.0 / self.dt_sub_factor).ceil().max(1.0) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c.n, 20);
        assert_eq!(c.shift(), 0.05);
        assert_eq!(c.transport_substeps(), 4);
    }

    #[test]
    fn dotted_and_table_forms_agree() {
        let a = Config::from_toml("basis.N = 8\ndomain.R = 5.0\n").unwrap();
        let b = Config::from_toml("[basis]\nN = 8\n[domain]\nR = 5\n").unwrap();
        assert_eq!((a.n, a.outer_radius), (b.n, b.outer_radius));
    }

    #[test]
    fn unknown_keys_listed() {
        match Config::from_toml("basis.N = 8\nbasis.M = 2\nfoo = 1\n") {
            Err(Error::UnknownKeys(k)) => assert_eq!(k, vec!["basis.M".to_string(), "foo".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_alpha_rejected() {
        assert!(matches!(Config::from_toml("coupling.alpha = -1.0"), Err(Error::Config(_))));
    }

    #[test]
    fn profiles_parse() {
        let c = Config::from_toml(
            "initial.density = \"blob\"\ninitial.center = [1, 2, 3]\nmode.positive_density = true\npropulsion.family = \"squirmer\"\npropulsion.profile = \"ramp\"\npropulsion.profile_time = 0.5\n",
        )
        .unwrap();
        assert!(matches!(c.density, DensityProfile::Blob { center, .. } if center == Vec3::new(1.0, 2.0, 3.0)));
        assert_eq!(c.family, FluxFamily::Squirmer);
        assert_eq!(c.profile, TimeProfile::Ramp { duration: 0.5 });
        assert_eq!(c.shift(), 0.0);
        assert!(Config::from_toml("initial.density = \"cloud\"").is_err());
        assert!(Config::from_toml("basis.N = \"many\"").is_err());
    }
}
