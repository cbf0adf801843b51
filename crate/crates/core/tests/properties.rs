use std::sync::OnceLock;

use nalgebra::Matrix3;
use proptest::prelude::*;

use rigidswim::bodyframe::{integrate_pose, BodyPose};
use rigidswim::config::Config;
use rigidswim::geometry::{build_discretization, chi_r, FluidDiscretization, RigidGeometry, Vec3};
use rigidswim::jet::{curl, Jet2};
use rigidswim::transport::interpolate;
use rigidswim::verify::{lagrange_identity_check, slip_reduction_check};
use rigidswim::Error;

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn small_disc() -> &'static FluidDiscretization {
    static DISC: OnceLock<FluidDiscretization> = OnceLock::new();
    DISC.get_or_init(|| {
        let g = RigidGeometry::sphere(1.0, 1.0).unwrap();
        build_discretization(&g, 3.0, 0.5, 1).unwrap()
    })
}

proptest! {
    #[test]
    fn lagrange_identity_holds(a in vec3(5.0), b in vec3(5.0), c in vec3(5.0), d in vec3(5.0)) {
        let scale = a.norm() * b.norm() * c.norm() * d.norm();
        prop_assert!(lagrange_identity_check(&a, &b, &c, &d) <= 1e-12 * scale.max(1e-12));
    }

    #[test]
    fn slip_pairing_bounded_by_normal_defect(
        gaps in proptest::collection::vec((vec3(2.0), vec3(2.0), vec3(1.0)), 1..20),
        leak in 0.0..1e-3f64,
    ) {
        let normals: Vec<Vec3> = gaps.iter().map(|g| g.2.try_normalize(1e-6).unwrap_or(Vec3::z())).collect();
        let mut u = Vec::new();
        let mut phi = Vec::new();
        for ((a, b, _), n) in gaps.iter().zip(&normals) {
            u.push(a - n * (a.dot(n) - leak));
            phi.push(b - n * b.dot(n));
        }
        let zeros = vec![Vec3::zeros(); normals.len()];
        let rep = slip_reduction_check(&u, &zeros, &zeros, &phi, &zeros, &normals, 1e-6);
        prop_assert!(rep.within_bound());
        prop_assert!(rep.normal_defect <= leak + 1e-12);
    }

    #[test]
    fn curl_of_jets_is_divergence_free(
        coeffs in proptest::collection::vec(vec3(2.0), 6),
        y in vec3(3.0),
    ) {
        let pot: Vec<Jet2> = (0..3)
            .map(|k| Jet2::linear(&coeffs[2 * k], &y).mul(&Jet2::linear(&coeffs[2 * k + 1], &y)).add(&Jet2::constant(1.0)))
            .collect();
        let (_, grad) = curl(&[pot[0], pot[1], pot[2]]);
        prop_assert!(grad.trace().abs() <= 1e-12 * (1.0 + grad.norm()));
    }

    #[test]
    fn truncation_stays_in_ball(y in vec3(20.0), r in 1.0..10.0f64) {
        let z = chi_r(&y, r);
        prop_assert!(z.norm() <= r * (1.0 + 1e-15));
        prop_assert!((chi_r(&z, r) - z).norm() <= 4.0 * f64::EPSILON * z.norm());
        if y.norm() < r {
            prop_assert_eq!(z, y);
        }
    }

    #[test]
    fn pose_stays_a_rotation(rates in proptest::collection::vec((vec3(5.0), vec3(5.0)), 1..200), dt in 1e-4..0.1f64) {
        let mut pose = BodyPose::default();
        for (l, r) in &rates {
            pose = integrate_pose(&pose, l, r, dt);
        }
        prop_assert!(pose.orthogonality_defect() <= 1e-12);
        prop_assert!((pose.q.determinant() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn interpolation_is_convex(seed in any::<u64>(), p in vec3(2.9), lo in -2.0..0.0f64, width in 0.0..3.0f64) {
        let disc = small_disc();
        prop_assume!(disc.contains(&p));
        let values: Vec<f64> = (0..disc.node_count())
            .map(|i| {
                let h = (seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15)).wrapping_mul(0xbf58476d1ce4e5b9);
                lo + width * ((h >> 11) as f64 / (1u64 << 53) as f64)
            })
            .collect();
        let v = interpolate(disc, &values, &p).unwrap();
        prop_assert!(v >= lo && v <= lo + width);
    }

    #[test]
    fn config_values_round_trip(r in 2.0..10.0f64, dt in 1e-4..1e-2f64, n in 1usize..64, alpha in 0.0..5.0f64) {
        let text = format!("domain.R = {r:?}\ntime.dt = {dt:?}\nbasis.N = {n}\n[coupling]\nalpha = {alpha:?}\n");
        let cfg = Config::from_toml(&text).unwrap();
        prop_assert_eq!(cfg.outer_radius, r);
        prop_assert_eq!(cfg.dt, dt);
        prop_assert_eq!(cfg.n, n);
        prop_assert_eq!(cfg.alpha, alpha);
    }

    #[test]
    fn unknown_keys_rejected(key in "[a-z]{3,8}\\.[a-z]{3,8}") {
        prop_assume!(!rigidswim::config::KNOWN_KEYS.contains(&key.as_str()));
        let err = Config::from_toml(&format!("{key} = 1.0\n")).unwrap_err();
        prop_assert!(matches!(err, Error::UnknownKeys(ref k) if k.contains(&key)), "{err}");
    }
}

#[test]
fn zero_rate_keeps_pose() {
    let pose = integrate_pose(&BodyPose::default(), &Vec3::zeros(), &Vec3::zeros(), 0.1);
    assert_eq!(pose.q, Matrix3::identity());
}
