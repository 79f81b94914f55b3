use nalgebra::DVector;
use proptest::prelude::*;

use shield_core::certify::CertificateCache;
use shield_core::dynamics::{Environment, Target, Variant};
use shield_core::lqr::{lqr_control, spectral_radius, LqrConfig};
use shield_core::polyalg::{taylor_expand, Polynomial, PolynomialMap, PolynomialSmoothMap};

const NVARS: usize = 3;

fn polynomial() -> impl Strategy<Value = Polynomial> {
    prop::collection::vec((prop::collection::vec(0u16..3, NVARS), -2.0f64..2.0), 0..7)
        .prop_map(|terms| Polynomial::from_terms(NVARS, terms).unwrap())
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, NVARS)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

fn cartpole_state() -> impl Strategy<Value = Vec<f64>> {
    (-5.0f64..5.0, -2.0f64..2.0, -0.5f64..0.5, -2.0f64..2.0).prop_map(|(z, v, th, w)| vec![z, v, th, w])
}

fn bicycle_state() -> impl Strategy<Value = Vec<f64>> {
    (-0.2f64..1.0, -0.4f64..0.4, -1.0f64..1.0, 0.0f64..0.05)
        .prop_map(|(bx, by, phi, v)| vec![bx + 0.1 * phi.cos(), by + 0.1 * phi.sin(), bx, by, v])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn evaluation_is_a_ring_homomorphism(a in polynomial(), b in polynomial(), x in point()) {
        let (ea, eb) = (a.eval(&x).unwrap(), b.eval(&x).unwrap());
        prop_assert!(close(a.mul(&b).unwrap().eval(&x).unwrap(), ea * eb, 1e-10));
        prop_assert!(close(a.add(&b).unwrap().eval(&x).unwrap(), ea + eb, 1e-10));
    }

    #[test]
    fn taylor_expansion_reproduces_low_degree_maps(
        comps in prop::collection::vec(polynomial(), 2),
        center in point(),
        x in point(),
    ) {
        let f = PolynomialMap::new(NVARS, comps).unwrap();
        // degree ≤ 6 for exponents below 3 in three variables
        let g = taylor_expand(&PolynomialSmoothMap(&f), &center, 6).unwrap();
        let delta: Vec<f64> = x.iter().zip(&center).map(|(a, c)| a - c).collect();
        for (fx, gx) in f.eval(&x).unwrap().iter().zip(g.eval(&delta).unwrap()) {
            prop_assert!((fx - gx).abs() <= 1e-12 * fx.abs().max(1.0));
        }
    }

    #[test]
    fn jacobian_matches_central_differences(comps in prop::collection::vec(polynomial(), 2), x in point()) {
        let f = PolynomialMap::new(NVARS, comps).unwrap();
        let jac = f.jacobian(&x).unwrap();
        let h = 1e-5;
        for j in 0..NVARS {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (f.eval(&xp).unwrap(), f.eval(&xm).unwrap());
            for i in 0..f.output_dim() {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                prop_assert!((fd - jac[(i, j)]).abs() <= 1e-5 * fd.abs().max(1.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn stepping_is_deterministic(x in cartpole_state(), u in -20.0f64..20.0, surrogate: bool) {
        let env = Environment::cartpole(Variant::Original).unwrap();
        let a = env.step(&x, &[u], surrogate).unwrap();
        let b = env.step(&x, &[u], surrogate).unwrap();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn lqr_targets_are_fixed_points(x in cartpole_state(), y in bicycle_state(), seed in 0u64..50) {
        let cp = Environment::cartpole(Variant::Modified).unwrap();
        let bi = Environment::bicycle(Variant::Original, seed).unwrap();
        for (env, s) in [(&cp, &x), (&bi, &y)] {
            let t = env.lqr_target(s);
            let next = env.true_step(&t.x, &t.u);
            let gap: f64 = next.iter().zip(&t.x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(gap <= 1e-9);
        }
    }

    #[test]
    fn cartpole_is_translation_equivariant(x in cartpole_state(), u in -10.0f64..10.0, c in -50.0f64..50.0) {
        let env = Environment::cartpole(Variant::Original).unwrap();
        let mut shifted = x.clone();
        shifted[0] += c;
        let a = env.true_step(&shifted, &[u]);
        let mut b = env.true_step(&x, &[u]);
        b[0] += c;
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }

    #[test]
    fn bicycle_acceleration_is_bounded(x in bicycle_state(), a in -100.0f64..100.0, steer in -3.0f64..3.0) {
        let env = Environment::bicycle(Variant::Original, 0).unwrap();
        let next = env.step(&x, &[a, steer], false).unwrap();
        let dt = env.bicycle_params().dt;
        prop_assert!(((next[4] - x[4]) / dt).abs() <= 0.25 + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lqr_value_decreases_under_the_linear_model(z in -10.0f64..10.0, delta in prop::collection::vec(-1.0f64..1.0, 4)) {
        let env = Environment::cartpole(Variant::Original).unwrap();
        let target = Target::new(vec![z, 0.0, 0.0, 0.0], vec![0.0]);
        let ctrl = lqr_control(&env, &target, &LqrConfig::default()).unwrap().unwrap();
        prop_assert!(spectral_radius(&ctrl.closed_loop()) < 1.0);
        let d = DVector::from_vec(delta);
        let next = ctrl.closed_loop() * &d;
        let drop = ctrl.value_local(d.as_slice()) - ctrl.value_local(next.as_slice());
        let stage = (d.transpose() * (&ctrl.q + ctrl.k.transpose() * &ctrl.r * &ctrl.k) * &d)[(0, 0)];
        prop_assert!(drop >= -1e-9);
        prop_assert!((drop - stage).abs() <= 1e-9 * stage.max(1.0));
    }

    #[test]
    fn translated_cartpole_targets_share_the_controller(z in -100.0f64..100.0) {
        let env = Environment::cartpole(Variant::Original).unwrap();
        let cfg = LqrConfig::default();
        let at = |z: f64| lqr_control(&env, &Target::new(vec![z, 0.0, 0.0, 0.0], vec![0.0]), &cfg).unwrap().unwrap();
        let (origin, moved) = (at(0.0), at(z));
        prop_assert_eq!(origin.k, moved.k);
        prop_assert_eq!(origin.p, moved.p);
    }

    #[test]
    fn cached_bicycle_sets_match_fresh_ones(x in bicycle_state(), seed in 0u64..20) {
        let env = Environment::bicycle(Variant::Modified, seed).unwrap();
        let target = env.lqr_target(&x);
        let warm = CertificateCache::default();
        warm.invariant_set(&env, &target).unwrap();
        let cached = warm.invariant_set(&env, &target).unwrap();
        let fresh = CertificateCache::default().invariant_set(&env, &target).unwrap();
        prop_assert_eq!(cached.as_ref().map(|s| s.epsilon().to_bits()), fresh.as_ref().map(|s| s.epsilon().to_bits()));
        prop_assert_eq!(cached.map(|s| s.p().clone()), fresh.map(|s| s.p().clone()));
    }
}
