use std::sync::Arc;

use dwm_core::det_approx::{beta, beta_star, delta2, gamma_hat, m1m2_trace, m2_det_trace, regularize, SpectralPair};
use dwm_core::flow::{flow_closed_form, pair_at};
use dwm_core::matrix_core::{identity, normalized_trace, CMat};
use dwm_core::mde::{DeformationProfile, DensityProfile, MdeConfig};
use dwm_core::verify::scaling_regression;
use dwm_core::C64;
use proptest::prelude::*;

fn profile() -> impl Strategy<Value = DeformationProfile> {
    prop_oneof![
        Just(DeformationProfile::Zero),
        (0.05f64..0.9).prop_map(|a| DeformationProfile::TwoPoint { a }),
        (0.05f64..1.2).prop_map(|a| DeformationProfile::Equispaced { a }),
    ]
}

fn pair(p: &DeformationProfile, n: usize, z: C64) -> SpectralPair {
    SpectralPair::new(Arc::new(p.build(n).unwrap()), z, &MdeConfig::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ward_identity_trace(p in profile(), e in -1.5f64..1.5, eta in 1e-3f64..2.0) {
        let nu = pair(&p, 12, C64::new(e, eta));
        let lhs = m2_det_trace(&nu, &nu.conj(), identity(12).as_ref()).unwrap();
        let rhs = nu.m().im / eta;
        prop_assert!((lhs - rhs).norm() <= 1e-9 * rhs.abs());
    }

    #[test]
    fn identity_chain_closed_form(p in profile(), q in profile(), e1 in -1.2f64..1.2, e2 in -1.2f64..1.2,
                                  h1 in 0.01f64..1.0, h2 in -1.0f64..1.0) {
        prop_assume!(h2.abs() > 0.01);
        let nu1 = pair(&p, 10, C64::new(e1, h1));
        let nu2 = pair(&q, 10, C64::new(e2, h2));
        let x = m1m2_trace(&nu1, &nu2);
        let direct = m2_det_trace(&nu1, &nu2, identity(10).as_ref()).unwrap();
        prop_assert!((direct - x / (1.0 - x)).norm() <= 1e-9 * (1.0 + direct.norm()));
    }

    #[test]
    fn control_parameter_ordering(p in profile(), q in profile(), e1 in -1.2f64..1.2, e2 in -1.2f64..1.2,
                                  h1 in 0.005f64..0.5, h2 in 0.005f64..0.5, flip in any::<bool>()) {
        let nu1 = pair(&p, 10, C64::new(e1, h1));
        let nu2 = pair(&q, 10, C64::new(e2, if flip { -h2 } else { h2 }));
        let cp = gamma_hat(&nu1, &nu2);
        prop_assert!(beta_star(&nu1, &nu2) <= beta(&nu1, &nu2) + 1e-15);
        prop_assert!(cp.gamma_hat + 1e-15 >= cp.delta2);
        prop_assert!((cp.delta2 - delta2(&nu1.d, &nu2.d)).abs() < 1e-15);
        prop_assert!(cp.ell <= 1.0 / std::f64::consts::PI + 1e-15);
    }

    #[test]
    fn regular_part_is_orthogonal_to_v(e in -0.8f64..0.8, de in -0.04f64..0.04, h in 1e-3f64..0.02,
                                      seed in 0u64..1000) {
        let n = 10;
        let p = DeformationProfile::TwoPoint { a: 0.4 };
        let nu1 = pair(&p, n, C64::new(e, h));
        let nu2 = pair(&p, n, C64::new(e + de, -h));
        // a Hermitian observable with entries from a tiny LCG, independent of the crate's RNG
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1); ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0 };
        let mut a = CMat::from_fn(n, n, |_, _| C64::new(0.0, 0.0));
        for i in 0..n {
            for j in i..n {
                let v = if i == j { C64::new(next(), 0.0) } else { C64::new(next(), next()) };
                a[(i, j)] = v;
                a[(j, i)] = v.conj();
            }
        }
        let r = regularize(a.as_ref(), &nu1, &nu2, 0.1).unwrap();
        let va = normalized_trace((&r.v * &r.a_ring).as_ref());
        prop_assert!((va - (1.0 - r.phi) * r.v_a).norm() < 1e-10 * (1.0 + r.v_a.norm()));
        prop_assert!((normalized_trace(r.v.as_ref()) - 1.0).norm() < 1e-10);
    }

    #[test]
    fn flow_scales_m_and_lowers_eta(p in profile(), e in -1.0f64..1.0, eta in 0.3f64..2.0, t in 0.0f64..0.9) {
        let nu = pair(&p, 8, C64::new(e, eta));
        let z = flow_closed_form(&nu, t);
        prop_assume!(z.im > 1e-3);
        prop_assert!(z.im <= eta + 1e-15);
        let nt = pair_at(&nu, t, &MdeConfig::default()).unwrap();
        prop_assert!(((0.5 * t).exp() * nu.m() - nt.m()).norm() < 1e-10);
    }

    #[test]
    fn regression_recovers_power_laws(c in 0.1f64..10.0, k in -1.0f64..1.0) {
        let recs: Vec<(usize, f64)> = [100usize, 300, 1000, 3000].iter().map(|&n| (n, c * (n as f64).powf(k))).collect();
        let r = scaling_regression(&recs).unwrap();
        prop_assert!((r.slope - k).abs() < 1e-10);
        prop_assert!(r.stderr < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn quantiles_are_ordered_and_consistent(p in profile()) {
        let d = p.build(200).unwrap();
        let prof = DensityProfile::new(&d).unwrap();
        let q = prof.quantiles(25).unwrap().gamma;
        prop_assert!(q.windows(2).all(|w| w[0] < w[1]));
        for (i, g) in q.iter().enumerate().take(24) {
            prop_assert!((prof.cdf(*g).unwrap() - (i + 1) as f64 / 25.0).abs() < 1e-8);
        }
    }
}
