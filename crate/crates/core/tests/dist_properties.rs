use geomlens::dist::{chi2_mutual_information, perturb, random_direction, random_marginal};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbation_keeps_marginals_and_dials_chi2(
        nx in 2usize..=6,
        ny in 2usize..=6,
        seed in 0u64..10_000,
        frac in 0.0f64..0.95,
    ) {
        let p_x = random_marginal(nx, seed);
        let p_y = random_marginal(ny, seed + 1);
        let dir = random_direction(&p_x, &p_y, seed + 2).unwrap();
        let eps = frac * dir.eps_limit().min(0.5);
        let j = perturb(&p_x, &p_y, &dir, eps).unwrap();
        prop_assert!((j.p_x() - &p_x).amax() <= 1e-14);
        prop_assert!((j.p_y() - &p_y).amax() <= 1e-14);
        prop_assert!(j.p_xy().min() > 0.0);
        prop_assert!((chi2_mutual_information(&j) - eps * eps).abs() <= 1e-12);
    }

    #[test]
    fn conditional_spread_is_bounded_by_chi2(
        nx in 2usize..=6,
        ny in 2usize..=6,
        seed in 0u64..10_000,
        frac in 0.0f64..0.95,
    ) {
        let p_x = random_marginal(nx, seed);
        let p_y = random_marginal(ny, seed + 1);
        let dir = random_direction(&p_x, &p_y, seed + 2).unwrap();
        let eps = frac * dir.eps_limit().min(0.5);
        let j = perturb(&p_x, &p_y, &dir, eps).unwrap();
        let bound = chi2_mutual_information(&j) * p_y.max() / p_x.min();
        for x in 0..nx {
            let spread = (j.conditional(x) - &p_y).norm_squared();
            prop_assert!(spread <= bound * (1.0 + 1e-12) + 1e-18);
        }
    }
}

#[test]
fn same_seed_same_direction() {
    let p_x = random_marginal(4, 9);
    let p_y = random_marginal(3, 10);
    let a = random_direction(&p_x, &p_y, 11).unwrap();
    let b = random_direction(&p_x, &p_y, 11).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, random_direction(&p_x, &p_y, 12).unwrap());
}
