mod common;

use geomlens::activations::Activation;
use geomlens::experiments::{LossKind, Problem};
use geomlens::geometry::{build_bundle, surrogate_objective, GeometryBundle};
use geomlens::lowrank::{alternate, solve_layer, truncated_svd};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn bundle(kind: LossKind, nx: usize, ny: usize, seed: u64) -> GeometryBundle {
    let problem = Problem::random(nx, ny, kind, 3, seed).unwrap();
    let j = problem.joint(0.1).unwrap();
    build_bundle(
        &j,
        &problem.model,
        problem.activation,
        &DMatrix::zeros(1, nx),
    )
    .unwrap()
}

#[test]
fn singular_values_match_jacobi_oracle() {
    for seed in 0..10 {
        let mut rng = geomlens::seeded_rng(seed);
        let m = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let svd = truncated_svd(&m, 4).unwrap();
        let oracle = common::jacobi_singular_values(&m);
        for (a, b) in svd.all_singular_values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((svd.u.transpose() * &svd.u - DMatrix::identity(4, 4)).amax() < 1e-10);
        assert!((svd.v.transpose() * &svd.v - DMatrix::identity(4, 4)).amax() < 1e-10);
        let trunc = truncated_svd(&m, 2).unwrap();
        let tail: f64 = oracle[2..].iter().map(|s| s * s).sum();
        assert!(((&m - trunc.reconstruct()).norm_squared() - tail).abs() < 1e-10);
    }
}

#[test]
fn eckart_young_ordering() {
    for i in 0..20u64 {
        let kind = if i % 2 == 0 {
            LossKind::Log
        } else {
            LossKind::Squared
        };
        let b = bundle(kind, 5, 4, 40 + i);
        let k = 1 + (i as usize % 2);
        if k > b.whitened_dim() {
            continue;
        }
        let direct = solve_layer(&b, k).unwrap();
        let mut rng = geomlens::seeded_rng(i);
        let init = DMatrix::from_fn(k, 5, |_, _| rng.random_range(-1.0..1.0));
        let alt = match alternate(&b, k, &init, 2000, 1e-13) {
            Ok(a) => Some(a),
            Err(geomlens::GeomError::NoGap { .. }) => None,
            Err(e) => panic!("{e}"),
        };
        if let Some(alt) = &alt {
            assert!(direct.achieved_frobenius <= alt.achieved_frobenius + 1e-12);
        }
        let floor = alt.map_or(direct.achieved_frobenius, |a| a.achieved_frobenius);
        for _ in 0..100 {
            let w = DMatrix::from_fn(b.whitened_dim(), k, |_, _| rng.random_range(-1.0..1.0));
            let f = DMatrix::from_fn(k, 5, |_, _| rng.random_range(-1.0..1.0));
            assert!(floor <= 2.0 * common::half_frobenius(&b.b_tilde_mat, &w, &f) + 1e-12);
        }
    }
}

#[test]
fn dropping_only_the_null_direction_is_exact() {
    // |X| ≤ r so K = |X| and σ_K = 0
    let b = bundle(LossKind::Squared, 3, 4, 5);
    let kmax = b.action_dim().min(b.nx());
    assert_eq!(kmax, 3);
    let a = solve_layer(&b, kmax - 1).unwrap();
    assert!(a.achieved_frobenius < 1e-20);
    assert!(a.singular_values[kmax - 1] < 1e-8);
}

#[test]
fn surrogate_at_the_optimum_is_half_the_bound() {
    for seed in 0..10u64 {
        let kind = if seed % 2 == 0 {
            LossKind::Log
        } else {
            LossKind::Squared
        };
        let b = bundle(kind, 5, 4, 70 + seed);
        let a = solve_layer(&b, 1).unwrap();
        let f = a.feature_table(&b.p_x);
        let bias = &b.b_tilde_vec + &a.d_star;
        let terms = surrogate_objective(&b, &a.w_star, &bias, &f);
        assert!((terms.total - 0.5 * a.ey_bound).abs() < 1e-12);
        assert!(terms.eta_term.abs() < 1e-12);
    }
}

#[test]
fn rank_above_the_precondition_is_rejected() {
    let b = bundle(LossKind::Log, 3, 4, 1);
    assert!(matches!(
        solve_layer(&b, 4),
        Err(geomlens::GeomError::RankTooLarge { .. })
    ));
    let _ = Activation::Identity;
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn optimum_is_stationary_and_gauge_free(seed in 0u64..10_000, k in 1usize..=2) {
        let b = bundle(LossKind::Squared, 5, 4, seed);
        let a = solve_layer(&b, k).unwrap();
        let gw = common::numeric_matrix_gradient(&a.xi_w_star, |w| common::half_frobenius(&b.b_tilde_mat, w, &a.xi_f_star));
        let gf = common::numeric_matrix_gradient(&a.xi_f_star, |f| common::half_frobenius(&b.b_tilde_mat, &a.xi_w_star, f));
        prop_assert!(gw.amax() <= 1e-7 && gf.amax() <= 1e-7);
        prop_assert!((a.achieved_frobenius - a.ey_bound).abs() <= 1e-10);
        let mut rng = geomlens::seeded_rng(seed + 1);
        for _ in 0..5 {
            let t = DMatrix::from_fn(k, k, |i, j| rng.random_range(-1.0..1.0) + if i == j { 2.0 } else { 0.0 });
            let t_inv = t.clone().try_inverse().unwrap();
            let product = (&a.xi_w_star * &t) * (t_inv * &a.xi_f_star);
            prop_assert!((product - a.product()).amax() <= 1e-9);
        }
    }

    #[test]
    fn alternating_trace_is_monotone(seed in 0u64..10_000) {
        let b = bundle(LossKind::Squared, 5, 4, seed);
        let mut rng = geomlens::seeded_rng(seed + 2);
        let init = DMatrix::from_fn(1, 5, |_, _| rng.random_range(-1.0..1.0));
        if let Ok(a) = alternate(&b, 1, &init, 2000, 1e-13) {
            prop_assert!(a.frobenius_trace.windows(2).all(|w| w[1] <= w[0] + 1e-14));
            let svd = truncated_svd(&b.b_tilde_mat, 1).unwrap();
            prop_assert!((a.product() - svd.reconstruct()).amax() <= 1e-6);
        }
    }
}
