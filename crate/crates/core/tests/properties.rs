use proptest::prelude::*;

use smw_core::exponent::{drainable_subsets, gamma_value, lyapunov_value};
use smw_core::generate::{self, RandomCrpParams};
use smw_core::lpcore::{solve_lp, LinearProgram, LpStatus};
use smw_core::netmodel::normalize;
use smw_core::policies::{smw_dispatch, smw_pickup_dispatch};
use smw_core::{AlphaVector, Matrix};

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gamma_is_concave_along_segments(seed in 0u64..500, a in simplex(4), b in simplex(4), t in 0.0f64..=1.0) {
        let net = generate::random_crp(&RandomCrpParams::default(), seed).unwrap();
        let stats = drainable_subsets(&net).unwrap();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let ga = gamma_value(&stats, &AlphaVector::normalized(&a).unwrap());
        let gb = gamma_value(&stats, &AlphaVector::normalized(&b).unwrap());
        let gm = gamma_value(&stats, &AlphaVector::normalized(&mix).unwrap());
        prop_assert!(gm >= t * ga + (1.0 - t) * gb - 1e-12);
    }

    #[test]
    fn lyapunov_vanishes_at_alpha_and_is_one_on_boundary(a in simplex(5), k in 0usize..5) {
        let alpha = AlphaVector::normalized(&a).unwrap();
        prop_assert!(lyapunov_value(&alpha, alpha.as_slice()).abs() < 1e-12);
        let mut e = vec![0.0; 5];
        e[k] = 1.0;
        prop_assert!((lyapunov_value(&alpha, &e) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_is_idempotent(rows in prop::collection::vec(prop::collection::vec(0.0f64..5.0, 3), 3)) {
        let m = Matrix::from_rows(rows).unwrap();
        prop_assume!(m.sum() > 0.0);
        let once = normalize(&m).unwrap();
        let twice = normalize(&once).unwrap();
        prop_assert!(once.max_abs_diff(&twice) < 1e-15);
        prop_assert!((once.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simplex_lp_is_feasible_at_optimum(
        c in prop::collection::vec(-2.0f64..2.0, 3),
        a in prop::collection::vec(prop::collection::vec(0.0f64..3.0, 3), 1..5),
        b in prop::collection::vec(0.5f64..4.0, 5),
    ) {
        // Nonnegative rows with positive right-hand sides: feasible at 0 and
        // bounded once every variable appears with positive weight.
        let mut lp = LinearProgram::new(3).maximize(c.clone());
        for (row, &rhs) in a.iter().zip(&b) {
            lp.le(row.clone(), rhs);
        }
        lp.le(vec![1.0, 1.0, 1.0], 10.0);
        let sol = solve_lp(&lp).unwrap();
        prop_assert_eq!(sol.status, LpStatus::Optimal);
        prop_assert!(lp.max_violation(&sol.x) < 1e-9);
        prop_assert!(sol.objective >= -1e-12);
    }

    #[test]
    fn smw_scale_invariance(state in prop::collection::vec(0u32..20, 2), a in simplex(2), c in 1e-3f64..1e3, origin in 0usize..2) {
        let net = generate::example1();
        let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
        let renorm = AlphaVector::normalized(&scaled).unwrap();
        prop_assert_eq!(
            smw_dispatch(&state, &a, origin, &net),
            smw_dispatch(&state, renorm.as_slice(), origin, &net)
        );
    }

    #[test]
    fn zero_beta_pickup_matches_smw(seed in 0u64..50, state in prop::collection::vec(0u32..10, 4), a in simplex(4), origin in 0usize..4) {
        let net = generate::random_crp(&RandomCrpParams::default(), seed).unwrap();
        let pickup = Matrix::from_rows(vec![vec![7.0; 4]; 4]).unwrap();
        prop_assert_eq!(
            smw_pickup_dispatch(&state, &a, 0.0, &pickup, origin, &net),
            smw_dispatch(&state, &a, origin, &net)
        );
    }
}
