use nalgebra::{DMatrix, DVector};
use pretest_core::coverage::term_j;
use pretest_core::kernel::b_norm;
use pretest_core::oracle::simulate_reduced;
use pretest_core::{
    coverage_probability, OuterRule, ParamPoint, QuadratureSpec, ReducedModel, RegressionDesign, Scenario,
};
use proptest::prelude::*;

fn fast_spec() -> QuadratureSpec {
    QuadratureSpec { rel_tol: 1e-4, abs_tol: 1e-6, simpson_panels: 16, ..QuadratureSpec::default() }
}

fn scenario() -> impl Strategy<Value = Scenario> {
    (2u32..=4, 2u32..=12, 0.5f64..12.0, prop_oneof![Just(0.05), Just(0.1)], 0.05f64..0.99)
        .prop_map(|(s, m, ell, alpha, b)| Scenario::new(m, s, ell, alpha, b).unwrap())
}

fn param_point() -> impl Strategy<Value = ParamPoint> {
    prop_oneof![
        Just(ParamPoint::null()),
        (0.01f64..6.0, -1.0f64..=1.0).prop_map(|(g, p)| ParamPoint::new(g, p).unwrap()),
        (0.01f64..6.0, prop_oneof![Just(-1.0), Just(1.0)]).prop_map(|(g, p)| ParamPoint::new(g, p).unwrap()),
    ]
}

/// 9 x 4 design: an identity block keeps `X` full rank.
fn design() -> impl Strategy<Value = RegressionDesign> {
    (
        prop::collection::vec(-2.0f64..2.0, 5 * 4),
        prop::collection::vec(-2.0f64..2.0, 4),
        prop::collection::vec(-2.0f64..2.0, 4 * 2),
    )
        .prop_filter_map("degenerate design", |(x, a, c)| {
            let mut full = DMatrix::<f64>::identity(9, 4);
            full.view_mut((4, 0), (5, 4)).copy_from(&DMatrix::from_vec(5, 4, x));
            let c = DMatrix::from_vec(4, 2, c);
            if (c.transpose() * &c).determinant().abs() < 1e-2 || a.iter().map(|v| v * v).sum::<f64>() < 1e-2 {
                return None;
            }
            RegressionDesign::new(full, DVector::from_vec(a), c, DVector::zeros(2)).ok()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coverage_terms_are_probabilities(sc in scenario(), p in param_point()) {
        let res = coverage_probability(&sc, &p, &fast_spec()).unwrap();
        prop_assert!((0.0..=1.0).contains(&res.total));
        prop_assert!(res.term_i >= -1e-9 && res.term_j >= -1e-9);
        prop_assert!(res.term_i + res.term_j <= 1.0 + 1e-6);
    }

    #[test]
    fn second_term_is_even_in_psi(sc in scenario(), g in 0.01f64..6.0, psi in 0.0f64..=1.0) {
        let spec = fast_spec();
        let plus = term_j(&sc, &ParamPoint::new(g, psi).unwrap(), &spec).unwrap().value;
        let minus = term_j(&sc, &ParamPoint::new(g, -psi).unwrap(), &spec).unwrap().value;
        prop_assert!((plus - minus).abs() < 1e-9, "{} vs {}", plus, minus);
    }

    #[test]
    fn vanishing_cutoff_is_nominal(sc in scenario(), p in param_point()) {
        let tiny = sc.with_ell(1e-12).unwrap();
        let res = coverage_probability(&tiny, &p, &fast_spec()).unwrap();
        prop_assert!((res.total - (1.0 - sc.alpha())).abs() < 1e-3);
    }

    #[test]
    fn rules_agree(sc in scenario(), g in 0.01f64..4.0, psi in -0.95f64..0.95) {
        let p = ParamPoint::new(g, psi).unwrap();
        let adaptive = coverage_probability(&sc, &p, &fast_spec()).unwrap().total;
        let fixed = QuadratureSpec { outer_rule: OuterRule::FixedTensor, ..fast_spec() };
        let tensor = coverage_probability(&sc, &p, &fixed).unwrap().total;
        prop_assert!((adaptive - tensor).abs() < 2e-3, "{} vs {}", adaptive, tensor);
    }

    #[test]
    fn b_norm_lies_in_unit_interval(d in design()) {
        let b = b_norm(&d).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn b_norm_invariances(d in design(), k in prop_oneof![-3.0f64..-0.2, 0.2f64..3.0], shift in 0usize..9) {
        let base = b_norm(&d).unwrap();
        let scaled = d.with_contrast(d.a() * k).unwrap();
        prop_assert!((b_norm(&scaled).unwrap() - base).abs() < 1e-9);

        let mixed = RegressionDesign::new(
            d.x().clone(),
            d.a().clone(),
            d.c() * DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 3.0]),
            d.t().clone(),
        )
        .unwrap();
        prop_assert!((b_norm(&mixed).unwrap() - base).abs() < 1e-9);

        let n = d.n();
        let rows: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let permuted = RegressionDesign::new(d.x().select_rows(&rows), d.a().clone(), d.c().clone(), d.t().clone()).unwrap();
        prop_assert!((b_norm(&permuted).unwrap() - base).abs() < 1e-9);

        // beta -> T beta' with a' = T^T a and C' = T^T C
        let t = DMatrix::from_row_slice(4, 4, &[1.0, 0.5, 0.0, 0.0, 0.0, 1.0, 0.0, 0.2, 0.0, 0.0, 2.0, 0.0, 0.3, 0.0, 0.0, 1.0]);
        let reparam = RegressionDesign::new(d.x() * &t, t.transpose() * d.a(), t.transpose() * d.c(), d.t().clone()).unwrap();
        prop_assert!((b_norm(&reparam).unwrap() - base).abs() < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn oracle_is_a_function_of_the_seed(sc in scenario(), p in param_point(), seed in any::<u64>()) {
        let model = ReducedModel::new(&sc, &p);
        let a = simulate_reduced(&model, &sc, 10_000, seed).unwrap();
        let b = simulate_reduced(&model, &sc, 10_000, seed).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(a.rejected + a.accepted, a.reps);
    }
}

#[test]
fn coverage_is_deterministic() {
    let sc = Scenario::new(4, 3, 6.5914, 0.05, 0.96869).unwrap();
    let p = ParamPoint::new(1.3, -0.4).unwrap();
    let a = coverage_probability(&sc, &p, &fast_spec()).unwrap();
    let b = coverage_probability(&sc, &p, &fast_spec()).unwrap();
    assert_eq!(a, b);
}
