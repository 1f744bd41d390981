//! Property tests for the expression language: canonical-form stability of
//! the printer/parser pair, simplification monotonicity, and the
//! finite-difference derivative oracle on random polynomials.

use proptest::prelude::*;

use leafsolve_core::expr::{parse_expr, ScalarExpr, UnaryFn};

fn arb_expr() -> impl Strategy<Value = ScalarExpr> {
    let leaf = prop_oneof![
        (-3.0..3.0f64).prop_map(ScalarExpr::constant),
        Just(ScalarExpr::variable("x1")),
        Just(ScalarExpr::variable("x2")),
    ];
    leaf.prop_recursive(4, 48, 3, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| ScalarExpr::add(&a, &b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| ScalarExpr::sub(&a, &b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| ScalarExpr::mul(&a, &b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| ScalarExpr::div(&a, &b)),
            (inner.clone(), 2..4i32).prop_map(|(a, n)| ScalarExpr::powi(&a, n)),
            inner
                .clone()
                .prop_map(|a| ScalarExpr::func(UnaryFn::Sin, &a)),
            inner
                .clone()
                .prop_map(|a| ScalarExpr::func(UnaryFn::Tanh, &a)),
            inner.prop_map(|a| ScalarExpr::func(UnaryFn::Exp, &a)),
        ]
    })
}

fn arb_poly() -> impl Strategy<Value = ScalarExpr> {
    let leaf = prop_oneof![
        (-2.0..2.0f64).prop_map(ScalarExpr::constant),
        Just(ScalarExpr::variable("x1")),
        Just(ScalarExpr::variable("x2")),
    ];
    leaf.prop_recursive(3, 32, 3, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| ScalarExpr::add(&a, &b)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| ScalarExpr::mul(&a, &b)),
            (inner, 2..4i32).prop_map(|(a, n)| ScalarExpr::powi(&a, n)),
        ]
    })
}

proptest! {
    /// parse(print(e)) rebuilds the identical hash-consed tree, so
    /// parse -> print -> parse is a fixed point.
    #[test]
    fn print_parse_round_trip(e in arb_expr()) {
        let printed = e.to_string();
        let reparsed = parse_expr(&printed, &["x1", "x2"]).unwrap();
        prop_assert_eq!(&e, &reparsed, "printed: {}", printed);
        prop_assert_eq!(printed, reparsed.to_string());
    }

    /// Simplification never grows the DAG.
    #[test]
    fn simplify_is_monotone(e in arb_expr()) {
        prop_assert!(e.simplify().node_count() <= e.node_count());
    }

    /// Symbolic derivatives of polynomials match central differences.
    #[test]
    fn derivative_matches_finite_difference(e in arb_poly(), a in -0.9..0.9f64, b in -0.9..0.9f64) {
        let d = e.differentiate("x1");
        let h = 1e-5;
        let fp = e.eval(&[("x1", a + h), ("x2", b)]).unwrap();
        let fm = e.eval(&[("x1", a - h), ("x2", b)]).unwrap();
        let fd = (fp - fm) / (2.0 * h);
        let sym = d.eval(&[("x1", a), ("x2", b)]).unwrap();
        // tolerance scales with the third-derivative magnitude probed by
        // the stencil values themselves
        let scale = fp.abs().max(fm.abs()).max(sym.abs()).max(1.0);
        prop_assert!((fd - sym).abs() <= 1e-6 * scale, "fd={fd} sym={sym}");
    }

    /// Evaluation is deterministic and pure.
    #[test]
    fn evaluation_is_deterministic(e in arb_expr(), a in -1.0..1.0f64, b in -1.0..1.0f64) {
        let env = [("x1", a), ("x2", b)];
        match (e.eval(&env), e.eval(&env)) {
            (Ok(v1), Ok(v2)) => prop_assert_eq!(v1.to_bits(), v2.to_bits()),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "non-deterministic outcome {:?}", other.0.is_ok()),
        }
    }
}
