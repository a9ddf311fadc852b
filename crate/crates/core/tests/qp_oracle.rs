mod common;

use cars_core::qp::{solve_qp, FeasibleSet, LinearConstraint, QpProblem, QpStatus, Quadratic};
use common::{box_rows, brute_force_qp, Row};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
    (2usize..=5).prop_flat_map(|n| {
        (
            Just(n),
            proptest::collection::vec(-1.0f64..1.0, n * n),
            proptest::collection::vec(-2.0f64..2.0, n),
            proptest::collection::vec(0.3f64..1.5, n),
            proptest::collection::vec(-1.0f64..1.0, n),
            -0.5f64..0.5,
        )
    })
}

fn check(q: DMatrix<f64>, c: Vec<f64>, upper: Vec<f64>, g: Vec<f64>, h: f64) -> Result<(), TestCaseError> {
    let n = c.len();
    let total = 0.5 * upper.iter().sum::<f64>();
    let mut ineq = box_rows(&vec![0.0; n], &upper);
    ineq.push(Row { a: g.clone(), b: h });
    let eq = vec![Row { a: vec![1.0; n], b: total }];
    let oracle = brute_force_qp(&q, &c, &eq, &ineq);
    let p = QpProblem::new(
        if q.iter().all(|v| *v == 0.0) { Quadratic::Zero } else { Quadratic::Dense(q.clone()) },
        c.clone(),
        FeasibleSet::Box { lower: vec![0.0; n], upper: upper.clone() },
    )
    .with_equality(LinearConstraint::dense(&vec![1.0; n], total))
    .with_inequality(LinearConstraint::dense(&g, h));
    let tol = 1e-7;
    let sol = solve_qp(&p, tol, 200_000).unwrap();
    match oracle {
        None => prop_assert_eq!(sol.status, QpStatus::Infeasible),
        Some((_, opt)) => {
            prop_assert_eq!(sol.status, QpStatus::Optimal, "{:?}", sol);
            prop_assert!(sol.primal_residual <= tol);
            let slack = tol * (1.0 + opt.abs());
            prop_assert!(sol.objective >= opt - slack, "obj {} < opt {}", sol.objective, opt);
            prop_assert!(sol.objective <= opt + slack, "obj {} > opt {}", sol.objective, opt);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_qps_match_active_set_enumeration((n, m, c, upper, g, h) in instance()) {
        let m = DMatrix::from_row_slice(n, n, &m);
        let q = m.transpose() * &m;
        check(q, c, upper, g, h)?;
    }

    #[test]
    fn random_lps_match_vertex_enumeration((n, _m, c, upper, g, h) in instance()) {
        check(DMatrix::zeros(n, n), c, upper, g, h)?;
    }
}

#[test]
fn box_sum_projection_matches_enumeration() {
    let w = [0.9, 0.2, -0.1];
    let q = DMatrix::identity(3, 3) * 2.0;
    let c: Vec<f64> = w.iter().map(|x| -2.0 * x).collect();
    let ineq = box_rows(&[0.0; 3], &[0.5; 3]);
    let eq = vec![Row { a: vec![1.0; 3], b: 1.0 }];
    let (oracle, _) = brute_force_qp(&q, &c, &eq, &ineq).unwrap();
    for (a, b) in oracle.iter().zip([0.5, 0.4, 0.1]) {
        assert!((a - b).abs() < 1e-12);
    }
}
