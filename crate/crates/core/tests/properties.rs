use proptest::prelude::*;

use projectnet::end2end::{Architecture, Forecaster, OutputLayer};
use projectnet::linalg::{self, Matrix};
use projectnet::oracles;
use projectnet::problems::{build_problem, relative_regret, Problem, ProblemKind};
use projectnet::projection::{project_box, project_simplex, ConvexSet, ProjectionPlan};
use projectnet::psdmap::{spectrum_bounds_check, Construction, ModelInit, ModelMode, UpdateRuleModel};
use projectnet::solver::{pgd_solve, SolveConfig};

fn vec_in(lo: f64, hi: f64, n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simplex_projection_is_feasible_and_idempotent(w in vec_in(-5.0, 5.0, 5), total in 0.1f64..4.0) {
        let p = project_simplex(total, &w);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - total).abs() < 1e-9);
        prop_assert!(linalg::max_abs_diff(&project_simplex(total, &p), &p) < 1e-12);
    }

    #[test]
    fn box_projection_is_nonexpansive(a in vec_in(-4.0, 4.0, 4), b in vec_in(-4.0, 4.0, 4)) {
        let (lo, hi) = (vec![-1.0; 4], vec![1.0; 4]);
        let pa = project_box(&lo, &hi, &a).unwrap();
        let pb = project_box(&lo, &hi, &b).unwrap();
        prop_assert!(linalg::dist(&pa, &pb) <= linalg::dist(&a, &b) + 1e-12);
        prop_assert!(pa.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn dykstra_fixes_feasible_points(x in vec_in(0.0, 1.0, 3), k in 1usize..20) {
        let plan = ProjectionPlan::new(3, vec![
            ConvexSet::Halfspace { a: vec![1.0, 1.0, 1.0], b: 3.0 },
            ConvexSet::Nonneg,
            ConvexSet::Box { lo: vec![0.0; 3], hi: vec![1.0; 3] },
        ]).unwrap();
        prop_assert!(linalg::max_abs_diff(&plan.project(&x, k).unwrap(), &x) < 1e-12);
    }

    #[test]
    fn dykstra_converges_to_the_projection(w in vec_in(-3.0, 3.0, 3)) {
        let plan = ProjectionPlan::new(3, vec![
            ConvexSet::Halfspace { a: vec![1.0, 2.0, -1.0], b: 1.0 },
            ConvexSet::Halfspace { a: vec![-1.0, 1.0, 1.0], b: 0.5 },
            ConvexSet::Nonneg,
        ]).unwrap();
        let exact = plan.project_converged(&w, None, 1e-14, 100_000).unwrap();
        prop_assert!(linalg::dist(&plan.project(&w, 2000).unwrap(), &exact) <= 1e-9);
    }

    #[test]
    fn spectrum_stays_in_bounds(seed in 0u64..1000, u in vec_in(-10.0, 10.0, 2), lo in 0.05f64..2.0, width in 0.0f64..30.0) {
        let init = ModelInit { lambda_min: lo, lambda_max: lo + width, ..ModelInit::default() };
        let m = UpdateRuleModel::new(ModelMode::Mlp { hidden: 3 }, Construction::Symmetric, 3, 2, init, seed).unwrap();
        let (a, b) = spectrum_bounds_check(&m, &[u]).unwrap();
        prop_assert!(a >= lo - 1e-9 && b <= lo + width + 1e-9);
    }

    #[test]
    fn saa_order_beats_any_other_order(d in prop::collection::vec(0.0f64..10.0, 1..30), other in 0.0f64..10.0) {
        let demands: Vec<Vec<f64>> = d.iter().map(|&x| vec![x]).collect();
        let saa = oracles::newsvendor_saa(&demands, None, &[1.0], &[2.0]).unwrap();
        let cost = |w: f64| d.iter().map(|&x| (w - x).max(0.0) + 2.0 * (x - w).max(0.0)).sum::<f64>() / d.len() as f64;
        prop_assert!(cost(saa.w[0]) <= cost(other) + 1e-9);
        prop_assert!((cost(saa.w[0]) - saa.objective).abs() < 1e-9);
    }

    #[test]
    fn exact_matching_has_no_regret_against_pgd(u in vec_in(0.0, 1.0, 9)) {
        let p = build_problem(&ProblemKind::Matching { n: 3 }).unwrap();
        let star = oracles::optimum(&p, &u).unwrap().w;
        let pgd = pgd_solve(&p, &u, &SolveConfig { polish: true, ..SolveConfig::default() }).unwrap().w;
        prop_assert!(relative_regret(&p, &u, &pgd, &star).value >= -1e-6);
    }

    #[test]
    fn softmax_forecasts_are_distributions(x in vec_in(-3.0, 3.0, 4), seed in 0u64..100) {
        let f = Forecaster::new(Architecture::TwoLayer { width: 5, residual: true }, OutputLayer::Softmax, 4, 6, seed).unwrap();
        let y = f.forward(&x).unwrap();
        prop_assert!(y.iter().all(|&v| v >= 0.0));
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn problems_round_trip_through_json(n in 1usize..5, cap in prop::option::of(0.5f64..5.0)) {
        for kind in [
            ProblemKind::Matching { n },
            ProblemKind::CapacitatedNewsvendor { h: vec![1.0; n], b: vec![2.0; n], capacity: cap },
        ] {
            let p = build_problem(&kind).unwrap();
            let back: Problem = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
            prop_assert_eq!(back.dim(), p.dim());
            prop_assert_eq!(back.sets(), p.sets());
            let k: ProblemKind = serde_json::from_str(&serde_json::to_string(&kind).unwrap()).unwrap();
            prop_assert_eq!(k, kind);
        }
    }

    #[test]
    fn matrix_transpose_matvec_is_adjoint(a in vec_in(-2.0, 2.0, 6), x in vec_in(-2.0, 2.0, 3), y in vec_in(-2.0, 2.0, 2)) {
        let m = Matrix::from_vec(2, 3, a).unwrap();
        prop_assert!((linalg::dot(&m.matvec(&x), &y) - linalg::dot(&x, &m.matvec_t(&y))).abs() < 1e-12);
    }
}
