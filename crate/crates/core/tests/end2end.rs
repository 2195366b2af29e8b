use rand::Rng;

use projectnet::end2end::{
    decide, evaluate_forecaster, train_forecaster, train_two_stage, Architecture, DecisionMode, DecisionRule,
    EndToEndConfig, Forecaster, OutputLayer, Samples, TwoStage,
};
use projectnet::linalg::{self, Matrix};
use projectnet::metatrain::{Optimizer, TrainSchedule};
use projectnet::oracles;
use projectnet::problems::{build_problem, ObjectiveSpec, Problem, ProblemKind, Sense};
use projectnet::projection::ConvexSet;
use projectnet::psdmap::UpdateRuleModel;
use projectnet::random;
use projectnet::solver::SolveConfig;

fn featureless(d: usize) -> Forecaster {
    Forecaster::new(Architecture::Affine, OutputLayer::Identity, 0, d, 0).unwrap()
}

fn schedule(epochs: usize, lr: f64) -> TrainSchedule {
    TrainSchedule {
        epochs,
        batch_size: 64,
        learning_rate: lr,
        optimizer: Optimizer::adam(),
        patience: 0,
        ..TrainSchedule::default()
    }
}

fn polished(solver: SolveConfig) -> SolveConfig {
    SolveConfig { polish: true, ..solver }
}

#[test]
fn constant_demand_is_learned_exactly() {
    let p = build_problem(&ProblemKind::LiftedNewsvendor {
        h: vec![1.0, 0.5],
        b: vec![2.0, 4.0],
        capacity: None,
    })
    .unwrap();
    let demand = vec![vec![3.0, 1.5]; 32];
    let xs = vec![Vec::new(); 32];
    let data = Samples::new(&xs, &demand).unwrap();
    let zero = UpdateRuleModel::zero(p.dim(), 2);
    let cfg = EndToEndConfig {
        schedule: schedule(200, 0.05),
        solver: SolveConfig::default().with_iterations(20),
        chunk: 8,
    };
    let out = train_forecaster(&p, &zero, &featureless(2), data, data, &cfg).unwrap();
    assert_eq!(out.history.oracle_calls(), 0);
    assert!(out.history.selected().train_loss <= out.history.initial().train_loss);
    let mode = DecisionMode::Approximate {
        model: &zero,
        solver: polished(cfg.solver),
    };
    let cost = evaluate_forecaster(&out.forecaster, &p, data, &mode).unwrap();
    assert!(cost < 0.02, "decision cost {cost}");
}

#[test]
fn point_forecast_matches_saa_cost() {
    let (h, b) = (1.0, 2.0);
    let p = build_problem(&ProblemKind::LiftedNewsvendor {
        h: vec![h],
        b: vec![b],
        capacity: None,
    })
    .unwrap();
    let mut r = random::rng(9);
    let demands: Vec<Vec<f64>> = (0..80).map(|_| vec![r.gen_range(0.0..10.0)]).collect();
    let xs = vec![Vec::new(); demands.len()];
    let data = Samples::new(&xs, &demands).unwrap();
    let zero = UpdateRuleModel::zero(p.dim(), 1);
    let cfg = EndToEndConfig {
        schedule: schedule(200, 0.1),
        solver: SolveConfig::default().with_iterations(20),
        chunk: 8,
    };
    let out = train_forecaster(&p, &zero, &featureless(1), data, data, &cfg).unwrap();
    let w = decide(
        &out.forecaster,
        &p,
        &[],
        &DecisionMode::Approximate {
            model: &zero,
            solver: polished(cfg.solver),
        },
    )
    .unwrap();
    let cost = |order: f64| {
        demands
            .iter()
            .map(|d| h * (order - d[0]).max(0.0) + b * (d[0] - order).max(0.0))
            .sum::<f64>()
            / demands.len() as f64
    };
    let saa = oracles::newsvendor_saa(&demands, None, &[h], &[b]).unwrap();
    let gap = (cost(w[0]) - saa.objective) / saa.objective;
    assert!(gap <= 0.02, "learned {} vs SAA {}: gap {gap}", w[0], saa.w[0]);
}

#[test]
fn lower_forecast_error_can_give_a_worse_decision() {
    let p = Problem::new(
        "two-item-lp",
        2,
        2,
        vec![ConvexSet::Simplex { total: 1.0 }],
        ObjectiveSpec::Linear,
        Sense::Min,
    )
    .unwrap();
    let truth = [1.0, 1.2];
    let close = [1.3, 1.2];
    let far = [0.5, 1.9];
    let mse = |f: &[f64]| f.iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    assert!(mse(&close) < mse(&far));
    let cost = |f: &[f64]| {
        let w = oracles::optimum(&p, f).unwrap().w;
        linalg::dot(&truth, &w)
    };
    assert!((cost(&far) - 1.0).abs() < 1e-6);
    assert!((cost(&close) - 1.2).abs() < 1e-6);
}

#[test]
fn vertex_inducing_forecast_yields_that_vertex() {
    let p = build_problem(&ProblemKind::ToySimplex).unwrap();
    let mut f = featureless(3);
    f.params = vec![2.0, -1.0, 0.5];
    let w = decide(&f, &p, &[], &DecisionMode::Exact).unwrap();
    assert!(linalg::max_abs_diff(&w, &[0.0, 1.0, 0.0]) < 1e-6, "{w:?}");
}

fn cross_fulfill(first_cost: f64, c: Matrix) -> TwoStage {
    let n = c.rows;
    let second = build_problem(&ProblemKind::CrossFulfillSecondStage {
        c,
        h: vec![0.5; n],
        b: vec![4.0; n],
    })
    .unwrap();
    let first = Problem::new("orders", n, n, vec![ConvexSet::Nonneg], ObjectiveSpec::Linear, Sense::Min).unwrap();
    let m = UpdateRuleModel::zero(second.dim(), second.u_dim());
    TwoStage::new(first, vec![first_cost; n], second, m).unwrap()
}

fn transport(n: usize) -> Matrix {
    let mut c = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                c.set(i, j, 0.5 + 0.25 * ((i + j) % 3) as f64);
            }
        }
    }
    c
}

#[test]
fn ordering_the_demand_costs_nothing_without_order_costs() {
    let stage = cross_fulfill(0.0, transport(3));
    let mut r = random::rng(3);
    for _ in 0..10 {
        let d: Vec<f64> = (0..3).map(|_| r.gen_range(0.0..5.0)).collect();
        let z = stage.exact_cost(&d, &d).unwrap();
        assert!(z.abs() < 1e-9, "Z(d, d) = {z}");
    }
}

#[test]
fn zero_demand_drives_allocation_to_zero() {
    let stage = cross_fulfill(1.0, transport(3));
    let mut r = random::rng(5);
    let xs: Vec<Vec<f64>> = (0..40).map(|_| random::normals(&mut r, 2, 1.0)).collect();
    let ds = vec![vec![0.0; 3]; 40];
    let data = Samples::new(&xs, &ds).unwrap();
    let mut net = Forecaster::new(Architecture::Affine, OutputLayer::Identity, 2, 3, 1).unwrap();
    let n = net.params.len();
    net.params[n - 3..].copy_from_slice(&[1.0, 2.0, 1.5]);
    let rule0 = DecisionRule::new(net, 10).unwrap();
    let cfg = EndToEndConfig {
        schedule: schedule(150, 0.05),
        solver: SolveConfig::default().with_iterations(10),
        chunk: 8,
    };
    let before = rule0.decide(&stage.first, &xs[0]).unwrap();
    let out = train_two_stage(&stage, &rule0, data, data, &cfg).unwrap();
    let after: f64 = xs
        .iter()
        .map(|x| out.rule.decide(&stage.first, x).unwrap().iter().sum::<f64>())
        .fold(0.0, f64::max);
    assert!(before.iter().sum::<f64>() > 1.0);
    assert!(after < 0.05, "largest total allocation {after}");
}

#[test]
fn approximate_recourse_is_close_to_exact() {
    let stage = cross_fulfill(1.0, transport(3));
    let solver = SolveConfig::default().with_iterations(100);
    let mut r = random::rng(11);
    let w = [2.0, 3.0, 1.0];
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let d: Vec<f64> = (0..3).map(|_| r.gen_range(0.0..5.0)).collect();
        let exact = stage.exact_cost(&w, &d).unwrap();
        let approx = stage.approximate_cost(&w, &d, &solver).unwrap();
        worst = worst.max((approx - exact).abs() / exact.abs().max(1e-9));
    }
    assert!(worst <= 0.05, "largest relative gap {worst}");
}

#[test]
fn exact_and_approximate_decisions_agree_after_long_solves() {
    let p = build_problem(&ProblemKind::ToySimplex).unwrap();
    let mut f = featureless(3);
    f.params = vec![0.3, 1.0, 0.8];
    let zero = UpdateRuleModel::zero(3, 3);
    let exact = decide(&f, &p, &[], &DecisionMode::Exact).unwrap();
    let approx = decide(
        &f,
        &p,
        &[],
        &DecisionMode::Approximate {
            model: &zero,
            solver: polished(SolveConfig::default().with_iterations(200)),
        },
    )
    .unwrap();
    let truth = [0.3, 1.0, 0.8];
    assert!((linalg::dot(&truth, &exact) - linalg::dot(&truth, &approx)).abs() < 1e-3);
}
