//! Learning the update-rule model by descending the cost of the unrolled
//! solver, plus the training driver shared with [`crate::end2end`].

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::oracles::{self, oracle_calls};
use crate::problems::{relative_regret, Problem};
use crate::psdmap::{ModelMode, UpdateRuleModel};
use crate::random;
use crate::solver::{projectnet_solve, unroll, SolveConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Plain,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Momentum { beta: 0.9 }
    }
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Epoch and step settings for any gradient-trained parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Rescales each batch gradient to at most this norm.
    pub clip: Option<f64>,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.01,
            optimizer: Optimizer::default(),
            clip: None,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        match self.optimizer {
            Optimizer::Momentum { beta } if !(0.0..1.0).contains(&beta) => {
                return Err(Error::InvalidParameter(format!("momentum must be in [0, 1), got {beta}")));
            }
            Optimizer::Adam { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                return Err(Error::InvalidParameter("Adam needs β₁, β₂ in [0, 1) and ε > 0".into()));
            }
            _ => {}
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::InvalidParameter("gradient clip must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub learning_rate: f64,
    /// Exact-oracle invocations made while computing gradients.
    pub oracle_calls: u64,
    pub wall_time: f64,
}

/// Per-epoch losses; epoch 0 is the initial parameter vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub selected_epoch: usize,
}

impl LossHistory {
    pub fn initial(&self) -> &EpochRecord {
        &self.records[0]
    }

    pub fn selected(&self) -> &EpochRecord {
        &self.records[self.selected_epoch]
    }

    pub fn oracle_calls(&self) -> u64 {
        self.records.iter().map(|r| r.oracle_calls).sum()
    }

    /// CSV with columns `epoch,train_loss,val_loss,wall_time`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(out);
        wr.write_record(["epoch", "train_loss", "val_loss", "wall_time"])?;
        for r in &self.records {
            wr.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.map_or_else(String::new, |v| v.to_string()),
                r.wall_time.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Sum of per-sample losses, their gradient and the oracle calls made.
pub(crate) struct BatchGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub oracle_calls: u64,
}

pub(crate) struct FitOutcome {
    pub params: Vec<f64>,
    pub history: LossHistory,
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// Mini-batch descent over `train` with selection on `val`.
///
/// The returned parameters are those of the epoch with the lowest
/// validation loss among epochs whose training loss does not exceed the
/// initial one (lowest training loss when `val` is empty). A non-finite
/// loss or gradient restarts the epoch once at half the learning rate.
pub(crate) fn fit<G, E>(init: Vec<f64>, train: &[usize], val: &[usize], sched: &TrainSchedule, grad: G, eval: E) -> Result<FitOutcome>
where
    G: Fn(&[f64], &[usize]) -> Result<BatchGrad>,
    E: Fn(&[f64], &[usize]) -> Result<f64>,
{
    sched.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidParameter("training needs at least one sample".into()));
    }
    let evaluate = |params: &[f64]| -> Result<(f64, Option<f64>)> {
        let t = eval(params, train)?;
        let v = if val.is_empty() { None } else { Some(eval(params, val)?) };
        Ok((t, v))
    };
    let (t0, v0) = evaluate(&init)?;
    if !t0.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            reason: "initial loss is not finite".into(),
        });
    }
    let mut records = vec![EpochRecord {
        epoch: 0,
        train_loss: t0,
        val_loss: v0,
        learning_rate: sched.learning_rate,
        oracle_calls: 0,
        wall_time: 0.0,
    }];
    let mut params = init.clone();
    let mut best = (init, 0usize);
    let score = |r: &EpochRecord| r.val_loss.unwrap_or(r.train_loss);
    let mut lr = sched.learning_rate;
    let mut halved = false;
    let mut velocity = vec![0.0; params.len()];
    let mut second = vec![0.0; params.len()];
    let mut steps = 0i32;
    let mut since_best = 0;
    let mut order = train.to_vec();
    for epoch in 1..=sched.epochs {
        let start = Instant::now();
        let mut rng = random::substream(sched.seed, 1000 + epoch as u64);
        order.shuffle(&mut rng);
        let snapshot = (params.clone(), velocity.clone(), second.clone(), steps);
        let mut calls = 0;
        let attempt = |params: &mut Vec<f64>, (velocity, second, steps): (&mut Vec<f64>, &mut Vec<f64>, &mut i32), lr: f64, calls: &mut u64| -> Result<()> {
            for batch in order.chunks(sched.batch_size) {
                let bg = grad(params, batch)?;
                *calls += bg.oracle_calls;
                if !bg.loss.is_finite() || bg.grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::non_finite("batch loss or gradient"));
                }
                let scale = 1.0 / batch.len() as f64;
                let mut g: Vec<f64> = bg.grad.iter().map(|x| x * scale).collect();
                if let Some(c) = sched.clip {
                    let n = crate::linalg::norm(&g);
                    if n > c {
                        g.iter_mut().for_each(|x| *x *= c / n);
                    }
                }
                match sched.optimizer {
                    Optimizer::Plain => {
                        for (p, gi) in params.iter_mut().zip(&g) {
                            *p -= lr * gi;
                        }
                    }
                    Optimizer::Momentum { beta } => {
                        for ((p, v), gi) in params.iter_mut().zip(velocity.iter_mut()).zip(&g) {
                            *v = beta * *v + gi;
                            *p -= lr * *v;
                        }
                    }
                    Optimizer::Adam { beta1, beta2, eps } => {
                        *steps += 1;
                        let c1 = 1.0 - beta1.powi(*steps);
                        let c2 = 1.0 - beta2.powi(*steps);
                        for (((p, m), s), gi) in params.iter_mut().zip(velocity.iter_mut()).zip(second.iter_mut()).zip(&g) {
                            *m = beta1 * *m + (1.0 - beta1) * gi;
                            *s = beta2 * *s + (1.0 - beta2) * gi * gi;
                            *p -= lr * (*m / c1) / ((*s / c2).sqrt() + eps);
                        }
                    }
                }
            }
            Ok(())
        };
        let mut outcome = attempt(&mut params, (&mut velocity, &mut second, &mut steps), lr, &mut calls).and_then(|_| evaluate(&params));
        if matches!(&outcome, Err(e) if is_divergence(e)) || matches!(&outcome, Ok((t, _)) if !t.is_finite()) {
            if halved {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("non-finite loss after halving the learning rate to {lr}"),
                });
            }
            halved = true;
            lr *= 0.5;
            (params, velocity, second, steps) = snapshot;
            outcome = attempt(&mut params, (&mut velocity, &mut second, &mut steps), lr, &mut calls).and_then(|_| evaluate(&params));
            match &outcome {
                Err(e) if is_divergence(e) => {
                    return Err(Error::Diverged {
                        epoch,
                        reason: format!("{e} after halving the learning rate to {lr}"),
                    })
                }
                Ok((t, _)) if !t.is_finite() => {
                    return Err(Error::Diverged {
                        epoch,
                        reason: format!("non-finite loss after halving the learning rate to {lr}"),
                    })
                }
                _ => {}
            }
        }
        let (t, v) = outcome?;
        let rec = EpochRecord {
            epoch,
            train_loss: t,
            val_loss: v,
            learning_rate: lr,
            oracle_calls: calls,
            wall_time: start.elapsed().as_secs_f64(),
        };
        let eligible = t <= t0;
        if eligible && score(&rec) < score(&records[best.1]) {
            best = (params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        records.push(rec);
        if sched.patience > 0 && since_best >= sched.patience {
            break;
        }
    }
    Ok(FitOutcome {
        params: best.0,
        history: LossHistory {
            records,
            selected_epoch: best.1,
        },
    })
}

/// Source of extra training uncertainty samples drawn each epoch.
pub trait SampleSource: Sync {
    fn samples(&self, epoch: usize, rng: &mut random::Rng) -> Vec<Vec<f64>>;
}

/// `count` vectors with i.i.d. `U[lo, hi]` entries per draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformSource {
    pub count: usize,
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
}

impl SampleSource for UniformSource {
    fn samples(&self, _epoch: usize, rng: &mut random::Rng) -> Vec<Vec<f64>> {
        (0..self.count)
            .map(|_| (0..self.dim).map(|_| rng.gen_range(self.lo..=self.hi)).collect())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTrainConfig {
    pub schedule: TrainSchedule,
    pub solver: SolveConfig,
    /// Fraction of samples held out for model selection.
    pub validation: f64,
    /// Samples per tape; batches are split into chunks of this size and
    /// solved in parallel.
    pub chunk: usize,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            schedule: TrainSchedule::default(),
            solver: SolveConfig::default(),
            validation: 0.1,
            chunk: 8,
        }
    }
}

/// Trained model and its loss history.
#[derive(Clone, Debug)]
pub struct MetaTrainOutcome {
    pub model: UpdateRuleModel,
    pub history: LossHistory,
}

/// Sum over `us` of the cost of the unrolled solve and its gradient in the
/// model parameters `params`.
pub fn meta_loss_grad(p: &Problem, model: &UpdateRuleModel, params: &[f64], us: &[&[f64]], cfg: &SolveConfig) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let pv = tape.param(params.to_vec());
    let att = model.attach(&mut tape, pv)?;
    let mut total = None;
    for u in us {
        let uv = tape.constant(u.to_vec());
        let w = unroll(&mut tape, p, &att, uv, cfg)?;
        let c = p.cost_tape(&mut tape, uv, w);
        total = Some(match total {
            None => c,
            Some(t) => tape.add(t, c),
        });
    }
    let Some(total) = total else {
        return Ok((0.0, vec![0.0; params.len()]));
    };
    let loss = tape.scalar_value(total);
    let grad = tape.backward(total).wrt(pv, params.len());
    Ok((loss, grad))
}

fn with_params(m: &UpdateRuleModel, params: &[f64]) -> UpdateRuleModel {
    let mut m = m.clone();
    m.params = params.to_vec();
    m
}

/// Mean cost of the solver with model `m` over `us`.
pub fn mean_cost(p: &Problem, m: &UpdateRuleModel, us: &[Vec<f64>], cfg: &SolveConfig) -> Result<f64> {
    let costs: Vec<f64> = us
        .par_iter()
        .map(|u| projectnet_solve(p, m, u, cfg).map(|r| p.cost(u, &r.w)))
        .collect::<Result<_>>()?;
    Ok(costs.iter().sum::<f64>() / us.len().max(1) as f64)
}

pub fn train_update_rule(p: &Problem, costs: &[Vec<f64>], m0: &UpdateRuleModel, cfg: &MetaTrainConfig) -> Result<MetaTrainOutcome> {
    train_update_rule_with(p, costs, m0, cfg, None)
}

/// As [`train_update_rule`], with the training set extended by one draw
/// from `source` per epoch. Validation uses `costs` only.
pub fn train_update_rule_with(
    p: &Problem,
    costs: &[Vec<f64>],
    m0: &UpdateRuleModel,
    cfg: &MetaTrainConfig,
    source: Option<&dyn SampleSource>,
) -> Result<MetaTrainOutcome> {
    if costs.is_empty() {
        return Err(Error::InvalidParameter("meta-training needs at least one sample".into()));
    }
    m0.validate()?;
    Error::check_dim("model dimension", p.dim(), m0.dim)?;
    Error::check_dim("model input", p.u_dim(), m0.u_dim)?;
    for u in costs {
        Error::check_dim("training sample", p.u_dim(), u.len())?;
    }
    cfg.solver.validate()?;
    if cfg.chunk == 0 {
        return Err(Error::InvalidParameter("chunk size must be ≥ 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.validation) {
        return Err(Error::InvalidParameter("validation fraction must be in [0, 1)".into()));
    }
    let mut m0 = m0.clone();
    if m0.input_center.is_empty() && matches!(m0.mode, ModelMode::Linear | ModelMode::Mlp { .. }) {
        m0.center_on(costs);
    }
    let m0 = &m0;
    let mut samples = costs.to_vec();
    if let Some(src) = source {
        let mut rng = random::substream(cfg.schedule.seed, 77);
        for epoch in 0..cfg.schedule.epochs {
            samples.extend(src.samples(epoch, &mut rng));
        }
    }
    let mut idx: Vec<usize> = (0..costs.len()).collect();
    idx.shuffle(&mut random::substream(cfg.schedule.seed, 3));
    let n_val = (cfg.validation * costs.len() as f64).round() as usize;
    let n_val = if costs.len() - n_val == 0 { 0 } else { n_val };
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.extend(costs.len()..samples.len());
    val.sort_unstable();
    train.sort_unstable();
    let solver = cfg.solver;
    let grad = |params: &[f64], batch: &[usize]| -> Result<BatchGrad> {
        let parts: Vec<(f64, Vec<f64>, u64)> = batch
            .par_chunks(cfg.chunk)
            .map(|chunk| {
                let before = oracle_calls();
                let us: Vec<&[f64]> = chunk.iter().map(|&i| samples[i].as_slice()).collect();
                let (l, g) = meta_loss_grad(p, m0, params, &us, &solver)?;
                Ok((l, g, oracle_calls() - before))
            })
            .collect::<Result<_>>()?;
        let mut out = BatchGrad {
            loss: 0.0,
            grad: vec![0.0; params.len()],
            oracle_calls: 0,
        };
        for (l, g, c) in parts {
            out.loss += l;
            crate::linalg::axpy(1.0, &g, &mut out.grad);
            out.oracle_calls += c;
        }
        Ok(out)
    };
    let eval = |params: &[f64], which: &[usize]| -> Result<f64> {
        let us: Vec<Vec<f64>> = which.iter().map(|&i| samples[i].clone()).collect();
        mean_cost(p, &with_params(m0, params), &us, &solver)
    };
    let out = fit(m0.params.clone(), &train, &val, &cfg.schedule, grad, eval)?;
    Ok(MetaTrainOutcome {
        model: with_params(m0, &out.params),
        history: out.history,
    })
}

/// Test metrics of a solver configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean_cost: f64,
    /// Mean of `(cost(ŵ) − cost(w★)) / |cost(w★)|`; samples whose optimum
    /// has zero cost contribute their absolute regret.
    pub mean_relative_regret: f64,
    pub max_violation: f64,
}

/// Uncertainty samples paired with their exact optima.
pub struct Benchmark<'a> {
    pub problem: &'a Problem,
    pub costs: Vec<Vec<f64>>,
    pub optima: Vec<Vec<f64>>,
}

impl<'a> Benchmark<'a> {
    pub fn new(problem: &'a Problem, costs: &[Vec<f64>]) -> Result<Self> {
        let optima = costs
            .par_iter()
            .map(|u| oracles::optimum(problem, u).map(|r| r.w))
            .collect::<Result<_>>()?;
        Ok(Benchmark {
            problem,
            costs: costs.to_vec(),
            optima,
        })
    }

    pub fn evaluate(&self, m: &UpdateRuleModel, cfg: &SolveConfig) -> Result<Evaluation> {
        let p = self.problem;
        let rows: Vec<(f64, f64, f64)> = self
            .costs
            .par_iter()
            .zip(&self.optima)
            .map(|(u, ws)| {
                let r = projectnet_solve(p, m, u, cfg)?;
                let reg = relative_regret(p, u, &r.w, ws);
                Ok((p.cost(u, &r.w), reg.value, r.residual))
            })
            .collect::<Result<_>>()?;
        let n = rows.len().max(1) as f64;
        Ok(Evaluation {
            mean_cost: rows.iter().map(|r| r.0).sum::<f64>() / n,
            mean_relative_regret: rows.iter().map(|r| r.1).sum::<f64>() / n,
            max_violation: rows.iter().fold(0.0, |m, r| m.max(r.2)),
        })
    }
}

/// Mean cost and relative regret of the model's solver after `cfg.iterations`
/// steps, against exact optima.
pub fn evaluate_update_rule(p: &Problem, m: &UpdateRuleModel, costs: &[Vec<f64>], cfg: &SolveConfig) -> Result<Evaluation> {
    Benchmark::new(p, costs)?.evaluate(m, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::problems::{build_problem, ProblemKind};
    use crate::psdmap::{Construction, ModelInit, ModelMode};
    use rand::Rng;

    fn toy_samples(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = random::rng(seed);
        (0..n).map(|_| vec![r.gen::<f64>(), r.gen::<f64>()]).collect()
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        let p = build_problem(&ProblemKind::ToyPolytope).unwrap();
        let cfg = SolveConfig {
            iterations: 3,
            cycles: 2,
            gamma: 0.5,
            ..SolveConfig::default()
        };
        for mode in [ModelMode::Constant, ModelMode::Linear, ModelMode::Mlp { hidden: 3 }] {
            let m = UpdateRuleModel::new(mode, Construction::Symmetric, 2, 2, ModelInit::default(), 4).unwrap();
            let us = toy_samples(3, 1);
            let refs: Vec<&[f64]> = us.iter().map(Vec::as_slice).collect();
            let check = finite_diff_check(
                |tape, pv| {
                    let att = m.attach(tape, pv)?;
                    let mut total = tape.scalar(0.0);
                    for u in &refs {
                        let uv = tape.constant(u.to_vec());
                        let w = unroll(tape, &p, &att, uv, &cfg)?;
                        let c = p.cost_tape(tape, uv, w);
                        total = tape.add(total, c);
                    }
                    Ok(total)
                },
                &m.params,
                1e-6,
            )
            .unwrap();
            assert!(check.max_deviation < 1e-4, "{mode:?}: {}", check.max_deviation);
            let (l, g) = meta_loss_grad(&p, &m, &m.params, &refs, &cfg).unwrap();
            let direct: f64 = us
                .iter()
                .map(|u| p.cost(u, &projectnet_solve(&p, &m, u, &cfg).unwrap().w))
                .sum();
            assert!((l - direct).abs() < 1e-12);
            assert_eq!(g.len(), m.params.len());
        }
    }

    #[test]
    fn zero_model_training_reproduces_pgd() {
        let p = build_problem(&ProblemKind::ToySimplex).unwrap();
        let mut r = random::rng(2);
        let us: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| r.gen::<f64>()).collect()).collect();
        let m0 = UpdateRuleModel::zero(3, 3);
        let cfg = MetaTrainConfig {
            schedule: TrainSchedule {
                epochs: 3,
                ..TrainSchedule::default()
            },
            ..MetaTrainConfig::default()
        };
        let out = train_update_rule(&p, &us, &m0, &cfg).unwrap();
        assert_eq!(out.model, m0);
        let pgd: Vec<f64> = us
            .iter()
            .map(|u| p.cost(u, &crate::solver::pgd_solve(&p, u, &cfg.solver).unwrap().w))
            .collect();
        let full = mean_cost(&p, &out.model, &us, &cfg.solver).unwrap();
        assert_eq!(full, pgd.iter().sum::<f64>() / 20.0);
        for r in &out.history.records {
            assert_eq!(r.train_loss, out.history.initial().train_loss);
        }
    }

    #[test]
    fn training_lowers_cost_and_is_deterministic() {
        let p = build_problem(&ProblemKind::ToyPolytope).unwrap();
        let us = toy_samples(40, 5);
        let m0 = UpdateRuleModel::new(ModelMode::Linear, Construction::Symmetric, 2, 2, ModelInit::default(), 1).unwrap();
        let cfg = MetaTrainConfig {
            schedule: TrainSchedule {
                epochs: 8,
                batch_size: 8,
                learning_rate: 0.05,
                seed: 7,
                ..TrainSchedule::default()
            },
            ..MetaTrainConfig::default()
        };
        let a = train_update_rule(&p, &us, &m0, &cfg).unwrap();
        let b = train_update_rule(&p, &us, &m0, &cfg).unwrap();
        let strip = |h: &LossHistory| -> Vec<(f64, Option<f64>)> { h.records.iter().map(|r| (r.train_loss, r.val_loss)).collect() };
        assert_eq!(strip(&a.history), strip(&b.history));
        assert_eq!(a.model, b.model);
        assert!(a.history.selected().train_loss <= a.history.initial().train_loss);
        assert!(a.history.records.iter().skip(1).any(|r| r.train_loss < a.history.initial().train_loss));
        assert_eq!(a.history.oracle_calls(), 0);
        let mut csv = Vec::new();
        a.history.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("epoch,train_loss,val_loss,wall_time\n0,"));
    }

    #[test]
    fn divergence_halves_then_aborts() {
        let calls = std::cell::Cell::new(0);
        let sched = TrainSchedule {
            epochs: 3,
            batch_size: 1,
            ..TrainSchedule::default()
        };
        let out = fit(
            vec![1.0],
            &[0, 1],
            &[],
            &sched,
            |p, _| {
                calls.set(calls.get() + 1);
                Ok(BatchGrad {
                    loss: p[0] * p[0],
                    grad: vec![if calls.get() > 2 { f64::NAN } else { 2.0 * p[0] }],
                    oracle_calls: 0,
                })
            },
            |p, _| Ok(p[0] * p[0]),
        );
        assert!(matches!(out, Err(Error::Diverged { .. })));
    }

    #[test]
    fn evaluation_at_zero_gamma_equals_pgd() {
        let p = build_problem(&ProblemKind::Matching { n: 3 }).unwrap();
        let mut r = random::rng(8);
        let us: Vec<Vec<f64>> = (0..6).map(|_| (0..9).map(|_| r.gen::<f64>()).collect()).collect();
        let m = UpdateRuleModel::new(ModelMode::Constant, Construction::Symmetric, p.dim(), 9, ModelInit::default(), 2).unwrap();
        let cfg = SolveConfig {
            gamma: 0.0,
            ..SolveConfig::default()
        };
        let bench = Benchmark::new(&p, &us).unwrap();
        let a = bench.evaluate(&m, &cfg).unwrap();
        let b = bench.evaluate(&UpdateRuleModel::zero(p.dim(), 9), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.mean_relative_regret >= 0.0);
    }
}
