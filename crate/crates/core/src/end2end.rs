//! Forecasters trained through a frozen update rule, and first-stage
//! decision rules trained through a second-stage ProjectNet.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::metatrain::{fit, BatchGrad, LossHistory, TrainSchedule};
use crate::oracles::{self, oracle_calls};
use crate::problems::{ObjectiveSpec, Problem};
use crate::psdmap::UpdateRuleModel;
use crate::random;
use crate::solver::{projectnet_solve, unroll, SolveConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    Affine,
    /// Two hidden ReLU layers of equal width; `residual` adds a linear
    /// input-to-output path.
    TwoLayer { width: usize, residual: bool },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputLayer {
    #[default]
    Identity,
    /// Probability vector over a discrete support.
    Softmax,
}

/// `f_θ : ℝᵖ → ℝᵈ` with standardized inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Forecaster {
    pub architecture: Architecture,
    #[serde(default)]
    pub output: OutputLayer,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Per-feature shift and scale; empty means identity.
    #[serde(default)]
    pub input_mean: Vec<f64>,
    #[serde(default)]
    pub input_scale: Vec<f64>,
    pub params: Vec<f64>,
}

fn take(tape: &mut Tape, params: Var, o: &mut usize, len: usize) -> Var {
    let v = tape.slice(params, *o, len);
    *o += len;
    v
}

/// `W x + b` with `W` stored row-major before `b`.
fn dense(tape: &mut Tape, params: Var, o: &mut usize, rows: usize, x: Var) -> Var {
    let cols = tape.numel(x);
    if cols == 0 {
        return take(tape, params, o, rows);
    }
    let w = take(tape, params, o, rows * cols);
    let w = tape.reshape(w, rows, cols);
    let b = take(tape, params, o, rows);
    let y = tape.matmul(w, x);
    tape.add(y, b)
}

impl Forecaster {
    pub fn param_count(arch: Architecture, p: usize, d: usize) -> usize {
        match arch {
            Architecture::Affine => d * p + d,
            Architecture::TwoLayer { width: h, residual } => {
                h * p + h + h * h + h + d * h + d + if residual { d * p } else { 0 }
            }
        }
    }

    pub fn new(architecture: Architecture, output: OutputLayer, input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if output_dim == 0 {
            return Err(Error::InvalidParameter("forecaster output must have ≥ 1 entry".into()));
        }
        if let Architecture::TwoLayer { width: 0, .. } = architecture {
            return Err(Error::InvalidParameter("hidden width must be ≥ 1".into()));
        }
        let (p, d) = (input_dim, output_dim);
        let mut r = random::rng(seed);
        let he = |fan_in: usize| (2.0 / fan_in.max(1) as f64).sqrt();
        let mut params = Vec::with_capacity(Self::param_count(architecture, p, d));
        match architecture {
            Architecture::Affine => {
                if p > 0 {
                    params.extend(random::normals(&mut r, d * p, 0.1 / (p as f64).sqrt()));
                }
                params.extend(std::iter::repeat(0.0).take(d));
            }
            Architecture::TwoLayer { width: h, residual } => {
                if p > 0 {
                    params.extend(random::normals(&mut r, h * p, he(p)));
                }
                params.extend(std::iter::repeat(0.0).take(h));
                params.extend(random::normals(&mut r, h * h, he(h)));
                params.extend(std::iter::repeat(0.0).take(h));
                params.extend(random::normals(&mut r, d * h, 0.1 / (h as f64).sqrt()));
                params.extend(std::iter::repeat(0.0).take(d));
                if residual && p > 0 {
                    params.extend(std::iter::repeat(0.0).take(d * p));
                }
            }
        }
        Ok(Forecaster {
            architecture,
            output,
            input_dim,
            output_dim,
            input_mean: Vec::new(),
            input_scale: Vec::new(),
            params,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_dim(
            "forecaster parameters",
            Self::param_count(self.architecture, self.input_dim, self.output_dim),
            self.params.len(),
        )?;
        if !self.input_mean.is_empty() {
            Error::check_dim("input mean", self.input_dim, self.input_mean.len())?;
            Error::check_dim("input scale", self.input_dim, self.input_scale.len())?;
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("forecaster parameters"));
        }
        Ok(())
    }

    /// Range of the output bias inside `params`.
    fn output_bias(&self) -> std::ops::Range<usize> {
        let (p, d) = (self.input_dim, self.output_dim);
        let start = match self.architecture {
            Architecture::Affine => d * p,
            Architecture::TwoLayer { width: h, .. } => h * p + h + h * h + h + d * h,
        };
        start..start + d
    }

    /// Sets input standardization from `xs` and the output bias so that the
    /// initial forecast is close to the mean target.
    pub fn calibrate(&mut self, xs: &[Vec<f64>], us: &[Vec<f64>]) {
        let p = self.input_dim;
        if !xs.is_empty() && p > 0 {
            let n = xs.len() as f64;
            let mut mean = vec![0.0; p];
            for x in xs {
                linalg::axpy(1.0 / n, x, &mut mean);
            }
            let scale = (0..p)
                .map(|j| {
                    let var = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
                    if var > 1e-24 {
                        var.sqrt()
                    } else {
                        1.0
                    }
                })
                .collect();
            self.input_mean = mean;
            self.input_scale = scale;
        }
        if !us.is_empty() {
            let n = us.len() as f64;
            let mut mean = vec![0.0; self.output_dim];
            for u in us {
                linalg::axpy(1.0 / n, u, &mut mean);
            }
            let range = self.output_bias();
            for (b, m) in self.params[range].iter_mut().zip(mean) {
                *b = match self.output {
                    OutputLayer::Identity => m,
                    OutputLayer::Softmax => (m.max(0.0) + 1e-3).ln(),
                };
            }
        }
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        if self.input_mean.is_empty() {
            return x.to_vec();
        }
        x.iter()
            .zip(&self.input_mean)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Records `f_θ(x)` on `tape` with `params` as θ.
    pub fn forward_tape(&self, tape: &mut Tape, params: Var, x: &[f64]) -> Result<Var> {
        Error::check_dim("forecaster input", self.input_dim, x.len())?;
        Error::check_dim("forecaster parameters", self.params.len(), tape.numel(params))?;
        let xv = tape.constant(self.standardize(x));
        let d = self.output_dim;
        let mut o = 0;
        let mut y = match self.architecture {
            Architecture::Affine => dense(tape, params, &mut o, d, xv),
            Architecture::TwoLayer { width: h, residual } => {
                let a = dense(tape, params, &mut o, h, xv);
                let a = tape.relu(a);
                let b = dense(tape, params, &mut o, h, a);
                let b = tape.relu(b);
                let mut y = dense(tape, params, &mut o, d, b);
                if residual && self.input_dim > 0 {
                    let r = take(tape, params, &mut o, d * self.input_dim);
                    let r = tape.reshape(r, d, self.input_dim);
                    let rx = tape.matmul(r, xv);
                    y = tape.add(y, rx);
                }
                y
            }
        };
        if self.output == OutputLayer::Softmax {
            let top = tape.value(y).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let shifted = tape.offset(y, -top);
            let e = tape.exp(shifted);
            let s = tape.sum(e);
            let inv = tape.recip(s);
            y = tape.scale_by(e, inv);
        }
        if tape.value(y).iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("forecast"));
        }
        Ok(y)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.constant(self.params.clone());
        let y = self.forward_tape(&mut tape, p, x)?;
        Ok(tape.value(y).to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: Forecaster = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        f.validate()?;
        Ok(f)
    }
}

fn with_params(f: &Forecaster, params: &[f64]) -> Forecaster {
    let mut f = f.clone();
    f.params = params.to_vec();
    f
}

/// Paired features and targets.
#[derive(Clone, Copy, Debug)]
pub struct Samples<'a> {
    pub x: &'a [Vec<f64>],
    pub u: &'a [Vec<f64>],
}

impl<'a> Samples<'a> {
    pub fn new(x: &'a [Vec<f64>], u: &'a [Vec<f64>]) -> Result<Self> {
        Error::check_dim("sample count", x.len(), u.len())?;
        Ok(Samples { x, u })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Train and validation samples concatenated, with index ranges for each.
struct Pool {
    x: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl Pool {
    fn new(train: Samples, val: Samples) -> Result<Self> {
        Samples::new(train.x, train.u)?;
        Samples::new(val.x, val.u)?;
        let n = train.len();
        Ok(Pool {
            x: train.x.iter().chain(val.x).cloned().collect(),
            u: train.u.iter().chain(val.u).cloned().collect(),
            train: (0..n).collect(),
            val: (n..n + val.len()).collect(),
        })
    }
}

/// Per-chunk loss sums on separate tapes, combined in chunk order.
fn chunked<F>(params: &[f64], batch: &[usize], chunk: usize, per_chunk: F) -> Result<BatchGrad>
where
    F: Fn(&[usize]) -> Result<(f64, Vec<f64>)> + Sync,
{
    let parts: Vec<(f64, Vec<f64>, u64)> = batch
        .par_chunks(chunk.max(1))
        .map(|c| {
            let before = oracle_calls();
            let (l, g) = per_chunk(c)?;
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
        linalg::axpy(1.0, &g, &mut out.grad);
        out.oracle_calls += c;
    }
    Ok(out)
}

fn sum_on_tape(tape: &mut Tape, terms: Vec<Var>) -> Option<Var> {
    terms.into_iter().reduce(|a, b| tape.add(a, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndToEndConfig {
    pub schedule: TrainSchedule,
    /// Solver used inside the training loss.
    pub solver: SolveConfig,
    pub chunk: usize,
}

impl Default for EndToEndConfig {
    fn default() -> Self {
        EndToEndConfig {
            schedule: TrainSchedule::default(),
            solver: SolveConfig::default(),
            chunk: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForecastOutcome {
    pub forecaster: Forecaster,
    pub history: LossHistory,
}

fn check_forecaster(f: &Forecaster, input_dim: usize, output_dim: usize) -> Result<()> {
    f.validate()?;
    Error::check_dim("forecaster input", input_dim, f.input_dim)?;
    Error::check_dim("forecaster output", output_dim, f.output_dim)
}

/// Trains `f0` on `Σ g_u(ŵ(f_θ(x)))` where `ŵ` unrolls the frozen model `m`.
///
/// The exact oracle is never called; the per-epoch oracle counts in the
/// history stay at zero.
pub fn train_forecaster(
    p: &Problem,
    m: &UpdateRuleModel,
    f0: &Forecaster,
    train: Samples,
    val: Samples,
    cfg: &EndToEndConfig,
) -> Result<ForecastOutcome> {
    if train.is_empty() {
        return Err(Error::InvalidParameter("end-to-end training needs at least one sample".into()));
    }
    check_forecaster(f0, train.x[0].len(), p.u_dim())?;
    m.validate()?;
    Error::check_dim("model dimension", p.dim(), m.dim)?;
    cfg.solver.validate()?;
    let pool = Pool::new(train, val)?;
    let grad = |params: &[f64], batch: &[usize]| {
        chunked(params, batch, cfg.chunk, |chunk| {
            let mut tape = Tape::new();
            let pv = tape.param(params.to_vec());
            let mv = tape.constant(m.params.clone());
            let att = m.attach(&mut tape, mv)?;
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let uhat = f0.forward_tape(&mut tape, pv, &pool.x[i])?;
                let w = unroll(&mut tape, p, &att, uhat, &cfg.solver)?;
                let ut = tape.constant(pool.u[i].clone());
                terms.push(p.cost_tape(&mut tape, ut, w));
            }
            let total = sum_on_tape(&mut tape, terms).expect("nonempty chunk");
            let loss = tape.scalar_value(total);
            if !loss.is_finite() {
                return Err(Error::non_finite("end-to-end loss"));
            }
            Ok((loss, tape.backward(total).wrt(pv, params.len())))
        })
    };
    let eval = |params: &[f64], idx: &[usize]| {
        let f = with_params(f0, params);
        let costs: Vec<f64> = idx
            .par_iter()
            .map(|&i| {
                let uhat = f.forward(&pool.x[i])?;
                let r = projectnet_solve(p, m, &uhat, &cfg.solver)?;
                Ok(p.cost(&pool.u[i], &r.w))
            })
            .collect::<Result<_>>()?;
        Ok(costs.iter().sum::<f64>() / idx.len().max(1) as f64)
    };
    let out = fit(f0.params.clone(), &pool.train, &pool.val, &cfg.schedule, grad, eval)?;
    Ok(ForecastOutcome {
        forecaster: with_params(f0, &out.params),
        history: out.history,
    })
}

/// Trains `f0` on squared forecast error, for the predict-then-optimize
/// baseline.
pub fn train_mse(f0: &Forecaster, train: Samples, val: Samples, schedule: &TrainSchedule) -> Result<ForecastOutcome> {
    if train.is_empty() {
        return Err(Error::InvalidParameter("regression needs at least one sample".into()));
    }
    check_forecaster(f0, train.x[0].len(), train.u[0].len())?;
    let pool = Pool::new(train, val)?;
    let grad = |params: &[f64], batch: &[usize]| {
        chunked(params, batch, 32, |chunk| {
            let mut tape = Tape::new();
            let pv = tape.param(params.to_vec());
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let y = f0.forward_tape(&mut tape, pv, &pool.x[i])?;
                let t = tape.constant(pool.u[i].clone());
                let r = tape.sub(y, t);
                let sq = tape.square(r);
                terms.push(tape.sum(sq));
            }
            let total = sum_on_tape(&mut tape, terms).expect("nonempty chunk");
            Ok((tape.scalar_value(total), tape.backward(total).wrt(pv, params.len())))
        })
    };
    let eval = |params: &[f64], idx: &[usize]| {
        let f = with_params(f0, params);
        let mut total = 0.0;
        for &i in idx {
            let y = f.forward(&pool.x[i])?;
            total += y.iter().zip(&pool.u[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(total / idx.len().max(1) as f64)
    };
    let out = fit(f0.params.clone(), &pool.train, &pool.val, schedule, grad, eval)?;
    Ok(ForecastOutcome {
        forecaster: with_params(f0, &out.params),
        history: out.history,
    })
}

/// How a forecast becomes a decision.
#[derive(Clone, Copy, Debug)]
pub enum DecisionMode<'a> {
    /// The exact oracle applied to the forecast.
    Exact,
    /// `ŵ` from ProjectNet with the given model and solver settings.
    Approximate {
        model: &'a UpdateRuleModel,
        solver: SolveConfig,
    },
}

/// Decision induced by the forecast `f(x)`.
///
/// With the exact oracle, a zero forecast on a linear family returns the
/// oracle's own tie-break: the lexicographically smallest optimal matching,
/// the smallest-index tight path, or the interior-point limit otherwise.
/// Vertex-cost forecasts for grid paths are clamped at zero first.
pub fn decide(f: &Forecaster, p: &Problem, x: &[f64], mode: &DecisionMode) -> Result<Vec<f64>> {
    let mut u = f.forward(x)?;
    match mode {
        DecisionMode::Exact => {
            if matches!(p.objective(), ObjectiveSpec::ShortestPathLinear { .. }) {
                u.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            Ok(oracles::optimum(p, &u)?.w)
        }
        DecisionMode::Approximate { model, solver } => Ok(projectnet_solve(p, model, &u, solver)?.w),
    }
}

/// Mean realized cost of the decisions induced by `f` on `samples`.
pub fn evaluate_forecaster(f: &Forecaster, p: &Problem, samples: Samples, mode: &DecisionMode) -> Result<f64> {
    Samples::new(samples.x, samples.u)?;
    let costs: Vec<f64> = samples
        .x
        .par_iter()
        .zip(samples.u)
        .map(|(x, u)| decide(f, p, x, mode).map(|w| p.cost(u, &w)))
        .collect::<Result<_>>()?;
    Ok(costs.iter().sum::<f64>() / samples.len().max(1) as f64)
}

/// Timing baseline that calls the exact oracle on every forecast of every
/// gradient step.
///
/// The recorded loss is the decision cost of the oracle's answer. The
/// update direction is the squared-error gradient, since the oracle's
/// answer carries no derivative.
pub fn train_forecaster_oracle_loop(
    p: &Problem,
    f0: &Forecaster,
    train: Samples,
    val: Samples,
    schedule: &TrainSchedule,
) -> Result<ForecastOutcome> {
    if train.is_empty() {
        return Err(Error::InvalidParameter("training needs at least one sample".into()));
    }
    check_forecaster(f0, train.x[0].len(), p.u_dim())?;
    let pool = Pool::new(train, val)?;
    let grad = |params: &[f64], batch: &[usize]| {
        chunked(params, batch, 1, |chunk| {
            let mut tape = Tape::new();
            let pv = tape.param(params.to_vec());
            let i = chunk[0];
            let y = f0.forward_tape(&mut tape, pv, &pool.x[i])?;
            let w = oracles::optimum(p, tape.value(y))?.w;
            let t = tape.constant(pool.u[i].clone());
            let r = tape.sub(y, t);
            let sq = tape.square(r);
            let total = tape.sum(sq);
            Ok((p.cost(&pool.u[i], &w), tape.backward(total).wrt(pv, params.len())))
        })
    };
    let eval = |params: &[f64], idx: &[usize]| {
        let f = with_params(f0, params);
        evaluate_forecaster(
            &f,
            p,
            Samples::new(
                &idx.iter().map(|&i| pool.x[i].clone()).collect::<Vec<_>>(),
                &idx.iter().map(|&i| pool.u[i].clone()).collect::<Vec<_>>(),
            )?,
            &DecisionMode::Exact,
        )
    };
    let out = fit(f0.params.clone(), &pool.train, &pool.val, schedule, grad, eval)?;
    Ok(ForecastOutcome {
        forecaster: with_params(f0, &out.params),
        history: out.history,
    })
}

/// Second-stage cost `d(w, u)ᵀ v`.
pub trait RecourseCost: Send + Sync {
    fn cost_tape(&self, tape: &mut Tape, second: &Problem, input: Var, v: Var) -> Var;
    fn cost(&self, second: &Problem, input: &[f64], v: &[f64]) -> f64;
}

/// The second-stage problem's own objective, with `input = (w, d)` as its
/// uncertainty.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProblemRecourseCost;

impl RecourseCost for ProblemRecourseCost {
    fn cost_tape(&self, tape: &mut Tape, second: &Problem, input: Var, v: Var) -> Var {
        second.cost_tape(tape, input, v)
    }

    fn cost(&self, second: &Problem, input: &[f64], v: &[f64]) -> f64 {
        second.cost(input, v)
    }
}

/// Two-stage program `min cᵀw + V(w, d)` where the second stage sees
/// `(w, d)` through its constraint right-hand side.
#[derive(Clone)]
pub struct TwoStage {
    /// First-stage feasible set; its objective is ignored.
    pub first: Problem,
    pub first_cost: Vec<f64>,
    pub second: Problem,
    /// Update rule of the second-stage ProjectNet.
    pub model: UpdateRuleModel,
    pub recourse_cost: Arc<dyn RecourseCost>,
}

impl TwoStage {
    pub fn new(first: Problem, first_cost: Vec<f64>, second: Problem, model: UpdateRuleModel) -> Result<Self> {
        let s = TwoStage {
            first,
            first_cost,
            second,
            model,
            recourse_cost: Arc::new(ProblemRecourseCost),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn demand_dim(&self) -> usize {
        self.second.u_dim() - self.first.dim()
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_dim("first-stage cost", self.first.dim(), self.first_cost.len())?;
        if self.first.has_parametric_rhs() {
            return Err(Error::InvalidParameter("first stage needs a static right-hand side".into()));
        }
        if !self.second.has_parametric_rhs() || self.second.u_dim() < self.first.dim() {
            return Err(Error::InvalidParameter(
                "second stage must take (w, d) through its right-hand side".into(),
            ));
        }
        self.model.validate()?;
        Error::check_dim("second-stage model", self.second.dim(), self.model.dim)
    }

    fn input(&self, w: &[f64], d: &[f64]) -> Vec<f64> {
        let mut u = w.to_vec();
        u.extend_from_slice(d);
        u
    }

    /// `cᵀw + V(w, d)` with the exact recourse value.
    pub fn exact_cost(&self, w: &[f64], d: &[f64]) -> Result<f64> {
        Error::check_dim("demand", self.demand_dim(), d.len())?;
        let u = self.input(w, d);
        let v = match self.second.objective() {
            ObjectiveSpec::CrossFulfillSecondStage { c, h, b } => oracles::cross_fulfill_recourse(c, h, b, w, d)?.w,
            _ => oracles::optimum(&self.second, &u)?.w,
        };
        Ok(linalg::dot(&self.first_cost, w) + self.recourse_cost.cost(&self.second, &u, &v))
    }

    /// `cᵀw + d(w, u)ᵀv̂` with `v̂` from the second-stage ProjectNet. Fails
    /// with [`Error::Infeasible`] when the converged projection cannot reach
    /// the second-stage set, i.e. recourse is not complete at `w`.
    pub fn approximate_cost(&self, w: &[f64], d: &[f64], solver: &SolveConfig) -> Result<f64> {
        Error::check_dim("demand", self.demand_dim(), d.len())?;
        let u = self.input(w, d);
        let cfg = SolveConfig { polish: true, ..*solver };
        let r = projectnet_solve(&self.second, &self.model, &u, &cfg)?;
        if !(r.residual <= 1e-6) {
            return Err(Error::Infeasible(format!(
                "second stage has no feasible recourse (violation {:.3e}) at w = {w:?}, d = {d:?}",
                r.residual
            )));
        }
        Ok(linalg::dot(&self.first_cost, w) + self.recourse_cost.cost(&self.second, &u, &r.w))
    }

    /// First stage that is optimal when the demand is known to be `d`.
    pub fn point_decision(&self, d: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim("demand", self.demand_dim(), d.len())?;
        Ok(oracles::two_stage_point(&self.first, &self.first_cost, &self.second, d)?.w)
    }
}

/// Network output projected onto the first-stage set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRule {
    pub network: Forecaster,
    /// Dykstra cycles of the projection used during training.
    pub cycles: usize,
}

impl DecisionRule {
    pub fn new(network: Forecaster, cycles: usize) -> Result<Self> {
        if cycles == 0 {
            return Err(Error::InvalidParameter("Dykstra needs k ≥ 1 cycles".into()));
        }
        network.validate()?;
        Ok(DecisionRule { network, cycles })
    }

    /// First-stage decision with a converged projection.
    pub fn decide(&self, first: &Problem, x: &[f64]) -> Result<Vec<f64>> {
        let raw = self.network.forward(x)?;
        first.plan().project_converged(&raw, None, 1e-12, 10_000)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: DecisionRule = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        DecisionRule::new(r.network, r.cycles)
    }
}

#[derive(Clone, Debug)]
pub struct TwoStageOutcome {
    pub rule: DecisionRule,
    pub history: LossHistory,
}

/// Trains `rule0` on `Σ cᵀq(x) + d(q(x), u)ᵀ v̂(q(x), d)` where both the
/// first-stage projection and the second-stage solve are unrolled.
///
/// `train.u` and `val.u` hold demands.
pub fn train_two_stage(stage: &TwoStage, rule0: &DecisionRule, train: Samples, val: Samples, cfg: &EndToEndConfig) -> Result<TwoStageOutcome> {
    stage.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidParameter("two-stage training needs at least one sample".into()));
    }
    let rule0 = DecisionRule::new(rule0.network.clone(), rule0.cycles)?;
    check_forecaster(&rule0.network, train.x[0].len(), stage.first.dim())?;
    for d in train.u.iter().chain(val.u) {
        Error::check_dim("demand", stage.demand_dim(), d.len())?;
    }
    cfg.solver.validate()?;
    let pool = Pool::new(train, val)?;
    let plan = stage.first.plan();
    let grad = |params: &[f64], batch: &[usize]| {
        chunked(params, batch, cfg.chunk, |chunk| {
            let mut tape = Tape::new();
            let pv = tape.param(params.to_vec());
            let mv = tape.constant(stage.model.params.clone());
            let att = stage.model.attach(&mut tape, mv)?;
            let c1 = tape.constant(stage.first_cost.clone());
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let raw = rule0.network.forward_tape(&mut tape, pv, &pool.x[i])?;
                let w = plan.project_var(&mut tape, raw, None, rule0.cycles)?;
                let d = tape.constant(pool.u[i].clone());
                let input = tape.concat(&[w, d]);
                let v = unroll(&mut tape, &stage.second, &att, input, &cfg.solver)?;
                let first = tape.dot(c1, w);
                let second = stage.recourse_cost.cost_tape(&mut tape, &stage.second, input, v);
                terms.push(tape.add(first, second));
            }
            let total = sum_on_tape(&mut tape, terms).expect("nonempty chunk");
            let loss = tape.scalar_value(total);
            if !loss.is_finite() {
                return Err(Error::non_finite("two-stage loss"));
            }
            Ok((loss, tape.backward(total).wrt(pv, params.len())))
        })
    };
    let eval = |params: &[f64], idx: &[usize]| {
        let rule = DecisionRule {
            network: with_params(&rule0.network, params),
            cycles: rule0.cycles,
        };
        let costs: Vec<f64> = idx
            .par_iter()
            .map(|&i| {
                let w = rule.decide(&stage.first, &pool.x[i])?;
                stage.approximate_cost(&w, &pool.u[i], &cfg.solver)
            })
            .collect::<Result<_>>()?;
        Ok(costs.iter().sum::<f64>() / idx.len().max(1) as f64)
    };
    let out = fit(rule0.network.params.clone(), &pool.train, &pool.val, &cfg.schedule, grad, eval)?;
    Ok(TwoStageOutcome {
        rule: DecisionRule {
            network: with_params(&rule0.network, &out.params),
            cycles: rule0.cycles,
        },
        history: out.history,
    })
}

/// Mean exact two-stage cost of `rule` on `samples` (demands in `u`).
pub fn evaluate_two_stage(stage: &TwoStage, rule: &DecisionRule, samples: Samples) -> Result<f64> {
    Samples::new(samples.x, samples.u)?;
    let costs: Vec<f64> = samples
        .x
        .par_iter()
        .zip(samples.u)
        .map(|(x, d)| {
            let w = rule.decide(&stage.first, x)?;
            stage.exact_cost(&w, d)
        })
        .collect::<Result<_>>()?;
    Ok(costs.iter().sum::<f64>() / samples.len().max(1) as f64)
}

/// Mean exact two-stage cost when the first stage is the point-optimal
/// decision for the forecast demand `f(x)`.
pub fn evaluate_two_stage_pto(stage: &TwoStage, f: &Forecaster, samples: Samples) -> Result<f64> {
    Samples::new(samples.x, samples.u)?;
    let costs: Vec<f64> = samples
        .x
        .par_iter()
        .zip(samples.u)
        .map(|(x, d)| {
            let dhat: Vec<f64> = f.forward(x)?.into_iter().map(|v| v.max(0.0)).collect();
            let w = stage.point_decision(&dhat)?;
            stage.exact_cost(&w, d)
        })
        .collect::<Result<_>>()?;
    Ok(costs.iter().sum::<f64>() / samples.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescentConfig {
    pub iterations: usize,
    /// Initial step; step `t` is `eta / √(t + 1)`.
    pub eta: f64,
    pub cycles: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            iterations: 2000,
            eta: 1.0,
            cycles: 10,
        }
    }
}

/// Featureless decision minimizing the mean cost over `samples` by projected
/// subgradient descent with `k`-cycle projections. Returns the average of
/// the second half of the iterates.
pub fn projected_descent_saa(p: &Problem, samples: &[Vec<f64>], cfg: &DescentConfig) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("descent needs at least one sample".into()));
    }
    if cfg.iterations == 0 || !(cfg.eta > 0.0) {
        return Err(Error::InvalidParameter("descent needs iterations ≥ 1 and η > 0".into()));
    }
    for u in samples {
        Error::check_dim("sample", p.u_dim(), u.len())?;
    }
    if p.has_parametric_rhs() {
        return Err(Error::InvalidParameter("descent needs a static feasible set".into()));
    }
    let d = p.dim();
    let n = samples.len() as f64;
    let plan = p.plan();
    let mut w = plan.project(&vec![0.0; d], cfg.cycles)?;
    let mut avg = vec![0.0; d];
    let burn = cfg.iterations / 2;
    for t in 0..cfg.iterations {
        let mut g = vec![0.0; d];
        for u in samples {
            linalg::axpy(1.0 / n, &p.loss_grad(u, &w), &mut g);
        }
        let step = cfg.eta / ((t + 1) as f64).sqrt();
        let y: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        w = plan.project(&y, cfg.cycles)?;
        if t >= burn {
            linalg::axpy(1.0 / (cfg.iterations - burn) as f64, &w, &mut avg);
        }
    }
    Ok(avg)
}
