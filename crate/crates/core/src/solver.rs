//! Unrolled ProjectNet iterations and the projected-gradient baseline.
//!
//! `w₀ = π̃ᵏ(0)` and `w_{t+1} = π̃ᵏ(w_t − η∇g_u(w_t) − γ L(u) w_t)`, with
//! `π̃ᵏ` the `k`-cycle Dykstra projection. The plain functions work on `f64`
//! vectors; [`unroll`] records the same recursion on a tape.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::problems::Problem;
use crate::psdmap::{Attached, Operator, UpdateRuleModel};

pub use crate::problems::{relative_regret, Regret};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub eta: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub cycles: usize,
    pub record_trajectory: bool,
    /// Converged projection applied to the final iterate before reporting.
    pub polish: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            eta: 0.1,
            gamma: 0.1,
            iterations: 5,
            cycles: 10,
            record_trajectory: false,
            polish: false,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidParameter(format!("step size must be > 0, got {}", self.eta)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("γ must be ≥ 0, got {}", self.gamma)));
        }
        if self.cycles == 0 {
            return Err(Error::InvalidParameter("projection cycles must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn with_iterations(mut self, t: usize) -> Self {
        self.iterations = t;
        self
    }

    pub fn with_cycles(mut self, k: usize) -> Self {
        self.cycles = k;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub w: Vec<f64>,
    pub trajectory: Option<Vec<Vec<f64>>>,
    /// `g_u(w_t)` for `t = 0..=T`, evaluated after each projection.
    pub objective: Vec<f64>,
    /// Largest constraint violation of `w`.
    pub residual: f64,
    pub wall_time: f64,
}

impl SolveReport {
    pub fn final_objective(&self) -> f64 {
        *self.objective.last().expect("trace holds w₀")
    }

    /// Trajectory as CSV with columns `t, w_0..w_{d−1}, objective`.
    pub fn write_trajectory_csv<W: Write>(&self, out: W) -> Result<()> {
        let traj = self
            .trajectory
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("trajectory was not recorded".into()))?;
        let mut wr = csv::Writer::from_writer(out);
        let d = self.w.len();
        let mut header = vec!["t".to_string()];
        header.extend((0..d).map(|i| format!("w_{i}")));
        header.push("objective".into());
        wr.write_record(&header)?;
        for (t, (w, g)) in traj.iter().zip(&self.objective).enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(w.iter().map(|x| x.to_string()));
            row.push(g.to_string());
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_trajectory_csv(&self, path: &Path) -> Result<()> {
        self.write_trajectory_csv(std::fs::File::create(path)?)
    }
}

/// ProjectNet with the learned term `γ L(u) w`.
pub fn projectnet_solve(p: &Problem, m: &UpdateRuleModel, u: &[f64], cfg: &SolveConfig) -> Result<SolveReport> {
    Error::check_dim("model dimension", p.dim(), m.dim)?;
    let op = m.operator(u)?;
    solve_with_operator(p, Some(&op), u, cfg)
}

/// Projected gradient descent: ProjectNet with `L ≡ 0`.
pub fn pgd_solve(p: &Problem, u: &[f64], cfg: &SolveConfig) -> Result<SolveReport> {
    solve_with_operator(p, None, u, cfg)
}

/// Shared recursion; `op = None` stands for the zero map.
pub fn solve_with_operator(p: &Problem, op: Option<&Operator>, u: &[f64], cfg: &SolveConfig) -> Result<SolveReport> {
    cfg.validate()?;
    Error::check_dim("uncertainty", p.u_dim(), u.len())?;
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("uncertainty"));
    }
    let start = Instant::now();
    let plan = p.plan();
    let rhs = p.rhs(u);
    let d = p.dim();
    let mut w = plan.project_with_rhs(&vec![0.0; d], rhs.as_deref(), cfg.cycles)?;
    let mut objective = vec![p.objective().eval(u, &w)];
    let mut trajectory = cfg.record_trajectory.then(|| vec![w.clone()]);
    let mut lw = vec![0.0; d];
    for t in 0..cfg.iterations {
        let g = p.loss_grad(u, &w);
        if let Some(op) = op {
            lw = op.apply(&w);
        }
        let step: Vec<f64> = (0..d)
            .map(|i| w[i] - cfg.eta * g[i] - cfg.gamma * lw[i])
            .collect();
        if step.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite(format!("iterate t={}", t + 1)));
        }
        w = plan.project_with_rhs(&step, rhs.as_deref(), cfg.cycles)?;
        objective.push(p.objective().eval(u, &w));
        if let Some(tr) = trajectory.as_mut() {
            tr.push(w.clone());
        }
    }
    if cfg.polish {
        w = plan.project_converged(&w, rhs.as_deref(), 1e-12, 10_000)?;
        *objective.last_mut().expect("nonempty") = p.objective().eval(u, &w);
    }
    let residual = plan.max_violation(&w, rhs.as_deref());
    Ok(SolveReport {
        w,
        trajectory,
        objective,
        residual,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Records the unrolled solve on `tape`; the result is differentiable in
/// `u` and in the parameters behind `model`.
pub fn unroll(tape: &mut Tape, p: &Problem, model: &Attached, u: Var, cfg: &SolveConfig) -> Result<Var> {
    cfg.validate()?;
    Error::check_dim("uncertainty", p.u_dim(), tape.numel(u))?;
    let plan = p.plan();
    let rhs = p.rhs_tape(tape, u);
    let zero = tape.constant(vec![0.0; p.dim()]);
    let mut w = plan.project_var(tape, zero, rhs, cfg.cycles)?;
    let rho = if model.is_zero() || cfg.gamma == 0.0 {
        None
    } else {
        Some(model.rho(tape, u)?)
    };
    for t in 0..cfg.iterations {
        let g = p.loss_grad_tape(tape, u, w);
        let g = tape.scale(g, cfg.eta);
        let mut step = tape.sub(w, g);
        if let Some(rho) = rho {
            let lw = model.apply(tape, rho, w);
            let lw = tape.scale(lw, cfg.gamma);
            step = tape.sub(step, lw);
        }
        if tape.value(step).iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite(format!("iterate t={}", t + 1)));
        }
        w = plan.project_var(tape, step, rhs, cfg.cycles)?;
    }
    Ok(w)
}

/// Surrogate `r_u(w) = g_u(w) + (γ/2η) wᵀ L w` in the minimization sense.
pub fn surrogate_value(p: &Problem, op: &Operator, u: &[f64], w: &[f64], cfg: &SolveConfig) -> f64 {
    p.loss(u, w) + cfg.gamma / (2.0 * cfg.eta) * op.quadratic(w)
}

/// Measured Euclidean diameter of a point set.
pub fn diameter(points: &[Vec<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max(linalg::dist(a, b));
        }
    }
    best
}
