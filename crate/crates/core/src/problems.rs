//! Objective families and feasible-region decompositions for the benchmarks.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::projection::{ConvexSet, ProjectionPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Min,
    Max,
}

impl Sense {
    pub fn sign(self) -> f64 {
        match self {
            Sense::Min => 1.0,
            Sense::Max => -1.0,
        }
    }
}

/// Objective family `g_u(w)`.
///
/// Each family reads the uncertainty `u` and a leading block of `w`; the
/// remaining coordinates (slacks, auxiliary variables) have zero cost unless
/// stated otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    /// `uᵀw` with `u` the cost vector.
    Linear,
    /// `Σ u_ij w_ij` over the `n²` edge block.
    MatchingLinear { n: usize },
    /// Vertex costs `u`: `u[source] + Σ_e u[head(e)] w_e`.
    ShortestPathLinear { source: usize, heads: Vec<usize> },
    /// `Σ h_j (w_j − u_j)⁺ + b_j (u_j − w_j)⁺`.
    PiecewiseNewsvendor { h: Vec<f64>, b: Vec<f64> },
    /// Single order quantity `w`, `u` a probability vector over `support`.
    QuadraticNewsvendor {
        c0: f64,
        q0: f64,
        cb: f64,
        qb: f64,
        ch: f64,
        qh: f64,
        support: Vec<f64>,
    },
    /// `Σ γ_s (u − w)⁺ + γ_e (w − u)⁺ + ½ (w − u)²`.
    Electricity { gamma_s: f64, gamma_e: f64 },
    /// Recourse cost over `(v, p, q)`: transport `c`, holding `h` on leftover
    /// `p`, backorder `b` on unmet demand `q`.
    CrossFulfillSecondStage { c: Matrix, h: Vec<f64>, b: Vec<f64> },
    /// `cᵀw` with a fixed `c`; the uncertainty only moves the constraints.
    FixedLinear { c: Vec<f64> },
    /// `½ xᵀQx + uᵀx` over the leading block `x` of length `Q.rows`.
    Quadratic { q: Matrix },
}

impl ObjectiveSpec {
    /// Number of leading `w` coordinates the family reads.
    pub fn block_len(&self, dim: usize) -> usize {
        match self {
            ObjectiveSpec::Linear | ObjectiveSpec::Electricity { .. } => dim,
            ObjectiveSpec::Quadratic { q } => q.rows,
            ObjectiveSpec::MatchingLinear { n } => n * n,
            ObjectiveSpec::ShortestPathLinear { heads, .. } => heads.len(),
            ObjectiveSpec::PiecewiseNewsvendor { h, .. } => h.len(),
            ObjectiveSpec::QuadraticNewsvendor { .. } => 1,
            ObjectiveSpec::CrossFulfillSecondStage { c, .. } => c.rows * c.cols + c.rows + c.cols,
            ObjectiveSpec::FixedLinear { c } => c.len(),
        }
    }

    /// Required uncertainty length, if fixed by the family.
    pub fn u_len(&self, dim: usize) -> Option<usize> {
        match self {
            ObjectiveSpec::Linear | ObjectiveSpec::Electricity { .. } => Some(dim),
            ObjectiveSpec::Quadratic { q } => Some(q.rows),
            ObjectiveSpec::MatchingLinear { n } => Some(n * n),
            ObjectiveSpec::ShortestPathLinear { .. } => None,
            ObjectiveSpec::PiecewiseNewsvendor { h, .. } => Some(h.len()),
            ObjectiveSpec::QuadraticNewsvendor { support, .. } => Some(support.len()),
            ObjectiveSpec::CrossFulfillSecondStage { .. } | ObjectiveSpec::FixedLinear { .. } => None,
        }
    }

    /// Whether `g_u(u) = 0` and `g_u ≥ 0` by construction.
    pub fn is_loss_type(&self) -> bool {
        matches!(
            self,
            ObjectiveSpec::PiecewiseNewsvendor { .. } | ObjectiveSpec::Electricity { .. }
        )
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.block_len(dim) > dim {
            return bad("objective block longer than the variable count");
        }
        match self {
            ObjectiveSpec::PiecewiseNewsvendor { h, b } => {
                Error::check_dim("newsvendor backorder costs", h.len(), b.len())?;
                if h.iter().chain(b).any(|v| !(*v >= 0.0)) {
                    return bad("newsvendor costs must be nonnegative");
                }
            }
            ObjectiveSpec::QuadraticNewsvendor { support, q0, qb, qh, .. } => {
                if support.is_empty() {
                    return bad("quadratic newsvendor needs a nonempty support");
                }
                if !(*q0 >= 0.0 && *qb >= 0.0 && *qh >= 0.0) {
                    return bad("quadratic newsvendor curvatures must be nonnegative");
                }
            }
            ObjectiveSpec::Electricity { gamma_s, gamma_e } => {
                if !(*gamma_s >= 0.0 && *gamma_e >= 0.0) {
                    return bad("electricity costs must be nonnegative");
                }
            }
            ObjectiveSpec::CrossFulfillSecondStage { c, h, b } => {
                Error::check_dim("holding costs", c.rows, h.len())?;
                Error::check_dim("backorder costs", c.cols, b.len())?;
            }
            ObjectiveSpec::ShortestPathLinear { source, heads } => {
                if heads.iter().chain(std::iter::once(source)).any(|v| *v == usize::MAX) {
                    return bad("invalid vertex index");
                }
            }
            ObjectiveSpec::Quadratic { q } => {
                Error::check_dim("quadratic form cols", q.rows, q.cols)?;
            }
            _ => {}
        }
        Ok(())
    }

    pub fn eval(&self, u: &[f64], w: &[f64]) -> f64 {
        match self {
            ObjectiveSpec::Linear => linalg::dot(u, w),
            ObjectiveSpec::MatchingLinear { n } => linalg::dot(u, &w[..n * n]),
            ObjectiveSpec::ShortestPathLinear { source, heads } => {
                u[*source] + heads.iter().zip(w).map(|(h, x)| u[*h] * x).sum::<f64>()
            }
            ObjectiveSpec::PiecewiseNewsvendor { h, b } => (0..h.len())
                .map(|j| h[j] * (w[j] - u[j]).max(0.0) + b[j] * (u[j] - w[j]).max(0.0))
                .sum(),
            ObjectiveSpec::QuadraticNewsvendor {
                c0,
                q0,
                cb,
                qb,
                ch,
                qh,
                support,
            } => {
                let x = w[0];
                let mut s = c0 * x + 0.5 * q0 * x * x;
                for (p, d) in u.iter().zip(support) {
                    let short = (d - x).max(0.0);
                    let over = (x - d).max(0.0);
                    s += p * (cb * short + qb * short * short + ch * over + qh * over * over);
                }
                s
            }
            ObjectiveSpec::Electricity { gamma_s, gamma_e } => u
                .iter()
                .zip(w)
                .map(|(ui, wi)| {
                    let e = wi - ui;
                    gamma_s * (-e).max(0.0) + gamma_e * e.max(0.0) + 0.5 * e * e
                })
                .sum(),
            ObjectiveSpec::CrossFulfillSecondStage { c, h, b } => {
                let nm = c.data.len();
                linalg::dot(&c.data, &w[..nm])
                    + linalg::dot(h, &w[nm..nm + c.rows])
                    + linalg::dot(b, &w[nm + c.rows..nm + c.rows + c.cols])
            }
            ObjectiveSpec::FixedLinear { c } => linalg::dot(c, &w[..c.len()]),
            ObjectiveSpec::Quadratic { q } => {
                let x = &w[..q.rows];
                0.5 * linalg::dot(x, &q.matvec(x)) + linalg::dot(u, x)
            }
        }
    }

    /// `∇_w g_u(w)` over the full variable vector of length `dim`.
    ///
    /// At kinks the one-sided choice matches the tape convention: the
    /// indicator of `x > 0` is used for every `(x)⁺`.
    pub fn grad(&self, u: &[f64], w: &[f64]) -> Vec<f64> {
        let dim = w.len();
        let mut g = vec![0.0; dim];
        match self {
            ObjectiveSpec::Linear => g.copy_from_slice(u),
            ObjectiveSpec::MatchingLinear { n } => g[..n * n].copy_from_slice(u),
            ObjectiveSpec::ShortestPathLinear { heads, .. } => {
                for (gi, h) in g.iter_mut().zip(heads) {
                    *gi = u[*h];
                }
            }
            ObjectiveSpec::PiecewiseNewsvendor { h, b } => {
                for j in 0..h.len() {
                    g[j] = h[j] * step(w[j] - u[j]) - b[j] * step(u[j] - w[j]);
                }
            }
            ObjectiveSpec::QuadraticNewsvendor {
                c0,
                q0,
                cb,
                qb,
                ch,
                qh,
                support,
            } => {
                let x = w[0];
                let mut s = c0 + q0 * x;
                for (p, d) in u.iter().zip(support) {
                    s += p * (-cb * step(d - x) - 2.0 * qb * (d - x).max(0.0) + ch * step(x - d) + 2.0 * qh * (x - d).max(0.0));
                }
                g[0] = s;
            }
            ObjectiveSpec::Electricity { gamma_s, gamma_e } => {
                for i in 0..dim {
                    let e = w[i] - u[i];
                    g[i] = -gamma_s * step(-e) + gamma_e * step(e) + e;
                }
            }
            ObjectiveSpec::CrossFulfillSecondStage { c, h, b } => {
                let nm = c.data.len();
                g[..nm].copy_from_slice(&c.data);
                g[nm..nm + c.rows].copy_from_slice(h);
                g[nm + c.rows..nm + c.rows + c.cols].copy_from_slice(b);
            }
            ObjectiveSpec::FixedLinear { c } => g[..c.len()].copy_from_slice(c),
            ObjectiveSpec::Quadratic { q } => {
                let x = &w[..q.rows];
                g[..q.rows].copy_from_slice(&q.matvec(x));
                linalg::axpy(1.0, u, &mut g[..q.rows]);
            }
        }
        g
    }

    /// `g_u(w)` as a tape node.
    pub fn eval_tape(&self, tape: &mut Tape, u: Var, w: Var) -> Var {
        let dim = tape.numel(w);
        match self {
            ObjectiveSpec::Linear => tape.dot(u, w),
            ObjectiveSpec::MatchingLinear { n } => {
                let wb = block(tape, w, n * n, dim);
                tape.dot(u, wb)
            }
            ObjectiveSpec::ShortestPathLinear { source, heads } => {
                let hv = tape.gather(u, heads.clone().into());
                let wb = block(tape, w, heads.len(), dim);
                let s = tape.dot(hv, wb);
                let src = tape.slice(u, *source, 1);
                tape.add(s, src)
            }
            ObjectiveSpec::PiecewiseNewsvendor { h, b } => {
                let k = h.len();
                let wb = block(tape, w, k, dim);
                let e = tape.sub(wb, u);
                let over = tape.relu(e);
                let ne = tape.neg(e);
                let short = tape.relu(ne);
                let hv = tape.constant(h.clone());
                let bv = tape.constant(b.clone());
                let a = tape.dot(over, hv);
                let c = tape.dot(short, bv);
                tape.add(a, c)
            }
            ObjectiveSpec::QuadraticNewsvendor {
                c0,
                q0,
                cb,
                qb,
                ch,
                qh,
                support,
            } => {
                let k = support.len();
                let x = tape.slice(w, 0, 1);
                let ones = Arc::new(Matrix::from_vec(k, 1, vec![1.0; k]).expect("column of ones"));
                let xs = tape.const_matvec(&ones, x, false);
                let d = tape.constant(support.clone());
                let e = tape.sub(xs, d);
                let over = tape.relu(e);
                let ne = tape.neg(e);
                let short = tape.relu(ne);
                let over2 = tape.square(over);
                let short2 = tape.square(short);
                let a = tape.scale(short, *cb);
                let b2 = tape.scale(short2, *qb);
                let c = tape.scale(over, *ch);
                let d2 = tape.scale(over2, *qh);
                let s1 = tape.add(a, b2);
                let s2 = tape.add(c, d2);
                let per = tape.add(s1, s2);
                let exp = tape.dot(u, per);
                let lin = tape.scale(x, *c0);
                let x2 = tape.square(x);
                let quad = tape.scale(x2, 0.5 * q0);
                let base = tape.add(lin, quad);
                tape.add(base, exp)
            }
            ObjectiveSpec::Electricity { gamma_s, gamma_e } => {
                let e = tape.sub(w, u);
                let over = tape.relu(e);
                let ne = tape.neg(e);
                let short = tape.relu(ne);
                let sq = tape.square(e);
                let a = tape.sum(short);
                let a = tape.scale(a, *gamma_s);
                let b = tape.sum(over);
                let b = tape.scale(b, *gamma_e);
                let c = tape.sum(sq);
                let c = tape.scale(c, 0.5);
                let ab = tape.add(a, b);
                tape.add(ab, c)
            }
            ObjectiveSpec::CrossFulfillSecondStage { .. } | ObjectiveSpec::FixedLinear { .. } => {
                let c = self.grad(&[], &vec![0.0; dim]);
                let cv = tape.constant(c);
                tape.dot(cv, w)
            }
            ObjectiveSpec::Quadratic { q } => {
                let x = block(tape, w, q.rows, dim);
                let q = Arc::new(q.clone());
                let qw = tape.const_matvec(&q, x, false);
                let quad = tape.dot(x, qw);
                let quad = tape.scale(quad, 0.5);
                let lin = tape.dot(u, x);
                tape.add(quad, lin)
            }
        }
    }

    /// `∇_w g_u(w)` as a tape node, differentiable in both `u` and `w`
    /// wherever the gradient is locally smooth.
    pub fn grad_tape(&self, tape: &mut Tape, u: Var, w: Var) -> Var {
        let dim = tape.numel(w);
        match self {
            ObjectiveSpec::Linear => u,
            ObjectiveSpec::MatchingLinear { n } => pad(tape, u, dim - n * n),
            ObjectiveSpec::ShortestPathLinear { heads, .. } => {
                let hv = tape.gather(u, heads.clone().into());
                pad(tape, hv, dim - heads.len())
            }
            ObjectiveSpec::PiecewiseNewsvendor { .. }
            | ObjectiveSpec::CrossFulfillSecondStage { .. }
            | ObjectiveSpec::FixedLinear { .. } => {
                // Locally constant in (u, w).
                let g = self.grad(tape.value(u), tape.value(w));
                tape.constant(g)
            }
            ObjectiveSpec::QuadraticNewsvendor {
                c0,
                q0,
                cb,
                qb,
                ch,
                qh,
                support,
            } => {
                let k = support.len();
                let xv = tape.value(w)[0];
                let jumps: Vec<f64> = support
                    .iter()
                    .map(|d| -cb * step(d - xv) + ch * step(xv - d))
                    .collect();
                let x = tape.slice(w, 0, 1);
                let ones = Arc::new(Matrix::from_vec(k, 1, vec![1.0; k]).expect("column of ones"));
                let xs = tape.const_matvec(&ones, x, false);
                let d = tape.constant(support.clone());
                let e = tape.sub(xs, d);
                let over = tape.relu(e);
                let ne = tape.neg(e);
                let short = tape.relu(ne);
                let over = tape.scale(over, 2.0 * qh);
                let short = tape.scale(short, -2.0 * qb);
                let jv = tape.constant(jumps);
                let s = tape.add(over, short);
                let s = tape.add(s, jv);
                let exp = tape.dot(u, s);
                let lin = tape.scale(x, *q0);
                let lin = tape.offset(lin, *c0);
                let g0 = tape.add(lin, exp);
                pad(tape, g0, dim - 1)
            }
            ObjectiveSpec::Electricity { gamma_s, gamma_e } => {
                let uv = tape.value(u);
                let wv = tape.value(w);
                let jumps: Vec<f64> = uv
                    .iter()
                    .zip(wv)
                    .map(|(ui, wi)| -gamma_s * step(ui - wi) + gamma_e * step(wi - ui))
                    .collect();
                let jv = tape.constant(jumps);
                let e = tape.sub(w, u);
                tape.add(e, jv)
            }
            ObjectiveSpec::Quadratic { q } => {
                let n = q.rows;
                let x = block(tape, w, n, dim);
                let q = Arc::new(q.clone());
                let qw = tape.const_matvec(&q, x, false);
                let g = tape.add(qw, u);
                pad(tape, g, dim - n)
            }
        }
    }
}

#[inline]
fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn block(tape: &mut Tape, w: Var, len: usize, dim: usize) -> Var {
    if len == dim {
        w
    } else {
        tape.slice(w, 0, len)
    }
}

fn pad(tape: &mut Tape, v: Var, extra: usize) -> Var {
    if extra == 0 {
        v
    } else {
        let z = tape.constant(vec![0.0; extra]);
        tape.concat(&[v, z])
    }
}

/// Affine dependence of the constraint right-hand side on the uncertainty:
/// `rhs(u) = offset + coef · u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhsMap {
    pub offset: Vec<f64>,
    pub coef: Matrix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDescription {
    pub kind: String,
    pub dim: usize,
    pub u_dim: usize,
    pub sets: Vec<ConvexSet>,
    pub objective: ObjectiveSpec,
    pub sense: Sense,
    #[serde(default)]
    pub rhs_map: Option<RhsMap>,
    #[serde(default)]
    pub scoring: Option<ObjectiveSpec>,
    #[serde(default)]
    pub witness: Option<Vec<f64>>,
}

/// A convex problem: ordered set decomposition plus an objective family.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ProblemDescription", into = "ProblemDescription")]
pub struct Problem {
    kind: String,
    dim: usize,
    u_dim: usize,
    objective: ObjectiveSpec,
    sense: Sense,
    rhs_map: Option<Arc<RhsMap>>,
    scoring: Option<ObjectiveSpec>,
    witness: Vec<f64>,
    plan: Arc<ProjectionPlan>,
}

impl TryFrom<ProblemDescription> for Problem {
    type Error = Error;
    fn try_from(d: ProblemDescription) -> Result<Self> {
        Problem::from_description(d)
    }
}

impl From<Problem> for ProblemDescription {
    fn from(p: Problem) -> Self {
        p.description()
    }
}

impl Problem {
    pub fn from_description(d: ProblemDescription) -> Result<Self> {
        if d.dim == 0 {
            return Err(Error::InvalidParameter("problem needs at least one variable".into()));
        }
        d.objective.validate(d.dim)?;
        if let Some(n) = d.objective.u_len(d.dim) {
            Error::check_dim("uncertainty length", n, d.u_dim)?;
        }
        if let Some(s) = &d.scoring {
            s.validate(d.dim)?;
        }
        let plan = Arc::new(ProjectionPlan::new(d.dim, d.sets)?);
        if let Some(m) = &d.rhs_map {
            Error::check_dim("rhs offset", plan.rhs_len(), m.offset.len())?;
            Error::check_dim("rhs map rows", plan.rhs_len(), m.coef.rows)?;
            Error::check_dim("rhs map cols", d.u_dim, m.coef.cols)?;
        }
        let rhs0 = d.rhs_map.as_ref().map(|m| m.offset.clone());
        let witness = match d.witness {
            Some(w) => {
                Error::check_dim("witness", d.dim, w.len())?;
                w
            }
            None => plan.project_converged(&vec![0.0; d.dim], rhs0.as_deref(), 1e-12, 20_000)?,
        };
        let viol = plan.max_violation(&witness, rhs0.as_deref());
        if !(viol <= 1e-8) {
            return Err(Error::Infeasible(format!(
                "no feasible witness found (violation {viol:.3e})"
            )));
        }
        Ok(Problem {
            kind: d.kind,
            dim: d.dim,
            u_dim: d.u_dim,
            objective: d.objective,
            sense: d.sense,
            rhs_map: d.rhs_map.map(Arc::new),
            scoring: d.scoring,
            witness,
            plan,
        })
    }

    /// Problem with a static right-hand side.
    pub fn new(kind: &str, dim: usize, u_dim: usize, sets: Vec<ConvexSet>, objective: ObjectiveSpec, sense: Sense) -> Result<Self> {
        Problem::from_description(ProblemDescription {
            kind: kind.to_string(),
            dim,
            u_dim,
            sets,
            objective,
            sense,
            rhs_map: None,
            scoring: None,
            witness: None,
        })
    }

    pub fn description(&self) -> ProblemDescription {
        ProblemDescription {
            kind: self.kind.clone(),
            dim: self.dim,
            u_dim: self.u_dim,
            sets: self.plan.sets().to_vec(),
            objective: self.objective.clone(),
            sense: self.sense,
            rhs_map: self.rhs_map.as_deref().cloned(),
            scoring: self.scoring.clone(),
            witness: Some(self.witness.clone()),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn u_dim(&self) -> usize {
        self.u_dim
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    pub fn objective(&self) -> &ObjectiveSpec {
        &self.objective
    }

    pub fn scoring(&self) -> &ObjectiveSpec {
        self.scoring.as_ref().unwrap_or(&self.objective)
    }

    pub fn sets(&self) -> &[ConvexSet] {
        self.plan.sets()
    }

    pub fn plan(&self) -> &Arc<ProjectionPlan> {
        &self.plan
    }

    pub fn witness(&self) -> &[f64] {
        &self.witness
    }

    pub fn has_parametric_rhs(&self) -> bool {
        self.rhs_map.is_some()
    }

    /// Constraint right-hand side at `u`, or `None` when it is static.
    pub fn rhs(&self, u: &[f64]) -> Option<Vec<f64>> {
        self.rhs_map.as_ref().map(|m| {
            let mut r = m.coef.matvec(u);
            linalg::axpy(1.0, &m.offset, &mut r);
            r
        })
    }

    pub fn rhs_tape(&self, tape: &mut Tape, u: Var) -> Option<Var> {
        self.rhs_map.as_ref().map(|m| {
            let coef = Arc::new(m.coef.clone());
            let cu = tape.const_matvec(&coef, u, false);
            let off = tape.constant(m.offset.clone());
            tape.add(cu, off)
        })
    }

    fn check(&self, u: &[f64], w: &[f64]) -> Result<()> {
        Error::check_dim("uncertainty", self.u_dim, u.len())?;
        Error::check_dim("decision", self.dim, w.len())
    }

    /// `g_u(w)` in the problem's own sense.
    pub fn eval_objective(&self, u: &[f64], w: &[f64]) -> Result<f64> {
        self.check(u, w)?;
        Ok(self.objective.eval(u, w))
    }

    pub fn eval_gradient(&self, u: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.check(u, w)?;
        Ok(self.objective.grad(u, w))
    }

    /// Objective oriented for minimization.
    pub fn loss(&self, u: &[f64], w: &[f64]) -> f64 {
        self.sense.sign() * self.objective.eval(u, w)
    }

    pub fn loss_grad(&self, u: &[f64], w: &[f64]) -> Vec<f64> {
        let mut g = self.objective.grad(u, w);
        if self.sense == Sense::Max {
            g.iter_mut().for_each(|x| *x = -*x);
        }
        g
    }

    pub fn loss_grad_tape(&self, tape: &mut Tape, u: Var, w: Var) -> Var {
        let g = self.objective.grad_tape(tape, u, w);
        match self.sense {
            Sense::Min => g,
            Sense::Max => tape.neg(g),
        }
    }

    /// Decision cost of `w` when `u` realizes, oriented for minimization.
    pub fn cost(&self, u: &[f64], w: &[f64]) -> f64 {
        self.sense.sign() * self.scoring().eval(u, w)
    }

    pub fn cost_tape(&self, tape: &mut Tape, u: Var, w: Var) -> Var {
        let v = self.scoring().eval_tape(tape, u, w);
        match self.sense {
            Sense::Min => v,
            Sense::Max => tape.neg(v),
        }
    }

    pub fn max_violation(&self, u: &[f64], w: &[f64]) -> f64 {
        self.plan.max_violation(w, self.rhs(u).as_deref())
    }
}

/// Regret of a decision against a reference optimum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regret {
    pub value: f64,
    /// False when the reference objective is zero and `value` is absolute.
    pub relative: bool,
}

/// `(g_u(ŵ) − g_u(w★)) / |g_u(w★)|`, oriented so that positive is worse.
pub fn relative_regret(p: &Problem, u: &[f64], w_hat: &[f64], w_star: &[f64]) -> Regret {
    let a = p.cost(u, w_hat);
    let b = p.cost(u, w_star);
    let diff = a - b;
    if b.abs() <= 1e-12 {
        Regret {
            value: diff,
            relative: false,
        }
    } else {
        Regret {
            value: diff / b.abs(),
            relative: true,
        }
    }
}

/// Benchmark identifier plus size and cost parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemKind {
    /// Bipartite matching on `n + n` nodes with row/column slacks.
    Matching { n: usize },
    /// `K` products, optional shared capacity, piecewise-linear cost.
    CapacitatedNewsvendor {
        h: Vec<f64>,
        b: Vec<f64>,
        capacity: Option<f64>,
    },
    /// Newsvendor as an LP over `(w, p, q)` whose constraints carry the demand.
    LiftedNewsvendor {
        h: Vec<f64>,
        b: Vec<f64>,
        capacity: Option<f64>,
    },
    QuadraticNewsvendor {
        c0: f64,
        q0: f64,
        cb: f64,
        qb: f64,
        ch: f64,
        qh: f64,
        support: Vec<f64>,
    },
    Electricity {
        horizon: usize,
        ramp: f64,
        gamma_s: f64,
        gamma_e: f64,
    },
    /// Monotone-free path on a `grid × grid` vertex grid, top-left to bottom-right.
    ShortestPath { grid: usize },
    /// Recourse LP over `(v, p, q)` with right-hand side `(w, d)`.
    CrossFulfillSecondStage { c: Matrix, h: Vec<f64>, b: Vec<f64> },
    /// `min uᵀw` over `w₁+2w₂ ≥ 1, 2w₁+w₂ ≥ 1, w ≥ 0`.
    ToyPolytope,
    /// `min uᵀw` over the probability simplex in three variables.
    ToySimplex,
}

pub fn build_problem(kind: &ProblemKind) -> Result<Problem> {
    match kind {
        ProblemKind::Matching { n } => matching(*n),
        ProblemKind::CapacitatedNewsvendor { h, b, capacity } => capacitated_newsvendor(h, b, *capacity),
        ProblemKind::LiftedNewsvendor { h, b, capacity } => lifted_newsvendor(h, b, *capacity),
        ProblemKind::QuadraticNewsvendor {
            c0,
            q0,
            cb,
            qb,
            ch,
            qh,
            support,
        } => Problem::new(
            "quadratic-newsvendor",
            1,
            support.len(),
            vec![ConvexSet::Nonneg],
            ObjectiveSpec::QuadraticNewsvendor {
                c0: *c0,
                q0: *q0,
                cb: *cb,
                qb: *qb,
                ch: *ch,
                qh: *qh,
                support: support.clone(),
            },
            Sense::Min,
        ),
        ProblemKind::Electricity {
            horizon,
            ramp,
            gamma_s,
            gamma_e,
        } => electricity(*horizon, *ramp, *gamma_s, *gamma_e),
        ProblemKind::ShortestPath { grid } => shortest_path(*grid),
        ProblemKind::CrossFulfillSecondStage { c, h, b } => cross_fulfill_second_stage(c, h, b),
        ProblemKind::ToyPolytope => Problem::new(
            "toy-polytope",
            2,
            2,
            vec![
                ConvexSet::Halfspace {
                    a: vec![-1.0, -2.0],
                    b: -1.0,
                },
                ConvexSet::Halfspace {
                    a: vec![-2.0, -1.0],
                    b: -1.0,
                },
                ConvexSet::Nonneg,
            ],
            ObjectiveSpec::Linear,
            Sense::Min,
        ),
        ProblemKind::ToySimplex => Problem::new(
            "toy-simplex",
            3,
            3,
            vec![
                ConvexSet::Affine {
                    a: Matrix::from_vec(1, 3, vec![1.0; 3])?,
                    b: vec![1.0],
                },
                ConvexSet::Nonneg,
            ],
            ObjectiveSpec::Linear,
            Sense::Min,
        ),
    }
}

fn matching(n: usize) -> Result<Problem> {
    if n == 0 {
        return Err(Error::InvalidParameter("matching needs n ≥ 1".into()));
    }
    let e = n * n;
    let dim = e + 2 * n;
    let mut a = Matrix::zeros(2 * n, dim);
    for i in 0..n {
        for j in 0..n {
            a.set(i, i * n + j, 1.0);
            a.set(n + j, i * n + j, 1.0);
        }
    }
    for r in 0..2 * n {
        a.set(r, e + r, 1.0);
    }
    let mut witness = vec![0.0; dim];
    witness[e..].iter_mut().for_each(|s| *s = 1.0);
    Problem::from_description(ProblemDescription {
        kind: "matching".into(),
        dim,
        u_dim: e,
        sets: vec![
            ConvexSet::Affine {
                a,
                b: vec![1.0; 2 * n],
            },
            ConvexSet::Box {
                lo: vec![0.0; dim],
                hi: vec![1.0; dim],
            },
        ],
        objective: ObjectiveSpec::MatchingLinear { n },
        sense: Sense::Max,
        rhs_map: None,
        scoring: None,
        witness: Some(witness),
    })
}

fn check_newsvendor(h: &[f64], b: &[f64], capacity: Option<f64>) -> Result<()> {
    if h.is_empty() {
        return Err(Error::InvalidParameter("newsvendor needs at least one product".into()));
    }
    Error::check_dim("newsvendor backorder costs", h.len(), b.len())?;
    if let Some(c) = capacity {
        if !(c > 0.0) {
            return Err(Error::InvalidParameter("capacity must be > 0".into()));
        }
    }
    Ok(())
}

fn capacitated_newsvendor(h: &[f64], b: &[f64], capacity: Option<f64>) -> Result<Problem> {
    check_newsvendor(h, b, capacity)?;
    let k = h.len();
    let mut sets = vec![ConvexSet::Nonneg];
    if let Some(c) = capacity.filter(|c| c.is_finite()) {
        sets.push(ConvexSet::Halfspace {
            a: vec![1.0; k],
            b: c,
        });
    }
    Problem::from_description(ProblemDescription {
        kind: "capacitated-newsvendor".into(),
        dim: k,
        u_dim: k,
        sets,
        objective: ObjectiveSpec::PiecewiseNewsvendor {
            h: h.to_vec(),
            b: b.to_vec(),
        },
        sense: Sense::Min,
        rhs_map: None,
        scoring: None,
        witness: Some(vec![0.0; k]),
    })
}

/// Variables `(w, p, q)`; `p ≥ w − u` and `q ≥ u − w` become halfspaces whose
/// right-hand side carries the demand, with cost `hᵀp + bᵀq`.
fn lifted_newsvendor(h: &[f64], b: &[f64], capacity: Option<f64>) -> Result<Problem> {
    check_newsvendor(h, b, capacity)?;
    let k = h.len();
    let dim = 3 * k;
    let mut sets = Vec::new();
    let mut rows = Vec::new();
    for j in 0..k {
        let mut a = vec![0.0; dim];
        a[j] = 1.0;
        a[k + j] = -1.0;
        sets.push(ConvexSet::Halfspace { a, b: 0.0 });
        rows.push((j, 1.0));
    }
    for j in 0..k {
        let mut a = vec![0.0; dim];
        a[j] = -1.0;
        a[2 * k + j] = -1.0;
        sets.push(ConvexSet::Halfspace { a, b: 0.0 });
        rows.push((j, -1.0));
    }
    let mut offset = vec![0.0; 2 * k];
    if let Some(c) = capacity.filter(|c| c.is_finite()) {
        let mut a = vec![0.0; dim];
        a[..k].iter_mut().for_each(|x| *x = 1.0);
        sets.push(ConvexSet::Halfspace { a, b: c });
        offset.push(c);
    }
    sets.push(ConvexSet::Nonneg);
    let mut coef = Matrix::zeros(offset.len(), k);
    for (r, (j, s)) in rows.into_iter().enumerate() {
        coef.set(r, j, s);
    }
    let mut c = vec![0.0; dim];
    c[k..2 * k].copy_from_slice(h);
    c[2 * k..].copy_from_slice(b);
    Problem::from_description(ProblemDescription {
        kind: "lifted-newsvendor".into(),
        dim,
        u_dim: k,
        sets,
        objective: ObjectiveSpec::FixedLinear { c },
        sense: Sense::Min,
        rhs_map: Some(RhsMap { offset, coef }),
        scoring: Some(ObjectiveSpec::PiecewiseNewsvendor {
            h: h.to_vec(),
            b: b.to_vec(),
        }),
        witness: Some(vec![0.0; dim]),
    })
}

fn electricity(horizon: usize, ramp: f64, gamma_s: f64, gamma_e: f64) -> Result<Problem> {
    if horizon < 1 {
        return Err(Error::InvalidParameter("horizon must be ≥ 1".into()));
    }
    if !(ramp > 0.0) {
        return Err(Error::InvalidParameter("ramp limit must be > 0".into()));
    }
    let mut sets = Vec::with_capacity(2 * horizon);
    for i in 0..horizon.saturating_sub(1) {
        let mut up = vec![0.0; horizon];
        up[i + 1] = 1.0;
        up[i] = -1.0;
        let down: Vec<f64> = up.iter().map(|x| -x).collect();
        sets.push(ConvexSet::Halfspace { a: up, b: ramp });
        sets.push(ConvexSet::Halfspace { a: down, b: ramp });
    }
    sets.push(ConvexSet::Nonneg);
    Problem::from_description(ProblemDescription {
        kind: "electricity".into(),
        dim: horizon,
        u_dim: horizon,
        sets,
        objective: ObjectiveSpec::Electricity { gamma_s, gamma_e },
        sense: Sense::Min,
        rhs_map: None,
        scoring: None,
        witness: Some(vec![0.0; horizon]),
    })
}

/// Directed edges between 4-neighbours of a `grid × grid` vertex grid, in
/// row-major order of the tail and then (right, down, left, up).
pub fn grid_edges(grid: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for r in 0..grid {
        for c in 0..grid {
            let v = r * grid + c;
            if c + 1 < grid {
                edges.push((v, v + 1));
            }
            if r + 1 < grid {
                edges.push((v, v + grid));
            }
            if c > 0 {
                edges.push((v, v - 1));
            }
            if r > 0 {
                edges.push((v, v - grid));
            }
        }
    }
    edges
}

/// Unit flow from vertex 0 to the last vertex; conservation rows for every
/// vertex except the sink, flows boxed to `[0, 1]`.
fn shortest_path(grid: usize) -> Result<Problem> {
    if grid < 2 {
        return Err(Error::InvalidParameter("shortest path needs grid side ≥ 2".into()));
    }
    let nv = grid * grid;
    let edges = grid_edges(grid);
    let ne = edges.len();
    let sink = nv - 1;
    let mut a = Matrix::zeros(nv - 1, ne);
    let mut b = vec![0.0; nv - 1];
    b[0] = 1.0;
    for (e, (t, h)) in edges.iter().enumerate() {
        if *t != sink {
            a.set(*t, e, 1.0);
        }
        if *h != sink {
            a.set(*h, e, -1.0);
        }
    }
    // Witness: along the top row, then down the last column.
    let mut witness = vec![0.0; ne];
    let mut v = 0;
    while v != sink {
        let next = if v % grid + 1 < grid { v + 1 } else { v + grid };
        let e = edges.iter().position(|x| *x == (v, next)).expect("grid edge");
        witness[e] = 1.0;
        v = next;
    }
    Problem::from_description(ProblemDescription {
        kind: "shortest-path".into(),
        dim: ne,
        u_dim: nv,
        sets: vec![
            ConvexSet::Affine { a, b },
            ConvexSet::Box {
                lo: vec![0.0; ne],
                hi: vec![1.0; ne],
            },
        ],
        objective: ObjectiveSpec::ShortestPathLinear {
            source: 0,
            heads: edges.iter().map(|e| e.1).collect(),
        },
        sense: Sense::Min,
        rhs_map: None,
        scoring: None,
        witness: Some(witness),
    })
}

/// Variables `(v, p, q)` with `Σ_j v_ij + p_i = w_i` and `Σ_i v_ij + q_j = d_j`,
/// all nonnegative; the uncertainty is `(w, d)`.
fn cross_fulfill_second_stage(c: &Matrix, h: &[f64], b: &[f64]) -> Result<Problem> {
    let (n, m) = (c.rows, c.cols);
    if n == 0 || m == 0 {
        return Err(Error::InvalidParameter("cross-fulfillment needs warehouses and clients".into()));
    }
    let nm = n * m;
    let dim = nm + n + m;
    let mut a = Matrix::zeros(n + m, dim);
    for i in 0..n {
        for j in 0..m {
            a.set(i, i * m + j, 1.0);
            a.set(n + j, i * m + j, 1.0);
        }
        a.set(i, nm + i, 1.0);
    }
    for j in 0..m {
        a.set(n + j, nm + n + j, 1.0);
    }
    Problem::from_description(ProblemDescription {
        kind: "cross-fulfill-second-stage".into(),
        dim,
        u_dim: n + m,
        sets: vec![
            ConvexSet::Affine {
                a,
                b: vec![0.0; n + m],
            },
            ConvexSet::Nonneg,
        ],
        objective: ObjectiveSpec::CrossFulfillSecondStage {
            c: c.clone(),
            h: h.to_vec(),
            b: b.to_vec(),
        },
        sense: Sense::Min,
        rhs_map: Some(RhsMap {
            offset: vec![0.0; n + m],
            coef: Matrix::identity(n + m),
        }),
        scoring: None,
        witness: Some(vec![0.0; dim]),
    })
}

/// Rewrites every halfspace `aᵀw ≤ b` as `aᵀw + s = b, s ≥ 0`.
///
/// Supports static affine, halfspace, nonneg and box sets; new slack
/// coordinates are appended after the original variables.
pub fn slack_form(p: &Problem) -> Result<Problem> {
    if p.has_parametric_rhs() {
        return Err(Error::InvalidParameter("slack form needs a static right-hand side".into()));
    }
    let d = p.dim();
    let halfspaces: Vec<(&Vec<f64>, f64)> = p
        .sets()
        .iter()
        .filter_map(|s| match s {
            ConvexSet::Halfspace { a, b } => Some((a, *b)),
            _ => None,
        })
        .collect();
    let ns = halfspaces.len();
    let dim = d + ns;
    let mut sets = Vec::new();
    let mut affine_rows: Vec<Vec<f64>> = Vec::new();
    let mut affine_b = Vec::new();
    for s in p.sets() {
        if let ConvexSet::Affine { a, b } = s {
            for r in 0..a.rows {
                let mut row = a.row(r).to_vec();
                row.resize(dim, 0.0);
                affine_rows.push(row);
                affine_b.push(b[r]);
            }
        }
    }
    for (k, (a, b)) in halfspaces.iter().enumerate() {
        let mut row = (*a).clone();
        row.resize(dim, 0.0);
        row[d + k] = 1.0;
        affine_rows.push(row);
        affine_b.push(*b);
    }
    if !affine_rows.is_empty() {
        sets.push(ConvexSet::Affine {
            a: Matrix::from_rows(&affine_rows)?,
            b: affine_b,
        });
    }
    let mut has_nonneg = false;
    for s in p.sets() {
        match s {
            ConvexSet::Nonneg => {
                has_nonneg = true;
                sets.push(ConvexSet::Nonneg);
            }
            ConvexSet::Box { lo, hi } => {
                let mut lo = lo.clone();
                let mut hi = hi.clone();
                lo.resize(dim, 0.0);
                hi.resize(dim, f64::INFINITY);
                sets.push(ConvexSet::Box { lo, hi });
            }
            ConvexSet::Simplex { .. } => {
                return Err(Error::InvalidParameter("slack form does not rewrite simplex sets".into()));
            }
            _ => {}
        }
    }
    if !has_nonneg && ns > 0 {
        let mut lo = vec![f64::NEG_INFINITY; dim];
        let hi = vec![f64::INFINITY; dim];
        lo[d..].iter_mut().for_each(|x| *x = 0.0);
        sets.push(ConvexSet::Box { lo, hi });
    }
    let objective = match p.objective() {
        ObjectiveSpec::Linear => {
            return Err(Error::InvalidParameter(
                "slack form of a full-length linear objective needs a fixed cost; use FixedLinear".into(),
            ))
        }
        other => other.clone(),
    };
    let mut witness = p.witness().to_vec();
    for (a, b) in &halfspaces {
        witness.push(b - linalg::dot(a, p.witness()));
    }
    Problem::from_description(ProblemDescription {
        kind: format!("{}-slack", p.kind()),
        dim,
        u_dim: p.u_dim(),
        sets,
        objective,
        sense: p.sense(),
        rhs_map: None,
        scoring: p.scoring.clone(),
        witness: Some(witness),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;

    fn nv(h: f64, b: f64, k: usize, cap: Option<f64>) -> Problem {
        build_problem(&ProblemKind::CapacitatedNewsvendor {
            h: vec![h; k],
            b: vec![b; k],
            capacity: cap,
        })
        .unwrap()
    }

    #[test]
    fn matching_has_slacks() {
        let p = build_problem(&ProblemKind::Matching { n: 50 }).unwrap();
        assert_eq!(p.u_dim(), 2500);
        assert_eq!(p.dim(), 2500 + 100);
        assert_eq!(p.sense(), Sense::Max);
    }

    #[test]
    fn uncapacitated_newsvendor_is_orthant() {
        let p = nv(1.0, 2.0, 1, None);
        assert_eq!(p.sets(), &[ConvexSet::Nonneg]);
        let p = nv(1.0, 2.0, 1, Some(f64::INFINITY));
        assert_eq!(p.sets().len(), 1);
    }

    #[test]
    fn electricity_ramp_pairs() {
        let p = build_problem(&ProblemKind::Electricity {
            horizon: 24,
            ramp: 0.4,
            gamma_s: 50.0,
            gamma_e: 0.5,
        })
        .unwrap();
        let hs = p
            .sets()
            .iter()
            .filter(|s| matches!(s, ConvexSet::Halfspace { .. }))
            .count();
        assert_eq!(hs, 46);
        assert_eq!(p.sets().last(), Some(&ConvexSet::Nonneg));
        let u: Vec<f64> = (0..24).map(|i| 1.0 + (i as f64 * 0.3).sin()).collect();
        let w: Vec<f64> = u.iter().map(|x| x + 1.0).collect();
        assert!((p.eval_objective(&u, &w).unwrap() - 24.0).abs() < 1e-12);
    }

    #[test]
    fn newsvendor_examples() {
        let p = nv(1.0, 2.0, 1, None);
        assert_eq!(p.eval_objective(&[1.0], &[1.0]).unwrap(), 0.0);
        assert_eq!(p.eval_objective(&[1.0], &[0.0]).unwrap(), 2.0);
        let p = nv(1.0, 2.0, 3, None);
        assert_eq!(p.eval_gradient(&[0.1, 0.2, 0.3], &[1.0, 1.0, 1.0]).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn linear_gradient_is_cost() {
        let p = build_problem(&ProblemKind::ToyPolytope).unwrap();
        assert_eq!(p.eval_gradient(&[0.3, 0.7], &[5.0, 1.0]).unwrap(), vec![0.3, 0.7]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = nv(1.0, 2.0, 2, None);
        assert!(matches!(
            p.eval_objective(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(build_problem(&ProblemKind::ShortestPath { grid: 1 }).is_err());
        assert!(build_problem(&ProblemKind::CapacitatedNewsvendor {
            h: vec![1.0],
            b: vec![1.0],
            capacity: Some(0.0)
        })
        .is_err());
    }

    #[test]
    fn empty_region_is_infeasible() {
        let r = Problem::new(
            "empty",
            1,
            1,
            vec![
                ConvexSet::Halfspace { a: vec![1.0], b: -1.0 },
                ConvexSet::Nonneg,
            ],
            ObjectiveSpec::Linear,
            Sense::Min,
        );
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn witnesses_are_feasible() {
        let c = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        for k in [
            ProblemKind::Matching { n: 4 },
            ProblemKind::ShortestPath { grid: 4 },
            ProblemKind::ToyPolytope,
            ProblemKind::ToySimplex,
            ProblemKind::LiftedNewsvendor {
                h: vec![1.0; 3],
                b: vec![2.0; 3],
                capacity: Some(2.0),
            },
            ProblemKind::CrossFulfillSecondStage {
                c,
                h: vec![0.5; 2],
                b: vec![3.0; 2],
            },
        ] {
            let p = build_problem(&k).unwrap();
            let u0 = vec![0.0; p.u_dim()];
            assert!(p.max_violation(&u0, p.witness()) <= 1e-8, "{k:?}");
        }
    }

    #[test]
    fn problem_round_trips_through_json() {
        let p = build_problem(&ProblemKind::LiftedNewsvendor {
            h: vec![1.0, 0.5],
            b: vec![2.0, 4.0],
            capacity: Some(3.0),
        })
        .unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let q: Problem = serde_json::from_str(&s).unwrap();
        assert_eq!(q.description().sets, p.description().sets);
        assert_eq!(q.rhs(&[0.5, 1.5]), p.rhs(&[0.5, 1.5]));
    }

    #[test]
    fn lifted_newsvendor_rhs_carries_demand() {
        let p = build_problem(&ProblemKind::LiftedNewsvendor {
            h: vec![1.0; 2],
            b: vec![2.0; 2],
            capacity: Some(5.0),
        })
        .unwrap();
        assert_eq!(p.rhs(&[0.3, 0.7]).unwrap(), vec![0.3, 0.7, -0.3, -0.7, 5.0]);
        // At the tight lift the LP cost equals the newsvendor cost.
        let (u, w) = ([0.3, 0.7], [0.5, 0.2]);
        let lifted = [0.5, 0.2, 0.2, 0.0, 0.0, 0.5];
        assert!(p.max_violation(&u, &lifted) <= 1e-15);
        assert!((p.objective().eval(&u, &lifted) - p.cost(&u, &lifted)).abs() < 1e-15);
        assert!((p.cost(&u, &lifted) - (1.0 * 0.2 + 2.0 * 0.5)).abs() < 1e-15);
        let _ = w;
    }

    #[test]
    fn relative_regret_examples() {
        let p = nv(1.0, 2.0, 1, None);
        // g(ŵ) = 11, g(w★) = 10 under demand 0 with holding cost 1.
        let r = relative_regret(&p, &[0.0], &[11.0], &[10.0]);
        assert!((r.value - 0.1).abs() < 1e-15 && r.relative);
        let r = relative_regret(&p, &[1.0], &[1.0], &[1.0]);
        assert_eq!(r.value, 0.0);
        assert!(!r.relative);
    }

    #[test]
    fn quadratic_newsvendor_gradient_matches_finite_differences() {
        let spec = ObjectiveSpec::QuadraticNewsvendor {
            c0: 1.0,
            q0: 0.4,
            cb: 5.0,
            qb: 1.5,
            ch: 0.5,
            qh: 0.8,
            support: vec![1.0, 2.5, 4.0, 6.0],
        };
        let u = [0.1, 0.4, 0.3, 0.2];
        for x in [0.3, 1.7, 3.1, 5.2, 7.0] {
            let g = spec.grad(&u, &[x])[0];
            let h = 1e-6;
            let fd = (spec.eval(&u, &[x + h]) - spec.eval(&u, &[x - h])) / (2.0 * h);
            assert!((g - fd).abs() / (fd.abs() + h) <= 1e-4, "x={x}");
        }
    }

    fn families() -> Vec<(ObjectiveSpec, usize, usize)> {
        let c = Matrix::from_rows(&[vec![0.0, 1.0, 2.0], vec![1.5, 0.0, 1.0]]).unwrap();
        vec![
            (ObjectiveSpec::Linear, 3, 3),
            (ObjectiveSpec::MatchingLinear { n: 2 }, 8, 4),
            (
                ObjectiveSpec::ShortestPathLinear {
                    source: 0,
                    heads: vec![1, 2, 3, 0],
                },
                4,
                4,
            ),
            (
                ObjectiveSpec::PiecewiseNewsvendor {
                    h: vec![1.0, 0.5, 2.0],
                    b: vec![2.0, 3.0, 1.0],
                },
                3,
                3,
            ),
            (
                ObjectiveSpec::QuadraticNewsvendor {
                    c0: 1.0,
                    q0: 0.4,
                    cb: 5.0,
                    qb: 1.5,
                    ch: 0.5,
                    qh: 0.8,
                    support: vec![0.5, 1.0, 2.0],
                },
                1,
                3,
            ),
            (
                ObjectiveSpec::Electricity {
                    gamma_s: 50.0,
                    gamma_e: 0.5,
                },
                4,
                4,
            ),
            (
                ObjectiveSpec::CrossFulfillSecondStage {
                    c,
                    h: vec![0.2, 0.3],
                    b: vec![4.0, 4.0, 5.0],
                },
                11,
                5,
            ),
            (ObjectiveSpec::FixedLinear { c: vec![0.0, 1.0, 2.0] }, 3, 3),
            (
                ObjectiveSpec::Quadratic {
                    q: Matrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]).unwrap(),
                },
                2,
                2,
            ),
        ]
    }

    #[test]
    fn tape_objectives_agree_with_plain_evaluation() {
        for (spec, d, k) in families() {
            let u: Vec<f64> = (0..k).map(|i| 0.2 + 0.37 * i as f64).collect();
            let w: Vec<f64> = (0..d).map(|i| 1.1 - 0.29 * i as f64).collect();
            let mut t = Tape::new();
            let uv = t.constant(u.clone());
            let wv = t.constant(w.clone());
            let e = spec.eval_tape(&mut t, uv, wv);
            let g = spec.grad_tape(&mut t, uv, wv);
            assert!((t.scalar_value(e) - spec.eval(&u, &w)).abs() < 1e-12, "{spec:?}");
            assert!(linalg::max_abs_diff(t.value(g), &spec.grad(&u, &w)) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn every_family_gradient_matches_finite_differences() {
        for (spec, d, k) in families() {
            let u: Vec<f64> = (0..k).map(|i| 0.2 + 0.37 * i as f64).collect();
            let w: Vec<f64> = (0..d).map(|i| 1.13 - 0.29 * i as f64).collect();
            let r = finite_diff_check(
                |t, p| {
                    let uv = t.constant(u.clone());
                    Ok(spec.eval_tape(t, uv, p))
                },
                &w,
                1e-6,
            )
            .unwrap();
            assert!(r.max_deviation <= 1e-4, "{spec:?}: {r:?}");
            let g = spec.grad(&u, &w);
            let mut t = Tape::new();
            let uv = t.constant(u.clone());
            let wv = t.param(w.clone());
            let e = spec.eval_tape(&mut t, uv, wv);
            let tg = t.backward(e).wrt(wv, d);
            assert!(linalg::max_abs_diff(&tg, &g) < 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn slack_form_preserves_feasibility_structure() {
        let p = Problem::new(
            "lp",
            2,
            2,
            vec![
                ConvexSet::Halfspace { a: vec![1.0, 1.0], b: 1.0 },
                ConvexSet::Nonneg,
            ],
            ObjectiveSpec::Quadratic { q: Matrix::identity(2) },
            Sense::Min,
        )
        .unwrap();
        let s = slack_form(&p).unwrap();
        assert_eq!(s.dim(), 3);
        let w = [0.25, 0.5, 0.25];
        assert!(s.max_violation(&[0.0, 0.0], &w) < 1e-15);
    }

    proptest! {
        #[test]
        fn loss_type_families_vanish_at_u(u in proptest::collection::vec(0.0f64..5.0, 4), w in proptest::collection::vec(-1.0f64..6.0, 4)) {
            let nvs = ObjectiveSpec::PiecewiseNewsvendor { h: vec![1.0, 0.5, 2.0, 1.0], b: vec![2.0, 3.0, 1.0, 4.0] };
            let el = ObjectiveSpec::Electricity { gamma_s: 50.0, gamma_e: 0.5 };
            for spec in [nvs, el] {
                prop_assert_eq!(spec.eval(&u, &u), 0.0);
                prop_assert!(spec.eval(&u, &w) >= 0.0);
            }
        }

        #[test]
        fn objectives_are_midpoint_convex(
            a in proptest::collection::vec(-2.0f64..2.0, 11),
            b in proptest::collection::vec(-2.0f64..2.0, 11),
            u in proptest::collection::vec(0.0f64..1.0, 5),
        ) {
            for (spec, d, k) in families() {
                let (wa, wb) = (&a[..d], &b[..d]);
                let uu = &u[..k];
                let mid: Vec<f64> = wa.iter().zip(wb).map(|(x, y)| 0.5 * (x + y)).collect();
                let lhs = spec.eval(uu, &mid);
                let rhs = 0.5 * (spec.eval(uu, wa) + spec.eval(uu, wb));
                prop_assert!(lhs <= rhs + 1e-12, "{:?}", spec);
            }
        }
    }
}
