//! Elementary Euclidean projections and Dykstra's alternating projection.
//!
//! Sets are visited in construction order on every cycle. Affine sets skip
//! their Dykstra correction (the projection of `x + Aᵀλ` equals that of `x`),
//! halfspace corrections are stored as a scalar multiple of the normal, and
//! the remaining sets keep a full correction vector.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky, Matrix};

/// One convex set in a feasible-region decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConvexSet {
    /// `{w : A w = b}`.
    Affine { a: Matrix, b: Vec<f64> },
    /// `{w : aᵀw ≤ b}`.
    Halfspace { a: Vec<f64>, b: f64 },
    /// `{w : w ≥ 0}`.
    Nonneg,
    /// `{w : lo ≤ w ≤ hi}`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// `{w : w ≥ 0, Σw = total}`.
    Simplex { total: f64 },
}

impl ConvexSet {
    /// Number of right-hand-side entries this set exposes to a parametric RHS.
    pub fn rhs_len(&self) -> usize {
        match self {
            ConvexSet::Affine { b, .. } => b.len(),
            ConvexSet::Halfspace { .. } => 1,
            _ => 0,
        }
    }

    fn rhs(&self) -> Vec<f64> {
        match self {
            ConvexSet::Affine { b, .. } => b.clone(),
            ConvexSet::Halfspace { b, .. } => vec![*b],
            _ => Vec::new(),
        }
    }
}

pub fn project_affine(a: &Matrix, b: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    let c = affine_factor(a)?;
    Ok(affine_apply(a, &c, b, w))
}

pub fn project_nonneg(w: &[f64]) -> Vec<f64> {
    w.iter().map(|x| x.max(0.0)).collect()
}

pub fn project_halfspace(a: &[f64], b: f64, w: &[f64]) -> Result<Vec<f64>> {
    let n2 = linalg::dot(a, a);
    if !(n2 > 0.0) {
        return Err(Error::InvalidParameter("halfspace normal is zero".into()));
    }
    let s = linalg::dot(a, w) - b;
    let mut out = w.to_vec();
    if s > 0.0 {
        linalg::axpy(-s / n2, a, &mut out);
    }
    Ok(out)
}

pub fn project_box(lo: &[f64], hi: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
        return Err(Error::InvalidParameter("box bounds inverted".into()));
    }
    Ok(w.iter()
        .zip(lo.iter().zip(hi))
        .map(|(x, (l, h))| x.clamp(*l, *h))
        .collect())
}

/// Sort-based projection onto `{w ≥ 0, Σw = total}`.
pub fn project_simplex(total: f64, w: &[f64]) -> Vec<f64> {
    let theta = simplex_threshold(total, w);
    w.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn simplex_threshold(total: f64, w: &[f64]) -> f64 {
    let mut s = w.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, v) in s.iter().enumerate() {
        cum += v;
        let t = (cum - total) / (j + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    theta
}

fn affine_factor(a: &Matrix) -> Result<Cholesky> {
    let aat = a.matmul(&a.transpose());
    Cholesky::new(&aat, 1e-10)
}

fn affine_apply(a: &Matrix, c: &Cholesky, b: &[f64], w: &[f64]) -> Vec<f64> {
    let r = linalg::sub(&a.matvec(w), b);
    let y = c.solve(&r);
    let mut out = w.to_vec();
    for (i, yi) in y.iter().enumerate() {
        linalg::axpy(-yi, a.row(i), &mut out);
    }
    out
}

enum Compiled {
    Affine {
        a: Arc<Matrix>,
        chol: Cholesky,
        rhs: usize,
    },
    Halfspace {
        idx: Vec<usize>,
        val: Vec<f64>,
        norm2: f64,
        rhs: usize,
    },
    Nonneg,
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Simplex {
        total: f64,
    },
}

/// Ordered set list with cached factorizations, ready for Dykstra cycles.
pub struct ProjectionPlan {
    dim: usize,
    sets: Vec<ConvexSet>,
    compiled: Vec<Compiled>,
    rhs_len: usize,
    static_rhs: Vec<f64>,
}

impl std::fmt::Debug for ProjectionPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProjectionPlan")
            .field("dim", &self.dim)
            .field("sets", &self.sets.len())
            .finish()
    }
}

/// Per-step record needed by the reverse sweep.
enum Step {
    Affine,
    Halfspace(bool),
    Mask(Vec<bool>),
}

impl ProjectionPlan {
    pub fn new(dim: usize, sets: Vec<ConvexSet>) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::InvalidParameter("projection plan needs at least one set".into()));
        }
        let mut compiled = Vec::with_capacity(sets.len());
        let mut rhs = 0;
        for s in &sets {
            compiled.push(match s {
                ConvexSet::Affine { a, b } => {
                    Error::check_dim("affine columns", dim, a.cols)?;
                    Error::check_dim("affine rhs", a.rows, b.len())?;
                    let chol = affine_factor(a)?;
                    let c = Compiled::Affine {
                        a: Arc::new(a.clone()),
                        chol,
                        rhs,
                    };
                    rhs += a.rows;
                    c
                }
                ConvexSet::Halfspace { a, .. } => {
                    Error::check_dim("halfspace normal", dim, a.len())?;
                    let mut idx = Vec::new();
                    let mut val = Vec::new();
                    for (i, v) in a.iter().enumerate() {
                        if *v != 0.0 {
                            idx.push(i);
                            val.push(*v);
                        }
                    }
                    let norm2 = linalg::dot(&val, &val);
                    if !(norm2 > 0.0) {
                        return Err(Error::InvalidParameter("halfspace normal is zero".into()));
                    }
                    let c = Compiled::Halfspace {
                        idx,
                        val,
                        norm2,
                        rhs,
                    };
                    rhs += 1;
                    c
                }
                ConvexSet::Nonneg => Compiled::Nonneg,
                ConvexSet::Box { lo, hi } => {
                    Error::check_dim("box lower bound", dim, lo.len())?;
                    Error::check_dim("box upper bound", dim, hi.len())?;
                    if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                        return Err(Error::InvalidParameter("box bounds inverted".into()));
                    }
                    Compiled::Box {
                        lo: lo.clone(),
                        hi: hi.clone(),
                    }
                }
                ConvexSet::Simplex { total } => {
                    if !(*total > 0.0) {
                        return Err(Error::InvalidParameter("simplex total must be > 0".into()));
                    }
                    Compiled::Simplex { total: *total }
                }
            });
        }
        let static_rhs = sets.iter().flat_map(ConvexSet::rhs).collect();
        Ok(ProjectionPlan {
            dim,
            sets,
            compiled,
            rhs_len: rhs,
            static_rhs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sets(&self) -> &[ConvexSet] {
        &self.sets
    }

    /// Length of the concatenated affine/halfspace right-hand side.
    pub fn rhs_len(&self) -> usize {
        self.rhs_len
    }

    pub fn static_rhs(&self) -> &[f64] {
        &self.static_rhs
    }

    /// `k` Dykstra cycles from `w` with the construction-time right-hand side.
    pub fn project(&self, w: &[f64], cycles: usize) -> Result<Vec<f64>> {
        self.project_with_rhs(w, None, cycles)
    }

    pub fn project_with_rhs(&self, w: &[f64], rhs: Option<&[f64]>, cycles: usize) -> Result<Vec<f64>> {
        self.validate(w, rhs, cycles)?;
        Ok(self.run(w, rhs.unwrap_or(&self.static_rhs), cycles, None))
    }

    /// Exact projection for a single set; otherwise Dykstra cycles until one
    /// full cycle changes neither the iterate nor the corrections by more than
    /// `tol`.
    pub fn project_converged(&self, w: &[f64], rhs: Option<&[f64]>, tol: f64, max_cycles: usize) -> Result<Vec<f64>> {
        self.validate(w, rhs, 1)?;
        let rhs = rhs.unwrap_or(&self.static_rhs);
        if self.sets.len() == 1 {
            return Ok(self.run(w, rhs, 1, None));
        }
        let mut state = DykstraState::new(self, w);
        for _ in 0..max_cycles {
            let before_x = state.x.clone();
            let before_z = state.z.clone();
            state.cycle(self, rhs, None);
            let dz = before_z
                .iter()
                .zip(&state.z)
                .map(|(a, b)| linalg::max_abs_diff(a, b))
                .fold(0.0, f64::max);
            if linalg::max_abs_diff(&before_x, &state.x).max(dz) <= tol {
                break;
            }
        }
        Ok(state.x)
    }

    fn validate(&self, w: &[f64], rhs: Option<&[f64]>, cycles: usize) -> Result<()> {
        Error::check_dim("projection input", self.dim, w.len())?;
        if let Some(r) = rhs {
            Error::check_dim("projection rhs", self.rhs_len, r.len())?;
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::non_finite("projection rhs"));
            }
        }
        if cycles == 0 {
            return Err(Error::InvalidParameter("Dykstra needs k ≥ 1 cycles".into()));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("projection input"));
        }
        Ok(())
    }

    fn run(&self, w: &[f64], rhs: &[f64], cycles: usize, mut trace: Option<&mut Vec<Step>>) -> Vec<f64> {
        let mut state = DykstraState::new(self, w);
        for _ in 0..cycles {
            state.cycle(self, rhs, trace.as_deref_mut());
        }
        state.x
    }

    /// Largest constraint violation of `w` over all sets.
    pub fn max_violation(&self, w: &[f64], rhs: Option<&[f64]>) -> f64 {
        let rhs = rhs.unwrap_or(&self.static_rhs);
        let mut worst: f64 = 0.0;
        for c in &self.compiled {
            let v = match c {
                Compiled::Affine { a, rhs: o, .. } => a
                    .matvec(w)
                    .iter()
                    .zip(&rhs[*o..*o + a.rows])
                    .map(|(x, b)| (x - b).abs())
                    .fold(0.0, f64::max),
                Compiled::Halfspace { idx, val, rhs: o, .. } => {
                    let s: f64 = idx.iter().zip(val).map(|(i, v)| w[*i] * v).sum();
                    (s - rhs[*o]).max(0.0)
                }
                Compiled::Nonneg => w.iter().map(|x| (-x).max(0.0)).fold(0.0, f64::max),
                Compiled::Box { lo, hi } => w
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .map(|(x, (l, h))| (l - x).max(x - h).max(0.0))
                    .fold(0.0, f64::max),
                Compiled::Simplex { total } => {
                    let neg = w.iter().map(|x| (-x).max(0.0)).fold(0.0, f64::max);
                    neg.max((w.iter().sum::<f64>() - total).abs())
                }
            };
            worst = worst.max(v);
        }
        worst
    }

    /// Differentiable `k`-cycle projection of `w` on a tape.
    ///
    /// When `rhs` is given it replaces the construction-time right-hand side
    /// and receives gradients.
    pub fn project_var(self: &Arc<Self>, tape: &mut Tape, w: Var, rhs: Option<Var>, cycles: usize) -> Result<Var> {
        let wv = tape.value(w).to_vec();
        let rv = rhs.map(|r| tape.value(r).to_vec());
        self.validate(&wv, rv.as_deref(), cycles)?;
        let rhs_vals = rv.unwrap_or_else(|| self.static_rhs.clone());
        let mut trace = Vec::with_capacity(cycles * self.sets.len());
        let out = self.run(&wv, &rhs_vals, cycles, Some(&mut trace));
        let mut inputs = vec![w];
        if let Some(r) = rhs {
            inputs.push(r);
        }
        let op = DykstraOp {
            plan: Arc::clone(self),
            trace,
        };
        Ok(tape.custom(inputs, out, Box::new(op)))
    }

    /// Reverse sweep: returns `(w̄, rhs̄)`.
    fn backward(&self, trace: &[Step], out_adj: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nsets = self.compiled.len();
        let mut xbar = out_adj.to_vec();
        let mut rbar = vec![0.0; self.rhs_len];
        let mut zbar: Vec<Vec<f64>> = self
            .compiled
            .iter()
            .map(|c| match c {
                Compiled::Affine { .. } => Vec::new(),
                Compiled::Halfspace { .. } => vec![0.0],
                _ => vec![0.0; self.dim],
            })
            .collect();
        for (s, step) in trace.iter().enumerate().rev() {
            let j = s % nsets;
            match (&self.compiled[j], step) {
                (Compiled::Affine { a, chol, rhs }, Step::Affine) => {
                    let y = chol.solve(&a.matvec(&xbar));
                    for (i, yi) in y.iter().enumerate() {
                        linalg::axpy(-yi, a.row(i), &mut xbar);
                        rbar[rhs + i] += yi;
                    }
                }
                (
                    Compiled::Halfspace {
                        idx,
                        val,
                        norm2,
                        rhs,
                    },
                    Step::Halfspace(active),
                ) => {
                    if *active {
                        let ax: f64 = idx.iter().zip(val).map(|(i, v)| xbar[*i] * v).sum();
                        let sbar = (zbar[j][0] - ax) / norm2;
                        for (i, v) in idx.iter().zip(val) {
                            xbar[*i] += sbar * v;
                        }
                        rbar[*rhs] -= sbar;
                    }
                    zbar[j][0] = idx.iter().zip(val).map(|(i, v)| xbar[*i] * v).sum();
                }
                (Compiled::Nonneg | Compiled::Box { .. }, Step::Mask(m)) => {
                    let z = &mut zbar[j];
                    for i in 0..self.dim {
                        let y = if m[i] { xbar[i] } else { z[i] };
                        xbar[i] = y;
                        z[i] = y;
                    }
                }
                (Compiled::Simplex { .. }, Step::Mask(m)) => {
                    let z = &mut zbar[j];
                    let cnt = m.iter().filter(|b| **b).count();
                    let mean = if cnt > 0 {
                        (0..self.dim)
                            .filter(|i| m[*i])
                            .map(|i| xbar[i] - z[i])
                            .sum::<f64>()
                            / cnt as f64
                    } else {
                        0.0
                    };
                    for i in 0..self.dim {
                        let jx = if m[i] { xbar[i] - z[i] - mean } else { 0.0 };
                        let y = jx + z[i];
                        xbar[i] = y;
                        z[i] = y;
                    }
                }
                _ => unreachable!("trace does not match plan"),
            }
        }
        (xbar, rbar)
    }
}

struct DykstraState {
    x: Vec<f64>,
    z: Vec<Vec<f64>>,
}

impl DykstraState {
    fn new(plan: &ProjectionPlan, w: &[f64]) -> Self {
        let z = plan
            .compiled
            .iter()
            .map(|c| match c {
                Compiled::Affine { .. } => Vec::new(),
                Compiled::Halfspace { .. } => vec![0.0],
                _ => vec![0.0; plan.dim],
            })
            .collect();
        DykstraState { x: w.to_vec(), z }
    }

    fn cycle(&mut self, plan: &ProjectionPlan, rhs: &[f64], mut trace: Option<&mut Vec<Step>>) {
        for (j, c) in plan.compiled.iter().enumerate() {
            let x = &mut self.x;
            let z = &mut self.z[j];
            let step = match c {
                Compiled::Affine { a, chol, rhs: o } => {
                    *x = affine_apply(a, chol, &rhs[*o..*o + a.rows], x);
                    Step::Affine
                }
                Compiled::Halfspace {
                    idx,
                    val,
                    norm2,
                    rhs: o,
                } => {
                    let alpha = z[0];
                    let mut s = -rhs[*o];
                    for (i, v) in idx.iter().zip(val) {
                        x[*i] += alpha * v;
                        s += x[*i] * v;
                    }
                    let active = s > 0.0;
                    if active {
                        let beta = s / norm2;
                        for (i, v) in idx.iter().zip(val) {
                            x[*i] -= beta * v;
                        }
                        z[0] = beta;
                    } else {
                        z[0] = 0.0;
                    }
                    Step::Halfspace(active)
                }
                Compiled::Nonneg => {
                    let mut mask = Vec::with_capacity(if trace.is_some() { x.len() } else { 0 });
                    for i in 0..x.len() {
                        let y = x[i] + z[i];
                        let keep = y > 0.0;
                        x[i] = if keep { y } else { 0.0 };
                        z[i] = y - x[i];
                        if trace.is_some() {
                            mask.push(keep);
                        }
                    }
                    Step::Mask(mask)
                }
                Compiled::Box { lo, hi } => {
                    let mut mask = Vec::with_capacity(if trace.is_some() { x.len() } else { 0 });
                    for i in 0..x.len() {
                        let y = x[i] + z[i];
                        let inside = y > lo[i] && y < hi[i];
                        x[i] = y.clamp(lo[i], hi[i]);
                        z[i] = y - x[i];
                        if trace.is_some() {
                            mask.push(inside);
                        }
                    }
                    Step::Mask(mask)
                }
                Compiled::Simplex { total } => {
                    let y: Vec<f64> = x.iter().zip(z.iter()).map(|(a, b)| a + b).collect();
                    let theta = simplex_threshold(*total, &y);
                    let mut mask = Vec::with_capacity(if trace.is_some() { x.len() } else { 0 });
                    for i in 0..x.len() {
                        let v = y[i] - theta;
                        x[i] = v.max(0.0);
                        z[i] = y[i] - x[i];
                        if trace.is_some() {
                            mask.push(v > 0.0);
                        }
                    }
                    Step::Mask(mask)
                }
            };
            if let Some(t) = trace.as_deref_mut() {
                t.push(step);
            }
        }
    }
}

struct DykstraOp {
    plan: Arc<ProjectionPlan>,
    trace: Vec<Step>,
}

impl CustomOp for DykstraOp {
    fn name(&self) -> &'static str {
        "dykstra"
    }

    fn backward(&self, need: &[bool], out_adj: &[f64]) -> Vec<Vec<f64>> {
        let (w, r) = self.plan.backward(&self.trace, out_adj);
        let mut out = vec![w];
        if need.len() > 1 {
            out.push(r);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        linalg::max_abs_diff(a, b) <= tol
    }

    #[test]
    fn affine_examples() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(close(&project_affine(&a, &[1.0], &[0.0, 0.0]).unwrap(), &[0.5, 0.5], 1e-15));
        assert_eq!(project_affine(&a, &[1.0], &[0.25, 0.75]).unwrap(), vec![0.25, 0.75]);
    }

    #[test]
    fn affine_matches_normal_equations_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Matrix::from_vec(5, 12, (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Independent oracle: minimum-norm correction via nalgebra's pseudo-inverse.
        let an = nalgebra::DMatrix::from_row_slice(5, 12, &a.data);
        let r = nalgebra::DVector::from_column_slice(&linalg::sub(&a.matvec(&w), &b));
        let corr = an.pseudo_inverse(1e-14).unwrap() * r;
        let expect: Vec<f64> = w.iter().zip(corr.iter()).map(|(x, c)| x - c).collect();
        assert!(close(&project_affine(&a, &b, &w).unwrap(), &expect, 1e-8));
    }

    #[test]
    fn nonneg_and_box_examples() {
        assert_eq!(project_nonneg(&[-1.0, 2.0]), vec![0.0, 2.0]);
        assert_eq!(project_nonneg(&[0.5, 2.0]), vec![0.5, 2.0]);
        assert_eq!(project_box(&[0.0; 2], &[1.0; 2], &[-1.0, 2.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(project_box(&[0.0; 2], &[1.0; 2], &[0.3, 0.6]).unwrap(), vec![0.3, 0.6]);
        assert!(project_box(&[1.0], &[0.0], &[0.5]).is_err());
    }

    #[test]
    fn halfspace_examples() {
        assert_eq!(project_halfspace(&[1.0, 0.0], 0.0, &[2.0, 3.0]).unwrap(), vec![0.0, 3.0]);
        assert_eq!(project_halfspace(&[1.0, 0.0], 0.0, &[-2.0, 3.0]).unwrap(), vec![-2.0, 3.0]);
        assert!(project_halfspace(&[0.0, 0.0], 0.0, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn halfspace_matches_line_search_oracle() {
        // The projection lies on the segment w − t·a; minimise the distance by
        // golden-section search over t under the constraint.
        let a = [0.7, -1.3, 0.4];
        let b = -0.2;
        let w = [1.1, 0.4, 0.9];
        let feasible_t = |t: f64| {
            let p: Vec<f64> = w.iter().zip(&a).map(|(x, ai)| x - t * ai).collect();
            linalg::dot(&a, &p) <= b + 1e-15
        };
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if feasible_t(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let expect: Vec<f64> = w.iter().zip(&a).map(|(x, ai)| x - hi * ai).collect();
        assert!(close(&project_halfspace(&a, b, &w).unwrap(), &expect, 1e-8));
    }

    #[test]
    fn simplex_projection_examples() {
        assert!(close(&project_simplex(1.0, &[2.0, -1.0]), &[1.0, 0.0], 1e-15));
        assert!(close(&project_simplex(1.0, &[0.2, 0.3, 0.5]), &[0.2, 0.3, 0.5], 1e-15));
        assert!(close(&project_simplex(1.0, &[0.0, 0.0, 0.0]), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn dykstra_line_and_orthant_reaches_vertex() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let plan = ProjectionPlan::new(2, vec![ConvexSet::Affine { a, b: vec![1.0] }, ConvexSet::Nonneg]).unwrap();
        let out = plan.project(&[2.0, -1.0], 50).unwrap();
        assert!(close(&out, &project_simplex(1.0, &[2.0, -1.0]), 1e-4), "{out:?}");
    }

    #[test]
    fn single_set_plan_is_exact_after_one_cycle() {
        let plan = ProjectionPlan::new(3, vec![ConvexSet::Simplex { total: 2.0 }]).unwrap();
        let w = [0.4, 3.0, -1.0];
        assert_eq!(plan.project(&w, 1).unwrap(), project_simplex(2.0, &w));
    }

    #[test]
    fn feasible_point_is_fixed_for_any_k() {
        let plan = ProjectionPlan::new(
            2,
            vec![
                ConvexSet::Halfspace { a: vec![1.0, 2.0], b: 3.0 },
                ConvexSet::Nonneg,
                ConvexSet::Box { lo: vec![0.0; 2], hi: vec![2.0; 2] },
            ],
        )
        .unwrap();
        for k in [1, 3, 50] {
            assert_eq!(plan.project(&[0.5, 0.25], k).unwrap(), vec![0.5, 0.25]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let plan = ProjectionPlan::new(2, vec![ConvexSet::Nonneg]).unwrap();
        assert!(matches!(plan.project(&[f64::NAN, 0.0], 1), Err(Error::NonFinite { .. })));
        assert!(plan.project(&[0.0, 0.0], 0).is_err());
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(matches!(
            ProjectionPlan::new(2, vec![ConvexSet::Affine { a, b: vec![1.0, 2.0] }]),
            Err(Error::RankDeficient { .. })
        ));
    }

    pub(super) fn mixed_plan() -> Arc<ProjectionPlan> {
        let a = Matrix::from_rows(&[vec![1.0, 1.0, 1.0, 0.5]]).unwrap();
        Arc::new(
            ProjectionPlan::new(
                4,
                vec![
                    ConvexSet::Affine { a, b: vec![1.5] },
                    ConvexSet::Halfspace { a: vec![1.0, -1.0, 0.0, 0.3], b: 0.2 },
                    ConvexSet::Box { lo: vec![-0.2; 4], hi: vec![0.9; 4] },
                    ConvexSet::Nonneg,
                ],
            )
            .unwrap(),
        )
    }

    #[test]
    fn dykstra_gradient_matches_finite_differences() {
        let plan = mixed_plan();
        let c = [0.3, -1.1, 0.8, 0.5];
        for (k, w) in [(1, [0.9, 0.1, 0.6, 0.2]), (2, [1.3, -0.4, 0.2, 0.7]), (4, [0.35, 0.55, 0.45, 0.1])] {
            let r = finite_diff_check(
                |t, p| {
                    let w = t.slice(p, 0, 4);
                    let rhs = t.slice(p, 4, 2);
                    let x = plan.project_var(t, w, Some(rhs), k)?;
                    let cv = t.constant(c.to_vec());
                    let s = t.dot(x, cv);
                    let q = t.square(x);
                    let q = t.sum(q);
                    Ok(t.add(s, q))
                },
                &[w[0], w[1], w[2], w[3], 1.5, 0.2],
                1e-6,
            )
            .unwrap();
            assert!(r.max_deviation <= 1e-4, "k={k}: {r:?}");
        }
    }

    #[test]
    fn simplex_gradient_matches_finite_differences() {
        let plan = Arc::new(ProjectionPlan::new(4, vec![ConvexSet::Simplex { total: 1.0 }, ConvexSet::Box { lo: vec![0.0; 4], hi: vec![0.6; 4] }]).unwrap());
        let c = [0.3, -1.1, 0.8, 0.5];
        let r = finite_diff_check(
            |t, p| {
                let x = plan.project_var(t, p, None, 3)?;
                let cv = t.constant(c.to_vec());
                let q = t.square(x);
                let s = t.dot(q, cv);
                Ok(s)
            },
            &[0.5, 0.4, 0.1, -0.3],
            1e-6,
        )
        .unwrap();
        assert!(r.max_deviation <= 1e-4, "{r:?}");
    }

    proptest! {
        #[test]
        fn elementary_projections_are_nonexpansive(
            w1 in proptest::collection::vec(-3.0f64..3.0, 4),
            w2 in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let d0 = linalg::dist(&w1, &w2);
            let a = Matrix::from_rows(&[vec![1.0, -0.5, 0.3, 2.0], vec![0.0, 1.0, 1.0, -1.0]]).unwrap();
            let pairs = [
                (project_nonneg(&w1), project_nonneg(&w2)),
                (project_box(&[-1.0; 4], &[0.5; 4], &w1).unwrap(), project_box(&[-1.0; 4], &[0.5; 4], &w2).unwrap()),
                (project_halfspace(&[1.0, 2.0, -1.0, 0.5], 0.3, &w1).unwrap(), project_halfspace(&[1.0, 2.0, -1.0, 0.5], 0.3, &w2).unwrap()),
                (project_affine(&a, &[0.2, -0.1], &w1).unwrap(), project_affine(&a, &[0.2, -0.1], &w2).unwrap()),
                (project_simplex(1.0, &w1), project_simplex(1.0, &w2)),
            ];
            for (p1, p2) in pairs {
                prop_assert!(linalg::dist(&p1, &p2) <= d0 * (1.0 + 1e-12) + 1e-14);
            }
        }

        #[test]
        fn elementary_projections_are_idempotent(w in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let b = project_box(&[-1.0; 4], &[0.5; 4], &w).unwrap();
            prop_assert_eq!(project_box(&[-1.0; 4], &[0.5; 4], &b).unwrap(), b);
            let n = project_nonneg(&w);
            prop_assert_eq!(project_nonneg(&n), n);
            let s = project_simplex(1.0, &w);
            prop_assert!(close(&project_simplex(1.0, &s), &s, 1e-14));
        }

        #[test]
        fn nonneg_is_coordinatewise_argmin(w in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let p = project_nonneg(&w);
            for (x, y) in w.iter().zip(&p) {
                // For each coordinate, y minimizes (x − y)² over y ≥ 0.
                let cand = [0.0, x.abs(), *y];
                let best = cand.iter().copied().filter(|c| *c >= 0.0).fold(f64::INFINITY, |m, c| m.min((x - c).powi(2)));
                prop_assert!(((x - y).powi(2) - best).abs() <= 1e-15);
            }
        }

        #[test]
        fn dykstra_error_vanishes_with_more_cycles(w in proptest::collection::vec(-2.0f64..2.0, 4)) {
            // Not monotone cycle to cycle, only convergent.
            let plan = mixed_plan();
            let exact = plan.project_converged(&w, None, 1e-15, 100_000).unwrap();
            let e5 = linalg::dist(&plan.project(&w, 5).unwrap(), &exact);
            let e1000 = linalg::dist(&plan.project(&w, 1000).unwrap(), &exact);
            prop_assert!(e1000 <= 1e-9);
            prop_assert!(e1000 <= e5 + 1e-12);
        }
    }
}
