//! The learned linear term `L(u)` with spectrum confined to `[λ̲, λ̄]`.
//!
//! `M` is upper triangular with an exponentiated diagonal and `D(u)` is a
//! diagonal whose entries pass through `ρ(x) = λ̲ + (λ̄ − λ̲)·σ(x)`. Two
//! constructions share that parameterization:
//!
//! - `Symmetric`: `G` is the row-orthonormalization of `M` and
//!   `L = Gᵀ diag(ρ) G`.
//! - `Paper`: `L = (M Mᵀ) diag(ρ) (M Mᵀ)⁻¹`, a similarity transform that is
//!   not symmetric in general.
//!
//! `M` is shared across inputs; the mode decides how `D` depends on `u`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::random;

/// Condition number of `M Mᵀ` above which a model must be re-initialized.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ModelMode {
    /// `L ≡ 0`; the solver reduces to projected gradient descent.
    Zero,
    Constant,
    /// `D(u) = W u + c`.
    Linear,
    /// `D(u) = W₂ relu(W₁ u + b₁) + b₂`.
    Mlp { hidden: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    #[default]
    Symmetric,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRuleModel {
    #[serde(flatten)]
    pub mode: ModelMode,
    #[serde(default)]
    pub construction: Construction,
    pub dim: usize,
    pub u_dim: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub params: Vec<f64>,
    /// Subtracted from `u` before the input layer; empty means no shift.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_center: Vec<f64>,
}

/// Initialization options for [`UpdateRuleModel::new`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelInit {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Initial eigenvalue of every direction.
    pub spectrum: f64,
    /// Standard deviation of the off-diagonal entries of `M`, divided by `√d`.
    pub off_diagonal: f64,
    /// Standard deviation of the input weights, divided by the fan-in root.
    pub weights: f64,
}

impl Default for ModelInit {
    fn default() -> Self {
        ModelInit {
            lambda_min: 0.1,
            lambda_max: 10.0,
            spectrum: 1.0,
            off_diagonal: 0.3,
            weights: 0.1,
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

impl UpdateRuleModel {
    pub fn param_count(mode: ModelMode, dim: usize, u_dim: usize) -> usize {
        let d = dim;
        match mode {
            ModelMode::Zero => 0,
            ModelMode::Constant => tri_len(d) + d,
            ModelMode::Linear => tri_len(d) + d * u_dim + d,
            ModelMode::Mlp { hidden } => tri_len(d) + hidden * u_dim + hidden + d * hidden + d,
        }
    }

    pub fn new(mode: ModelMode, construction: Construction, dim: usize, u_dim: usize, init: ModelInit, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("model dimension must be ≥ 1".into()));
        }
        if !(init.lambda_min > 0.0 && init.lambda_min <= init.lambda_max && init.lambda_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "eigenvalue bounds must satisfy 0 < λ̲ ≤ λ̄ < ∞, got [{}, {}]",
                init.lambda_min, init.lambda_max
            )));
        }
        if let ModelMode::Mlp { hidden } = mode {
            if hidden == 0 {
                return Err(Error::InvalidParameter("mlp hidden width must be ≥ 1".into()));
            }
        }
        let d = dim;
        let mut r = random::rng(seed);
        let mut params = Vec::with_capacity(Self::param_count(mode, d, u_dim));
        if mode != ModelMode::Zero {
            let sd = init.off_diagonal / (d as f64).sqrt();
            for i in 0..d {
                for j in i..d {
                    params.push(if i == j { 0.0 } else { sd * random::normal(&mut r) });
                }
            }
        }
        let span = init.lambda_max - init.lambda_min;
        let bias = if span > 0.0 {
            logit(((init.spectrum - init.lambda_min) / span).clamp(1e-3, 1.0 - 1e-3))
        } else {
            0.0
        };
        match mode {
            ModelMode::Zero => {}
            ModelMode::Constant => params.extend(std::iter::repeat(bias).take(d)),
            ModelMode::Linear => {
                let s = init.weights / (u_dim.max(1) as f64).sqrt();
                params.extend(random::normals(&mut r, d * u_dim, s));
                params.extend(std::iter::repeat(bias).take(d));
            }
            ModelMode::Mlp { hidden } => {
                let s1 = (2.0 / u_dim.max(1) as f64).sqrt();
                params.extend(random::normals(&mut r, hidden * u_dim, s1));
                params.extend(std::iter::repeat(0.0).take(hidden));
                let s2 = init.weights / (hidden as f64).sqrt();
                params.extend(random::normals(&mut r, d * hidden, s2));
                params.extend(std::iter::repeat(bias).take(d));
            }
        }
        Ok(UpdateRuleModel {
            mode,
            construction,
            dim: d,
            u_dim,
            lambda_min: init.lambda_min,
            lambda_max: init.lambda_max,
            params,
            input_center: Vec::new(),
        })
    }

    pub fn zero(dim: usize, u_dim: usize) -> Self {
        UpdateRuleModel {
            mode: ModelMode::Zero,
            construction: Construction::Symmetric,
            dim,
            u_dim,
            lambda_min: 0.0,
            lambda_max: 0.0,
            params: Vec::new(),
            input_center: Vec::new(),
        }
    }

    /// Sets the input center to the mean of `us`.
    pub fn center_on(&mut self, us: &[Vec<f64>]) {
        let mut c = vec![0.0; self.u_dim];
        for u in us {
            crate::linalg::axpy(1.0 / us.len() as f64, u, &mut c);
        }
        self.input_center = c;
    }

    pub fn validate(&self) -> Result<()> {
        Error::check_dim(
            "model parameters",
            Self::param_count(self.mode, self.dim, self.u_dim),
            self.params.len(),
        )?;
        if self.mode != ModelMode::Zero && !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max) {
            return Err(Error::InvalidParameter("eigenvalue bounds must satisfy 0 < λ̲ ≤ λ̄".into()));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::non_finite("model parameters"));
        }
        if !self.input_center.is_empty() {
            Error::check_dim("input center", self.u_dim, self.input_center.len())?;
        }
        Ok(())
    }

    /// Builds the input-independent part of the map on `tape`.
    pub fn attach(&self, tape: &mut Tape, params: Var) -> Result<Attached> {
        Error::check_dim("model parameters", self.params.len(), tape.numel(params))?;
        let d = self.dim;
        if self.mode == ModelMode::Zero {
            return Ok(Attached {
                model: self.clone(),
                params,
                basis: Basis::Zero,
            });
        }
        let n = tri_len(d);
        let raw = tape.slice(params, 0, n);
        let e = tape.exp(raw);
        let z = tape.constant(vec![0.0]);
        let pool = tape.concat(&[raw, e, z]);
        let mut idx = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                idx.push(match j.cmp(&i) {
                    std::cmp::Ordering::Greater => tri_index(d, i, j),
                    std::cmp::Ordering::Equal => n + tri_index(d, i, i),
                    std::cmp::Ordering::Less => 2 * n,
                });
            }
        }
        let flat = tape.gather(pool, idx.into());
        let m = tape.reshape(flat, d, d);
        let basis = match self.construction {
            Construction::Symmetric => {
                let g = tape.gram_schmidt_rows(m);
                let cond = tape.gram_schmidt_condition(g).unwrap_or(f64::INFINITY).powi(2);
                if !(cond <= MAX_CONDITION) {
                    return Err(Error::IllConditioned(cond));
                }
                let gt = tape.transpose(g);
                Basis::Symmetric { g, gt }
            }
            Construction::Paper => {
                let diag: Vec<f64> = (0..d).map(|i| tape.value(m)[i * d + i]).collect();
                let hi = diag.iter().copied().fold(0.0, f64::max);
                let lo = diag.iter().copied().fold(f64::INFINITY, f64::min);
                let cond = (hi / lo).powi(2);
                if !(cond <= MAX_CONDITION) {
                    return Err(Error::IllConditioned(cond));
                }
                let eye = tape.constant_matrix(Matrix::identity(d));
                let minv = tape.upper_solve(m, eye);
                let minv_t = tape.transpose(minv);
                let mt = tape.transpose(m);
                Basis::Paper { m, mt, minv, minv_t }
            }
        };
        Ok(Attached {
            model: self.clone(),
            params,
            basis,
        })
    }

    /// Plain-valued operator `L(u)`.
    pub fn operator(&self, u: &[f64]) -> Result<Operator> {
        let mut tape = Tape::new();
        let p = tape.constant(self.params.clone());
        let a = self.attach(&mut tape, p)?;
        let uv = tape.constant(u.to_vec());
        let rho = a.rho(&mut tape, uv)?;
        a.operator(&tape, rho)
    }

    /// Explicit `L(u)`.
    pub fn build_l(&self, u: &[f64]) -> Result<Matrix> {
        Ok(self.operator(u)?.to_matrix())
    }
}

/// Position of `(i, j)`, `j ≥ i`, in the row-major upper triangle.
fn tri_index(d: usize, i: usize, j: usize) -> usize {
    i * d - i * i.saturating_sub(1) / 2 + j - i
}

enum Basis {
    Zero,
    Symmetric { g: Var, gt: Var },
    Paper { m: Var, mt: Var, minv: Var, minv_t: Var },
}

/// A model whose shared factors live on a tape.
pub struct Attached {
    model: UpdateRuleModel,
    params: Var,
    basis: Basis,
}

impl Attached {
    pub fn is_zero(&self) -> bool {
        matches!(self.basis, Basis::Zero)
    }

    /// Spectrum `ρ(D(u))`.
    pub fn rho(&self, tape: &mut Tape, u: Var) -> Result<Var> {
        let m = &self.model;
        let d = m.dim;
        let off = tri_len(d);
        let u = if m.input_center.is_empty() || m.mode == ModelMode::Constant {
            u
        } else {
            let c = tape.constant(m.input_center.clone());
            tape.sub(u, c)
        };
        let raw = match m.mode {
            ModelMode::Zero => return Ok(tape.constant(vec![0.0; d])),
            ModelMode::Constant => tape.slice(self.params, off, d),
            ModelMode::Linear => {
                Error::check_dim("model input", m.u_dim, tape.numel(u))?;
                let w = tape.slice(self.params, off, d * m.u_dim);
                let w = tape.reshape(w, d, m.u_dim);
                let c = tape.slice(self.params, off + d * m.u_dim, d);
                let wu = tape.matmul(w, u);
                tape.add(wu, c)
            }
            ModelMode::Mlp { hidden } => {
                Error::check_dim("model input", m.u_dim, tape.numel(u))?;
                let mut o = off;
                let w1 = tape.slice(self.params, o, hidden * m.u_dim);
                o += hidden * m.u_dim;
                let w1 = tape.reshape(w1, hidden, m.u_dim);
                let b1 = tape.slice(self.params, o, hidden);
                o += hidden;
                let w2 = tape.slice(self.params, o, d * hidden);
                o += d * hidden;
                let w2 = tape.reshape(w2, d, hidden);
                let b2 = tape.slice(self.params, o, d);
                let h = tape.matmul(w1, u);
                let h = tape.add(h, b1);
                let h = tape.relu(h);
                let y = tape.matmul(w2, h);
                tape.add(y, b2)
            }
        };
        let s = tape.sigmoid(raw);
        let s = tape.scale(s, m.lambda_max - m.lambda_min);
        Ok(tape.offset(s, m.lambda_min))
    }

    /// `L(u) w` given `ρ` from [`Attached::rho`].
    pub fn apply(&self, tape: &mut Tape, rho: Var, w: Var) -> Var {
        match self.basis {
            Basis::Zero => tape.constant(vec![0.0; tape.numel(w)]),
            Basis::Symmetric { g, gt } => {
                let gw = tape.matmul(g, w);
                let s = tape.mul(rho, gw);
                tape.matmul(gt, s)
            }
            Basis::Paper { m, mt, minv, minv_t } => {
                let a = tape.matmul(minv, w);
                let b = tape.matmul(minv_t, a);
                let s = tape.mul(rho, b);
                let c = tape.matmul(mt, s);
                tape.matmul(m, c)
            }
        }
    }

    /// Snapshot of the operator values for plain evaluation.
    pub fn operator(&self, tape: &Tape, rho: Var) -> Result<Operator> {
        let d = self.model.dim;
        let mat = |v: Var| Matrix::from_vec(d, d, tape.value(v).to_vec());
        let rho = tape.value(rho).to_vec();
        let kind = match self.basis {
            Basis::Zero => OperatorKind::Zero,
            Basis::Symmetric { g, .. } => OperatorKind::Symmetric { g: Arc::new(mat(g)?) },
            Basis::Paper { m, minv, .. } => OperatorKind::Paper {
                m: Arc::new(mat(m)?),
                minv: Arc::new(mat(minv)?),
            },
        };
        Ok(Operator { dim: d, rho, kind })
    }
}

#[derive(Clone, Debug)]
enum OperatorKind {
    Zero,
    Symmetric { g: Arc<Matrix> },
    Paper { m: Arc<Matrix>, minv: Arc<Matrix> },
}

/// `L(u)` for one input, in factored form.
#[derive(Clone, Debug)]
pub struct Operator {
    dim: usize,
    rho: Vec<f64>,
    kind: OperatorKind,
}

impl Operator {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.rho
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, OperatorKind::Zero)
    }

    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        match &self.kind {
            OperatorKind::Zero => vec![0.0; w.len()],
            OperatorKind::Symmetric { g } => {
                let mut s = g.matvec(w);
                s.iter_mut().zip(&self.rho).for_each(|(x, r)| *x *= r);
                g.matvec_t(&s)
            }
            OperatorKind::Paper { m, minv } => {
                let a = minv.matvec(w);
                let mut b = minv.matvec_t(&a);
                b.iter_mut().zip(&self.rho).for_each(|(x, r)| *x *= r);
                let c = m.matvec_t(&b);
                m.matvec(&c)
            }
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        let d = self.dim;
        let mut l = Matrix::zeros(d, d);
        if let OperatorKind::Symmetric { g } = &self.kind {
            // Summing ρ_k (G_ki G_kj) in a fixed order keeps L bitwise symmetric.
            for i in 0..d {
                for j in 0..d {
                    let s: f64 = (0..d).map(|k| self.rho[k] * (g.get(k, i) * g.get(k, j))).sum();
                    l.set(i, j, s);
                }
            }
            return l;
        }
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            let col = self.apply(&e);
            e[j] = 0.0;
            for i in 0..d {
                l.set(i, j, col[i]);
            }
        }
        l
    }

    /// `wᵀ L w`.
    pub fn quadratic(&self, w: &[f64]) -> f64 {
        linalg::dot(w, &self.apply(w))
    }
}

/// Extremal eigenvalues of `L(u)` over `samples` (real parts for the
/// nonsymmetric construction).
pub fn spectrum_bounds_check(m: &UpdateRuleModel, samples: &[Vec<f64>]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("at least one sample is required".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for u in samples {
        let l = m.build_l(u)?;
        let ev: Vec<f64> = match m.construction {
            Construction::Symmetric => l.symmetric_eigenvalues(),
            Construction::Paper => l.eigenvalues().into_iter().map(|e| e.0).collect(),
        };
        for e in ev {
            lo = lo.min(e);
            hi = hi.max(e);
        }
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;

    fn model(mode: ModelMode, c: Construction, d: usize, k: usize, seed: u64) -> UpdateRuleModel {
        UpdateRuleModel::new(mode, c, d, k, ModelInit::default(), seed).unwrap()
    }

    #[test]
    fn triangle_indexing_is_row_major() {
        let d = 4;
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                assert_eq!(tri_index(d, i, j), k);
                k += 1;
            }
        }
    }

    #[test]
    fn identity_factor_gives_diagonal() {
        for c in [Construction::Symmetric, Construction::Paper] {
            let mut m = model(ModelMode::Constant, c, 3, 2, 0);
            let n = tri_len(3);
            m.params[..n].iter_mut().for_each(|x| *x = 0.0);
            m.params[n..].copy_from_slice(&[-3.0, 0.0, 2.0]);
            let l = m.build_l(&[0.0, 0.0]).unwrap();
            let rho: Vec<f64> = [-3.0, 0.0, 2.0]
                .iter()
                .map(|x| 0.1 + 9.9 * crate::autodiff::sigmoid(*x))
                .collect();
            assert!(l.max_abs_diff(&Matrix::diag(&rho)) < 1e-14);
        }
    }

    #[test]
    fn constant_mode_ignores_input() {
        let m = model(ModelMode::Constant, Construction::Symmetric, 4, 3, 1);
        let a = m.build_l(&[0.0, 1.0, 2.0]).unwrap();
        let b = m.build_l(&[5.0, -1.0, 0.3]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn paper_mode_eigenvalues_equal_spectrum() {
        let m = model(ModelMode::Linear, Construction::Paper, 6, 3, 7);
        let u = [0.3, -1.2, 2.0];
        let op = m.operator(&u).unwrap();
        let mut rho = op.spectrum().to_vec();
        rho.sort_by(f64::total_cmp);
        let l = op.to_matrix();
        let ev = l.eigenvalues();
        for ((re, im), r) in ev.iter().zip(&rho) {
            assert!((re - r).abs() < 1e-8 && im.abs() < 1e-8);
        }
        assert!(l.determinant() > 0.0);
    }

    #[test]
    fn symmetric_mode_is_symmetric_and_coercive() {
        let m = model(ModelMode::Mlp { hidden: 5 }, Construction::Symmetric, 5, 4, 3);
        let op = m.operator(&[1.0, 0.5, -0.5, 2.0]).unwrap();
        let l = op.to_matrix();
        assert_eq!(l, l.transpose());
        let mut r = random::rng(11);
        for _ in 0..50 {
            let w = random::normals(&mut r, 5, 1.0);
            assert!(op.quadratic(&w) >= 0.1 * linalg::dot(&w, &w) - 1e-12);
        }
    }

    #[test]
    fn collapsed_bounds_give_identity_spectrum() {
        let init = ModelInit {
            lambda_min: 1.0,
            lambda_max: 1.0,
            ..ModelInit::default()
        };
        let m = UpdateRuleModel::new(ModelMode::Linear, Construction::Symmetric, 4, 2, init, 0).unwrap();
        let (lo, hi) = spectrum_bounds_check(&m, &[vec![1.0, 2.0], vec![-3.0, 0.0]]).unwrap();
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ill_conditioned_factor_is_rejected() {
        let mut m = model(ModelMode::Constant, Construction::Paper, 3, 1, 0);
        m.params[tri_index(3, 2, 2)] = -20.0;
        assert!(matches!(m.build_l(&[0.0]), Err(Error::IllConditioned(_))));
    }

    #[test]
    fn checkpoint_round_trips() {
        let m = model(ModelMode::Mlp { hidden: 3 }, Construction::Paper, 3, 2, 5);
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"mode\":\"mlp\""));
        let back: UpdateRuleModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn l_apply_gradient_matches_finite_differences() {
        for c in [Construction::Symmetric, Construction::Paper] {
            let m = model(ModelMode::Linear, c, 3, 2, 9);
            let u = vec![0.4, -0.8];
            let w = vec![0.5, -1.0, 2.0];
            let r = finite_diff_check(
                |t, p| {
                    let a = m.attach(t, p)?;
                    let uv = t.constant(u.clone());
                    let rho = a.rho(t, uv)?;
                    let wv = t.constant(w.clone());
                    let lw = a.apply(t, rho, wv);
                    let sq = t.square(lw);
                    Ok(t.sum(sq))
                },
                &m.params,
                1e-6,
            )
            .unwrap();
            assert!(r.max_deviation <= 1e-6, "{c:?}: {r:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn spectrum_stays_in_bounds(seed in 0u64..10_000, u in proptest::collection::vec(-3.0f64..3.0, 3), sym in any::<bool>()) {
            let c = if sym { Construction::Symmetric } else { Construction::Paper };
            let m = model(ModelMode::Linear, c, 6, 3, seed);
            let (lo, hi) = spectrum_bounds_check(&m, &[u]).unwrap();
            prop_assert!(lo >= 0.1 - 1e-6 && hi <= 10.0 + 1e-6, "[{}, {}]", lo, hi);
        }
    }
}
