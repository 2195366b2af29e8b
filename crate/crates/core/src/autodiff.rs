//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every node holds a dense row-major value with a `(rows, cols)` shape;
//! vectors are `n×1` and scalars `1×1`. Nodes are only ever appended, so the
//! tape is topologically ordered by construction and the reverse sweep is a
//! single backwards pass over the node list.
//!
//! The derivative of `relu` at exactly zero is taken to be zero, and `step`
//! (the Heaviside indicator) has zero derivative everywhere.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable primitive defined outside this module.
///
/// `backward` receives the output adjoint and must return one adjoint per
/// input, in input order, each with the input's length. Inputs that do not
/// need gradients may be given an empty vector.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs_need_grad: &[bool], out_adj: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Relu,
    Step,
    Sigmoid,
    Exp,
    Recip,
    Square,
    Sqrt,
    Abs,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScaleBy(Var, Var),
    Unary(Var, Unary),
    Dot(Var, Var),
    Sum(Var),
    MatMul(Var, Var),
    ConstMatVec(Arc<Matrix>, Var, bool),
    Transpose(Var),
    Reshape(Var),
    MulRows(Var, Var),
    Slice(Var, usize),
    Gather(Var, Arc<[usize]>),
    Concat(Vec<Var>),
    UpperSolve(Var, Var),
    GramSchmidtRows { m: Var, l: Vec<f64> },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        if self.first_non_finite.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.first_non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value,
            rows,
            cols,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Index of the first node whose value contained a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.first_non_finite
    }

    pub fn param(&mut self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.push(value, n, 1, true, Op::Leaf)
    }

    pub fn param_matrix(&mut self, m: Matrix) -> Var {
        self.push(m.data, m.rows, m.cols, true, Op::Leaf)
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.push(value, n, 1, false, Op::Leaf)
    }

    pub fn constant_matrix(&mut self, m: Matrix) -> Var {
        self.push(m.data, m.rows, m.cols, false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![v], 1, 1, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn to_matrix(&self, v: Var) -> Matrix {
        let n = &self.nodes[v.0];
        Matrix {
            rows: n.rows,
            cols: n.cols,
            data: n.value.clone(),
        }
    }

    fn binary_shape(&self, a: Var, b: Var, what: &str) -> (usize, usize) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(
            self.numel(a),
            self.numel(b),
            "{what}: shape mismatch {sa:?} vs {sb:?}"
        );
        sa
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.binary_shape(a, b, "add");
        let v = linalg::add(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, r, c, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.binary_shape(a, b, "sub");
        let v = linalg::sub(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, r, c, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.binary_shape(a, b, "mul");
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(v, r, c, ng, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| s * x).collect();
        let ng = self.ng(a);
        self.push(v, r, c, ng, Op::Scale(a, s))
    }

    /// `a + s` elementwise for a constant `s`.
    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| x + s).collect();
        let ng = self.ng(a);
        self.push(v, r, c, ng, Op::Offset(a))
    }

    /// `s · a` for a scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.numel(s), 1, "scale_by: scalar expected");
        let (r, c) = self.shape(a);
        let sv = self.scalar_value(s);
        let v = self.value(a).iter().map(|x| sv * x).collect();
        let ng = self.ng(a) || self.ng(s);
        self.push(v, r, c, ng, Op::ScaleBy(a, s))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let (r, c) = self.shape(a);
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |x| -x,
            Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Unary::Step => |x| if x > 0.0 { 1.0 } else { 0.0 },
            Unary::Sigmoid => sigmoid,
            Unary::Exp => f64::exp,
            Unary::Recip => |x| 1.0 / x,
            Unary::Square => |x| x * x,
            Unary::Sqrt => f64::sqrt,
            Unary::Abs => f64::abs,
        };
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a) && kind != Unary::Step;
        self.push(v, r, c, ng, Op::Unary(a, kind))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape(a, b, "dot");
        let v = linalg::dot(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(vec![v], 1, 1, ng, Op::Dot(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![v], 1, 1, ng, Op::Sum(a))
    }

    /// Matrix product `a · b`; vectors are treated as columns.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (r, k) = self.shape(a);
        let (k2, c) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let v = linalg::matmul_raw(self.value(a), self.value(b), r, k, c);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, r, c, ng, Op::MatMul(a, b))
    }

    /// `A x` (or `Aᵀ x` when `transpose`) for a shared constant matrix.
    pub fn const_matvec(&mut self, a: &Arc<Matrix>, x: Var, transpose: bool) -> Var {
        let v = if transpose {
            assert_eq!(a.rows, self.numel(x), "const_matvec: dimension mismatch");
            a.matvec_t(self.value(x))
        } else {
            assert_eq!(a.cols, self.numel(x), "const_matvec: dimension mismatch");
            a.matvec(self.value(x))
        };
        let n = v.len();
        let ng = self.ng(x);
        self.push(v, n, 1, ng, Op::ConstMatVec(Arc::clone(a), x, transpose))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = linalg::transpose_raw(self.value(a), r, c);
        let ng = self.ng(a);
        self.push(v, c, r, ng, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.numel(a), rows * cols, "reshape: size mismatch");
        let v = self.value(a).to_vec();
        let ng = self.ng(a);
        self.push(v, rows, cols, ng, Op::Reshape(a))
    }

    /// Row `i` of matrix `m` scaled by `s[i]`, i.e. `diag(s) · m`.
    pub fn mul_rows(&mut self, m: Var, s: Var) -> Var {
        let (r, c) = self.shape(m);
        assert_eq!(self.numel(s), r, "mul_rows: scale length mismatch");
        let mv = self.value(m);
        let sv = self.value(s);
        let mut v = Vec::with_capacity(r * c);
        for i in 0..r {
            v.extend(mv[i * c..(i + 1) * c].iter().map(|x| x * sv[i]));
        }
        let ng = self.ng(m) || self.ng(s);
        self.push(v, r, c, ng, Op::MulRows(m, s))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.numel(a), "slice out of range");
        let v = self.value(a)[start..start + len].to_vec();
        let ng = self.ng(a);
        self.push(v, len, 1, ng, Op::Slice(a, start))
    }

    pub fn gather(&mut self, a: Var, idx: Arc<[usize]>) -> Var {
        let av = self.value(a);
        let v: Vec<f64> = idx.iter().map(|&i| av[i]).collect();
        let n = v.len();
        let ng = self.ng(a);
        self.push(v, n, 1, ng, Op::Gather(a, idx))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(self.value(*p));
        }
        let n = v.len();
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, n, 1, ng, Op::Concat(parts.to_vec()))
    }

    /// `U⁻¹ B` for upper-triangular `U` (only the upper triangle is read).
    pub fn upper_solve(&mut self, u: Var, b: Var) -> Var {
        let (n, n2) = self.shape(u);
        assert_eq!(n, n2, "upper_solve: square matrix expected");
        let (rb, c) = self.shape(b);
        assert_eq!(rb, n, "upper_solve: rhs rows mismatch");
        let v = linalg::upper_solve(self.value(u), self.value(b), n, c);
        let ng = self.ng(u) || self.ng(b);
        self.push(v, n, c, ng, Op::UpperSolve(u, b))
    }

    /// Orthonormalizes the rows of a square matrix by modified Gram–Schmidt.
    ///
    /// Writes `M = L G` with `L` lower triangular (positive diagonal) and `G`
    /// orthogonal; returns `G`. The smallest pivot `|L_ii|` relative to the
    /// largest is available through [`Tape::gram_schmidt_condition`].
    pub fn gram_schmidt_rows(&mut self, m: Var) -> Var {
        let (n, n2) = self.shape(m);
        assert_eq!(n, n2, "gram_schmidt_rows: square matrix expected");
        let mut g = self.value(m).to_vec();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let (head, tail) = g.split_at_mut(i * n);
                let qj = &head[j * n..(j + 1) * n];
                let ri = &mut tail[..n];
                let c = linalg::dot(qj, ri);
                l[i * n + j] = c;
                linalg::axpy(-c, qj, ri);
            }
            let ri = &mut g[i * n..(i + 1) * n];
            let nrm = linalg::norm(ri);
            l[i * n + i] = nrm;
            for x in ri.iter_mut() {
                *x /= nrm;
            }
        }
        let ng = self.ng(m);
        self.push(g, n, n, ng, Op::GramSchmidtRows { m, l })
    }

    /// Ratio of the largest to smallest Gram–Schmidt pivot of a
    /// `gram_schmidt_rows` node.
    pub fn gram_schmidt_condition(&self, g: Var) -> Option<f64> {
        match &self.nodes[g.0].op {
            Op::GramSchmidtRows { l, .. } => {
                let n = self.nodes[g.0].rows;
                let d: Vec<f64> = (0..n).map(|i| l[i * n + i].abs()).collect();
                let hi = d.iter().copied().fold(0.0, f64::max);
                let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
                Some(hi / lo)
            }
            _ => None,
        }
    }

    pub fn custom(&mut self, inputs: Vec<Var>, value: Vec<f64>, op: Box<dyn CustomOp>) -> Var {
        let n = value.len();
        let ng = inputs.iter().any(|p| self.ng(*p));
        self.push(value, n, 1, ng, Op::Custom(inputs, op))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.numel(output), 1, "backward: scalar output expected");
        self.backward_from(output, &[1.0])
    }

    /// Reverse sweep seeded with an arbitrary adjoint for `output`.
    pub fn backward_from(&self, output: Var, seed: &[f64]) -> Gradients {
        assert_eq!(self.numel(output), seed.len(), "backward_from: seed length");
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); output.0 + 1];
        adj[output.0] = seed.to_vec();
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if adj[i].is_empty() || !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            self.propagate(i, &g, &mut adj);
            adj[i] = g;
        }
        Gradients { adj }
    }

    fn acc(&self, adj: &mut [Vec<f64>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = &mut adj[v.0];
        if slot.is_empty() {
            *slot = vec![0.0; self.nodes[v.0].value.len()];
        }
        contrib(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(adj, *a, |s| linalg::axpy(1.0, g, s));
                self.acc(adj, *b, |s| linalg::axpy(1.0, g, s));
            }
            Op::Sub(a, b) => {
                self.acc(adj, *a, |s| linalg::axpy(1.0, g, s));
                self.acc(adj, *b, |s| linalg::axpy(-1.0, g, s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(adj, *a, |s| {
                    for ((si, gi), bi) in s.iter_mut().zip(g).zip(bv) {
                        *si += gi * bi;
                    }
                });
                self.acc(adj, *b, |s| {
                    for ((si, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *si += gi * ai;
                    }
                });
            }
            Op::Scale(a, k) => self.acc(adj, *a, |s| linalg::axpy(*k, g, s)),
            Op::Offset(a) => self.acc(adj, *a, |s| linalg::axpy(1.0, g, s)),
            Op::ScaleBy(a, k) => {
                let kv = self.scalar_value(*k);
                self.acc(adj, *a, |s| linalg::axpy(kv, g, s));
                let d = linalg::dot(g, self.value(*a));
                self.acc(adj, *k, |s| s[0] += d);
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let y = &node.value;
                let kind = *kind;
                self.acc(adj, *a, |s| {
                    for j in 0..s.len() {
                        let d = match kind {
                            Unary::Neg => -1.0,
                            Unary::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Step => 0.0,
                            Unary::Sigmoid => y[j] * (1.0 - y[j]),
                            Unary::Exp => y[j],
                            Unary::Recip => -y[j] * y[j],
                            Unary::Square => 2.0 * x[j],
                            Unary::Sqrt => 0.5 / y[j],
                            Unary::Abs => x[j].signum() * (x[j] != 0.0) as u8 as f64,
                        };
                        s[j] += g[j] * d;
                    }
                });
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(adj, *a, |s| linalg::axpy(g[0], bv, s));
                self.acc(adj, *b, |s| linalg::axpy(g[0], av, s));
            }
            Op::Sum(a) => self.acc(adj, *a, |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::MatMul(a, b) => {
                let (r, k) = self.shape(*a);
                let c = self.shape(*b).1;
                if self.ng(*a) {
                    let bt = linalg::transpose_raw(self.value(*b), k, c);
                    let d = linalg::matmul_raw(g, &bt, r, c, k);
                    self.acc(adj, *a, |s| linalg::axpy(1.0, &d, s));
                }
                if self.ng(*b) {
                    let at = linalg::transpose_raw(self.value(*a), r, k);
                    let d = linalg::matmul_raw(&at, g, k, r, c);
                    self.acc(adj, *b, |s| linalg::axpy(1.0, &d, s));
                }
            }
            Op::ConstMatVec(m, x, transpose) => {
                let d = if *transpose { m.matvec(g) } else { m.matvec_t(g) };
                self.acc(adj, *x, |s| linalg::axpy(1.0, &d, s));
            }
            Op::Transpose(a) => {
                let d = linalg::transpose_raw(g, node.rows, node.cols);
                self.acc(adj, *a, |s| linalg::axpy(1.0, &d, s));
            }
            Op::Reshape(a) => self.acc(adj, *a, |s| linalg::axpy(1.0, g, s)),
            Op::MulRows(m, sc) => {
                let (r, c) = (node.rows, node.cols);
                let sv = self.value(*sc);
                let mv = self.value(*m);
                self.acc(adj, *m, |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += sv[i] * g[i * c + j];
                        }
                    }
                });
                self.acc(adj, *sc, |s| {
                    for i in 0..r {
                        s[i] += linalg::dot(&mv[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Slice(a, start) => {
                let st = *start;
                self.acc(adj, *a, |s| linalg::axpy(1.0, g, &mut s[st..st + g.len()]));
            }
            Op::Gather(a, idx) => self.acc(adj, *a, |s| {
                for (gi, &j) in g.iter().zip(idx.iter()) {
                    s[j] += gi;
                }
            }),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.numel(*p);
                    self.acc(adj, *p, |s| linalg::axpy(1.0, &g[off..off + n], s));
                    off += n;
                }
            }
            Op::UpperSolve(u, b) => {
                let (n, c) = (node.rows, node.cols);
                let uv = self.value(*u);
                let bbar = linalg::upper_t_solve(uv, g, n, c);
                if self.ng(*u) {
                    let x = &node.value;
                    self.acc(adj, *u, |s| {
                        for r in 0..n {
                            for q in r..n {
                                let mut t = 0.0;
                                for j in 0..c {
                                    t += bbar[r * c + j] * x[q * c + j];
                                }
                                s[r * n + q] -= t;
                            }
                        }
                    });
                }
                self.acc(adj, *b, |s| linalg::axpy(1.0, &bbar, s));
            }
            Op::GramSchmidtRows { m, l } => {
                let n = node.rows;
                let gv = &node.value;
                // B = G Ḡᵀ, S = strict lower part of (B − Bᵀ), M̄ = L⁻ᵀ Sᵀ G.
                let gbar_t = linalg::transpose_raw(g, n, n);
                let b = linalg::matmul_raw(gv, &gbar_t, n, n, n);
                let mut st = vec![0.0; n * n];
                for r in 0..n {
                    for q in 0..r {
                        st[q * n + r] = b[r * n + q] - b[q * n + r];
                    }
                }
                let rhs = linalg::matmul_raw(&st, gv, n, n, n);
                let lt = linalg::transpose_raw(l, n, n);
                let mbar = linalg::upper_solve(&lt, &rhs, n, n);
                self.acc(adj, *m, |s| linalg::axpy(1.0, &mbar, s));
            }
            Op::Custom(inputs, op) => {
                let need: Vec<bool> = inputs.iter().map(|v| self.ng(*v)).collect();
                let grads = op.backward(&need, g);
                debug_assert_eq!(grads.len(), inputs.len(), "{}: adjoint count", op.name());
                for ((v, gr), nd) in inputs.iter().zip(grads).zip(need) {
                    if nd && !gr.is_empty() {
                        self.acc(adj, *v, |s| linalg::axpy(1.0, &gr, s));
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adjoints produced by a reverse sweep.
pub struct Gradients {
    adj: Vec<Vec<f64>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adj
            .get(v.0)
            .filter(|a| !a.is_empty())
            .map(Vec::as_slice)
    }

    /// Adjoint of `v`, zero-filled to `len` when nothing flowed into it.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// Value and gradient of a scalar function built on a fresh tape.
pub fn grad_eval<F>(f: F, p: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let pv = tape.param(p.to_vec());
    let out = f(&mut tape, pv)?;
    if tape.numel(out) != 1 {
        return Err(Error::DimensionMismatch {
            context: "grad_eval output",
            expected: 1,
            found: tape.numel(out),
        });
    }
    if let Some(i) = tape.first_non_finite() {
        return Err(Error::non_finite(format!("tape node {i}")));
    }
    let value = tape.scalar_value(out);
    let grad = tape.backward(out).wrt(pv, p.len());
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::non_finite("gradient"));
    }
    Ok((value, grad))
}

/// Outcome of comparing a tape gradient to central finite differences.
#[derive(Clone, Debug)]
pub struct FdCheck {
    pub max_deviation: f64,
    /// Components skipped because the one-sided slopes disagree (a kink).
    pub excluded: Vec<usize>,
}

/// Max over components of `|g_ad − g_fd| / (|g_fd| + step)`.
///
/// Components where the forward and backward one-sided slopes differ by more
/// than `sqrt(step)·(1 + |slopes|)` sit on a kink and are excluded.
pub fn finite_diff_check<F>(f: F, p: &[f64], step: f64) -> Result<FdCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidParameter("finite-difference step must be > 0".into()));
    }
    let (f0, g) = grad_eval(&f, p)?;
    let eval = |q: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let pv = tape.param(q.to_vec());
        let out = f(&mut tape, pv)?;
        Ok(tape.scalar_value(out))
    };
    let mut worst: f64 = 0.0;
    let mut excluded = Vec::new();
    let mut q = p.to_vec();
    for i in 0..p.len() {
        q[i] = p[i] + step;
        let fp = eval(&q)?;
        q[i] = p[i] - step;
        let fm = eval(&q)?;
        q[i] = p[i];
        let fwd = (fp - f0) / step;
        let bwd = (f0 - fm) / step;
        if (fwd - bwd).abs() > step.sqrt() * (1.0 + fwd.abs() + bwd.abs()) {
            excluded.push(i);
            continue;
        }
        let fd = (fp - fm) / (2.0 * step);
        worst = worst.max((g[i] - fd).abs() / (fd.abs() + step));
    }
    Ok(FdCheck {
        max_deviation: worst,
        excluded,
    })
}
