//! Exact solvers used for ground truth and baselines.
//!
//! Tie-breaking is deterministic everywhere: assignments return the
//! lexicographically smallest optimal permutation, shortest paths prefer
//! fewer edges and then the smallest next vertex, and SAA orders return the
//! midpoint of the optimal interval when capacity allows.

use std::cell::Cell;
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::end2end::{self, DecisionMode, Forecaster, Samples};
use crate::error::{Error, Result};
use crate::ipm::{self, Qp};
use crate::linalg::{self, Matrix};
use crate::metatrain::{LossHistory, TrainSchedule};
use crate::problems::{grid_edges, ObjectiveSpec, Problem, Sense};
use crate::projection::ConvexSet;

static TOTAL_CALLS: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static THREAD_CALLS: Cell<u64> = const { Cell::new(0) };
}

fn count_call() {
    TOTAL_CALLS.fetch_add(1, AtomicOrdering::Relaxed);
    THREAD_CALLS.with(|c| c.set(c.get() + 1));
}

/// Oracle invocations made so far on the current thread.
pub fn oracle_calls() -> u64 {
    THREAD_CALLS.with(Cell::get)
}

/// Oracle invocations made so far by the whole process.
pub fn total_oracle_calls() -> u64 {
    TOTAL_CALLS.load(AtomicOrdering::Relaxed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Certificate {
    /// Vertex sequence from source to sink.
    Path { vertices: Vec<usize> },
    /// `assignment[i]` is the column matched to row `i`, if any.
    Matching { assignment: Vec<Option<usize>> },
    /// Marginal cost at which the capacity binds (0 when slack).
    Quantile { multiplier: f64 },
    /// Support segment `[lo, hi]` holding the minimizer.
    Segment { lo: f64, hi: f64 },
    Flow { augmentations: usize },
    Interior { converged: bool },
    Reference { converged: bool, iterations: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub w: Vec<f64>,
    pub objective: f64,
    pub method: String,
    pub certificate: Certificate,
}

#[derive(Clone, Copy, PartialEq)]
struct Key(f64, usize);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

/// Cheapest top-left to bottom-right path on a square grid of vertex costs.
///
/// The returned `w` is a 0/1 flow over [`grid_edges`]; the objective counts
/// every visited vertex including the source. A 1×1 grid has an empty path
/// whose cost is the single vertex cost.
pub fn dijkstra_grid(costs: &Matrix, source: usize, sink: usize) -> Result<OracleResult> {
    count_call();
    if costs.rows != costs.cols || costs.rows == 0 {
        return Err(Error::InvalidParameter("vertex costs must form a nonempty square grid".into()));
    }
    if costs.data.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
        return Err(Error::InvalidParameter("vertex costs must be finite and nonnegative".into()));
    }
    let g = costs.rows;
    let nv = g * g;
    if source >= nv || sink >= nv {
        return Err(Error::InvalidParameter("source or sink outside the grid".into()));
    }
    let edges = grid_edges(g);
    let mut adj = vec![Vec::new(); nv];
    for (t, h) in &edges {
        adj[*t].push(*h);
    }
    adj.iter_mut().for_each(|a| a.sort_unstable());
    // Distances to the sink: (cost excluding the start vertex, edge count).
    let mut dist = vec![f64::INFINITY; nv];
    let mut hops = vec![usize::MAX; nv];
    dist[sink] = 0.0;
    hops[sink] = 0;
    let mut heap = BinaryHeap::new();
    heap.push(Key(0.0, sink));
    let mut done = vec![false; nv];
    while let Some(Key(d, v)) = heap.pop() {
        if done[v] {
            continue;
        }
        done[v] = true;
        // Grid edges are symmetric, so predecessors are the neighbours.
        for &pnode in &adj[v] {
            let nd = d + costs.data[v];
            let nh = hops[v] + 1;
            if nd < dist[pnode] || (nd == dist[pnode] && nh < hops[pnode]) {
                dist[pnode] = nd;
                hops[pnode] = nh;
                heap.push(Key(nd, pnode));
            }
        }
    }
    let tol = 1e-12 * (1.0 + dist[source].abs());
    let mut path = vec![source];
    let mut v = source;
    while v != sink {
        let next = adj[v]
            .iter()
            .copied()
            .find(|&n| hops[n] + 1 == hops[v] && (costs.data[n] + dist[n] - dist[v]).abs() <= tol)
            .expect("a shortest-path successor exists");
        path.push(next);
        v = next;
    }
    let index: HashMap<(usize, usize), usize> = edges.iter().enumerate().map(|(i, e)| (*e, i)).collect();
    let mut w = vec![0.0; edges.len()];
    for p in path.windows(2) {
        w[index[&(p[0], p[1])]] = 1.0;
    }
    let objective = path.iter().map(|v| costs.data[*v]).sum();
    Ok(OracleResult {
        w,
        objective,
        method: "dijkstra".into(),
        certificate: Certificate::Path { vertices: path },
    })
}

/// Min-cost perfect assignment with potentials; returns `(assignment, u, v)`
/// where `cost[i][j] − u[i] − v[j] ≥ 0` with equality on the assignment.
fn hungarian(cost: &Matrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.rows;
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

/// Rotates `col_of` to the lexicographically smallest perfect matching
/// within the `tight` bipartite graph.
fn lexicographic_matching(tight: &[Vec<usize>], col_of: &mut [usize]) {
    let n = col_of.len();
    let mut row_of = vec![0; n];
    for (r, c) in col_of.iter().enumerate() {
        row_of[*c] = r;
    }
    fn search(
        r: usize,
        target: usize,
        fixed_upto: usize,
        tight: &[Vec<usize>],
        row_of: &[usize],
        seen: &mut [bool],
        path: &mut Vec<(usize, usize)>,
    ) -> bool {
        for &c in &tight[r] {
            if seen[c] {
                continue;
            }
            seen[c] = true;
            if c == target {
                path.push((r, c));
                return true;
            }
            let owner = row_of[c];
            if owner > fixed_upto && search(owner, target, fixed_upto, tight, row_of, seen, path) {
                path.push((r, c));
                return true;
            }
        }
        false
    }
    for i in 0..n {
        let current = col_of[i];
        for &j in &tight[i] {
            if j >= current {
                break;
            }
            let owner = row_of[j];
            if owner < i {
                continue;
            }
            let mut seen = vec![false; n];
            seen[j] = true;
            let mut path = Vec::new();
            if search(owner, current, i, tight, &row_of, &mut seen, &mut path) {
                for (r, c) in path {
                    col_of[r] = c;
                    row_of[c] = r;
                }
                col_of[i] = j;
                row_of[j] = i;
                break;
            }
        }
    }
}

/// Maximum-weight matching on an `n × n` bipartite graph.
///
/// Edges with nonpositive value are never used. `w` has the layout of the
/// matching problem: `n²` edge indicators followed by `2n` row/column slacks.
pub fn assignment_max(values: &Matrix) -> Result<OracleResult> {
    count_call();
    let n = values.rows;
    if values.cols != n || n == 0 {
        return Err(Error::InvalidParameter("assignment needs a nonempty square matrix".into()));
    }
    if !values.is_finite() {
        return Err(Error::non_finite("assignment values"));
    }
    let cost = Matrix {
        rows: n,
        cols: n,
        data: values.data.iter().map(|v| -v.max(0.0)).collect(),
    };
    let (mut col_of, u, v) = hungarian(&cost);
    let scale = 1.0 + cost.data.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| (cost.get(i, j) - u[i] - v[j]).abs() <= 1e-9 * scale)
                .collect()
        })
        .collect();
    lexicographic_matching(&tight, &mut col_of);
    let mut w = vec![0.0; n * n + 2 * n];
    let mut assignment = vec![None; n];
    for (i, &j) in col_of.iter().enumerate() {
        if values.get(i, j) > 0.0 {
            w[i * n + j] = 1.0;
            assignment[i] = Some(j);
        }
    }
    for i in 0..n {
        if assignment[i].is_none() {
            w[n * n + i] = 1.0;
        }
    }
    for j in 0..n {
        if !assignment.contains(&Some(j)) {
            w[n * n + n + j] = 1.0;
        }
    }
    let objective = (0..n).filter_map(|i| assignment[i].map(|j| values.get(i, j))).sum();
    Ok(OracleResult {
        w,
        objective,
        method: "hungarian".into(),
        certificate: Certificate::Matching { assignment },
    })
}

/// Weighted newsvendor SAA: minimizes `Σ_n ω_n Σ_j h_j (w_j − d_nj)⁺ + b_j (d_nj − w_j)⁺`
/// subject to `Σ w ≤ C`, `w ≥ 0`, with `ω` normalized to sum to one.
///
/// Each product's cost is convex piecewise linear with breakpoints at the
/// sampled demands, so filling segments in order of steepest slope is exact.
pub fn weighted_newsvendor_saa(
    demands: &[Vec<f64>],
    weights: &[f64],
    capacity: Option<f64>,
    h: &[f64],
    b: &[f64],
) -> Result<OracleResult> {
    count_call();
    if demands.is_empty() {
        return Err(Error::InvalidParameter("SAA needs at least one sample".into()));
    }
    Error::check_dim("sample weights", demands.len(), weights.len())?;
    let k = h.len();
    Error::check_dim("backorder costs", k, b.len())?;
    for d in demands {
        Error::check_dim("demand sample", k, d.len())?;
    }
    if let Some(c) = capacity {
        if !(c >= 0.0) {
            return Err(Error::InvalidParameter("capacity must be ≥ 0".into()));
        }
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidParameter("sample weights must be nonnegative with positive sum".into()));
    }
    // (slope, product, start, length) per segment.
    let mut segments = Vec::new();
    let mut zero_segments = Vec::new();
    for j in 0..k {
        let mut pts: Vec<(f64, f64)> = demands
            .iter()
            .zip(weights)
            .map(|(d, wt)| (d[j].max(0.0), wt / total))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut below: f64 = pts.iter().filter(|p| p.0 <= 0.0).map(|p| p.1).sum();
        let mut start = 0.0;
        let mut idx = pts.iter().position(|p| p.0 > 0.0).unwrap_or(pts.len());
        while idx < pts.len() {
            let end = pts[idx].0;
            let slope = h[j] * below - b[j] * (1.0 - below);
            let flat = 1e-12 * (h[j] + b[j]);
            if slope < -flat {
                segments.push((slope, j, start, end - start));
            } else if slope <= flat {
                zero_segments.push((j, start, end - start));
            }
            while idx < pts.len() && pts[idx].0 == end {
                below += pts[idx].1;
                idx += 1;
            }
            start = end;
        }
    }
    segments.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)));
    let mut w = vec![0.0; k];
    let mut left = capacity.unwrap_or(f64::INFINITY);
    let mut multiplier = 0.0;
    for (slope, j, _, len) in &segments {
        if left <= 0.0 {
            multiplier = -slope;
            break;
        }
        let take = len.min(left);
        w[*j] += take;
        left -= take;
        if take < *len {
            multiplier = -slope;
            left = 0.0;
        }
    }
    if left > 0.0 {
        for (j, start, len) in zero_segments {
            if w[j] == start {
                let take = (0.5 * len).min(left);
                w[j] += take;
                left -= take;
            }
        }
    }
    let objective = demands
        .iter()
        .zip(weights)
        .map(|(d, wt)| {
            wt / total
                * (0..k)
                    .map(|j| h[j] * (w[j] - d[j]).max(0.0) + b[j] * (d[j] - w[j]).max(0.0))
                    .sum::<f64>()
        })
        .sum();
    Ok(OracleResult {
        w,
        objective,
        method: "saa".into(),
        certificate: Certificate::Quantile { multiplier },
    })
}

pub fn newsvendor_saa(demands: &[Vec<f64>], capacity: Option<f64>, h: &[f64], b: &[f64]) -> Result<OracleResult> {
    weighted_newsvendor_saa(demands, &vec![1.0; demands.len()], capacity, h, b)
}

/// SAA over the `k` nearest training samples of `x` (ties by index).
pub fn knn_saa(
    train_x: &[Vec<f64>],
    train_u: &[Vec<f64>],
    x: &[f64],
    k: usize,
    capacity: Option<f64>,
    h: &[f64],
    b: &[f64],
) -> Result<OracleResult> {
    if k == 0 || k > train_x.len() {
        return Err(Error::InvalidParameter(format!(
            "neighbour count must be in 1..={}, got {k}",
            train_x.len()
        )));
    }
    Error::check_dim("training targets", train_x.len(), train_u.len())?;
    let mut order: Vec<(f64, usize)> = train_x.iter().map(|t| linalg::dist(t, x)).zip(0..).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let picked: Vec<Vec<f64>> = order[..k].iter().map(|(_, i)| train_u[*i].clone()).collect();
    let mut r = newsvendor_saa(&picked, capacity, h, b)?;
    r.method = "knn-saa".into();
    Ok(r)
}

/// Cross-fulfillment recourse `V(w, d)` by successive shortest paths.
///
/// Returns `(v, p, q)` in the layout of the second-stage problem.
pub fn cross_fulfill_recourse(c: &Matrix, h: &[f64], b: &[f64], w: &[f64], d: &[f64]) -> Result<OracleResult> {
    count_call();
    let (n, m) = (c.rows, c.cols);
    Error::check_dim("holding costs", n, h.len())?;
    Error::check_dim("backorder costs", m, b.len())?;
    Error::check_dim("first-stage decision", n, w.len())?;
    Error::check_dim("demand", m, d.len())?;
    if w.iter().chain(d).any(|x| !(*x >= 0.0)) {
        return Err(Error::Infeasible("recourse needs nonnegative stock and demand".into()));
    }
    // Nodes: 0 source, 1..=n warehouses, n+1..=n+m clients, n+m+1 sink.
    let nodes = n + m + 2;
    let sink = n + m + 1;
    struct Edge {
        to: usize,
        cap: f64,
        cost: f64,
    }
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj = vec![Vec::new(); nodes];
    let add = |edges: &mut Vec<Edge>, adj: &mut Vec<Vec<usize>>, a: usize, z: usize, cap: f64, cost: f64| {
        adj[a].push(edges.len());
        edges.push(Edge { to: z, cap, cost });
        adj[z].push(edges.len());
        edges.push(Edge { to: a, cap: 0.0, cost: -cost });
    };
    for i in 0..n {
        add(&mut edges, &mut adj, 0, 1 + i, w[i], 0.0);
    }
    let mut mid = vec![0; n * m];
    for i in 0..n {
        for j in 0..m {
            mid[i * m + j] = edges.len();
            add(&mut edges, &mut adj, 1 + i, 1 + n + j, f64::INFINITY, c.get(i, j) - h[i] - b[j]);
        }
    }
    for j in 0..m {
        add(&mut edges, &mut adj, 1 + n + j, sink, d[j], 0.0);
    }
    let eps = 1e-12;
    let mut augmentations = 0;
    loop {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut prev = vec![usize::MAX; nodes];
        dist[0] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for a in 0..nodes {
                if dist[a].is_infinite() {
                    continue;
                }
                for &e in &adj[a] {
                    let ed = &edges[e];
                    if ed.cap > eps && dist[a] + ed.cost < dist[ed.to] - 1e-15 {
                        dist[ed.to] = dist[a] + ed.cost;
                        prev[ed.to] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if !(dist[sink] < -eps) {
            break;
        }
        let mut push = f64::INFINITY;
        let mut v = sink;
        while v != 0 {
            let e = prev[v];
            push = push.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = sink;
        while v != 0 {
            let e = prev[v];
            edges[e].cap -= push;
            edges[e ^ 1].cap += push;
            v = edges[e ^ 1].to;
        }
        augmentations += 1;
        if augmentations > 100 * nodes * nodes {
            return Err(Error::Diverged {
                epoch: augmentations,
                reason: "min-cost flow did not terminate".into(),
            });
        }
    }
    let mut out = vec![0.0; n * m + n + m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = edges[mid[i * m + j] ^ 1].cap;
        }
    }
    for i in 0..n {
        let s: f64 = (0..m).map(|j| out[i * m + j]).sum();
        out[n * m + i] = (w[i] - s).max(0.0);
    }
    for j in 0..m {
        let s: f64 = (0..n).map(|i| out[i * m + j]).sum();
        out[n * m + n + j] = (d[j] - s).max(0.0);
    }
    let objective = linalg::dot(&c.data, &out[..n * m]) + linalg::dot(h, &out[n * m..n * m + n]) + linalg::dot(b, &out[n * m + n..]);
    Ok(OracleResult {
        w: out,
        objective,
        method: "min-cost-flow".into(),
        certificate: Certificate::Flow { augmentations },
    })
}

/// Appends the constraints of `sets`, acting on columns `col..col + dim`.
/// `rhs(o)` gives the right-hand side of the `o`-th parametric row together
/// with extra `(column, coefficient)` terms moved to the left-hand side.
fn add_sets(qp: &mut Qp, sets: &[ConvexSet], col: usize, dim: usize, rhs: &dyn Fn(usize) -> (Vec<(usize, f64)>, f64)) {
    let n = qp.n();
    let row = |a: &[f64], extra: &[(usize, f64)]| {
        let mut r = vec![0.0; n];
        r[col..col + dim].copy_from_slice(a);
        for &(j, v) in extra {
            r[j] += v;
        }
        r
    };
    let mut o = 0;
    for s in sets {
        match s {
            ConvexSet::Affine { a, .. } => {
                for i in 0..a.rows {
                    let (extra, b) = rhs(o + i);
                    qp.eq(row(a.row(i), &extra), b);
                }
                o += a.rows;
            }
            ConvexSet::Halfspace { a, .. } => {
                let (extra, b) = rhs(o);
                qp.le(row(a, &extra), b);
                o += 1;
            }
            ConvexSet::Nonneg => (0..dim).for_each(|i| qp.lower(col + i, 0.0)),
            ConvexSet::Box { lo, hi } => {
                for i in 0..dim {
                    if lo[i].is_finite() {
                        qp.lower(col + i, lo[i]);
                    }
                    if hi[i].is_finite() {
                        qp.upper(col + i, hi[i]);
                    }
                }
            }
            ConvexSet::Simplex { total } => {
                qp.eq(row(&vec![1.0; dim], &[]), *total);
                (0..dim).for_each(|i| qp.lower(col + i, 0.0));
            }
        }
    }
}

/// Writes the feasible region and objective of `p` at `u` as a QP over
/// `(w, auxiliaries)`.
fn to_qp(p: &Problem, u: &[f64]) -> Result<Qp> {
    let d = p.dim();
    let aux = match p.objective() {
        ObjectiveSpec::Electricity { .. } => 2 * d,
        ObjectiveSpec::PiecewiseNewsvendor { h, .. } => 2 * h.len(),
        ObjectiveSpec::QuadraticNewsvendor { support, .. } => 2 * support.len(),
        _ => 0,
    };
    let n = d + aux;
    let mut qp = Qp::new(n);
    let rhs = p.rhs(u).unwrap_or_else(|| p.plan().static_rhs().to_vec());
    add_sets(&mut qp, p.sets(), 0, d, &|o| (Vec::new(), rhs[o]));
    let sign = p.sense().sign();
    match p.objective() {
        ObjectiveSpec::Quadratic { q } => {
            if p.sense() != Sense::Min {
                return Err(Error::InvalidParameter("quadratic objectives must be minimized".into()));
            }
            for i in 0..q.rows {
                for j in 0..q.rows {
                    qp.p.set(i, j, q.get(i, j));
                }
                qp.q[i] = u[i];
            }
        }
        ObjectiveSpec::Electricity { gamma_s, gamma_e } => {
            for i in 0..d {
                qp.p.set(i, i, 1.0);
                qp.q[i] = -u[i];
                qp.q[d + i] = *gamma_s;
                qp.q[2 * d + i] = *gamma_e;
                // u − w ≤ s and w − u ≤ e.
                let mut r = vec![0.0; n];
                r[i] = -1.0;
                r[d + i] = -1.0;
                qp.le(r, -u[i]);
                let mut r = vec![0.0; n];
                r[i] = 1.0;
                r[2 * d + i] = -1.0;
                qp.le(r, u[i]);
                qp.lower(d + i, 0.0);
                qp.lower(2 * d + i, 0.0);
            }
        }
        ObjectiveSpec::PiecewiseNewsvendor { h, b } => {
            let k = h.len();
            for j in 0..k {
                qp.q[d + j] = h[j];
                qp.q[d + k + j] = b[j];
                let mut r = vec![0.0; n];
                r[j] = 1.0;
                r[d + j] = -1.0;
                qp.le(r, u[j]);
                let mut r = vec![0.0; n];
                r[j] = -1.0;
                r[d + k + j] = -1.0;
                qp.le(r, -u[j]);
                qp.lower(d + j, 0.0);
                qp.lower(d + k + j, 0.0);
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
            let k = support.len();
            qp.q[0] = *c0;
            qp.p.set(0, 0, *q0);
            for (i, (pk, dk)) in u.iter().zip(support).enumerate() {
                let (s, v) = (d + i, d + k + i);
                qp.q[s] = pk * cb;
                qp.q[v] = pk * ch;
                qp.p.set(s, s, 2.0 * pk * qb);
                qp.p.set(v, v, 2.0 * pk * qh);
                let mut r = vec![0.0; n];
                r[0] = -1.0;
                r[s] = -1.0;
                qp.le(r, -dk);
                let mut r = vec![0.0; n];
                r[0] = 1.0;
                r[v] = -1.0;
                qp.le(r, *dk);
                qp.lower(s, 0.0);
                qp.lower(v, 0.0);
            }
        }
        other => {
            let g = other.grad(u, &vec![0.0; d]);
            for i in 0..d {
                qp.q[i] = sign * g[i];
            }
        }
    }
    Ok(qp)
}

/// Exact optimum of any catalogued problem by a dense interior-point method.
pub fn exact_optimum(p: &Problem, u: &[f64]) -> Result<OracleResult> {
    count_call();
    Error::check_dim("uncertainty", p.u_dim(), u.len())?;
    let qp = to_qp(p, u)?;
    let sol = ipm::solve(&qp, 1e-10, 200);
    let w = sol.x[..p.dim()].to_vec();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("interior-point solution"));
    }
    let viol = p.max_violation(u, &w);
    if !(viol <= 1e-6) {
        return Err(Error::Infeasible(format!(
            "interior-point solution violates constraints by {viol:.3e}"
        )));
    }
    Ok(OracleResult {
        objective: p.objective().eval(u, &w),
        w,
        method: "interior-point".into(),
        certificate: Certificate::Interior {
            converged: sol.converged,
        },
    })
}

/// Exact minimizer over `w ≥ 0` of the quadratic newsvendor cost for a
/// demand distribution `probs` over `support`. The derivative is affine
/// between consecutive support points, so each segment is solved in closed
/// form; flat minima return their left end.
pub fn quadratic_newsvendor_exact(spec: &ObjectiveSpec, probs: &[f64]) -> Result<OracleResult> {
    count_call();
    let ObjectiveSpec::QuadraticNewsvendor {
        c0,
        q0,
        cb,
        qb,
        ch,
        qh,
        support,
    } = spec
    else {
        return Err(Error::InvalidParameter("expected a quadratic newsvendor objective".into()));
    };
    Error::check_dim("demand distribution", support.len(), probs.len())?;
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidParameter("probabilities must be finite and ≥ 0".into()));
    }
    let mut knots: Vec<f64> = std::iter::once(0.0).chain(support.iter().copied().filter(|d| *d > 0.0)).collect();
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    // g'(x) = α + βx on the open segment containing `mid`.
    let slope = |mid: f64| {
        let (mut alpha, mut beta) = (*c0, *q0);
        for (p, d) in probs.iter().zip(support) {
            if *d > mid {
                alpha -= p * (cb + 2.0 * qb * d);
                beta += 2.0 * p * qb;
            } else {
                alpha += p * (ch - 2.0 * qh * d);
                beta += 2.0 * p * qh;
            }
        }
        (alpha, beta)
    };
    let mut x = None;
    let mut seg = (0.0, f64::INFINITY);
    for (i, &a) in knots.iter().enumerate() {
        let b = knots.get(i + 1).copied().unwrap_or(f64::INFINITY);
        let mid = if b.is_finite() { 0.5 * (a + b) } else { a + 1.0 };
        let (alpha, beta) = slope(mid);
        seg = (a, b);
        if alpha + beta * a >= 0.0 {
            x = Some(a);
            break;
        }
        if beta > 0.0 && alpha + beta * b >= 0.0 {
            x = Some((-alpha / beta).clamp(a, b));
            break;
        }
    }
    let x = x.ok_or_else(|| Error::InvalidParameter("quadratic newsvendor cost is unbounded below".into()))?;
    let w = vec![x];
    Ok(OracleResult {
        objective: spec.eval(probs, &w),
        w,
        method: "segment-scan".into(),
        certificate: Certificate::Segment { lo: seg.0, hi: seg.1 },
    })
}

/// Optimal stock when the demand is known to equal `demand`.
pub fn quadratic_newsvendor_point(spec: &ObjectiveSpec, demand: f64) -> Result<OracleResult> {
    let ObjectiveSpec::QuadraticNewsvendor {
        c0,
        q0,
        cb,
        qb,
        ch,
        qh,
        ..
    } = spec
    else {
        return Err(Error::InvalidParameter("expected a quadratic newsvendor objective".into()));
    };
    let point = ObjectiveSpec::QuadraticNewsvendor {
        c0: *c0,
        q0: *q0,
        cb: *cb,
        qb: *qb,
        ch: *ch,
        qh: *qh,
        support: vec![demand],
    };
    quadratic_newsvendor_exact(&point, &[1.0])
}

/// Best available exact solver for `p`: Hungarian for matching, Dijkstra
/// for grid shortest paths, a segment scan for the quadratic newsvendor,
/// the interior-point method otherwise.
pub fn optimum(p: &Problem, u: &[f64]) -> Result<OracleResult> {
    Error::check_dim("uncertainty", p.u_dim(), u.len())?;
    match (p.kind(), p.objective()) {
        ("matching", ObjectiveSpec::MatchingLinear { n }) => assignment_max(&Matrix::from_vec(*n, *n, u.to_vec())?),
        ("shortest-path", ObjectiveSpec::ShortestPathLinear { .. }) => {
            let g = (u.len() as f64).sqrt().round() as usize;
            dijkstra_grid(&Matrix::from_vec(g, g, u.to_vec())?, 0, g * g - 1)
        }
        ("quadratic-newsvendor", spec @ ObjectiveSpec::QuadraticNewsvendor { .. }) => quadratic_newsvendor_exact(spec, u),
        _ => exact_optimum(p, u),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub iterations: usize,
    pub eta: f64,
    pub cycles: usize,
    pub final_cycles: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            iterations: 10_000,
            eta: 0.05,
            cycles: 20,
            final_cycles: 200,
        }
    }
}

/// Long-run projected gradient descent with a decaying step
/// `η_t = η / √(1 + t/1000)`.
///
/// Flags non-convergence when the objective still improved by more than
/// `1e-6` over the last 1000 iterations.
pub fn reference_optimum(p: &Problem, u: &[f64], cfg: &ReferenceConfig) -> Result<OracleResult> {
    count_call();
    Error::check_dim("uncertainty", p.u_dim(), u.len())?;
    let plan = p.plan();
    let rhs = p.rhs(u);
    let d = p.dim();
    let mut w = plan.project_with_rhs(&vec![0.0; d], rhs.as_deref(), cfg.final_cycles)?;
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    history.push(p.loss(u, &w));
    for t in 0..cfg.iterations {
        let eta = cfg.eta / (1.0 + t as f64 / 1000.0).sqrt();
        let g = p.loss_grad(u, &w);
        let step: Vec<f64> = w.iter().zip(&g).map(|(x, gi)| x - eta * gi).collect();
        if step.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite(format!("reference iterate t={}", t + 1)));
        }
        w = plan.project_with_rhs(&step, rhs.as_deref(), cfg.cycles)?;
        history.push(p.loss(u, &w));
    }
    w = plan.project_with_rhs(&w, rhs.as_deref(), cfg.final_cycles)?;
    let last = *history.last().expect("nonempty");
    let window = history.len().saturating_sub(1001);
    let converged = history[window] - last <= 1e-6 * (1.0 + last.abs());
    Ok(OracleResult {
        objective: p.objective().eval(u, &w),
        w,
        method: "reference-pgd".into(),
        certificate: Certificate::Reference {
            converged,
            iterations: cfg.iterations,
        },
    })
}

/// Optimal first stage for a known demand: `min first_costᵀw + V(w, d)` over
/// the first-stage set, with the second stage written out as an LP whose
/// right-hand side is affine in `(w, d)`. The second-stage objective must
/// be linear in its decision.
pub fn two_stage_point(first: &Problem, first_cost: &[f64], second: &Problem, d: &[f64]) -> Result<OracleResult> {
    count_call();
    let (n1, n2) = (first.dim(), second.dim());
    Error::check_dim("first-stage cost", n1, first_cost.len())?;
    Error::check_dim("second-stage input", second.u_dim(), n1 + d.len())?;
    if first.has_parametric_rhs() {
        return Err(Error::InvalidParameter("first stage needs a static right-hand side".into()));
    }
    let mut u0 = vec![0.0; n1];
    u0.extend_from_slice(d);
    let base = second
        .rhs(&u0)
        .ok_or_else(|| Error::InvalidParameter("second stage must depend on the first through its right-hand side".into()))?;
    // Columns of the w-part of the right-hand side map.
    let coef_w: Vec<Vec<f64>> = (0..n1)
        .map(|i| {
            let mut e = u0.clone();
            e[i] += 1.0;
            let r = second.rhs(&e).expect("parametric");
            r.iter().zip(&base).map(|(a, b)| a - b).collect()
        })
        .collect();
    let mut qp = Qp::new(n1 + n2);
    let static_rhs = first.plan().static_rhs().to_vec();
    add_sets(&mut qp, first.sets(), 0, n1, &|o| (Vec::new(), static_rhs[o]));
    add_sets(&mut qp, second.sets(), n1, n2, &|o| {
        let extra = (0..n1).filter(|&i| coef_w[i][o] != 0.0).map(|i| (i, -coef_w[i][o])).collect();
        (extra, base[o])
    });
    qp.q[..n1].copy_from_slice(first_cost);
    let g2 = second.loss_grad(&u0, &vec![0.0; n2]);
    qp.q[n1..].copy_from_slice(&g2);
    let sol = ipm::solve(&qp, 1e-10, 200);
    let w = sol.x[..n1].to_vec();
    let v = &sol.x[n1..];
    let mut u = w.clone();
    u.extend_from_slice(d);
    let viol = first.max_violation(&[], &w).max(second.max_violation(&u, v));
    if !(viol <= 1e-6) {
        return Err(Error::Infeasible(format!(
            "two-stage program has no feasible point (violation {viol:.3e})"
        )));
    }
    Ok(OracleResult {
        objective: linalg::dot(first_cost, &w) + second.loss(&u, v),
        w,
        method: "interior-point".into(),
        certificate: Certificate::Interior {
            converged: sol.converged,
        },
    })
}

/// Forecaster fit by squared error, with decisions from the exact oracle
/// applied to its forecast.
#[derive(Clone, Debug)]
pub struct PredictThenOptimize {
    pub forecaster: Forecaster,
    pub history: LossHistory,
}

impl PredictThenOptimize {
    pub fn fit(f0: &Forecaster, train: Samples, val: Samples, schedule: &TrainSchedule) -> Result<Self> {
        let out = end2end::train_mse(f0, train, val, schedule)?;
        Ok(PredictThenOptimize {
            forecaster: out.forecaster,
            history: out.history,
        })
    }

    pub fn decide(&self, p: &Problem, x: &[f64]) -> Result<Vec<f64>> {
        end2end::decide(&self.forecaster, p, x, &DecisionMode::Exact)
    }

    pub fn evaluate(&self, p: &Problem, samples: Samples) -> Result<f64> {
        end2end::evaluate_forecaster(&self.forecaster, p, samples, &DecisionMode::Exact)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{build_problem, ProblemKind};
    use crate::random;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn assignment_examples() {
        let r = assignment_max(&Matrix::identity(3)).unwrap();
        assert_eq!(r.objective, 3.0);
        let r = assignment_max(&Matrix::from_rows(&[vec![3.0, 1.0], vec![1.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(r.objective, 6.0);
        assert_eq!(
            r.certificate,
            Certificate::Matching {
                assignment: vec![Some(0), Some(1)]
            }
        );
    }

    #[test]
    fn assignment_matches_enumeration() {
        let mut r = random::rng(3);
        let perms = permutations(6);
        for _ in 0..20 {
            let v = Matrix::from_vec(6, 6, (0..36).map(|_| r.gen::<f64>()).collect()).unwrap();
            let best = perms
                .iter()
                .map(|p| (0..6).map(|i| v.get(i, p[i])).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            let o = assignment_max(&v).unwrap();
            assert!((o.objective - best).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_ties_pick_smallest_permutation() {
        let v = Matrix::from_vec(3, 3, vec![1.0; 9]).unwrap();
        let o = assignment_max(&v).unwrap();
        assert_eq!(
            o.certificate,
            Certificate::Matching {
                assignment: vec![Some(0), Some(1), Some(2)]
            }
        );
    }

    #[test]
    fn assignment_is_feasible_for_matching_problem() {
        let p = build_problem(&ProblemKind::Matching { n: 5 }).unwrap();
        let mut r = random::rng(4);
        let u: Vec<f64> = (0..25).map(|_| r.gen::<f64>() - 0.3).collect();
        let o = assignment_max(&Matrix::from_vec(5, 5, u.clone()).unwrap()).unwrap();
        assert!(p.max_violation(&u, &o.w) < 1e-12);
        assert!((p.eval_objective(&u, &o.w).unwrap() - o.objective).abs() < 1e-12);
    }

    fn all_monotone_free_paths(g: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut path = vec![0];
        fn rec(g: usize, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            let v = *path.last().unwrap();
            if v == g * g - 1 {
                out.push(path.clone());
                return;
            }
            let (r, c) = (v / g, v % g);
            let mut nb = Vec::new();
            if c + 1 < g {
                nb.push(v + 1);
            }
            if r + 1 < g {
                nb.push(v + g);
            }
            if c > 0 {
                nb.push(v - 1);
            }
            if r > 0 {
                nb.push(v - g);
            }
            for n in nb {
                if !path.contains(&n) {
                    path.push(n);
                    rec(g, path, out);
                    path.pop();
                }
            }
        }
        rec(g, &mut path, &mut out);
        out
    }

    #[test]
    fn dijkstra_examples() {
        let one = dijkstra_grid(&Matrix::from_vec(1, 1, vec![2.5]).unwrap(), 0, 0).unwrap();
        assert!(one.w.is_empty());
        assert_eq!(one.objective, 2.5);
        let r = dijkstra_grid(&Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap(), 0, 3).unwrap();
        assert_eq!(r.objective, 3.0);
        assert_eq!(r.certificate, Certificate::Path { vertices: vec![0, 1, 3] });
        assert!(dijkstra_grid(&Matrix::from_vec(2, 2, vec![1.0, -1.0, 1.0, 1.0]).unwrap(), 0, 3).is_err());
    }

    #[test]
    fn dijkstra_matches_path_enumeration() {
        let paths = all_monotone_free_paths(4);
        let mut r = random::rng(5);
        for _ in 0..10 {
            let c: Vec<f64> = (0..16).map(|_| r.gen::<f64>() * 5.0).collect();
            let best = paths
                .iter()
                .map(|p| p.iter().map(|v| c[*v]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let o = dijkstra_grid(&Matrix::from_vec(4, 4, c.clone()).unwrap(), 0, 15).unwrap();
            assert!((o.objective - best).abs() < 1e-12);
            let p = build_problem(&ProblemKind::ShortestPath { grid: 4 }).unwrap();
            assert!(p.max_violation(&c, &o.w) < 1e-12);
            assert!((p.eval_objective(&c, &o.w).unwrap() - o.objective).abs() < 1e-12);
        }
    }

    #[test]
    fn saa_examples() {
        let d = vec![vec![1.0], vec![2.0], vec![3.0]];
        let r = newsvendor_saa(&d, None, &[1.0], &[2.0]).unwrap();
        assert_eq!(r.w, vec![2.5]);
        assert!((r.objective - 1.0).abs() < 1e-15);
        let r = newsvendor_saa(&[vec![1.7]], None, &[1.0], &[2.0]).unwrap();
        assert_eq!(r.w, vec![1.7]);
        assert_eq!(r.objective, 0.0);
        let r = newsvendor_saa(&d, Some(0.0), &[1.0], &[2.0]).unwrap();
        assert_eq!(r.w, vec![0.0]);
    }

    #[test]
    fn saa_matches_grid_search() {
        let mut r = random::rng(6);
        for cap in [None, Some(3.0), Some(1.0)] {
            let demands: Vec<Vec<f64>> = (0..15).map(|_| vec![r.gen::<f64>() * 3.0, r.gen::<f64>() * 2.0]).collect();
            let (h, b) = ([1.0, 0.5], [2.0, 3.0]);
            let o = newsvendor_saa(&demands, cap, &h, &b).unwrap();
            let cost = |w: &[f64]| {
                demands
                    .iter()
                    .map(|d| (0..2).map(|j| h[j] * (w[j] - d[j]).max(0.0) + b[j] * (d[j] - w[j]).max(0.0)).sum::<f64>())
                    .sum::<f64>()
                    / 15.0
            };
            let c = cap.unwrap_or(f64::INFINITY);
            let mut best = f64::INFINITY;
            for a in 0..=300 {
                for bb in 0..=200 {
                    let w = [a as f64 * 0.01, bb as f64 * 0.01];
                    if w[0] + w[1] <= c + 1e-12 {
                        best = best.min(cost(&w));
                    }
                }
            }
            assert!(o.w.iter().sum::<f64>() <= c + 1e-12);
            assert!(o.objective <= best + 1e-12, "{cap:?}: {} vs {best}", o.objective);
            assert!((o.objective - cost(&o.w)).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_with_all_neighbours_is_saa() {
        let xs = vec![vec![0.0], vec![1.0], vec![2.0]];
        let us = vec![vec![1.0], vec![2.0], vec![3.0]];
        let a = knn_saa(&xs, &us, &[0.4], 3, None, &[1.0], &[2.0]).unwrap();
        let b = newsvendor_saa(&us, None, &[1.0], &[2.0]).unwrap();
        assert_eq!(a.w, b.w);
        let one = knn_saa(&xs, &us, &[1.9], 1, None, &[1.0], &[2.0]).unwrap();
        assert_eq!(one.w, vec![3.0]);
        assert!(knn_saa(&xs, &us, &[0.0], 0, None, &[1.0], &[2.0]).is_err());
    }

    #[test]
    fn recourse_matches_interior_point() {
        let mut r = random::rng(7);
        for _ in 0..10 {
            let c = Matrix::from_vec(3, 3, (0..9).map(|i| if i % 4 == 0 { 0.0 } else { r.gen::<f64>() * 2.0 }).collect()).unwrap();
            let h = vec![0.3, 0.5, 0.2];
            let b = vec![2.0, 2.5, 3.0];
            let w: Vec<f64> = (0..3).map(|_| r.gen::<f64>() * 3.0).collect();
            let d: Vec<f64> = (0..3).map(|_| r.gen::<f64>() * 3.0).collect();
            let flow = cross_fulfill_recourse(&c, &h, &b, &w, &d).unwrap();
            let p = build_problem(&ProblemKind::CrossFulfillSecondStage {
                c: c.clone(),
                h: h.clone(),
                b: b.clone(),
            })
            .unwrap();
            let theta: Vec<f64> = w.iter().chain(&d).copied().collect();
            assert!(p.max_violation(&theta, &flow.w) < 1e-12);
            let ipm = exact_optimum(&p, &theta).unwrap();
            assert!((ipm.objective - flow.objective).abs() < 1e-6, "{} vs {}", ipm.objective, flow.objective);
        }
    }

    #[test]
    fn cross_fulfill_loss_type_premise() {
        let c = Matrix::zeros(3, 3);
        let d = [1.0, 0.5, 2.0];
        let r = cross_fulfill_recourse(&c, &[1.0; 3], &[2.0; 3], &d, &d).unwrap();
        assert!(r.objective.abs() < 1e-12);
    }

    #[test]
    fn exact_optimum_solves_each_family() {
        let el = build_problem(&ProblemKind::Electricity {
            horizon: 6,
            ramp: 0.4,
            gamma_s: 50.0,
            gamma_e: 0.5,
        })
        .unwrap();
        // Feasible u is its own optimum with cost 0.
        let u = [1.0, 1.3, 1.6, 1.5, 1.2, 1.0];
        let o = exact_optimum(&el, &u).unwrap();
        assert!(o.objective < 1e-7);
        let nv = build_problem(&ProblemKind::CapacitatedNewsvendor {
            h: vec![1.0, 0.5],
            b: vec![2.0, 3.0],
            capacity: Some(2.0),
        })
        .unwrap();
        let o = exact_optimum(&nv, &[1.5, 1.5]).unwrap();
        let s = newsvendor_saa(&[vec![1.5, 1.5]], Some(2.0), &[1.0, 0.5], &[2.0, 3.0]).unwrap();
        assert!((o.objective - s.objective).abs() < 1e-7);
        let m = build_problem(&ProblemKind::Matching { n: 4 }).unwrap();
        let mut r = random::rng(8);
        let u: Vec<f64> = (0..16).map(|_| r.gen::<f64>()).collect();
        let o = exact_optimum(&m, &u).unwrap();
        let a = assignment_max(&Matrix::from_vec(4, 4, u.clone()).unwrap()).unwrap();
        assert!((o.objective - a.objective).abs() < 1e-7);
    }

    #[test]
    fn reference_optimum_matches_closed_form_quadratic() {
        let q = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let p = Problem::new(
            "qp",
            2,
            2,
            vec![ConvexSet::Box {
                lo: vec![-10.0; 2],
                hi: vec![10.0; 2],
            }],
            ObjectiveSpec::Quadratic { q },
            Sense::Min,
        )
        .unwrap();
        let u = [1.0, -2.0];
        // Q w = −u.
        let det = 2.0 * 1.0 - 0.25;
        let w = [(-1.0 * 1.0 - 0.5 * 2.0) / det, (2.0 * 2.0 + 0.5 * 1.0) / det];
        let o = reference_optimum(&p, &u, &ReferenceConfig::default()).unwrap();
        assert!(linalg::max_abs_diff(&o.w, &w) < 1e-6, "{:?} vs {w:?}", o.w);
    }

    #[test]
    fn reference_optimum_agrees_with_combinatorial_oracles() {
        let mut r = random::rng(9);
        let m = build_problem(&ProblemKind::Matching { n: 4 }).unwrap();
        let u: Vec<f64> = (0..16).map(|_| r.gen::<f64>()).collect();
        let refo = reference_optimum(&m, &u, &ReferenceConfig::default()).unwrap();
        let a = assignment_max(&Matrix::from_vec(4, 4, u.clone()).unwrap()).unwrap();
        assert!((refo.objective - a.objective).abs() <= 1e-3 * a.objective);
        let sp = build_problem(&ProblemKind::ShortestPath { grid: 3 }).unwrap();
        let c: Vec<f64> = (0..9).map(|_| 0.5 + r.gen::<f64>()).collect();
        let refo = reference_optimum(&sp, &c, &ReferenceConfig::default()).unwrap();
        let dj = dijkstra_grid(&Matrix::from_vec(3, 3, c.clone()).unwrap(), 0, 8).unwrap();
        assert!((refo.objective - dj.objective).abs() <= 1e-3 * dj.objective);
    }

    #[test]
    fn oracles_beat_random_feasible_points() {
        let mut r = random::rng(10);
        let (h, b) = ([1.0, 0.5, 2.0], [2.0, 3.0, 1.0]);
        let demands: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| r.gen::<f64>() * 2.0).collect()).collect();
        let o = newsvendor_saa(&demands, Some(3.0), &h, &b).unwrap();
        let cost = |w: &[f64]| {
            demands
                .iter()
                .map(|d| (0..3).map(|j| h[j] * (w[j] - d[j]).max(0.0) + b[j] * (d[j] - w[j]).max(0.0)).sum::<f64>())
                .sum::<f64>()
                / 8.0
        };
        for _ in 0..1_000_000 {
            let mut w: Vec<f64> = (0..3).map(|_| r.gen::<f64>() * 3.0).collect();
            let s: f64 = w.iter().sum();
            if s > 3.0 {
                w.iter_mut().for_each(|x| *x *= 3.0 / s);
            }
            assert!(o.objective <= cost(&w) + 1e-12);
        }
        let v = Matrix::from_vec(5, 5, (0..25).map(|_| r.gen::<f64>()).collect()).unwrap();
        let a = assignment_max(&v).unwrap();
        let mut perm: Vec<usize> = (0..5).collect();
        for _ in 0..1_000_000 {
            perm.shuffle(&mut r);
            let val: f64 = (0..5).map(|i| v.get(i, perm[i])).sum();
            assert!(a.objective >= val - 1e-12);
        }
    }

    #[test]
    fn oracle_counter_counts_calls_on_this_thread() {
        let before = oracle_calls();
        let _ = assignment_max(&Matrix::identity(2)).unwrap();
        let _ = newsvendor_saa(&[vec![1.0]], None, &[1.0], &[1.0]).unwrap();
        assert_eq!(oracle_calls() - before, 2);
    }

    #[test]
    fn quadratic_newsvendor_scan_matches_grid_search() {
        let spec = ObjectiveSpec::QuadraticNewsvendor {
            c0: 10.0,
            q0: 2.0,
            cb: 30.0,
            qb: 14.0,
            ch: 10.0,
            qh: 2.0,
            support: vec![2.0, 4.0, 6.0, 8.0, 10.0],
        };
        let mut r = random::rng(8);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..5).map(|_| r.gen::<f64>().powi(4)).collect();
            let t: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / t).collect();
            let res = quadratic_newsvendor_exact(&spec, &probs).unwrap();
            let best = (0..=120_000)
                .map(|k| k as f64 * 1e-4)
                .map(|x| spec.eval(&probs, &[x]))
                .fold(f64::INFINITY, f64::min);
            assert!(res.objective <= best + 1e-6, "{} vs {best}", res.objective);
        }
    }

    #[test]
    fn quadratic_newsvendor_scan_handles_degenerate_distributions() {
        let support = vec![2.0, 4.0, 6.0, 8.0, 10.0];
        let p = crate::problems::build_problem(&crate::problems::ProblemKind::QuadraticNewsvendor {
            c0: 10.0,
            q0: 2.0,
            cb: 30.0,
            qb: 14.0,
            ch: 10.0,
            qh: 2.0,
            support,
        })
        .unwrap();
        let probs = [2.3e-5, 3.7e-11, 6.0e-8, 1.9e-7, 1.0 - 2.3e-5];
        let res = optimum(&p, &probs).unwrap();
        assert!(res.w[0].is_finite() && res.w[0] > 9.0 && res.w[0] <= 10.0, "{:?}", res.w);
        // One-hot at d = 2: stock exactly 2 since the marginal cost jumps across zero there.
        let res = optimum(&p, &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((res.w[0] - 2.0).abs() < 1e-12);
    }
}
