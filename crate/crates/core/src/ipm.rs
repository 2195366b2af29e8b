//! Dense primal-dual interior-point method for small convex QPs:
//! `min ½xᵀPx + qᵀx  s.t.  Ax = b, Gx ≤ h`.
//!
//! Mehrotra predictor-corrector on the reduced normal system. Used only as
//! a ground-truth oracle.

use crate::linalg::{self, Matrix};

pub(crate) struct Qp {
    pub p: Matrix,
    pub q: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub g: Vec<Vec<f64>>,
    pub h: Vec<f64>,
}

impl Qp {
    pub fn new(n: usize) -> Self {
        Qp {
            p: Matrix::zeros(n, n),
            q: vec![0.0; n],
            a: Vec::new(),
            b: Vec::new(),
            g: Vec::new(),
            h: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn eq(&mut self, row: Vec<f64>, rhs: f64) {
        self.a.push(row);
        self.b.push(rhs);
    }

    pub fn le(&mut self, row: Vec<f64>, rhs: f64) {
        self.g.push(row);
        self.h.push(rhs);
    }

    /// `x_i ≥ lo`.
    pub fn lower(&mut self, i: usize, lo: f64) {
        let mut r = vec![0.0; self.n()];
        r[i] = -1.0;
        self.le(r, -lo);
    }

    pub fn upper(&mut self, i: usize, hi: f64) {
        let mut r = vec![0.0; self.n()];
        r[i] = 1.0;
        self.le(r, hi);
    }
}

pub(crate) struct QpSolution {
    pub x: Vec<f64>,
    pub converged: bool,
}

fn step_to_boundary(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn solve(qp: &Qp, tol: f64, max_iter: usize) -> QpSolution {
    let n = qp.n();
    let me = qp.a.len();
    let mi = qp.g.len();
    let mut x = vec![0.0; n];
    let mut y = vec![0.0; me];
    let mut s: Vec<f64> = qp.h.iter().map(|h| h.max(1.0)).collect();
    let mut z = vec![1.0; mi];
    let scale_q = 1.0 + qp.q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale_b = 1.0 + qp.b.iter().chain(&qp.h).fold(0.0f64, |m, v| m.max(v.abs()));
    let mut converged = false;
    for _ in 0..max_iter {
        // Residuals.
        let mut rd = qp.p.matvec(&x);
        linalg::axpy(1.0, &qp.q, &mut rd);
        for (row, yi) in qp.a.iter().zip(&y) {
            linalg::axpy(*yi, row, &mut rd);
        }
        for (row, zi) in qp.g.iter().zip(&z) {
            linalg::axpy(*zi, row, &mut rd);
        }
        let rp: Vec<f64> = qp.a.iter().zip(&qp.b).map(|(r, b)| linalg::dot(r, &x) - b).collect();
        let ri: Vec<f64> = (0..mi).map(|k| linalg::dot(&qp.g[k], &x) + s[k] - qp.h[k]).collect();
        let mu = if mi > 0 { linalg::dot(&s, &z) / mi as f64 } else { 0.0 };
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if inf(&rd) <= tol * scale_q && inf(&rp).max(inf(&ri)) <= tol * scale_b && mu <= tol * 0.1 {
            converged = true;
            break;
        }
        // Reduced matrix [H Aᵀ; A −δI] with H = P + Gᵀ diag(z/s) G.
        let dim = n + me;
        let mut k = Matrix::zeros(dim, dim);
        for i in 0..n {
            for j in 0..n {
                k.set(i, j, qp.p.get(i, j));
            }
            k.set(i, i, k.get(i, i) + 1e-12);
        }
        for (c, row) in qp.g.iter().enumerate() {
            let wgt = z[c] / s[c];
            let nz: Vec<usize> = (0..n).filter(|&i| row[i] != 0.0).collect();
            for &i in &nz {
                for &j in &nz {
                    let v = k.get(i, j) + wgt * row[i] * row[j];
                    k.set(i, j, v);
                }
            }
        }
        for (r, row) in qp.a.iter().enumerate() {
            for j in 0..n {
                k.set(n + r, j, row[j]);
                k.set(j, n + r, row[j]);
            }
            k.set(n + r, n + r, -1e-12);
        }
        let solve_dir = |rc: &[f64]| -> Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
            // dz = (rc + z∘(ri + G dx)) / s; ds = −ri − G dx.
            let mut rhs = vec![0.0; dim];
            for i in 0..n {
                rhs[i] = -rd[i];
            }
            for c in 0..mi {
                let t = (rc[c] + z[c] * ri[c]) / s[c];
                linalg::axpy(-t, &qp.g[c], &mut rhs[..n]);
            }
            for r in 0..me {
                rhs[n + r] = -rp[r];
            }
            let sol = linalg::lu_solve(&k, &rhs)?;
            let dx = sol[..n].to_vec();
            let dy = sol[n..].to_vec();
            let gdx: Vec<f64> = qp.g.iter().map(|r| linalg::dot(r, &dx)).collect();
            let ds: Vec<f64> = (0..mi).map(|c| -ri[c] - gdx[c]).collect();
            let dz: Vec<f64> = (0..mi).map(|c| (rc[c] - z[c] * ds[c]) / s[c]).collect();
            Some((dx, dy, ds, dz))
        };
        let rc_aff: Vec<f64> = (0..mi).map(|c| -s[c] * z[c]).collect();
        let Some((_, _, ds_a, dz_a)) = solve_dir(&rc_aff) else {
            break;
        };
        let alpha_a = 1.0f64.min(step_to_boundary(&s, &ds_a)).min(step_to_boundary(&z, &dz_a));
        let mu_aff = if mi > 0 {
            (0..mi)
                .map(|c| (s[c] + alpha_a * ds_a[c]) * (z[c] + alpha_a * dz_a[c]))
                .sum::<f64>()
                / mi as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3) } else { 0.0 };
        let rc: Vec<f64> = (0..mi)
            .map(|c| -s[c] * z[c] + sigma * mu - ds_a[c] * dz_a[c])
            .collect();
        let Some((dx, dy, ds, dz)) = solve_dir(&rc) else {
            break;
        };
        let alpha = 1.0f64
            .min(0.99 * step_to_boundary(&s, &ds))
            .min(0.99 * step_to_boundary(&z, &dz));
        linalg::axpy(alpha, &dx, &mut x);
        linalg::axpy(alpha, &dy, &mut y);
        linalg::axpy(alpha, &ds, &mut s);
        linalg::axpy(alpha, &dz, &mut z);
    }
    QpSolution { x, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_lp() {
        // min −x − y  s.t. x + 2y ≤ 4, 3x + y ≤ 6, x, y ≥ 0 → (1.6, 1.2).
        let mut qp = Qp::new(2);
        qp.q = vec![-1.0, -1.0];
        qp.le(vec![1.0, 2.0], 4.0);
        qp.le(vec![3.0, 1.0], 6.0);
        qp.lower(0, 0.0);
        qp.lower(1, 0.0);
        let r = solve(&qp, 1e-10, 100);
        assert!(r.converged);
        assert!(linalg::max_abs_diff(&r.x, &[1.6, 1.2]) < 1e-7);
    }

    #[test]
    fn solves_equality_constrained_qp() {
        // min ½‖x‖² s.t. x₁ + x₂ + x₃ = 3 → (1, 1, 1).
        let mut qp = Qp::new(3);
        qp.p = Matrix::identity(3);
        qp.eq(vec![1.0; 3], 3.0);
        let r = solve(&qp, 1e-10, 100);
        assert!(r.converged);
        assert!(linalg::max_abs_diff(&r.x, &[1.0; 3]) < 1e-8);
    }
}
