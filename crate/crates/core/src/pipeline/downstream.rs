//! Multinomial logistic regression probe on frozen embeddings.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::rng;
use crate::diffcore::Tensor;

pub const DEFAULT_L2: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-6;
const MAX_ITERS: usize = 2000;
const HISTORY: usize = 10;

/// Linear softmax classifier over standardised features.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    classes: Vec<i64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(dim + 1) x classes`, bias in the last row.
    weights: Vec<f64>,
    pub final_loss: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    dim: usize,
    classes: usize,
    l2: f64,
}

impl Problem<'_> {
    /// Mean cross-entropy plus `l2/2 · ‖θ‖²`, and its gradient.
    fn eval(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let (d, c) = (self.dim, self.classes);
        let mut grad = vec![0.0; w.len()];
        let mut loss = 0.0;
        let mut z = vec![0.0; c];
        let inv_n = 1.0 / self.x.len() as f64;
        for (xi, &yi) in self.x.iter().zip(self.y) {
            z.copy_from_slice(&w[d * c..]);
            for (j, xj) in xi.iter().enumerate() {
                let row = &w[j * c..(j + 1) * c];
                for k in 0..c {
                    z[k] += xj * row[k];
                }
            }
            let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + s.ln();
            loss += lse - z[yi];
            for k in 0..c {
                z[k] = (z[k] - lse).exp() * inv_n;
            }
            z[yi] -= inv_n;
            for (j, xj) in xi.iter().enumerate() {
                let g = &mut grad[j * c..(j + 1) * c];
                for k in 0..c {
                    g[k] += xj * z[k];
                }
            }
            for k in 0..c {
                grad[d * c + k] += z[k];
            }
        }
        loss *= inv_n;
        for (g, wi) in grad.iter_mut().zip(w) {
            *g += self.l2 * wi;
        }
        loss += 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>();
        (loss, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Limited-memory BFGS with Armijo backtracking; returns
/// `(weights, loss, grad_norm, iterations)`.
fn lbfgs(p: &Problem, mut w: Vec<f64>) -> (Vec<f64>, f64, f64, usize) {
    let (mut f, mut g) = p.eval(&w);
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iters = 0;
    while iters < MAX_ITERS && norm(&g) >= GRAD_TOL {
        iters += 1;
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let gn = norm(&g);
            q.iter_mut().for_each(|v| *v /= gn.max(1.0));
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            mem.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-20 {
            let cand: Vec<f64> = w.iter().zip(&dir).map(|(wi, di)| wi + step * di).collect();
            let (fc, gc) = p.eval(&cand);
            if fc <= f + 1e-4 * step * slope {
                accepted = Some((cand, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((nw, nf, ng)) = accepted else { break };
        let s: Vec<f64> = nw.iter().zip(&w).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = ng.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if mem.len() == HISTORY {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        w = nw;
        f = nf;
        g = ng;
    }
    let gn = norm(&g);
    (w, f, gn, iters)
}

impl LogisticRegression {
    /// Fits on `x` (one row per sample) with labels `y`; `seed` draws the
    /// initial weights.
    pub fn fit(x: &[Vec<f64>], y: &[i64], l2: f64, seed: u64) -> Result<Self> {
        if x.len() != y.len() || x.is_empty() {
            return Err(Error::Shape(format!("{} samples for {} labels", x.len(), y.len())));
        }
        let dim = x[0].len();
        if x.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("feature rows have different lengths".into()));
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("non-finite feature".into()));
        }
        let mut classes: Vec<i64> = y.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Degenerate("logistic regression needs at least two classes".into()));
        }
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 { v.sqrt() } else { 1.0 }
            })
            .collect();
        let xs: Vec<Vec<f64>> = x.iter().map(|r| standardise(r, &mean, &scale)).collect();
        let yi: Vec<usize> = y.iter().map(|l| classes.binary_search(l).unwrap()).collect();
        let p = Problem { x: &xs, y: &yi, dim, classes: classes.len(), l2 };
        let init = Tensor::randn(&[(dim + 1) * classes.len()], 0.01, &mut rng::seeded(seed)).into_data();
        let (weights, final_loss, grad_norm, iterations) = lbfgs(&p, init);
        Ok(LogisticRegression { classes, mean, scale, weights, final_loss, iterations, grad_norm })
    }

    pub fn classes(&self) -> &[i64] {
        &self.classes
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let xs = standardise(x, &self.mean, &self.scale);
        let (d, c) = (self.mean.len(), self.classes.len());
        let mut z = self.weights[d * c..].to_vec();
        for (j, xj) in xs.iter().enumerate() {
            for k in 0..c {
                z[k] += xj * self.weights[j * c + k];
            }
        }
        let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, x: &[f64]) -> i64 {
        self.classes[super::train::argmax(&self.predict_proba(x))]
    }
}

fn standardise(x: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter().zip(mean).zip(scale).map(|((v, m), s)| (v - m) / s).collect()
}

/// [`LogisticRegression::fit`] with the default penalty.
pub fn train_downstream(x: &[Vec<f64>], y: &[i64], seed: u64) -> Result<LogisticRegression> {
    LogisticRegression::fit(x, y, DEFAULT_L2, seed)
}
