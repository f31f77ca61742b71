use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::rng::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamGrads, ParamStore};
use super::Tensor;

pub const GRAD_CHECK_STEP: f64 = 1e-4;
pub const GRAD_CHECK_TOL: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(tensor, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    fn record(&mut self, tensor: usize, index: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((tensor, index, analytic, numeric));
        }
    }
}

fn projection(out: &Tensor, rng: &mut Rng) -> Tensor {
    let data = (0..out.len()).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(out.shape().to_vec(), data).unwrap()
}

fn project(out: &Tensor, w: &Tensor) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Checks gradients of `f` with respect to each of `inputs`.
///
/// `f` must be deterministic. A non-scalar output is reduced to a scalar by
/// a random weighted sum, so every output entry contributes.
pub fn grad_check<F>(inputs: &[Tensor], f: F, rng: &mut Rng) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(inputs)?;
    let w = projection(g.value(out), rng);
    let grads = g.backward_with(out, w.clone());
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(&g, *v)).collect();

    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None, tol: GRAD_CHECK_TOL };
    let mut values = inputs.to_vec();
    for t in 0..values.len() {
        for i in 0..values[t].len() {
            let orig = values[t].data()[i];
            values[t].data_mut()[i] = orig + GRAD_CHECK_STEP;
            let (gp, _, op) = eval(&values)?;
            let fp = project(gp.value(op), &w);
            values[t].data_mut()[i] = orig - GRAD_CHECK_STEP;
            let (gm, _, om) = eval(&values)?;
            let fm = project(gm.value(om), &w);
            values[t].data_mut()[i] = orig;
            report.record(t, i, analytic[t].data()[i], (fp - fm) / (2.0 * GRAD_CHECK_STEP));
        }
    }
    Ok(report)
}

/// Checks gradients of `f` with respect to every parameter of `store`.
pub fn grad_check_params<F>(store: &ParamStore, f: F, rng: &mut Rng) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let w = projection(g.value(out), rng);
    let grads = g.backward_with(out, w.clone());
    let mut analytic = ParamGrads::zeros(store);
    grads.accumulate_params(&g, &mut analytic);

    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None, tol: GRAD_CHECK_TOL };
    let mut work = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            let mut side = |x: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[i] = x;
                let mut g = Graph::new();
                let o = f(&mut g, &work)?;
                Ok(project(g.value(o), &w))
            };
            let fp = side(orig + GRAD_CHECK_STEP)?;
            let fm = side(orig - GRAD_CHECK_STEP)?;
            work.get_mut(id).data_mut()[i] = orig;
            report.record(id.0, i, analytic.get(id)[i], (fp - fm) / (2.0 * GRAD_CHECK_STEP));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn identity_passes() {
        let r = &mut rng::seeded(0);
        let x = Tensor::randn(&[3, 2], 1.0, r);
        let rep = grad_check(&[x], |_, v| Ok(v[0]), r).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.checked, 6);
    }

    #[test]
    fn matmul_passes() {
        let r = &mut rng::seeded(1);
        let a = Tensor::randn(&[3, 4], 1.0, r);
        let b = Tensor::randn(&[4, 2], 1.0, r);
        let rep = grad_check(&[a, b], |g, v| Ok(g.matmul(v[0], v[1])), r).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.checked, 20);
    }

    #[test]
    fn corrupted_backward_fails() {
        let r = &mut rng::seeded(2);
        let x = Tensor::randn(&[2, 3], 1.0, r);
        let rep = grad_check(
            &[x],
            |g, v| {
                Ok(g.custom(
                    &[v[0]],
                    |xs| {
                        let d = xs[0].data().iter().map(|x| x * x).collect();
                        Tensor::new(xs[0].shape().to_vec(), d).unwrap()
                    },
                    // off by a factor of 1.01 from 2x
                    Box::new(|xs, _, gout| {
                        let d = xs[0].data().iter().zip(gout.data()).map(|(x, g)| 2.02 * x * g).collect();
                        vec![Tensor::new(xs[0].shape().to_vec(), d).unwrap()]
                    }),
                ))
            },
            r,
        )
        .unwrap();
        assert!(!rep.passed());
        assert!(rep.max_rel_error > 5e-3);
    }

    #[test]
    fn params_variant_passes() {
        let r = &mut rng::seeded(3);
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::randn(&[3, 3], 1.0, r));
        let b = store.add("b", Tensor::randn(&[1, 3], 1.0, r));
        let x = Tensor::randn(&[4, 3], 1.0, r);
        let rep = grad_check_params(
            &store,
            |g, s| {
                let xv = g.constant(x.clone());
                let wv = g.param(s, w);
                let bv = g.param(s, b);
                let h = g.matmul(xv, wv);
                let h = g.add_row(h, bv);
                let ln = g.layer_norm(h, bv, bv);
                Ok(g.mean(ln))
            },
            r,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.checked, 12);
    }
}
