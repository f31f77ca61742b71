use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{ParamGrads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates for every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        AdamState { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one bias-corrected update. Nothing is modified if any
    /// gradient entry is NaN or infinite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        for id in store.ids() {
            if grads.get(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store(1.5);
        let mut opt = AdamState::new(&s, AdamConfig::default());
        let g = ParamGrads::zeros(&s);
        for _ in 0..10 {
            opt.step(&mut s, &g).unwrap();
        }
        assert_eq!(s.get(crate::diffcore::ParamId(0)).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(1.0);
        let mut opt = AdamState::new(&s, AdamConfig::default());
        let mut g = ParamGrads::zeros(&s);
        g.get_mut(crate::diffcore::ParamId(0))[0] = 1.0;
        opt.step(&mut s, &g).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let want = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(crate::diffcore::ParamId(0)).item() - want).abs() < 1e-15);
    }

    #[test]
    fn minimises_square() {
        let mut s = store(1.0);
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut opt = AdamState::new(&s, cfg);
        let id = crate::diffcore::ParamId(0);
        for _ in 0..500 {
            let mut g = ParamGrads::zeros(&s);
            g.get_mut(id)[0] = 2.0 * s.get(id).item();
            opt.step(&mut s, &g).unwrap();
        }
        assert!(s.get(id).item().abs() < 1e-2);
    }

    #[test]
    fn non_finite_gradient_is_rejected_before_update() {
        let mut s = store(1.0);
        s.add("y", Tensor::scalar(2.0));
        let mut opt = AdamState::new(&s, AdamConfig::default());
        let mut g = ParamGrads::zeros(&s);
        g.get_mut(crate::diffcore::ParamId(0))[0] = 1.0;
        g.get_mut(crate::diffcore::ParamId(1))[0] = f64::NAN;
        let err = opt.step(&mut s, &g).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "y"));
        assert_eq!(s.get(crate::diffcore::ParamId(0)).item(), 1.0);
        assert_eq!(opt.steps(), 0);
    }
}
