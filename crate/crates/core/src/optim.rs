//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::autodiff::{Gradients, ParamId};
use crate::config::AdamConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// One optimizer over a fixed set of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub config: AdamConfig,
    params: Vec<ParamId>,
    moments: Vec<Moments>,
    pub step: u64,
}

impl Adam {
    pub fn new(lr: f64, config: AdamConfig, params: Vec<ParamId>, store: &ParamStore) -> Self {
        let moments = params
            .iter()
            .map(|&id| {
                let n = store.get(id).len();
                Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Self {
            lr,
            config,
            params,
            moments,
            step: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// One update. Parameters missing from `grads` are treated as zero-gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (&id, mom) in self.params.iter().zip(&mut self.moments) {
            let g = grads.get(id);
            let w = store.get_mut(id);
            for i in 0..w.data.len() {
                let gi = g.map_or(0.0, |g| g.data[i]);
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * gi;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = mom.m[i] / c1;
                let v_hat = mom.v[i] / c2;
                w.data[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Moment buffers keyed by parameter name, for checkpoints.
    pub fn state(&self, store: &ParamStore) -> BTreeMap<String, (Tensor, Tensor)> {
        self.params
            .iter()
            .zip(&self.moments)
            .map(|(&id, mom)| {
                let shape = store.get(id).shape;
                (
                    store.name(id).to_string(),
                    (
                        Tensor { shape, data: mom.m.clone() },
                        Tensor { shape, data: mom.v.clone() },
                    ),
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::ParamGroup;

    #[test]
    fn three_steps_on_a_quadratic_match_hand_computation() {
        // L = w², w0 = 1, lr = 0.1.
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Encoder, Tensor::scalar(1.0));
        let mut opt = Adam::new(0.1, AdamConfig::default(), vec![id], &store);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let x = p.get(id);
            let grads = tape.grad((x * x).sum()).unwrap();
            opt.step(&mut store, &grads);

            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + eps);
            assert!((store.get(id).data[0] - w).abs() < 1e-15, "step {t}");
        }
        // Each early step moves by roughly lr whatever the gradient scale.
        assert!((w - 0.7).abs() < 0.01, "{w}");
    }

    #[test]
    fn parameters_outside_the_optimizer_are_untouched() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Encoder, Tensor::scalar(1.0));
        let b = store.add("b", ParamGroup::Label, Tensor::scalar(1.0));
        let mut opt = Adam::new(0.1, AdamConfig::default(), vec![a], &store);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let loss = (p.get(a) * p.get(b)).sum();
        let grads = tape.grad(loss).unwrap();
        opt.step(&mut store, &grads);
        assert_ne!(store.get(a).data[0], 1.0);
        assert_eq!(store.get(b).data[0], 1.0);
    }
}
