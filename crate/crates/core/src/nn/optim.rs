//! AdamW with a cosine learning-rate schedule. Parameters whose gradient is
//! absent from a step are left untouched (their moments do not advance), so
//! frozen or unused weights stay bit-identical.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::nn::graph::Grads;
use crate::nn::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Total steps for the cosine schedule; 0 disables decay.
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            total_steps: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    t: u64,
}

#[derive(Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: usize,
    moments: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Current learning rate under the cosine schedule.
    pub fn current_lr(&self) -> f64 {
        if self.config.total_steps == 0 {
            return self.config.lr;
        }
        let progress = (self.step as f64 / self.config.total_steps as f64).min(1.0);
        self.config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Apply one update from `grads` to every trainable parameter that
    /// received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        let ids: Vec<ParamId> = store.ids().collect();
        let map: HashMap<ParamId, ArrayD<f64>> = ids
            .iter()
            .filter_map(|&id| grads.of_param(id).map(|g| (id, g.clone())))
            .collect();
        self.step_map(store, &map);
    }

    /// Same as [`AdamW::step`] but from an explicit gradient map (used when
    /// per-sample graphs are merged into one batch gradient).
    pub fn step_map(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, ArrayD<f64>>) {
        let lr = self.current_lr();
        let c = self.config.clone();
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.entry(id).trainable {
                continue;
            }
            let Some(g) = grads.get(&id) else {
                continue;
            };
            let entry = store.entry(id);
            let lr_p = lr * entry.lr_scale;
            let decay = if entry.decay { c.weight_decay } else { 0.0 };
            let mom = self
                .moments
                .entry(id)
                .or_insert_with(|| Moments {
                    m: ArrayD::zeros(g.raw_dim()),
                    v: ArrayD::zeros(g.raw_dim()),
                    t: 0,
                });
            mom.t += 1;
            mom.m = &mom.m * c.beta1 + g * (1.0 - c.beta1);
            mom.v = &mom.v * c.beta2 + &(g * g) * (1.0 - c.beta2);
            let bc1 = 1.0 - c.beta1.powi(mom.t as i32);
            let bc2 = 1.0 - c.beta2.powi(mom.t as i32);
            let mhat = &mom.m / bc1;
            let vhat = &mom.v / bc2;
            let denom = vhat.mapv(|v| v.sqrt() + c.eps);
            let old = store.value(id).clone();
            let update = &mhat / &denom + &old * decay;
            store.set_value(id, old - update * lr_p);
        }
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;
    use ndarray::arr1;

    #[test]
    fn converges_on_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("x", arr1(&[5.0, -3.0]).into_dyn(), true);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, p);
            let sq = g.mul(x, x);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads);
        }
        assert!(store.value(p).iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn untouched_params_stay_bit_identical() {
        let mut store = ParamStore::new();
        let p = store.add("x", arr1(&[1.0]).into_dyn(), true);
        let q = store.add("y", arr1(&[2.0]).into_dyn(), true);
        let before = store.value(q).clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let sq = g.mul(x, x);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        opt.step(&mut store, &grads);
        assert_eq!(store.value(q), &before);
        assert_ne!(store.value(p)[[0]], 1.0);
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let mut opt = AdamW::new(AdamWConfig {
            lr: 1.0,
            total_steps: 10,
            ..Default::default()
        });
        assert!((opt.current_lr() - 1.0).abs() < 1e-12);
        opt.step_to(10);
        assert!(opt.current_lr() < 1e-12);
    }
}

#[cfg(test)]
impl AdamW {
    fn step_to(&mut self, step: usize) {
        self.step = step;
    }
}
