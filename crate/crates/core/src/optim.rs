use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moments are keyed by parameter name; a
/// parameter without a gradient entry is left untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.param(&p.name) else {
                continue;
            };
            let n = p.value.len();
            let mom = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
            for (((w, &gv), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * gv;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gv * gv;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}
