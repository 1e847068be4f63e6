//! Adam with a linear learning-rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::params::ParameterStore;

/// Learning rate falling linearly from `base` at step 0 to zero at
/// `total_steps`; no warmup.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearDecay {
    pub base: f64,
    pub total_steps: u64,
}

impl LinearDecay {
    pub fn lr(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        self.base * (1.0 - step as f64 / self.total_steps as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates applied to this parameter, for bias correction.
    pub steps: u64,
}

/// Adam over a [`ParameterStore`], keyed by parameter name.
///
/// Only parameters holding a gradient are updated. A skill module that was
/// inactive for a step therefore keeps its exact value, and its bias
/// correction counts only the steps in which it took part.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    /// Zeroed moments for every parameter in `store`.
    pub fn new(store: &ParameterStore) -> Self {
        let mut adam = Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: BTreeMap::new(),
        };
        adam.track_new(store);
        adam
    }

    /// Adds zeroed moments for parameters registered since construction
    /// (for example a freshly added task head).
    pub fn track_new(&mut self, store: &ParameterStore) {
        for (_, p) in store.iter() {
            self.moments
                .entry(p.name.clone())
                .or_insert_with(|| Moments {
                    m: vec![0.0; p.value.len()],
                    v: vec![0.0; p.value.len()],
                    steps: 0,
                });
        }
    }

    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) -> Result<()> {
        for p in store.iter_mut() {
            let Some(grad) = &p.grad else { continue };
            let mo = self
                .moments
                .get_mut(&p.name)
                .ok_or_else(|| contract(format!("no optimizer state for `{}`", p.name)))?;
            if mo.m.len() != grad.len() {
                return Err(contract(format!(
                    "optimizer state size mismatch for `{}`",
                    p.name
                )));
            }
            mo.steps += 1;
            let c1 = 1.0 - self.beta1.powi(mo.steps as i32);
            let c2 = 1.0 - self.beta2.powi(mo.steps as i32);
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(&mut mo.m)
                .zip(&mut mo.v)
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
