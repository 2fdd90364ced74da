use std::collections::BTreeMap;

use ndarray::Zip;

use crate::graph::Array;
use crate::params::ParamStore;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Array, Array)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient. Names in
    /// `grads` missing from `store` are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array>) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let step_size = self.lr / bias1;
        for (name, grad) in grads {
            let Some(param) = store.get_mut(name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Array::zeros(param.raw_dim()), Array::zeros(param.raw_dim())));
            Zip::from(param)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + wd * *p;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step_size * *m / ((*v / bias2).sqrt() + eps);
                });
        }
    }
}

/// Accumulates per-sample gradients and averages them over a batch.
#[derive(Default)]
pub struct GradAccumulator {
    sum: BTreeMap<String, Array>,
    count: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: BTreeMap<String, Array>) {
        for (name, g) in grads {
            match self.sum.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    self.sum.insert(name, g);
                }
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(self) -> BTreeMap<String, Array> {
        let n = self.count.max(1) as f64;
        self.sum.into_iter().map(|(k, v)| (k, v / n)).collect()
    }
}
