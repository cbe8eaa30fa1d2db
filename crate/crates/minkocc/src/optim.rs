//! Adam, cosine learning-rate annealing and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tape::Arr;

/// Adam with bias correction, all state in double precision.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update to every trainable parameter present in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Arr>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(param) = store.get_mut(name) else { continue };
            if !param.trainable {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            *m = &*m * self.beta1 + g * (1.0 - self.beta1);
            *v = &*v * self.beta2 + &(g * g) * (1.0 - self.beta2);
            let theta = param
                .value
                .as_slice_mut()
                .expect("parameter arrays are contiguous");
            let ms = m.as_slice().unwrap();
            let vs = v.as_slice().unwrap();
            for i in 0..theta.len() {
                let mh = ms[i] / bc1;
                let vh = vs[i] / bc2;
                theta[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Moment tensors and step counter, for checkpointing.
    pub fn state(&self) -> (u64, &BTreeMap<String, Arr>, &BTreeMap<String, Arr>) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: BTreeMap<String, Arr>, v: BTreeMap<String, Arr>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Cosine annealing from `lr0` at step 0 to 0 at step `total`.
pub fn cosine_lr(lr0: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns (pre-clip norm, whether scaling happened).
pub fn clip_global_norm(grads: &mut BTreeMap<String, Arr>, max_norm: f64) -> (f64, bool) {
    let sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|&e| e * e).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|e| e * s);
        }
        (norm, true)
    } else {
        (norm, false)
    }
}
