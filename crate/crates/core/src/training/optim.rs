//! AdamW with decoupled weight decay and the warmup/cosine schedule.

use std::collections::BTreeMap;

use crate::numerics::{Matrix, ParameterStore};

/// Learning-rate multiplier in [0, 1] at `step` of `total`: linear warmup
/// over the first `warmup_fraction` of steps, cosine decay to 0 after.
pub fn schedule(step: usize, total: usize, warmup_fraction: f64) -> f64 {
    let total = total.max(1) as f64;
    let warmup = (warmup_fraction * total).round();
    let s = step as f64;
    if s < warmup {
        return s / warmup;
    }
    let span = (total - warmup).max(1.0);
    let progress = ((s - warmup) / span).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Matrix<f32>>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update. `lr(name)` gives each parameter's rate; decay applies to
    /// matrices only, never to biases, gains or other vectors.
    pub fn step(&mut self, store: &mut ParameterStore<f32>, grads: &BTreeMap<String, Matrix<f32>>, lr: impl Fn(&str) -> f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (name, p) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let rate = lr(name);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let decay = if p.dims.len() >= 2 { self.weight_decay } else { 0.0 };
            if rate == 0.0 {
                // moments still advance so a later nonzero rate sees consistent state
                for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                }
                continue;
            }
            for (((w, mi), vi), &gi) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = f64::from(*mi) / bc1;
                let vhat = f64::from(*vi) / bc2;
                let update = mhat / (vhat.sqrt() + self.eps) + decay * f64::from(*w);
                *w = (f64::from(*w) - rate * update) as f32;
            }
        }
    }
}
