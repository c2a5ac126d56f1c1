//! Optimizer, learning-rate schedule, and gradient clipping.

use crate::params::ParamStore;

/// Adam with decoupled weight decay. Moment buffers are kept per store
/// entry in entry order, so the same store must be passed to every step.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps_taken: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            m: store.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            steps_taken: 0,
        }
    }

    /// Apply one update. `grads` must be aligned with the store's entries.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "grad count mismatch");
        self.steps_taken += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps_taken as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps_taken as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let g = &grads[i];
            assert_eq!(g.len(), p.data.len(), "grad shape mismatch for {}", p.name);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p.data[k] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.data[k]);
            }
        }
    }
}

/// Peak-anchored schedule: linear warmup over the first `warmup_frac` of
/// `total` steps, then cosine decay to `floor_frac * peak`.
pub fn lr_at(step: usize, total: usize, peak: f64, warmup_frac: f64, floor_frac: f64) -> f64 {
    assert!(total > 0);
    let warmup = ((total as f64 * warmup_frac).round() as usize).max(1);
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let floor = peak * floor_frac;
    if total <= warmup + 1 {
        return floor;
    }
    // progress runs 0 at the first post-warmup step to 1 at the last step
    let progress = (step - warmup) as f64 / (total - warmup - 1) as f64;
    floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so the global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}
