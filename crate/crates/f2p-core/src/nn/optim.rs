use std::collections::HashMap;

use super::params::{GradMap, ParamSet};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// false: L2 penalty added to the gradient; true: decoupled decay
    /// applied directly to the weights (AdamW).
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        }
    }
}

/// Adam/AdamW keyed by parameter name; moment buffers are created lazily so
/// freeze maps can change between phases without invalidating state.
pub struct Adam {
    pub cfg: AdamConfig,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, moments: HashMap::new(), t: 0 }
    }

    /// One update over every name present in `grads`, at learning rate `lr`
    /// (the scheduler owns the current rate; `cfg.lr` is only the initial
    /// value).
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        // Deterministic order regardless of HashMap iteration.
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            let g = &grads[name];
            let w = params.get_mut(name);
            assert_eq!(w.numel(), g.len(), "gradient size mismatch for {name:?}");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                let mut gi = g[i];
                if !self.cfg.decoupled && self.cfg.weight_decay > 0.0 {
                    gi += self.cfg.weight_decay * w.data[i];
                }
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                if self.cfg.decoupled && self.cfg.weight_decay > 0.0 {
                    w.data[i] -= lr * self.cfg.weight_decay * w.data[i];
                }
                w.data[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    // Accumulate in name order: map iteration order must not leak into the
    // bit pattern of the result.
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    let mut sq = 0.0;
    for name in names {
        for &v in &grads[name] {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Clip by the global norm across several gradient maps (e.g. the stages of
/// a jointly trained pipeline). Returns the pre-clip global norm.
pub fn clip_grad_norm_many(maps: &mut [&mut GradMap], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for grads in maps.iter() {
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            for &v in &grads[name] {
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for grads in maps.iter_mut() {
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
    norm
}

/// Halve the learning rate when the observed metric has not improved for
/// `patience` consecutive observations.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    best: f64,
    patience: usize,
    wait: usize,
    factor: f64,
    min_lr: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize) -> Self {
        PlateauScheduler { lr, best: f64::INFINITY, patience, wait: 0, factor: 0.5, min_lr: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feed one metric value (lower is better); returns the rate to use for
    /// the next phase.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait > self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.wait = 0;
            }
        }
        self.lr
    }
}
