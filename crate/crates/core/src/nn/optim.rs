use super::params::{Grads, ParamStore};
use super::tensor::{Scalar, Tensor2};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient at step 0, ramped linearly to
    /// `weight_decay_end`. Applied to the weights directly, outside the
    /// moment estimates.
    pub weight_decay_start: f64,
    pub weight_decay_end: f64,
    /// The decay coefficient is updated only every this many steps.
    pub weight_decay_interval: usize,
    /// Steps over which the weight decay ramp runs.
    pub total_steps: usize,
    /// Global gradient-norm clip threshold.
    pub grad_clip: f64,
    /// Updates whose global gradient norm exceeds this are skipped
    /// outright; off by default, clipping handles large norms.
    pub grad_skip: f64,
    /// Linear learning-rate warmup length.
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay_start: 2e-4,
            weight_decay_end: 1e-6,
            weight_decay_interval: 1000,
            total_steps: 20_000,
            grad_clip: 100.0,
            grad_skip: f64::INFINITY,
            warmup_steps: 0,
        }
    }
}

impl AdamConfig {
    pub fn weight_decay_at(&self, step: usize) -> f64 {
        let interval = self.weight_decay_interval.max(1);
        let held = (step / interval * interval) as f64;
        let frac = (held / self.total_steps.max(1) as f64).min(1.0);
        self.weight_decay_start + (self.weight_decay_end - self.weight_decay_start) * frac
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }
}

/// Adam with an L2 term folded into the gradient and global-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: usize,
    pub m: Vec<Tensor2<T>>,
    pub v: Vec<Tensor2<T>>,
    /// Updates skipped for an oversized or non-finite gradient.
    pub skipped: usize,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, ps: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = ps
            .iter()
            .map(|(_, t)| Tensor2::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            skipped: 0,
        }
    }

    /// Apply one update; returns the pre-clip gradient norm. A skipped
    /// update still advances the step counter.
    pub fn update(&mut self, ps: &mut ParamStore<T>, grads: &Grads<T>) -> f64 {
        let norm = grads.global_norm().to_f64().unwrap_or(f64::INFINITY);
        if !(norm <= self.cfg.grad_skip) {
            self.skipped += 1;
            self.step += 1;
            return norm;
        }
        let clip = if norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let t = self.step + 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let base_lr = self.cfg.lr_at(self.step);
        let lr = base_lr * (1.0 - b2.powi(t as i32)).sqrt() / (1.0 - b1.powi(t as i32));
        let decay = T::c(1.0 - base_lr * self.cfg.weight_decay_at(self.step));
        let (b1, b2, lr, eps, clip) = (T::c(b1), T::c(b2), T::c(lr), T::c(self.cfg.eps), T::c(clip));
        // With the decay folded into g, Adam's normalization turns it into a
        // step of about lr on any weight whose loss gradient is small,
        // which wipes out the style token bank within a few hundred steps.
        for (((p, g), m), v) in ps
            .values_mut()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = *g * clip;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p = *p * decay - lr * *m / (v.sqrt() + eps);
            }
        }
        self.step += 1;
        norm
    }
}
