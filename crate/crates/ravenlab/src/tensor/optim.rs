//! AdamW with decoupled weight decay, global-norm gradient clipping, and the
//! linear-warmup + cosine-decay learning-rate schedule.

use super::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.04 }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: AdamWConfig) -> Self {
        let m = (0..params.len())
            .map(|ix| Tensor::zeros(params.tensor_at(ix).shape()))
            .collect();
        let v = (0..params.len())
            .map(|ix| Tensor::zeros(params.tensor_at(ix).shape()))
            .collect();
        AdamW { cfg, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. `grads[ix]` is the gradient for parameter index `ix`
    /// (None = frozen or unused this step); `lrs[ix]` its learning rate.
    /// Weight decay applies to matrices and kernels only (ndim >= 2).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lrs: &[f64]) {
        assert_eq!(grads.len(), params.len());
        assert_eq!(lrs.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for ix in 0..params.len() {
            let g = match &grads[ix] {
                Some(g) => g,
                None => continue,
            };
            if !params.trainable_at(ix) {
                continue;
            }
            let lr = lrs[ix];
            let decay = if params.tensor_at(ix).shape().len() >= 2 {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let m = self.m[ix].data_mut();
            let v = self.v[ix].data_mut();
            let p = params.tensor_at_mut(ix).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + decay * p[i]);
            }
        }
    }

    /// Optimizer state tensors for checkpointing, in parameter order.
    pub fn state_tensors(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore_state(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, t: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Linear warmup to `base_lr`, then cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps.saturating_sub(self.warmup_steps)).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr
            + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_moves_against_gradient() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::full(&[2, 2], 1.0), true);
        let mut opt = AdamW::new(&params, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let grads = vec![Some(Tensor::full(&[2, 2], 1.0))];
        opt.step(&mut params, &grads, &[0.1]);
        assert!(params.get("w").data().iter().all(|v| *v < 1.0));
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut grads = vec![Some(Tensor::full(&[4], 3.0)), None];
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 6.0).abs() < 1e-12);
        let sq: f64 = grads[0].as_ref().unwrap().data().iter().map(|v| v * v).sum();
        assert!((sq.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule { base_lr: 1.0, min_lr: 0.1, warmup_steps: 10, total_steps: 110 };
        assert!((s.at(9) - 1.0).abs() < 1e-12);
        assert!(s.at(0) > 0.0 && s.at(0) < 0.2);
        assert!((s.at(110) - 0.1).abs() < 1e-12);
    }
}
