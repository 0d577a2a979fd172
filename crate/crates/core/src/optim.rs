//! Decoupled-weight-decay Adam and the warmup/cosine learning-rate schedule.

use crate::autodiff::Gradients;
use crate::net::params::Parameters;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Weight decay applies to weight matrices only, not to biases, norms or
    /// embeddings.
    decay: Vec<bool>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &Parameters, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.rows(), p.cols())).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            decay: params.iter().map(|(name, _)| name.ends_with(".w")).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads.iter()).enumerate() {
            let decay = if self.decay[i] { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay reaching 0 at the
/// last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(1).saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::params::ParamStore;

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            base_lr: 1e-3,
            warmup_steps: 30,
            total_steps: 300,
        };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(30), 1e-3);
        assert!((s.lr_at(29) - s.lr_at(30)).abs() < 1e-3 / 29.0);
        assert!(s.lr_at(299) <= 1e-6);
        for step in 31..300 {
            assert!(s.lr_at(step) <= s.lr_at(step - 1));
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::default();
        let w = store.add("layer.w", Tensor::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        let b = store.add("layer.b", Tensor::from_vec(1, 2, vec![1.0, -1.0]).unwrap());
        let mut params = store.finish();
        let mut grads = Gradients::zeros_like(&params);
        let mut opt = AdamW::new(&params, 0.5);
        // zero gradient: only the decayed weight matrix shrinks
        opt.step(&mut params, &grads, 0.1);
        assert_eq!(params.get(w).data(), &[0.95, -0.95]);
        assert_eq!(params.get(b).data(), &[1.0, -1.0]);
        // bias-corrected first step is lr * sign(g)
        grads.get_mut(b).data_mut().copy_from_slice(&[3.0, -0.01]);
        let mut opt = AdamW::new(&params, 0.0);
        opt.step(&mut params, &grads, 0.1);
        let got = params.get(b).data();
        assert!((got[0] - 0.9).abs() < 1e-6 && (got[1] + 0.9).abs() < 1e-5);
    }
}
