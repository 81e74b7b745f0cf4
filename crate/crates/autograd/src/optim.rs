use std::f64::consts::PI;

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update; `grads` is aligned with the store's parameter order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = params.get_mut(id).data_mut();
            for (((p, g), m), v) in p.iter_mut().zip(grads[k].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// One-cycle schedule: cosine warm-up from `max_lr / div_factor` to `max_lr`
/// over the first `pct_start` of training, then cosine decay to
/// `max_lr / (div_factor * final_div_factor)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        OneCycle {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let initial = self.max_lr / self.div_factor;
        let min = initial / self.final_div_factor;
        let last = self.total_steps.saturating_sub(1).max(1) as f64;
        let warm = (self.pct_start * last).max(1.0);
        let s = step as f64;
        let cos = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (PI * frac.clamp(0.0, 1.0)).cos());
        if s <= warm {
            cos(initial, self.max_lr, s / warm)
        } else {
            cos(self.max_lr, min, (s - warm) / (last - warm).max(1.0))
        }
    }
}
