//! Adam with global-norm gradient clipping and a warmup + linear-decay
//! learning-rate schedule.

use crate::model::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// `peak · min(step/warmup, max(0, 1 - (step-warmup)/(total-warmup)))` for a
/// 1-based step index: linear ramp to the peak at the end of warmup, then
/// linear decay to zero at `total_steps`.
pub fn learning_rate(step: u64, warmup_steps: u64, total_steps: u64, peak: f64) -> f64 {
    let ramp = if warmup_steps == 0 {
        1.0
    } else {
        step as f64 / warmup_steps as f64
    };
    let decay = if total_steps <= warmup_steps {
        1.0
    } else {
        let past = step.saturating_sub(warmup_steps) as f64;
        (1.0 - past / (total_steps - warmup_steps) as f64).max(0.0)
    };
    peak * ramp.min(decay)
}

/// Scale gradients so their global L2 norm is at most `clip`. Returns the
/// pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], clip: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if clip > 0.0 && norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            m,
            v,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One update from already-clipped gradients aligned with the store's
    /// canonical order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                let (name, _) = params.at(i);
                return Err(Error::Numeric(format!(
                    "non-finite gradient for '{name}' at step {}",
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.at_mut(i).data_mut();
            for k in 0..g.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
