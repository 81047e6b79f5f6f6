//! Adaptive-moment optimizer with decoupled weight decay, and the
//! step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::network::Param;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &[Param]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One bias-corrected step. Weight decay multiplies each decayable
    /// parameter by `1 - lr * weight_decay` independently of the gradient.
    /// Gradients are checked for finiteness before anything is modified;
    /// `step` only labels the error.
    pub fn update(
        &mut self,
        params: &mut [Param],
        grads: &[Vec<f64>],
        lr: f64,
        weight_decay: f64,
        step: u64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension {
                op: "optimizer update",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.value.len() {
                return Err(Error::Dimension {
                    op: "optimizer update",
                    left: p.value.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    step,
                    param: p.name.clone(),
                });
            }
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = if p.decay { lr * weight_decay } else { 0.0 };
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let step = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *w -= decay * *w + lr * step;
            }
        }
        Ok(())
    }
}

/// `lr * decay^floor(epoch / every)`.
pub fn lr_at(epoch: u64, lr: f64, decay: f64, every: u64) -> f64 {
    lr * decay.powi((epoch / every.max(1)) as i32)
}
