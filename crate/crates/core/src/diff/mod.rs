//! Minimal reverse-mode differentiation: exactly the primitives the
//! clustering and contrasting losses need, plus a finite-difference checker.

mod tape;
mod tensor;

pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential moving averages of batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

/// Batch norm in either mode. Train mode normalizes with batch statistics
/// and folds them into `running`; eval mode reads `running` only.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    scale: Var,
    shift: Var,
    eps: f64,
    mode: Mode,
    running: &mut RunningStats,
) -> Result<Var> {
    match mode {
        Mode::Train => {
            let (y, stats) = tape.batch_norm_train(x, scale, shift, eps)?;
            running.update(&stats, BN_MOMENTUM);
            Ok(y)
        }
        Mode::Eval => tape.batch_norm_eval(x, scale, shift, &running.mean, &running.var, eps),
    }
}

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// (input index, component index) of the worst component.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub components: usize,
}

/// Denominator floor in the relative error, so components whose true
/// gradient is ~0 are judged on an absolute scale instead of amplifying
/// roundoff.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradient of the scalar built by `f` against central
/// differences with step `h`, over every component of every input.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        components: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[i].len());
        for (k, &a) in analytic.iter().enumerate() {
            let base = inputs[i].data()[k];
            probe[i].data_mut()[k] = base + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[k] = base - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[k] = base;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(a, numeric);
            report.components += 1;
            if err > report.max_rel_err || report.components == 1 {
                report.max_rel_err = err;
                report.worst = (i, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
