//! SGD with momentum, LARS, and warmup learning-rate schedules.
//!
//! The optimizer runs on the aggregator only, single-threaded per step.
//! LARS scales each layer's learning rate by the trust ratio
//! `‖w‖ / (‖g‖ + wd·‖w‖ + eps)`; bias and batch-norm parameters are exempt
//! from both the scaling and weight decay, as are layers whose weight norm
//! is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientSet, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimKind {
    Sgd,
    Lars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub kind: OptimKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coef: f64,
    pub eps: f64,
}

impl OptimHyper {
    pub fn sgd(momentum: f64) -> Self {
        Self {
            kind: OptimKind::Sgd,
            momentum,
            weight_decay: 0.0,
            trust_coef: 0.0,
            eps: 0.0,
        }
    }

    /// Common large-batch defaults: trust 0.001, momentum 0.9, wd 1e-4.
    pub fn lars_default() -> Self {
        Self {
            kind: OptimKind::Lars,
            momentum: 0.9,
            weight_decay: 1e-4,
            trust_coef: 0.001,
            eps: 1e-8,
        }
    }
}

/// Per-parameter momentum buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub hyper: OptimHyper,
    velocity: Vec<Tensor>,
    pub t: u64,
}

impl OptimState {
    pub fn new(params: &ModelParams, hyper: OptimHyper) -> Self {
        Self {
            hyper,
            velocity: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            t: 0,
        }
    }

    /// One optimizer step: `params ← params - update(grads)` at rate `lr`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientSet, lr: f64) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFiniteGradient(format!("at step {}", self.t)));
        }
        if grads.tensors.len() != params.tensors.len() {
            return Err(Error::Config("gradient/parameter arity mismatch".into()));
        }
        match self.hyper.kind {
            OptimKind::Sgd => self.sgd_step(params, grads, lr),
            OptimKind::Lars => self.lars_step(params, grads, lr)?,
        }
        self.t += 1;
        Ok(())
    }

    /// `v ← m·v + g; θ ← θ − η·v`.
    fn sgd_step(&mut self, params: &mut ModelParams, grads: &GradientSet, lr: f64) {
        let m = self.hyper.momentum;
        for ((theta, g), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.velocity)
        {
            for ((tv, gv), vv) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut())
            {
                *vv = m * *vv + gv;
                *tv -= lr * *vv;
            }
        }
    }

    /// Layer-wise trust scaling; `v ← m·v + local_lr·(g + wd·w); θ ← θ − v`.
    fn lars_step(&mut self, params: &mut ModelParams, grads: &GradientSet, lr: f64) -> Result<()> {
        let h = self.hyper.clone();
        for (idx, ((theta, g), v)) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.velocity)
            .enumerate()
        {
            let exempt = params.meta[idx].lars_exempt;
            let w_norm = theta.norm();
            let (local_lr, wd) = if exempt || w_norm == 0.0 {
                (lr, 0.0)
            } else {
                let g_norm = g.norm();
                let trust = w_norm / (g_norm + h.weight_decay * w_norm + h.eps);
                if !trust.is_finite() {
                    return Err(Error::NonFiniteTrust(idx));
                }
                (lr * h.trust_coef * trust, h.weight_decay)
            };
            for ((tv, gv), vv) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut())
            {
                *vv = h.momentum * *vv + local_lr * (gv + wd * *tv);
                *tv -= *vv;
            }
        }
        Ok(())
    }
}

/// Learning-rate schedules. Total functions of the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum LrSchedule {
    /// The constant step used by the theory runs.
    Constant { lr: f64 },
    /// Linear warmup over `warmup` steps to `peak`, then polynomial
    /// (power 2) decay to zero at `total`.
    WarmupPoly { peak: f64, warmup: u64, total: u64 },
}

impl LrSchedule {
    pub fn lr_at(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupPoly {
                peak,
                warmup,
                total,
            } => {
                if warmup > 0 && t < warmup {
                    peak * t as f64 / warmup as f64
                } else if t >= total {
                    0.0
                } else {
                    let span = (total - warmup).max(1) as f64;
                    let frac = (t - warmup) as f64 / span;
                    peak * (1.0 - frac) * (1.0 - frac)
                }
            }
        }
    }
}

/// Linear-scaling rule for the peak rate: `base · global_batch / 256`.
pub fn linear_scaled_peak(base_lr: f64, global_batch: usize) -> f64 {
    base_lr * global_batch as f64 / 256.0
}
