//! Sampled Lipschitz-constant estimates for neural models.
//!
//! The smoothness assumptions do not hold for relu networks, so these are
//! max-observed-ratio *lower bounds*, labeled as such — diagnostics, not
//! certificates.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::Result;
use crate::model::{
    clean_loss_and_grads, input_gradient, BnBranch, DualBatchNormState, LabeledBatch, ModelParams,
};
use crate::rng::{role, stream};

#[derive(Debug, Clone, Serialize)]
pub struct SampledConstants {
    /// Max observed ‖∇θL(θ₁) − ∇θL(θ₂)‖ / ‖θ₁ − θ₂‖.
    pub l_tt: f64,
    /// Max observed ‖∇θL(x₁) − ∇θL(x₂)‖ / ‖x₁ − x₂‖.
    pub l_tx: f64,
    /// Max observed ‖∇ₓL(θ₁) − ∇ₓL(θ₂)‖ / ‖θ₁ − θ₂‖.
    pub l_xt: f64,
    /// Max observed ‖∇ₓL(x₁) − ∇ₓL(x₂)‖ / ‖x₁ − x₂‖.
    pub l_xx: f64,
    pub pairs: usize,
    pub perturbation_radius: f64,
    /// Always "sampled lower-bound estimate" for neural models.
    pub provenance: String,
}

fn perturb_params(base: &ModelParams, radius: f64, rng: &mut rand_chacha::ChaCha8Rng) -> ModelParams {
    let dist = Normal::new(0.0, radius).unwrap();
    let mut p = base.clone();
    for t in &mut p.tensors {
        for v in t.data_mut() {
            *v += dist.sample(rng);
        }
    }
    p
}

fn perturb_batch(base: &LabeledBatch, radius: f64, rng: &mut rand_chacha::ChaCha8Rng) -> LabeledBatch {
    let dist = Normal::new(0.0, radius).unwrap();
    let mut b = base.clone();
    for v in b.inputs.data_mut() {
        *v = (*v + dist.sample(rng)).clamp(0.0, 1.0);
    }
    b
}

fn param_dist(a: &ModelParams, b: &ModelParams) -> f64 {
    a.tensors
        .iter()
        .zip(&b.tensors)
        .map(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

fn grad_dist(a: &crate::model::GradientSet, b: &crate::model::GradientSet) -> f64 {
    a.tensors
        .iter()
        .zip(&b.tensors)
        .map(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(u, v)| (u - v) * (u - v))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

fn vec_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt()
}

/// Sample max-ratio estimates of the four Lipschitz constants around
/// `(params, batch)`.
pub fn sample_nn_constants(
    params: &ModelParams,
    bn: &DualBatchNormState,
    batch: &LabeledBatch,
    pairs: usize,
    radius: f64,
    seed: u64,
) -> Result<SampledConstants> {
    let mut rng = stream(seed, &[role::PROBE, 20]);
    let mut l_tt = 0.0f64;
    let mut l_tx = 0.0f64;
    let mut l_xt = 0.0f64;
    let mut l_xx = 0.0f64;
    for _ in 0..pairs {
        let p1 = perturb_params(params, radius, &mut rng);
        let p2 = perturb_params(params, radius, &mut rng);
        let x1 = perturb_batch(batch, radius, &mut rng);
        let x2 = perturb_batch(batch, radius, &mut rng);
        let dp = param_dist(&p1, &p2);
        let dx = vec_dist(x1.inputs.data(), x2.inputs.data());

        if dp > 0.0 {
            let (_, g1, _) = clean_loss_and_grads(&p1, bn, batch)?;
            let (_, g2, _) = clean_loss_and_grads(&p2, bn, batch)?;
            l_tt = l_tt.max(grad_dist(&g1, &g2) / dp);
            let (_, ix1) = input_gradient(&p1, bn, batch, BnBranch::Main)?;
            let (_, ix2) = input_gradient(&p2, bn, batch, BnBranch::Main)?;
            l_xt = l_xt.max(vec_dist(ix1.data(), ix2.data()) / dp);
        }
        if dx > 0.0 {
            let (_, g1, _) = clean_loss_and_grads(params, bn, &x1)?;
            let (_, g2, _) = clean_loss_and_grads(params, bn, &x2)?;
            l_tx = l_tx.max(grad_dist(&g1, &g2) / dx);
            let (_, ix1) = input_gradient(params, bn, &x1, BnBranch::Main)?;
            let (_, ix2) = input_gradient(params, bn, &x2, BnBranch::Main)?;
            l_xx = l_xx.max(vec_dist(ix1.data(), ix2.data()) / dx);
        }
    }
    Ok(SampledConstants {
        l_tt,
        l_tx,
        l_xt,
        l_xx,
        pairs,
        perturbation_radius: radius,
        provenance: "sampled lower-bound estimate".into(),
    })
}
