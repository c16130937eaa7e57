//! 1-step PGD adversarial example generation against a parameter snapshot.
//!
//! The attack is a pure function of `(snapshot, batch, seed)`: the forward
//! pass reads the auxiliary branch's *running* statistics (so crafting
//! examples never pollutes training statistics), the input gradient comes
//! from the reverse pass of the same graph machinery used for training, and
//! the final L∞ projection makes the ε budget a hard guarantee. Being pure,
//! it can run on any thread concurrently with weight updates on a different
//! snapshot.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{input_gradient, BnBranch, DualBatchNormState, LabeledBatch, ModelParams};
use crate::rng::{role, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// `x + α·∇ₓL` — the update formula as written.
    RawGradient,
    /// `x + α·sign(∇ₓL)` (FGSM-style).
    SignGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// L∞ radius, in input units.
    pub epsilon: f64,
    /// Step size.
    pub alpha: f64,
    /// Start from a uniform point in `[-ε, ε]ⁿ` around the input.
    pub random_init: bool,
    pub step_mode: StepMode,
    /// Per-coordinate data domain, e.g. `[0, 1]` for image-like inputs.
    pub clamp_domain: Option<(f64, f64)>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 8.0 / 255.0,
            random_init: true,
            step_mode: StepMode::RawGradient,
            clamp_domain: Some((0.0, 1.0)),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "attack requires epsilon >= 0 and alpha >= 0, got eps={} alpha={}",
                self.epsilon, self.alpha
            )));
        }
        if let Some((lo, hi)) = self.clamp_domain {
            if !(lo < hi) {
                return Err(Error::Config(format!(
                    "clamp domain must satisfy lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Coordinatewise clamp of `x` to the L∞ ball of radius `epsilon` around
/// `center`.
pub fn project_linf(x: &Tensor, center: &Tensor, epsilon: f64) -> Result<Tensor> {
    if x.shape() != center.shape() {
        return Err(Error::ShapeMismatch {
            node: 0,
            expected: center.shape().to_vec(),
            actual: x.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for (v, c) in out.data_mut().iter_mut().zip(center.data()) {
        *v = v.clamp(c - epsilon, c + epsilon);
    }
    Ok(out)
}

/// Apply one gradient step from `start` and project back onto the ε-ball
/// around `center` (and into the clamp domain, when configured).
pub fn pgd_step(
    start: &Tensor,
    center: &Tensor,
    grad: &Tensor,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    let mut x = start.clone();
    match cfg.step_mode {
        StepMode::RawGradient => {
            for (v, g) in x.data_mut().iter_mut().zip(grad.data()) {
                *v += cfg.alpha * g;
            }
        }
        StepMode::SignGradient => {
            for (v, g) in x.data_mut().iter_mut().zip(grad.data()) {
                if *g != 0.0 {
                    *v += cfg.alpha * g.signum();
                }
            }
        }
    }
    let mut out = project_linf(&x, center, cfg.epsilon)?;
    if let Some((lo, hi)) = cfg.clamp_domain {
        for v in out.data_mut() {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(out)
}

/// Generate the adversarial counterpart of `batch` against a frozen
/// parameter snapshot. Labels are unchanged; every output coordinate lies
/// within ε of its input and inside the clamp domain.
pub fn generate_adversarial(
    snapshot: &ModelParams,
    bn: &DualBatchNormState,
    batch: &LabeledBatch,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<LabeledBatch> {
    cfg.validate()?;
    if let Some((lo, hi)) = cfg.clamp_domain {
        if batch.inputs.data().iter().any(|v| *v < lo || *v > hi) {
            return Err(Error::Config(format!(
                "attack input outside clamp domain [{lo}, {hi}]"
            )));
        }
    }
    // Zero radius (and zero step without random start) leave inputs
    // bit-identical by contract.
    if cfg.epsilon == 0.0 || (cfg.alpha == 0.0 && !cfg.random_init) {
        return Ok(batch.clone());
    }

    let start = if cfg.random_init {
        let mut rng = stream(seed, &[role::ATTACK]);
        let mut x = batch.inputs.clone();
        for v in x.data_mut() {
            *v += rng.gen_range(-cfg.epsilon..=cfg.epsilon);
        }
        if let Some((lo, hi)) = cfg.clamp_domain {
            for v in x.data_mut() {
                *v = v.clamp(lo, hi);
            }
        }
        x
    } else {
        batch.inputs.clone()
    };

    let start_batch = LabeledBatch::new(start, batch.labels.clone())?;
    let (_, grad) = input_gradient(snapshot, bn, &start_batch, BnBranch::Aux)?;
    if !grad.all_finite() {
        return Err(Error::NonFiniteAttackGradient(format!(
            "batch of {} examples, epsilon {}",
            batch.len(),
            cfg.epsilon
        )));
    }
    let adv = pgd_step(&start_batch.inputs, &batch.inputs, &grad, cfg)?;
    LabeledBatch::new(adv, batch.labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::rng::stream;
    use rand::Rng;

    fn setup(seed: u64) -> (ModelParams, DualBatchNormState, LabeledBatch) {
        let spec = ModelSpec::Mlp {
            input_dim: 6,
            hidden: vec![8],
            num_classes: 3,
        };
        let params = ModelParams::init(&spec, seed).unwrap();
        let bn = DualBatchNormState::init(&spec);
        let mut rng = stream(seed, &[77]);
        let data: Vec<f64> = (0..4 * 6).map(|_| rng.gen::<f64>()).collect();
        let labels = vec![0, 1, 2, 0];
        let batch = LabeledBatch::new(Tensor::new(vec![4, 6], data).unwrap(), labels).unwrap();
        (params, bn, batch)
    }

    #[test]
    fn zero_epsilon_returns_input_exactly() {
        let (params, bn, batch) = setup(1);
        let cfg = AttackConfig {
            epsilon: 0.0,
            alpha: 0.5,
            random_init: true,
            ..AttackConfig::default()
        };
        let adv = generate_adversarial(&params, &bn, &batch, &cfg, 9).unwrap();
        assert_eq!(adv.inputs.data(), batch.inputs.data());
        assert_eq!(adv.labels, batch.labels);
    }

    #[test]
    fn zero_alpha_without_init_returns_input_exactly() {
        let (params, bn, batch) = setup(2);
        let cfg = AttackConfig {
            epsilon: 0.1,
            alpha: 0.0,
            random_init: false,
            ..AttackConfig::default()
        };
        let adv = generate_adversarial(&params, &bn, &batch, &cfg, 9).unwrap();
        assert_eq!(adv.inputs.data(), batch.inputs.data());
    }

    #[test]
    fn linear_model_raw_step_matches_symbolic_gradient() {
        // L = w·x with w = (1, -2): one raw step of size 0.1 inside a unit
        // ball moves x by exactly (0.1, -0.2).
        let x = Tensor::from_vec(vec![0.3, 0.4]);
        let grad = Tensor::from_vec(vec![1.0, -2.0]);
        let cfg = AttackConfig {
            epsilon: 1.0,
            alpha: 0.1,
            random_init: false,
            step_mode: StepMode::RawGradient,
            clamp_domain: None,
        };
        let adv = pgd_step(&x, &x, &grad, &cfg).unwrap();
        assert!((adv.data()[0] - 0.4).abs() < 1e-15);
        assert!((adv.data()[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn projection_cases() {
        // interior point unchanged
        let c = Tensor::from_vec(vec![0.0, 0.0]);
        let x = Tensor::from_vec(vec![0.05, -0.02]);
        let p = project_linf(&x, &c, 0.1).unwrap();
        assert_eq!(p.data(), x.data());
        // scalar clamp
        let p = project_linf(&Tensor::from_vec(vec![0.5]), &Tensor::from_vec(vec![0.0]), 0.1)
            .unwrap();
        assert_eq!(p.data(), &[0.1]);
        // per-coordinate clamp
        let p = project_linf(
            &Tensor::from_vec(vec![0.7, 1.1]),
            &Tensor::from_vec(vec![1.0, 1.0]),
            0.2,
        )
        .unwrap();
        assert_eq!(p.data(), &[0.8, 1.1]);
        // shape mismatch is an error
        assert!(project_linf(
            &Tensor::from_vec(vec![1.0]),
            &Tensor::from_vec(vec![1.0, 2.0]),
            0.1
        )
        .is_err());
    }

    #[test]
    fn output_stays_in_ball_and_domain() {
        let (params, bn, batch) = setup(3);
        let cfg = AttackConfig {
            epsilon: 0.1,
            alpha: 5.0, // deliberately oversized step
            random_init: true,
            step_mode: StepMode::RawGradient,
            clamp_domain: Some((0.0, 1.0)),
        };
        let adv = generate_adversarial(&params, &bn, &batch, &cfg, 4).unwrap();
        for (a, x) in adv.inputs.data().iter().zip(batch.inputs.data()) {
            assert!((a - x).abs() <= cfg.epsilon + 1e-15);
            assert!(*a >= 0.0 && *a <= 1.0);
        }
    }

    #[test]
    fn fixed_seed_gives_identical_perturbations() {
        let (params, bn, batch) = setup(4);
        let cfg = AttackConfig::default();
        let a = generate_adversarial(&params, &bn, &batch, &cfg, 11).unwrap();
        let b = generate_adversarial(&params, &bn, &batch, &cfg, 11).unwrap();
        let c = generate_adversarial(&params, &bn, &batch, &cfg, 12).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        assert_ne!(a.inputs.data(), c.inputs.data());
    }

    #[test]
    fn small_raw_steps_do_not_decrease_loss() {
        // ascent property on a smooth (linear) model, no random init
        let spec = ModelSpec::Mlp {
            input_dim: 8,
            hidden: vec![],
            num_classes: 4,
        };
        let bn = DualBatchNormState::init(&spec);
        let cfg = AttackConfig {
            epsilon: 0.05,
            alpha: 1e-3,
            random_init: false,
            step_mode: StepMode::RawGradient,
            clamp_domain: None,
        };
        let mut ascents = 0;
        let trials = 100;
        for trial in 0..trials {
            let params = ModelParams::init(&spec, 100 + trial).unwrap();
            let mut rng = stream(trial, &[5]);
            let data: Vec<f64> = (0..3 * 8).map(|_| rng.gen::<f64>()).collect();
            let labels = vec![0, 1, 2];
            let batch =
                LabeledBatch::new(Tensor::new(vec![3, 8], data).unwrap(), labels).unwrap();
            let (loss_before, _) =
                crate::model::input_gradient(&params, &bn, &batch, BnBranch::Aux).unwrap();
            let adv = generate_adversarial(&params, &bn, &batch, &cfg, trial).unwrap();
            let (loss_after, _) =
                crate::model::input_gradient(&params, &bn, &adv, BnBranch::Aux).unwrap();
            if loss_after >= loss_before - 1e-15 {
                ascents += 1;
            }
        }
        assert!(ascents >= 99, "ascent in only {ascents}/{trials} trials");
    }

    #[test]
    fn negative_epsilon_is_rejected() {
        let cfg = AttackConfig {
            epsilon: -0.1,
            ..AttackConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
