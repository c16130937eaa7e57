//! Synthetic min-max testbed with an analytically solvable inner
//! maximization.
//!
//! The per-anchor objective is
//!
//! ```text
//! L(θ, x; i) = ½ θᵀA θ + bᵀθ + θᵀB x − (μ/2)‖x − x_i‖²,   ‖x − x_i‖∞ ≤ ε
//! ```
//!
//! which is exactly μ-strongly concave in `x`, has a closed-form constrained
//! maximizer (the coordinatewise clamp of `x_i + Bᵀθ/μ` — exact because the
//! x-part is separable and isotropic), and exact Lipschitz constants:
//! `L_θθ = ‖A‖₂`, `L_xθ = L_θx = ‖B‖₂`, `L_xx = μ`. On this problem the
//! stale-adversary bounds can be certified with *measured* quantities
//! against *exact* constants.

pub mod checks;
pub mod nn;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{role, stream};

#[derive(Debug, Clone)]
pub struct QuadraticMinMax {
    /// θ-curvature, symmetric positive definite (p×p, p ≤ 4).
    pub a: DMatrix<f64>,
    /// Coupling (p×q, q ≤ 2).
    pub b: DMatrix<f64>,
    /// Inner concavity modulus, > 0.
    pub mu: f64,
    /// Linear term.
    pub linear: DVector<f64>,
    /// Anchor points x_i.
    pub anchors: Vec<DVector<f64>>,
    /// L∞ radius of each inner feasible box.
    pub epsilon: f64,
}

/// Exact constants of a [`QuadraticMinMax`] instance.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ExactConstants {
    pub l_tt: f64,
    pub l_xt: f64,
    pub l_tx: f64,
    pub l_xx: f64,
    /// Smoothness of the robust loss: `L_θθ + L_xθ·L_θx / (2μ)`.
    pub l_smooth: f64,
    pub mu: f64,
}

impl QuadraticMinMax {
    /// A deterministic preset: p = 4, q = 2, 64 anchors, calibrated so the
    /// constant-step theory runs sit in the `√(Δ/Lσ²T)` branch for every
    /// ladder length.
    pub fn preset(seed: u64) -> Self {
        let p = 4;
        let q = 2;
        let n = 64;
        let mut rng = stream(seed, &[role::PROBE, 1]);
        // A = Qᵀ diag(eigs) Q with eigenvalues in [0.6, 1.8]
        let raw = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-1.0..1.0));
        let qr = raw.qr();
        let qmat = qr.q();
        let eigs: Vec<f64> = (0..p).map(|_| rng.gen_range(0.6..1.8)).collect();
        let a = &qmat * DMatrix::from_diagonal(&DVector::from_vec(eigs)) * qmat.transpose();
        let a = (&a + a.transpose()) * 0.5; // symmetrize against rounding
        let mut b = DMatrix::from_fn(p, q, |_, _| rng.gen_range(-1.0..1.0));
        let bnorm = b.clone().svd(false, false).singular_values[0];
        b *= 1.5 / bnorm; // ‖B‖₂ = 1.5
        let linear = DVector::from_fn(p, |_, _| rng.gen_range(-0.5..0.5));
        let anchors = (0..n)
            .map(|_| DVector::from_fn(q, |_, _| rng.gen_range(-1.5..1.5)))
            .collect();
        Self {
            a,
            b,
            mu: 1.0,
            linear,
            anchors,
            epsilon: 0.5,
        }
    }

    pub fn theta_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn x_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn loss(&self, theta: &DVector<f64>, x: &DVector<f64>, i: usize) -> f64 {
        let d = x - &self.anchors[i];
        0.5 * (theta.transpose() * &self.a * theta)[(0, 0)]
            + self.linear.dot(theta)
            + (theta.transpose() * &self.b * x)[(0, 0)]
            - 0.5 * self.mu * d.norm_squared()
    }

    /// `∇_θ L = Aθ + b + Bx` (anchor-independent for fixed x).
    pub fn grad_theta(&self, theta: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        &self.a * theta + &self.linear + &self.b * x
    }

    /// `∇_x L = Bᵀθ − μ(x − x_i)`.
    pub fn grad_x(&self, theta: &DVector<f64>, x: &DVector<f64>, i: usize) -> DVector<f64> {
        self.b.transpose() * theta - (x - &self.anchors[i]) * self.mu
    }

    /// Closed-form constrained inner maximizer:
    /// `clamp(x_i + Bᵀθ/μ, x_i ± ε)` per coordinate.
    pub fn inner_argmax_analytic(&self, theta: &DVector<f64>, i: usize) -> Result<DVector<f64>> {
        if self.mu <= 0.0 {
            return Err(Error::Probe(format!("mu must be positive, got {}", self.mu)));
        }
        let anchor = &self.anchors[i];
        let free = anchor + self.b.transpose() * theta / self.mu;
        Ok(DVector::from_fn(self.x_dim(), |j, _| {
            free[j].clamp(anchor[j] - self.epsilon, anchor[j] + self.epsilon)
        }))
    }

    /// Exhaustive grid search over the ε-box (`grid_n` points per axis).
    /// The independent oracle for the analytic maximizer; q ≤ 2 only.
    pub fn inner_argmax_bruteforce(
        &self,
        theta: &DVector<f64>,
        i: usize,
        grid_n: usize,
    ) -> Result<DVector<f64>> {
        let q = self.x_dim();
        if q > 2 {
            return Err(Error::Probe(format!(
                "brute-force argmax supports q <= 2, got {q}"
            )));
        }
        assert!(grid_n >= 2);
        let anchor = &self.anchors[i];
        let coord = |j: usize, k: usize| {
            anchor[j] - self.epsilon + 2.0 * self.epsilon * k as f64 / (grid_n - 1) as f64
        };
        let mut best = None;
        let mut best_val = f64::NEG_INFINITY;
        if q == 1 {
            for k in 0..grid_n {
                let x = DVector::from_vec(vec![coord(0, k)]);
                let v = self.loss(theta, &x, i);
                if v > best_val {
                    best_val = v;
                    best = Some(x);
                }
            }
        } else {
            for k0 in 0..grid_n {
                for k1 in 0..grid_n {
                    let x = DVector::from_vec(vec![coord(0, k0), coord(1, k1)]);
                    let v = self.loss(theta, &x, i);
                    if v > best_val {
                        best_val = v;
                        best = Some(x);
                    }
                }
            }
        }
        Ok(best.expect("non-empty grid"))
    }

    /// Per-example combined gradient with the *exact* adversary:
    /// `v_i(θ) = ½(∇_θL(θ, x_i) + ∇_θL(θ, x_i*(θ)))`.
    pub fn example_grad(&self, theta: &DVector<f64>, i: usize) -> Result<DVector<f64>> {
        let xstar = self.inner_argmax_analytic(theta, i)?;
        Ok((self.grad_theta(theta, &self.anchors[i]) + self.grad_theta(theta, &xstar)) * 0.5)
    }

    /// Robust loss `L_D(θ) = (1/2n) Σ (L(θ, x_i*) + L(θ, x_i))`.
    pub fn loss_ld(&self, theta: &DVector<f64>) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.n_anchors() {
            let xstar = self.inner_argmax_analytic(theta, i)?;
            total += self.loss(theta, &xstar, i) + self.loss(theta, &self.anchors[i], i);
        }
        Ok(total / (2.0 * self.n_anchors() as f64))
    }

    /// `∇L_D` via the Danskin evaluation at the exact inner maximizer
    /// (valid here: the objective is smooth and the maximizer unique).
    pub fn grad_ld(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(self.theta_dim());
        for i in 0..self.n_anchors() {
            g += self.example_grad(theta, i)?;
        }
        Ok(g / self.n_anchors() as f64)
    }

    /// Exact Lipschitz constants from the spectra of A and B.
    pub fn constants(&self) -> ExactConstants {
        let l_tt = self
            .a
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        let bnorm = self.b.clone().svd(false, false).singular_values[0];
        ExactConstants {
            l_tt,
            l_xt: bnorm,
            l_tx: bnorm,
            l_xx: self.mu,
            l_smooth: l_tt + bnorm * bnorm / (2.0 * self.mu),
            mu: self.mu,
        }
    }

    /// Numeric minimizer of `L_D` (gradient descent from the interior-case
    /// analytic solution), and the minimum value.
    pub fn min_ld(&self) -> Result<(DVector<f64>, f64)> {
        let n = self.n_anchors() as f64;
        let xbar = self.anchors.iter().fold(DVector::zeros(self.x_dim()), |s, x| s + x) / n;
        // interior case: θ* solves (A + BBᵀ/2μ) θ = −(b + B x̄)
        let h = &self.a + &self.b * self.b.transpose() / (2.0 * self.mu);
        let rhs = -(&self.linear + &self.b * &xbar);
        let mut theta = h
            .clone()
            .lu()
            .solve(&rhs)
            .unwrap_or_else(|| DVector::zeros(self.theta_dim()));
        let c = self.constants();
        let eta = 1.0 / c.l_smooth;
        for _ in 0..200_000 {
            let g = self.grad_ld(&theta)?;
            if g.norm() < 1e-13 {
                break;
            }
            theta -= g * eta;
        }
        let val = self.loss_ld(&theta)?;
        Ok((theta, val))
    }
}

// ---------------------------------------------------------------------------
// stale-adversary training runs on the synthetic problem
// ---------------------------------------------------------------------------

/// Inner maximization strategy used by a probe run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeAdversary {
    /// The analytic constrained maximizer (λ = 0 up to rounding).
    Exact,
    /// 1-step projected gradient with optional uniform random start.
    Pgd { alpha: f64, random_init: bool },
}

#[derive(Debug, Clone)]
pub struct ProbeRunConfig {
    pub tau: u64,
    pub steps: u64,
    pub minibatch: usize,
    pub eta: f64,
    /// Gradient-norm clip enforcing the bounded-gradient hypothesis.
    pub clip_m: f64,
    pub seed: u64,
    pub adversary: ProbeAdversary,
}

/// Quantities recorded at each step of a probe run.
#[derive(Debug, Clone)]
pub struct ProbeStep {
    /// ‖∇L_D(θ_t)‖².
    pub msgn: f64,
    /// Max over the batch of the measured first-order gap λ_i at θ_{t−τ}.
    pub lambda_max: f64,
    /// ‖g_exact(θ_t) − ĝ_stale(θ_t)‖ on the same mini-batch.
    pub stale_gap: f64,
    /// ‖ĝ‖ before clipping.
    pub ghat_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone)]
pub struct ProbeTrajectory {
    pub cfg: ProbeRunConfig,
    /// θ_0 … θ_T (length `steps + 1`).
    pub thetas: Vec<DVector<f64>>,
    pub steps: Vec<ProbeStep>,
}

/// Mini-batch anchor indices for a step: sampled with replacement, keyed by
/// `(seed, step)` only.
pub fn sample_batch(problem: &QuadraticMinMax, seed: u64, step: u64, m: usize) -> Vec<usize> {
    let mut rng = stream(seed, &[role::PROBE, 2, step]);
    (0..m).map(|_| rng.gen_range(0..problem.n_anchors())).collect()
}

/// Craft the approximate adversarial example for anchor `i` against `theta`,
/// keyed by the consuming step and batch slot.
pub fn probe_adversarial(
    problem: &QuadraticMinMax,
    theta: &DVector<f64>,
    i: usize,
    adversary: ProbeAdversary,
    seed: u64,
    step: u64,
    slot: usize,
) -> Result<DVector<f64>> {
    match adversary {
        ProbeAdversary::Exact => problem.inner_argmax_analytic(theta, i),
        ProbeAdversary::Pgd { alpha, random_init } => {
            let anchor = &problem.anchors[i];
            let start = if random_init {
                let mut rng = stream(seed, &[role::PROBE, 3, step, slot as u64]);
                DVector::from_fn(problem.x_dim(), |j, _| {
                    anchor[j] + rng.gen_range(-problem.epsilon..=problem.epsilon)
                })
            } else {
                anchor.clone()
            };
            let g = problem.grad_x(theta, &start, i);
            let moved = &start + g * alpha;
            Ok(DVector::from_fn(problem.x_dim(), |j, _| {
                moved[j].clamp(anchor[j] - problem.epsilon, anchor[j] + problem.epsilon)
            }))
        }
    }
}

/// The measured first-order optimality gap of `x̂` relative to the true
/// maximizer: `⟨x* − x̂, ∇ₓL(θ; x̂)⟩`.
pub fn measure_lambda(
    problem: &QuadraticMinMax,
    theta: &DVector<f64>,
    xhat: &DVector<f64>,
    xstar: &DVector<f64>,
    i: usize,
) -> f64 {
    (xstar - xhat).dot(&problem.grad_x(theta, xhat, i))
}

/// Run the stale-adversary loop: at step `t` the adversarial examples for
/// the (precomputed) batch `B_t` are crafted against `θ_{t−τ}` (θ_0 while
/// priming), the combined stochastic gradient is clipped at `M`, and
/// `θ_{t+1} = θ_t − η·clip(ĝ)`.
pub fn run_probe(problem: &QuadraticMinMax, cfg: &ProbeRunConfig) -> Result<ProbeTrajectory> {
    let mut thetas = Vec::with_capacity(cfg.steps as usize + 1);
    let mut steps = Vec::with_capacity(cfg.steps as usize);
    let mut theta = initial_theta(problem, cfg.seed);
    thetas.push(theta.clone());
    for t in 0..cfg.steps {
        let stale_idx = t.saturating_sub(cfg.tau) as usize;
        let theta_stale = thetas[stale_idx].clone();
        let batch = sample_batch(problem, cfg.seed, t, cfg.minibatch);

        let mut ghat = DVector::zeros(problem.theta_dim());
        let mut gexact = DVector::zeros(problem.theta_dim());
        let mut lambda_max = f64::NEG_INFINITY;
        for (slot, &i) in batch.iter().enumerate() {
            let xhat = probe_adversarial(problem, &theta_stale, i, cfg.adversary, cfg.seed, t, slot)?;
            let xstar_stale = problem.inner_argmax_analytic(&theta_stale, i)?;
            let lam = measure_lambda(problem, &theta_stale, &xhat, &xstar_stale, i);
            lambda_max = lambda_max.max(lam);
            ghat += (problem.grad_theta(&theta, &problem.anchors[i])
                + problem.grad_theta(&theta, &xhat))
                * 0.5;
            gexact += problem.example_grad(&theta, i)?;
        }
        let m = cfg.minibatch as f64;
        ghat /= m;
        gexact /= m;

        let msgn = problem.grad_ld(&theta)?.norm_squared();
        let stale_gap = (&gexact - &ghat).norm();
        let ghat_norm = ghat.norm();
        let clipped = ghat_norm > cfg.clip_m;
        if clipped {
            ghat *= cfg.clip_m / ghat_norm;
        }
        steps.push(ProbeStep {
            msgn,
            lambda_max,
            stale_gap,
            ghat_norm,
            clipped,
        });
        theta -= ghat * cfg.eta;
        thetas.push(theta.clone());
    }
    Ok(ProbeTrajectory {
        cfg: cfg.clone(),
        thetas,
        steps,
    })
}

/// Seeded starting point at radius 2 from the origin.
pub fn initial_theta(problem: &QuadraticMinMax, seed: u64) -> DVector<f64> {
    let mut rng = stream(seed, &[role::PROBE, 4]);
    let raw = DVector::from_fn(problem.theta_dim(), |_, _| rng.gen_range(-1.0..1.0));
    let n = raw.norm();
    if n == 0.0 {
        raw
    } else {
        raw * (2.0 / n)
    }
}
