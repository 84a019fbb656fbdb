//! Evasion attacks: fixed-budget (FGSM, PGD, APGD, Square) for robustness
//! evaluation, the minimum-norm FMN attack for boundary distances, and the
//! worst-case ensemble aggregator.
//!
//! All fixed-budget attacks work in the linf threat model and guarantee
//! `||x_adv - x||_inf <= eps + 1e-6` with `x_adv` inside the `[0,1]` box.
//! Attacks are pure functions of `(net, sample, config, seed)`.

mod apgd;
mod ensemble;
mod fmn;
mod pgd;
mod square;

pub use apgd::{apgd, apgd_targeted, ApgdTrace};
pub use ensemble::{
    clean_accuracy, default_components, ensemble_evaluate, outcomes_to_csv, pgd_robust_accuracy,
    EnsembleComponent, EnsembleConfig, EnsembleReport, OutcomeRow,
};
pub use fmn::{fmn, fmn_targeted, FmnOutcome};
pub use pgd::{craft_pgd_batch, fgsm, pgd};
pub use square::square_attack;

use crate::error::Result;
use crate::nn::{argmax_rows, Network, TraceMode};
use crate::tensor::{LossKind, Tape, Tensor};

/// Knobs shared by the iterative attacks.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// linf budget.
    pub epsilon: f64,
    pub steps: usize,
    pub restarts: usize,
    pub loss: LossKind,
    /// Number of target classes for targeted runs (capped at C-1).
    pub targeted: Option<usize>,
    /// Forward-evaluation budget for the black-box attack.
    pub query_budget: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.1,
            steps: 40,
            restarts: 1,
            loss: LossKind::Ce,
            targeted: None,
            query_budget: 1000,
            seed: 0,
        }
    }
}

/// Per-sample result of one attack.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Untargeted: the adversarial point is misclassified. Targeted: it is
    /// classified as the target.
    pub success: bool,
    pub x_adv: Tensor,
    /// linf perturbation size for fixed-budget attacks.
    pub delta_norm: f64,
    /// Forward evaluations spent crafting (gradient passes count once).
    pub queries: usize,
    /// Maximum adversarial gain over every visited iterate.
    pub best_loss: f64,
}

/// One forward pass: adversarial gain and the predicted class.
pub(crate) fn eval_gain(
    net: &Network,
    x: &Tensor,
    kind: LossKind,
    label: usize,
    target: Option<usize>,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let h = net.trace(&mut tape, x, TraceMode::NoGrad)?;
    let logits = tape.value(h.logits);
    let pred = argmax_rows(&logits)[0];
    let gain_id = tape.attack_gain(h.logits, kind, label, target)?;
    let gain = tape.scalar(gain_id)?;
    Ok((gain, pred))
}

/// Forward + backward: gain, prediction, and the gain's gradient wrt x.
pub(crate) fn eval_gain_grad(
    net: &Network,
    x: &Tensor,
    kind: LossKind,
    label: usize,
    target: Option<usize>,
) -> Result<(f64, usize, Tensor)> {
    let mut tape = Tape::new();
    let h = net.trace(&mut tape, x, TraceMode::InputGrad)?;
    let logits = tape.value(h.logits);
    let pred = argmax_rows(&logits)[0];
    let gain_id = tape.attack_gain(h.logits, kind, label, target)?;
    let gain = tape.scalar(gain_id)?;
    tape.backward(gain_id)?;
    let grad = tape.grad(h.input)?;
    Ok((gain, pred, grad))
}

/// Uniform random point in the linf ball around `x`, clamped to the box.
pub(crate) fn random_ball_point(x: &Tensor, epsilon: f64, seed: u64) -> Result<Tensor> {
    use rand::Rng as _;
    let mut rng = crate::rng::rng_from_seed(seed);
    let eps = epsilon as f32;
    let data: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| (v + rng.random_range(-eps..=eps)).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Tracks the best iterate of an attack under the contract that `x_adv`
/// must agree with the `success` flag: among successful iterates the one
/// with maximal gain wins; otherwise the best-gain iterate overall.
pub(crate) struct BestTracker {
    pub best_gain: f64,
    best_any: Option<Tensor>,
    best_adv_gain: f64,
    best_adv: Option<Tensor>,
}

impl BestTracker {
    pub fn new() -> Self {
        BestTracker {
            best_gain: f64::NEG_INFINITY,
            best_any: None,
            best_adv_gain: f64::NEG_INFINITY,
            best_adv: None,
        }
    }

    pub fn observe(&mut self, x: &Tensor, gain: f64, success: bool) {
        if gain > self.best_gain {
            self.best_gain = gain;
            self.best_any = Some(x.clone());
        }
        if success && gain > self.best_adv_gain {
            self.best_adv_gain = gain;
            self.best_adv = Some(x.clone());
        }
    }

    pub fn succeeded(&self) -> bool {
        self.best_adv.is_some()
    }

    pub fn into_outcome(self, clean: &Tensor, queries: usize) -> AttackOutcome {
        let success = self.best_adv.is_some();
        let x_adv = self
            .best_adv
            .or(self.best_any)
            .unwrap_or_else(|| clean.clone());
        let delta_norm = x_adv.linf_dist(clean);
        AttackOutcome {
            success,
            x_adv,
            delta_norm,
            queries,
            best_loss: self.best_gain,
        }
    }
}
