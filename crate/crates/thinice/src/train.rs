//! Optimization loops: standard SGD-with-momentum training, adversarial
//! training (PGD inner maximization, per batch), and mask-respecting
//! fine-tuning.
//!
//! All three are fronts over one deterministic loop. Data order is a
//! seeded shuffle per epoch, gradients of masked weights are multiplied by
//! the mask before every update, and a NaN anywhere aborts with the epoch
//! in the error.

use crate::attacks::craft_pgd_batch;
use crate::dataset::{shuffle, Dataset};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Network, TraceMode};
use crate::rng::derive_seed2;
use crate::tensor::{Norm, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdversarialSettings {
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2.5 * epsilon / steps` when absent.
    pub step_size: Option<f64>,
    pub norm: Norm,
}

impl AdversarialSettings {
    pub fn step_size(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversarial: Option<AdversarialSettings>,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::config(
                "/training/learning_rate",
                "must be non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("/training/batch_size", "must be >= 1"));
        }
        if let Some(adv) = &self.adversarial {
            if adv.epsilon < 0.0 {
                return Err(Error::config("/training/adversarial/epsilon", "must be >= 0"));
            }
            if adv.steps == 0 {
                return Err(Error::config("/training/adversarial/steps", "must be >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub clean_loss: f64,
    pub adv_loss: Option<f64>,
    pub clean_acc: f64,
}

/// Injection points for the pruning algorithms that ride on the training
/// loop. `extra_grad` adds a term to a parameter's gradient (before mask
/// multiplication); `post_step` runs after each optimizer step with the
/// global step index.
#[derive(Default)]
pub struct TrainHooks<'a> {
    #[allow(clippy::type_complexity)]
    pub extra_grad: Option<&'a mut dyn FnMut(usize, &Tensor) -> Result<Option<Tensor>>>,
    #[allow(clippy::type_complexity)]
    pub post_step: Option<&'a mut dyn FnMut(&mut Network, usize) -> Result<()>>,
}

/// SGD with momentum on softmax cross-entropy; adversarial when
/// `cfg.adversarial` is present with `epsilon > 0`.
pub fn train_loop(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
    mut hooks: TrainHooks,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("/dataset", "empty training set"));
    }
    if data.classes() > net.classes {
        return Err(Error::InvalidLabel(format!(
            "dataset has {} classes, network has {}",
            data.classes(),
            net.classes
        )));
    }
    // Masked weights start exactly zero and the masked update keeps them so.
    net.apply_masks()?;
    let masks_before: Vec<Option<Vec<u32>>> = net
        .params
        .iter()
        .map(|p| p.mask.as_ref().map(|m| m.to_bits()))
        .collect();

    let mut velocity: Vec<Vec<f32>> = net.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0usize;
    let lr = cfg.learning_rate as f32;
    let mom = cfg.momentum as f32;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle(&mut order, derive_seed2(cfg.seed, 1, epoch as u64));

        let mut clean_loss_sum = 0.0f64;
        let mut adv_loss_sum = 0.0f64;
        let mut correct = 0usize;
        let adversarial = cfg
            .adversarial
            .as_ref()
            .filter(|a| a.epsilon > 0.0)
            .cloned();

        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.subset(chunk)?;
            let labels = &batch.labels;

            // clean statistics (training forward doubles as these when the
            // batch is not perturbed)
            let (train_inputs, clean_stats) = match &adversarial {
                Some(adv) => {
                    let clean = eval_batch(net, &batch.inputs, labels)?;
                    let crafted = craft_pgd_batch(
                        net,
                        &batch.inputs,
                        labels,
                        adv.epsilon,
                        adv.steps,
                        adv.step_size(),
                        adv.norm,
                    )?;
                    (crafted, Some(clean))
                }
                None => (batch.inputs.clone(), None),
            };

            let mut tape = Tape::new();
            let h = net.trace(&mut tape, &train_inputs, TraceMode::ParamGrad)?;
            let logits = tape.value(h.logits);
            let loss_id = tape.softmax_cross_entropy(h.logits, labels)?;
            let loss = tape.scalar(loss_id)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss diverged at epoch {epoch}"
                )));
            }
            tape.backward(loss_id)?;

            match clean_stats {
                Some((cl, cc)) => {
                    clean_loss_sum += cl * labels.len() as f64;
                    correct += cc;
                    adv_loss_sum += loss * labels.len() as f64;
                }
                None => {
                    clean_loss_sum += loss * labels.len() as f64;
                    correct += argmax_rows(&logits)
                        .iter()
                        .zip(labels)
                        .filter(|(p, y)| *p == *y)
                        .count();
                }
            }

            for (i, leaf) in h.param_leaves.iter().enumerate() {
                let mut grad = tape.grad(*leaf)?;
                if let Some(f) = hooks.extra_grad.as_mut() {
                    if let Some(extra) = f(i, &net.params[i].value)? {
                        grad = grad.add_scaled(&extra, 1.0)?;
                    }
                }
                // gradient w.r.t. theta is grad w.r.t. the effective weight
                // times the mask; masked entries therefore never move
                if let Some(m) = &net.params[i].mask {
                    grad = grad.hadamard(m)?;
                }
                let v = &mut velocity[i];
                let theta = net.params[i].value.data_mut();
                for j in 0..theta.len() {
                    v[j] = mom * v[j] + grad.data()[j];
                    theta[j] -= lr * v[j];
                }
                crate::tensor::check_finite(theta, "updated parameters")
                    .map_err(|_| Error::Numeric(format!("parameters diverged at epoch {epoch}")))?;
            }

            global_step += 1;
            if let Some(f) = hooks.post_step.as_mut() {
                f(net, global_step)?;
            }
        }

        // invariant: masked weights are exactly zero after every epoch
        for (p, before) in net.params.iter().zip(&masks_before) {
            if let (Some(m), Some(bits)) = (&p.mask, before) {
                if &m.to_bits() != bits {
                    return Err(Error::Numeric(format!(
                        "mask mutated during training at epoch {epoch}"
                    )));
                }
                for (&mv, &tv) in m.data().iter().zip(p.value.data()) {
                    if mv == 0.0 && tv != 0.0 {
                        return Err(Error::Numeric(format!(
                            "masked weight resurrected at epoch {epoch}"
                        )));
                    }
                }
            }
        }

        let n = data.len() as f64;
        history.push(EpochStats {
            epoch,
            clean_loss: clean_loss_sum / n,
            adv_loss: adversarial.as_ref().map(|_| adv_loss_sum / n),
            clean_acc: correct as f64 / n,
        });
    }
    Ok(history)
}

fn eval_batch(net: &Network, inputs: &Tensor, labels: &[usize]) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let h = net.trace(&mut tape, inputs, TraceMode::NoGrad)?;
    let logits = tape.value(h.logits);
    let loss_id = tape.softmax_cross_entropy(h.logits, labels)?;
    let loss = tape.scalar(loss_id)?;
    let correct = argmax_rows(&logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| *p == *y)
        .count();
    Ok((loss, correct))
}

/// Pre-training on clean data.
pub fn train_standard(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    let mut cfg = cfg.clone();
    cfg.adversarial = None;
    train_loop(net, data, &cfg, TrainHooks::default())
}

/// Min-max training: each batch is replaced by a PGD-crafted worst case
/// before the gradient step.
pub fn train_adversarial(
    net: &mut Network,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if cfg.adversarial.is_none() {
        return Err(Error::config(
            "/training/adversarial",
            "train_adversarial needs adversarial settings",
        ));
    }
    train_loop(net, data, cfg, TrainHooks::default())
}

/// Fine-tuning that never resurrects masked weights: sparsity before and
/// after are identical bit for bit.
pub fn finetune_masked(net: &mut Network, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    let sparsity_before = net.sparsity();
    let history = train_loop(net, data, cfg, TrainHooks::default())?;
    let sparsity_after = net.sparsity();
    if sparsity_before != sparsity_after {
        return Err(Error::Numeric(format!(
            "fine-tuning changed sparsity: {sparsity_before} -> {sparsity_after}"
        )));
    }
    Ok(history)
}

/// Loss history as CSV: `epoch,clean_loss,adv_loss,clean_acc`.
/// `adv_loss` is empty for standard training.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,clean_loss,adv_loss,clean_acc\n");
    for h in history {
        let adv = h.adv_loss.map_or(String::new(), |v| format!("{v:.6}"));
        out.push_str(&format!(
            "{},{:.6},{},{:.4}\n",
            h.epoch, h.clean_loss, adv, h.clean_acc
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{blobs, two_moons};
    use crate::nn::preset;

    fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: 0.1,
            momentum: 0.9,
            seed,
            adversarial: None,
        }
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let data = blobs(120, 2, 0.02, 3).unwrap();
        let mut net = preset("mlp-2x64", 2, 1).unwrap();
        let history = train_standard(&mut net, &data, &quick_cfg(20, 5)).unwrap();
        let last = history.last().unwrap();
        assert!(
            last.clean_acc >= 0.99,
            "final accuracy {}",
            last.clean_acc
        );
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let data = two_moons(40, 0.1, 2).unwrap();
        let mut net = preset("mlp-2x64", 2, 4).unwrap();
        let before: Vec<Vec<u32>> = net.params.iter().map(|p| p.value.to_bits()).collect();
        let mut cfg = quick_cfg(3, 7);
        cfg.learning_rate = 0.0;
        train_standard(&mut net, &data, &cfg).unwrap();
        let after: Vec<Vec<u32>> = net.params.iter().map(|p| p.value.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_is_deterministic() {
        let data = two_moons(60, 0.12, 9).unwrap();
        let run = || {
            let mut net = preset("mlp-2x64", 2, 8).unwrap();
            let h = train_standard(&mut net, &data, &quick_cfg(4, 13)).unwrap();
            let params: Vec<Vec<u32>> = net.params.iter().map(|p| p.value.to_bits()).collect();
            (params, h.iter().map(|e| e.clean_loss.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adversarial_with_zero_eps_matches_standard() {
        let data = two_moons(48, 0.1, 6).unwrap();
        let mut a = preset("mlp-2x64", 2, 3).unwrap();
        let mut b = a.clone();
        let cfg_std = quick_cfg(3, 21);
        let mut cfg_adv = cfg_std.clone();
        cfg_adv.adversarial = Some(AdversarialSettings {
            epsilon: 0.0,
            steps: 10,
            step_size: None,
            norm: Norm::Linf,
        });
        let ha = train_standard(&mut a, &data, &cfg_std).unwrap();
        let hb = train_adversarial(&mut b, &data, &cfg_adv).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.value.to_bits(), pb.value.to_bits());
        }
        assert_eq!(
            ha.iter().map(|e| e.clean_loss.to_bits()).collect::<Vec<_>>(),
            hb.iter().map(|e| e.clean_loss.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn finetune_preserves_sparsity_exactly() {
        let data = two_moons(40, 0.1, 5).unwrap();
        let mut net = preset("mlp-2x64", 2, 2).unwrap();
        // mask a block of the middle layer
        let wi = net.weight_indices()[1];
        for j in 0..2000 {
            net.params[wi].mask.as_mut().unwrap().data_mut()[j] = 0.0;
        }
        net.apply_masks().unwrap();
        let before = net.sparsity();
        finetune_masked(&mut net, &data, &quick_cfg(3, 11)).unwrap();
        assert_eq!(net.sparsity(), before);
        // masked weights are exactly zero
        let m = net.params[wi].mask.as_ref().unwrap();
        for (mv, tv) in m.data().iter().zip(net.params[wi].value.data()) {
            if *mv == 0.0 {
                assert_eq!(*tv, 0.0);
            }
        }
    }

    #[test]
    fn finetune_zero_epochs_is_identity() {
        let data = two_moons(40, 0.1, 5).unwrap();
        let mut net = preset("mlp-2x64", 2, 2).unwrap();
        net.apply_masks().unwrap();
        let before: Vec<Vec<u32>> = net.params.iter().map(|p| p.value.to_bits()).collect();
        finetune_masked(&mut net, &data, &quick_cfg(0, 1)).unwrap();
        let after: Vec<Vec<u32>> = net.params.iter().map(|p| p.value.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn history_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        write_history_csv(
            &p,
            &[EpochStats {
                epoch: 0,
                clean_loss: 0.5,
                adv_loss: None,
                clean_acc: 0.75,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "epoch,clean_loss,adv_loss,clean_acc\n0,0.500000,,0.7500\n");
    }
}
