//! Mask search on importance scores: forward passes use `theta ⊙ m(s)`
//! where `m(s)` keeps the top-k score magnitudes; gradient descent updates
//! every score through a straight-through estimator (the top-k selection is
//! treated as identity in the backward pass, so masked-out scores keep
//! receiving signal and can re-enter the mask). The pretrained weights are
//! never touched; fine-tuning is a separate stage.

use super::{masks_from_magnitudes, install_masks, PruneConfig};
use crate::attacks::craft_pgd_batch;
use crate::dataset::{shuffle, Dataset};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network, TraceMode};
use crate::rng::derive_seed2;
use crate::tensor::Tape;

pub fn hydra_prune(pretrained: &Network, data: &Dataset, cfg: &PruneConfig) -> Result<Network> {
    cfg.validate()?;
    let total = pretrained.weight_count();
    let to_mask = super::masked_count(total, cfg.target_sparsity);
    let keep = total - to_mask;
    if keep > total {
        return Err(Error::config("/pruning/target_sparsity", "keep count exceeds weights"));
    }

    let wis = pretrained.weight_indices();
    // scaled initialization: s = theta * sqrt(6 / fan_in)
    let mut scores: Vec<Vec<f64>> = Vec::with_capacity(wis.len());
    {
        let mut wi_iter = wis.iter();
        for layer in &pretrained.layers {
            let fan_in = match *layer {
                LayerSpec::Dense { inp, .. } => inp,
                LayerSpec::Conv { c_in, kh, kw, .. } => c_in * kh * kw,
                _ => continue,
            };
            let wi = *wi_iter.next().expect("one weight tensor per parametric layer");
            let scale = (6.0 / fan_in as f64).sqrt();
            scores.push(
                pretrained.params[wi]
                    .value
                    .data()
                    .iter()
                    .map(|&v| v as f64 * scale)
                    .collect(),
            );
        }
    }

    // the search network shares theta with the pretrained model and swaps
    // masks in as the scores move
    let mut search = pretrained.clone();
    let locality = cfg.effective_locality();
    let set_masks = |net: &mut Network, scores: &[Vec<f64>]| -> Result<()> {
        let mags: Vec<Vec<f64>> = scores
            .iter()
            .map(|s| s.iter().map(|v| v.abs()).collect())
            .collect();
        let masks = masks_from_magnitudes(&mags, cfg.target_sparsity, locality);
        let wis = net.weight_indices();
        for (wi, m) in wis.into_iter().zip(masks) {
            let shape = net.params[wi].value.shape().to_vec();
            net.params[wi].mask = Some(crate::tensor::Tensor::from_vec(&shape, m)?);
        }
        Ok(())
    };
    set_masks(&mut search, &scores)?;

    let lr = cfg.hydra.lr;
    for epoch in 0..cfg.hydra.score_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        shuffle(&mut order, derive_seed2(cfg.seed, 3, epoch as u64));
        for chunk in order.chunks(cfg.train.batch_size.max(1)) {
            let batch = data.subset(chunk)?;
            let inputs = match &cfg.train.adversarial {
                Some(adv) if adv.epsilon > 0.0 => craft_pgd_batch(
                    &search,
                    &batch.inputs,
                    &batch.labels,
                    adv.epsilon,
                    adv.steps,
                    adv.step_size(),
                    adv.norm,
                )?,
                _ => batch.inputs.clone(),
            };
            let mut tape = Tape::new();
            let h = search.trace(&mut tape, &inputs, TraceMode::ParamGrad)?;
            let loss_id = tape.softmax_cross_entropy(h.logits, &batch.labels)?;
            let loss = tape.scalar(loss_id)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "score search diverged at epoch {epoch}"
                )));
            }
            tape.backward(loss_id)?;

            // straight-through: ds = dL/d(theta ⊙ m) ⊙ theta, for ALL scores
            let wis = search.weight_indices();
            for (si, wi) in wis.iter().enumerate() {
                let grad_eff = tape.grad(h.param_leaves[*wi])?;
                let theta = pretrained.params[*wi].value.data();
                let s = &mut scores[si];
                for j in 0..s.len() {
                    s[j] -= lr * grad_eff.data()[j] as f64 * theta[j] as f64;
                }
            }
            set_masks(&mut search, &scores)?;

            // top-k construction keeps the kept count exact at every step
            debug_assert_eq!(
                search.weight_count()
                    - (search.sparsity() * search.weight_count() as f64).round() as usize,
                keep
            );
        }
    }

    // final mask from the final scores; materialize into theta
    let mut out = pretrained.clone();
    let mags: Vec<Vec<f64>> = scores
        .iter()
        .map(|s| s.iter().map(|v| v.abs()).collect())
        .collect();
    install_masks(&mut out, masks_from_magnitudes(&mags, cfg.target_sparsity, locality))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::two_moons;
    use crate::nn::preset;
    use crate::prune::{magnitude_prune, Locality, PruneMethod};
    use crate::tensor::Norm;
    use crate::train::{AdversarialSettings, TrainConfig};

    fn cfg(target: f64, seed: u64) -> PruneConfig {
        PruneConfig {
            target_sparsity: target,
            locality: None,
            method: PruneMethod::Hydra,
            hydra: super::super::HydraParams {
                score_epochs: 4,
                lr: 0.05,
            },
            admm: Default::default(),
            atmc: Default::default(),
            train: TrainConfig {
                epochs: 0,
                batch_size: 16,
                learning_rate: 0.05,
                momentum: 0.9,
                seed,
                adversarial: Some(AdversarialSettings {
                    epsilon: 0.03,
                    steps: 5,
                    step_size: None,
                    norm: Norm::Linf,
                }),
            },
            seed,
        }
    }

    #[test]
    fn zero_sparsity_keeps_behavior_identical() {
        let data = two_moons(40, 0.1, 3).unwrap();
        let net = preset("mlp-2x64", 2, 7).unwrap();
        let pruned = hydra_prune(&net, &data, &cfg(0.0, 1)).unwrap();
        assert_eq!(pruned.sparsity(), 0.0);
        let x = data.inputs.clone();
        assert_eq!(
            net.forward(&x).unwrap().to_bits(),
            pruned.forward(&x).unwrap().to_bits()
        );
    }

    #[test]
    fn mask_count_is_exact() {
        let data = two_moons(40, 0.1, 3).unwrap();
        let net = preset("mlp-2x64", 2, 7).unwrap();
        let total = net.weight_count();
        let pruned = hydra_prune(&net, &data, &cfg(0.9, 2)).unwrap();
        let want = super::super::masked_count(total, 0.9) as f64 / total as f64;
        assert_eq!(pruned.sparsity(), want);
    }

    #[test]
    fn theta_matches_pretrained_on_kept_weights() {
        let data = two_moons(40, 0.1, 3).unwrap();
        let net = preset("mlp-2x64", 2, 7).unwrap();
        let pruned = hydra_prune(&net, &data, &cfg(0.8, 4)).unwrap();
        for wi in net.weight_indices() {
            let mask = pruned.params[wi].mask.as_ref().unwrap();
            for ((&m, &pv), &ov) in mask
                .data()
                .iter()
                .zip(pruned.params[wi].value.data())
                .zip(net.params[wi].value.data())
            {
                if m == 1.0 {
                    assert_eq!(pv, ov);
                } else {
                    assert_eq!(pv, 0.0);
                }
            }
        }
    }

    /// Frozen-seed regression: on adversarially pretrained two-moons at 90%
    /// sparsity, the searched mask should not lose to the magnitude mask on
    /// the adversarial loss it optimized. Recorded once at seed-freeze.
    #[test]
    fn hydra_beats_magnitude_on_adversarial_loss() {
        let data = two_moons(96, 0.1, 17).unwrap();
        let mut net = preset("mlp-2x64", 2, 23).unwrap();
        let tcfg = TrainConfig {
            epochs: 12,
            batch_size: 16,
            learning_rate: 0.1,
            momentum: 0.9,
            seed: 29,
            adversarial: Some(AdversarialSettings {
                epsilon: 0.03,
                steps: 7,
                step_size: None,
                norm: Norm::Linf,
            }),
        };
        crate::train::train_adversarial(&mut net, &data, &tcfg).unwrap();

        let mut hcfg = cfg(0.9, 31);
        hcfg.hydra.score_epochs = 8;
        let hydra_net = hydra_prune(&net, &data, &hcfg).unwrap();
        let mag_net = magnitude_prune(&net, 0.9, Locality::Global).unwrap();

        let adv_loss = |m: &Network| -> f64 {
            let adv = craft_pgd_batch(m, &data.inputs, &data.labels, 0.03, 7, 2.5 * 0.03 / 7.0, Norm::Linf)
                .unwrap();
            let mut tape = Tape::new();
            let h = m.trace(&mut tape, &adv, TraceMode::NoGrad).unwrap();
            let l = tape.softmax_cross_entropy(h.logits, &data.labels).unwrap();
            tape.scalar(l).unwrap()
        };
        let hydra_loss = adv_loss(&hydra_net);
        let mag_loss = adv_loss(&mag_net);
        assert!(
            hydra_loss <= mag_loss,
            "hydra {hydra_loss} vs magnitude {mag_loss}"
        );
    }
}
