//! l0-projected adversarial training: plain min-max training where theta
//! is periodically projected onto the l0 ball (keep the top-k magnitudes,
//! zero the rest). The final mask is the support selected by the last
//! projection. The factorization and quantization constraints of the full
//! method are out of scope, hence the `-lite` suffix in reports.

use super::{allocate_counts, masked_count, install_masks, Locality, PruneConfig};
use crate::dataset::Dataset;
use crate::error::Result;
use crate::nn::Network;
use crate::train::{train_loop, TrainHooks};

pub fn atmc_lite(net: &Network, data: &Dataset, cfg: &PruneConfig) -> Result<Network> {
    cfg.validate()?;
    let mut work = net.clone();
    work.apply_masks()?;
    let wis = work.weight_indices();
    let sizes: Vec<usize> = wis.iter().map(|&wi| work.params[wi].value.len()).collect();
    let total: usize = sizes.iter().sum();
    let keep_total = total - masked_count(total, cfg.target_sparsity);
    let locality = cfg.effective_locality();
    let keeps_local = allocate_counts(keep_total, &sizes);

    let project_net = move |net: &mut Network| -> Result<Vec<Vec<f32>>> {
        let wis = net.weight_indices();
        let sizes: Vec<usize> = wis.iter().map(|&wi| net.params[wi].value.len()).collect();
        let masks: Vec<Vec<f32>> = match locality {
            Locality::Local => {
                let mut ms = Vec::with_capacity(wis.len());
                for (slot, &wi) in wis.iter().enumerate() {
                    let (proj, m) =
                        super::admm::project_l0(net.params[wi].value.data(), keeps_local[slot]);
                    net.params[wi].value.data_mut().copy_from_slice(&proj);
                    ms.push(m);
                }
                ms
            }
            Locality::Global => {
                let flat: Vec<f32> = wis
                    .iter()
                    .flat_map(|&wi| net.params[wi].value.data().to_vec())
                    .collect();
                let (proj, mflat) = super::admm::project_l0(&flat, keep_total);
                let mut ms = Vec::with_capacity(wis.len());
                let mut off = 0;
                for (&wi, &s) in wis.iter().zip(&sizes) {
                    net.params[wi]
                        .value
                        .data_mut()
                        .copy_from_slice(&proj[off..off + s]);
                    ms.push(mflat[off..off + s].to_vec());
                    off += s;
                }
                ms
            }
        };
        Ok(masks)
    };

    let every = cfg.atmc.project_every;
    let mut post = |net: &mut Network, step: usize| -> Result<()> {
        if step % every == 0 {
            project_net(net)?;
        }
        Ok(())
    };
    let mut tcfg = cfg.train.clone();
    tcfg.epochs = cfg.atmc.epochs;
    tcfg.seed = cfg.seed;
    train_loop(
        &mut work,
        data,
        &tcfg,
        TrainHooks {
            extra_grad: None,
            post_step: Some(&mut post),
        },
    )?;

    // final projection fixes the support regardless of where the last
    // training step landed
    let masks = project_net(&mut work)?;
    install_masks(&mut work, masks)?;
    Ok(work)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::two_moons;
    use crate::nn::preset;
    use crate::prune::{AtmcParams, PruneMethod};
    use crate::tensor::Norm;
    use crate::train::{train_adversarial, AdversarialSettings, TrainConfig};

    fn cfg(target: f64, seed: u64) -> PruneConfig {
        PruneConfig {
            target_sparsity: target,
            locality: None,
            method: PruneMethod::Atmc,
            hydra: Default::default(),
            admm: Default::default(),
            atmc: AtmcParams {
                epochs: 3,
                project_every: 2,
            },
            train: TrainConfig {
                epochs: 0,
                batch_size: 16,
                learning_rate: 0.08,
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
    fn zero_sparsity_matches_plain_adversarial_training() {
        let data = two_moons(48, 0.1, 5).unwrap();
        let net = preset("mlp-2x64", 2, 13).unwrap();
        // keep == total weights: every projection is an exact no-op, so the
        // trajectory must be bitwise equal to train_adversarial
        let c = cfg(0.0, 41);
        let pruned = atmc_lite(&net, &data, &c).unwrap();
        let mut twin = net.clone();
        let mut tcfg = c.train.clone();
        tcfg.epochs = c.atmc.epochs;
        tcfg.seed = c.seed;
        train_adversarial(&mut twin, &data, &tcfg).unwrap();
        for (a, b) in pruned.params.iter().zip(&twin.params) {
            assert_eq!(a.value.to_bits(), b.value.to_bits());
        }
        assert_eq!(pruned.sparsity(), 0.0);
    }

    #[test]
    fn theta_is_k_sparse_after_projections() {
        let data = two_moons(48, 0.1, 5).unwrap();
        let net = preset("mlp-2x64", 2, 13).unwrap();
        let total = net.weight_count();
        let pruned = atmc_lite(&net, &data, &cfg(0.9, 3)).unwrap();
        let nonzero: usize = pruned
            .weight_indices()
            .iter()
            .map(|&wi| {
                pruned.params[wi]
                    .value
                    .data()
                    .iter()
                    .filter(|&&v| v != 0.0)
                    .count()
            })
            .sum();
        assert!(nonzero <= total - masked_count(total, 0.9));
    }

    #[test]
    fn final_sparsity_at_least_target() {
        let data = two_moons(48, 0.1, 5).unwrap();
        let net = preset("mlp-2x64", 2, 13).unwrap();
        for target in [0.5, 0.9, 0.95] {
            let pruned = atmc_lite(&net, &data, &cfg(target, 7)).unwrap();
            assert!(
                pruned.sparsity() >= target,
                "target {target}: got {}",
                pruned.sparsity()
            );
        }
    }
}
