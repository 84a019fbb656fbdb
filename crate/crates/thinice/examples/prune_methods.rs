//! The four pruning methods side by side: prune an adversarially trained
//! model to 90% sparsity, fine-tune, and compare clean and robust accuracy.
//!
//! Run with: cargo run --example prune_methods

use thinice::attacks::{clean_accuracy, pgd_robust_accuracy};
use thinice::dataset::two_moons;
use thinice::nn::preset;
use thinice::prune::{
    prune_with_method, AdmmParams, AtmcParams, HydraParams, PruneConfig, PruneMethod,
};
use thinice::tensor::Norm;
use thinice::train::{finetune_masked, train_adversarial, AdversarialSettings, TrainConfig};

fn main() -> thinice::Result<()> {
    let train = two_moons(256, 0.1, 17)?;
    let test = two_moons(200, 0.1, 18)?;
    let eps = 0.03;
    let adv = AdversarialSettings {
        epsilon: eps,
        steps: 7,
        step_size: None,
        norm: Norm::Linf,
    };

    let mut dense = preset("mlp-2x64", 2, 23)?;
    train_adversarial(
        &mut dense,
        &train,
        &TrainConfig {
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            seed: 29,
            adversarial: Some(adv.clone()),
        },
    )?;
    println!(
        "dense     : clean {:.3}, robust {:.3}, weights {}",
        clean_accuracy(&dense, &test)?,
        pgd_robust_accuracy(&dense, &test, eps, 10, 1, 31, 1)?,
        dense.weight_count()
    );

    let cfg = PruneConfig {
        target_sparsity: 0.9,
        locality: None,
        method: PruneMethod::Magnitude,
        hydra: HydraParams {
            score_epochs: 6,
            lr: 0.05,
        },
        admm: AdmmParams {
            rho: 0.05,
            outer_iters: 5,
            inner_epochs: 1,
            record_snapshots: false,
        },
        atmc: AtmcParams {
            epochs: 6,
            project_every: 4,
        },
        train: TrainConfig {
            epochs: 0,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 37,
            adversarial: Some(adv.clone()),
        },
        seed: 37,
    };
    let finetune = TrainConfig {
        epochs: 6,
        batch_size: 32,
        learning_rate: 0.05,
        momentum: 0.9,
        seed: 41,
        adversarial: Some(adv),
    };

    for method in [
        PruneMethod::Magnitude,
        PruneMethod::Hydra,
        PruneMethod::Admm,
        PruneMethod::Atmc,
    ] {
        let mut c = cfg.clone();
        c.method = method;
        let mut pruned = prune_with_method(&dense, &train, &c, 0.9)?;
        finetune_masked(&mut pruned, &train, &finetune)?;
        println!(
            "{:<10}: clean {:.3}, robust {:.3}, sparsity {:.4}",
            method.name(),
            clean_accuracy(&pruned, &test)?,
            pgd_robust_accuracy(&pruned, &test, eps, 10, 1, 31, 1)?,
            pruned.sparsity()
        );
    }
    Ok(())
}
