//! Standard vs adversarial training on two-moons: train a twin pair from
//! the same initialization and compare clean and PGD robust accuracy.
//!
//! Run with: cargo run --example train_robust

use thinice::attacks::pgd_robust_accuracy;
use thinice::dataset::two_moons;
use thinice::nn::preset;
use thinice::tensor::Norm;
use thinice::train::{train_adversarial, train_standard, AdversarialSettings, TrainConfig};

fn main() -> thinice::Result<()> {
    let train = two_moons(256, 0.1, 7)?;
    let test = two_moons(200, 0.1, 8)?;
    let eps = 0.03;

    let base_cfg = TrainConfig {
        epochs: 15,
        batch_size: 32,
        learning_rate: 0.1,
        momentum: 0.9,
        seed: 11,
        adversarial: None,
    };

    let mut plain = preset("mlp-2x64", 2, 5)?;
    let history = train_standard(&mut plain, &train, &base_cfg)?;
    println!(
        "standard    : final train loss {:.4}, accuracy {:.3}",
        history.last().unwrap().clean_loss,
        history.last().unwrap().clean_acc
    );

    let mut robust = preset("mlp-2x64", 2, 5)?;
    let adv_cfg = TrainConfig {
        adversarial: Some(AdversarialSettings {
            epsilon: eps,
            steps: 7,
            step_size: None,
            norm: Norm::Linf,
        }),
        ..base_cfg
    };
    let history = train_adversarial(&mut robust, &train, &adv_cfg)?;
    println!(
        "adversarial : final train loss {:.4}, accuracy {:.3}, worst-case loss {:.4}",
        history.last().unwrap().clean_loss,
        history.last().unwrap().clean_acc,
        history.last().unwrap().adv_loss.unwrap()
    );

    for (name, net) in [("standard", &plain), ("adversarial", &robust)] {
        let clean = thinice::attacks::clean_accuracy(net, &test)?;
        let robust_acc = pgd_robust_accuracy(net, &test, eps, 10, 1, 13, 1)?;
        println!("{name:<11} : clean {clean:.3}, PGD robust @ eps={eps} -> {robust_acc:.3}");
    }
    Ok(())
}
