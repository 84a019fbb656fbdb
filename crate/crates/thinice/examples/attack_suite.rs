//! One sample, every attack: craft adversarial points with FGSM, PGD,
//! APGD, Square, and FMN, then aggregate the worst case over an ensemble.
//!
//! Run with: cargo run --example attack_suite

use thinice::attacks::{
    apgd, ensemble_evaluate, fgsm, fmn, pgd, square_attack, AttackConfig, EnsembleConfig,
};
use thinice::dataset::two_moons;
use thinice::nn::preset;
use thinice::tensor::{LossKind, Norm};
use thinice::train::{train_adversarial, AdversarialSettings, TrainConfig};

fn main() -> thinice::Result<()> {
    let data = two_moons(256, 0.1, 3)?;
    let mut net = preset("mlp-2x64", 2, 9)?;
    train_adversarial(
        &mut net,
        &data,
        &TrainConfig {
            epochs: 12,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            seed: 4,
            adversarial: Some(AdversarialSettings {
                epsilon: 0.03,
                steps: 7,
                step_size: None,
                norm: Norm::Linf,
            }),
        },
    )?;

    let eps = 0.05;
    // pick a correctly classified test point
    let test = two_moons(64, 0.1, 21)?;
    let preds = net.predict(&test.inputs)?;
    let idx = (0..test.len())
        .find(|&i| preds[i] == test.labels[i])
        .expect("some point is classified correctly");
    let x = test.input(idx)?;
    let y = test.labels[idx];
    println!("sample #{idx}: x = {:?}, label = {y}", x.data());

    let cfg = AttackConfig {
        epsilon: eps,
        steps: 30,
        restarts: 3,
        loss: LossKind::Ce,
        targeted: None,
        query_budget: 500,
        seed: 17,
    };
    for (name, outcome) in [
        ("fgsm", fgsm(&net, &x, y, eps)?),
        ("pgd", pgd(&net, &x, y, &cfg)?),
        ("apgd", apgd(&net, &x, y, &cfg)?),
        ("square", square_attack(&net, &x, y, &cfg)?),
    ] {
        println!(
            "{name:<7}: success={} |delta|inf={:.4} queries={} best_gain={:+.4}",
            outcome.success, outcome.delta_norm, outcome.queries, outcome.best_loss
        );
    }
    let mn = fmn(&net, &x, y, Norm::Linf, 100)?;
    println!(
        "fmn    : eps* = {:.4} (converged = {}) -> sample is {} at budget {eps}",
        mn.epsilon_star,
        mn.converged,
        if mn.epsilon_star <= eps { "breakable" } else { "safe" }
    );

    // worst case over the whole evaluation set
    let report = ensemble_evaluate(&net, &test, &EnsembleConfig::new(eps, 2, 23))?;
    println!(
        "\nensemble over {} samples: clean {:.3}, robust {:.3}",
        test.len(),
        report.clean_accuracy,
        report.robust_accuracy
    );
    Ok(())
}
