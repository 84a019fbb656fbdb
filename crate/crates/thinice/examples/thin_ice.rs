//! Samples on thin ice: prune a trained model, partition the test set by
//! (dense correct?, pruned correct?), attach boundary distances, and show
//! that samples flipped by pruning sit close to the dense boundary.
//!
//! Run with: cargo run --example thin_ice

use thinice::analysis::{
    attach_boundary_distances, partition_populations, stats_row, CellKey, PopulationLabel,
};
use thinice::dataset::two_moons;
use thinice::nn::preset;
use thinice::prune::{magnitude_prune, Locality};
use thinice::tensor::Norm;
use thinice::train::{finetune_masked, train_standard, TrainConfig};

fn main() -> thinice::Result<()> {
    let train = two_moons(256, 0.12, 31)?;
    let stats = two_moons(600, 0.12, 32)?;

    let mut dense = preset("mlp-2x64", 2, 33)?;
    let cfg = TrainConfig {
        epochs: 12,
        batch_size: 32,
        learning_rate: 0.1,
        momentum: 0.9,
        seed: 34,
        adversarial: None,
    };
    train_standard(&mut dense, &train, &cfg)?;

    let mut pruned = magnitude_prune(&dense, 0.9, Locality::Global)?;
    finetune_masked(
        &mut pruned,
        &train,
        &TrainConfig {
            epochs: 2,
            ..cfg
        },
    )?;

    let mut records = partition_populations(&dense, &pruned, &stats)?;
    attach_boundary_distances(&mut records, &dense, &stats, Norm::L2, 80, 1)?;

    let mean_eps = |p: PopulationLabel| {
        let v: Vec<f64> = records
            .iter()
            .filter(|r| r.population == p && r.fmn_converged)
            .map(|r| r.epsilon_signed)
            .collect();
        (v.iter().sum::<f64>() / v.len().max(1) as f64, v.len())
    };
    println!("population  count  mean eps (dense boundary distance)");
    for p in [
        PopulationLabel::S11,
        PopulationLabel::S10,
        PopulationLabel::S01,
        PopulationLabel::S00,
    ] {
        let (mean, n) = mean_eps(p);
        println!("  {:<9} {n:>5}  {mean:+.4}", p.name());
    }

    let row = stats_row(
        CellKey {
            method: "magnitude".into(),
            sparsity: 0.9,
            network: "mlp-2x64".into(),
        },
        &records,
    )?;
    if let Some(s1) = &row.s1 {
        println!(
            "\nAUC(eps of S10 < eps of S11) = {:.3}, Mann-Whitney p = {:.1e}",
            s1.auc, s1.p_value
        );
        println!("samples the pruned model flips sit closer to the dense boundary.");
    }
    if let Some(s0) = &row.s0 {
        println!(
            "AUC(|eps| of S01 < |eps| of S00) = {:.3}, p = {:.1e}",
            s0.auc, s0.p_value
        );
    }
    Ok(())
}
