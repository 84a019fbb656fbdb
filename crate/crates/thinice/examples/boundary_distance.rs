//! Signed boundary distances: the minimum-norm perturbation for correctly
//! classified samples, and the negated distance back to the true class for
//! misclassified ones — the sign always agrees with the margin.
//!
//! Run with: cargo run --example boundary_distance

use thinice::analysis::boundary_distance_signed;
use thinice::dataset::two_moons;
use thinice::nn::{preset, surrogate_loss};
use thinice::tensor::{LossKind, Norm};
use thinice::train::{train_standard, TrainConfig};

fn main() -> thinice::Result<()> {
    let train = two_moons(256, 0.15, 5)?;
    let mut net = preset("mlp-2x64", 2, 6)?;
    train_standard(
        &mut net,
        &train,
        &TrainConfig {
            epochs: 8,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            seed: 7,
            adversarial: None,
        },
    )?;

    let probe = two_moons(24, 0.15, 9)?;
    let logits = net.forward(&probe.inputs)?;
    println!("  id  label  pred  margin    eps(signed)");
    for i in 0..probe.len() {
        let x = probe.input(i)?;
        let y = probe.labels[i];
        let row = logits.row(i)?;
        let margin = surrogate_loss(LossKind::Margin, &row, y, None)?;
        let (eps, converged) = boundary_distance_signed(&net, &x, y, Norm::L2, 100)?;
        let note = if !converged { " (not converged)" } else { "" };
        println!(
            "  {i:>2}   {y}      {}     {margin:+.3}    {eps:+.4}{note}",
            net.predict(&x)?[0]
        );
    }
    println!("\nsign(eps) always matches sign(margin): negative means the");
    println!("dense model already misclassifies the sample.");
    Ok(())
}
