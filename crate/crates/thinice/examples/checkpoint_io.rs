//! Checkpoint persistence: save a masked network, reload it, and verify
//! forward outputs bit for bit; also writes a standalone TNSR tensor.
//!
//! Run with: cargo run --example checkpoint_io

use thinice::dataset::two_moons;
use thinice::nn::{load_checkpoint, preset, save_checkpoint};
use thinice::prune::{magnitude_prune, Locality};
use thinice::tensor::{io, Tensor};

fn main() -> thinice::Result<()> {
    let dir = std::path::Path::new("target/example-checkpoint");
    let net = preset("mlp-2x64", 2, 77)?;
    let pruned = magnitude_prune(&net, 0.9, Locality::Global)?;
    save_checkpoint(&pruned, dir)?;
    println!("saved checkpoint to {}", dir.display());
    println!("  manifest + {} tensor files", pruned.params.len() + pruned.weight_indices().len());

    let back = load_checkpoint(dir)?;
    let x = two_moons(16, 0.1, 3)?.inputs;
    let a = pruned.forward(&x)?;
    let b = back.forward(&x)?;
    assert_eq!(a.to_bits(), b.to_bits());
    println!("round trip: forward outputs bitwise identical");
    println!("sparsity preserved: {:.4}", back.sparsity());

    // standalone TNSR container
    let t = Tensor::normal(&[3, 4], 0.0, 1.0, 9)?;
    let path = dir.join("standalone.tnsr");
    io::write_tensor(&path, &t)?;
    let t2 = io::read_tensor(&path)?;
    assert_eq!(t.to_bits(), t2.to_bits());
    println!("TNSR v1 round trip: {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());
    Ok(())
}
