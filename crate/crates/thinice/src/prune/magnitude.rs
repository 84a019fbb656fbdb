//! Lowest-magnitude pruning, globally across all weight tensors or
//! per-tensor (local), always hitting the exact masked count.

use super::{masks_from_magnitudes, install_masks, Locality};
use crate::error::Result;
use crate::nn::Network;

pub fn magnitude_prune(net: &Network, target_sparsity: f64, locality: Locality) -> Result<Network> {
    let mut pruned = net.clone();
    // rank by effective magnitude so already-masked weights (zeros) stay
    // masked under iterative schedules
    let mags: Vec<Vec<f64>> = pruned
        .weight_indices()
        .into_iter()
        .map(|wi| -> Result<Vec<f64>> {
            Ok(pruned
                .effective(wi)?
                .data()
                .iter()
                .map(|&v| (v as f64).abs())
                .collect())
        })
        .collect::<Result<_>>()?;
    let masks = masks_from_magnitudes(&mags, target_sparsity, locality);
    install_masks(&mut pruned, masks)?;
    Ok(pruned)
}
