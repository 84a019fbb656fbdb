//! Adversarial-pruning methods over masked networks: the magnitude
//! baseline, mask search on importance scores, ADMM concurrent training
//! and pruning, l0-projected adversarial training, plus the
//! pretrain/prune/fine-tune pipeline driver.
//!
//! All methods share one deterministic selection rule: candidates are
//! ranked by (magnitude ascending, flat index ascending) and the required
//! count is masked from the front. Local variants split the exact global
//! count across tensors by largest-remainder apportionment, so every
//! method hits `ceil(target_sparsity * total)` masked weights exactly.

mod admm;
mod atmc;
mod hydra;
mod magnitude;
mod pipeline;

pub use admm::{admm_prune, AdmmSnapshot, AdmmState};
pub use atmc::atmc_lite;
pub use hydra::hydra_prune;
pub use magnitude::magnitude_prune;
pub use pipeline::{run_pipeline, PipelineOutcome, PipelinePlan, StageRecord};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Locality {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMethod {
    Magnitude,
    Hydra,
    Admm,
    Atmc,
}

impl PruneMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PruneMethod::Magnitude => "magnitude",
            PruneMethod::Hydra => "hydra",
            PruneMethod::Admm => "admm",
            PruneMethod::Atmc => "atmc-lite",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HydraParams {
    pub score_epochs: usize,
    pub lr: f64,
}

impl Default for HydraParams {
    fn default() -> Self {
        HydraParams {
            score_epochs: 10,
            lr: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmParams {
    pub rho: f64,
    pub outer_iters: usize,
    pub inner_epochs: usize,
    /// Keep full (theta, z, u) snapshots per outer iteration; testing aid.
    #[serde(skip)]
    pub record_snapshots: bool,
}

impl Default for AdmmParams {
    fn default() -> Self {
        AdmmParams {
            rho: 1e-2,
            outer_iters: 10,
            inner_epochs: 1,
            record_snapshots: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtmcParams {
    pub epochs: usize,
    pub project_every: usize,
}

impl Default for AtmcParams {
    fn default() -> Self {
        AtmcParams {
            epochs: 10,
            project_every: 10,
        }
    }
}

/// Resolved configuration for one pruning run. The embedded `train` block
/// supplies batch size, learning rate, momentum, and the adversarial inner
/// settings used by the optimization-based methods.
#[derive(Debug, Clone)]
pub struct PruneConfig {
    pub target_sparsity: f64,
    /// `None` resolves per method: ADMM defaults to local (per-layer
    /// constraint sets), everything else to global.
    pub locality: Option<Locality>,
    pub method: PruneMethod,
    pub hydra: HydraParams,
    pub admm: AdmmParams,
    pub atmc: AtmcParams,
    pub train: TrainConfig,
    pub seed: u64,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(Error::config(
                "/pruning/target_sparsity",
                format!("{} outside [0,1)", self.target_sparsity),
            ));
        }
        if self.admm.rho <= 0.0 {
            return Err(Error::config("/pruning/admm/rho", "must be > 0"));
        }
        if self.atmc.epochs == 0 || self.hydra.score_epochs == 0 {
            return Err(Error::config("/pruning", "epochs must be >= 1"));
        }
        if self.atmc.project_every == 0 {
            return Err(Error::config("/pruning/atmc/project_every", "must be >= 1"));
        }
        Ok(())
    }

    pub fn effective_locality(&self) -> Locality {
        self.locality.unwrap_or(match self.method {
            PruneMethod::Admm => Locality::Local,
            _ => Locality::Global,
        })
    }
}

/// Number of weights to mask for a target sparsity.
pub fn masked_count(total: usize, target_sparsity: f64) -> usize {
    (target_sparsity * total as f64).ceil() as usize
}

/// Indices of the `k` smallest values under (value asc, index asc).
pub(crate) fn smallest_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Largest-remainder apportionment of `total_k` across buckets proportional
/// to `sizes` (remainder ties broken by bucket index). The parts sum to
/// `total_k` exactly and never exceed the bucket size.
pub(crate) fn allocate_counts(total_k: usize, sizes: &[usize]) -> Vec<usize> {
    let total_size: usize = sizes.iter().sum();
    assert!(total_k <= total_size);
    let mut parts: Vec<usize> = Vec::with_capacity(sizes.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(sizes.len());
    let mut assigned = 0usize;
    for (i, &s) in sizes.iter().enumerate() {
        let exact = total_k as f64 * s as f64 / total_size as f64;
        let part = (exact.floor() as usize).min(s);
        parts.push(part);
        assigned += part;
        remainders.push((i, exact - part as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut left = total_k - assigned;
    let mut cursor = 0;
    while left > 0 {
        let (i, _) = remainders[cursor % remainders.len()];
        if parts[i] < sizes[i] {
            parts[i] += 1;
            left -= 1;
        }
        cursor += 1;
    }
    parts
}

/// Build masks that zero exactly `masked_count(total, target)` weights,
/// ranking by the given per-entry magnitudes (one slice per weight tensor,
/// in `weight_indices` order). Returns per-tensor binary mask vectors.
pub(crate) fn masks_from_magnitudes(
    magnitudes: &[Vec<f64>],
    target_sparsity: f64,
    locality: Locality,
) -> Vec<Vec<f32>> {
    let sizes: Vec<usize> = magnitudes.iter().map(|m| m.len()).collect();
    let total: usize = sizes.iter().sum();
    let to_mask = masked_count(total, target_sparsity);
    let mut masks: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![1.0f32; n]).collect();
    match locality {
        Locality::Global => {
            let flat: Vec<f64> = magnitudes.iter().flatten().copied().collect();
            for g in smallest_k_indices(&flat, to_mask) {
                let (t, j) = unflatten(g, &sizes);
                masks[t][j] = 0.0;
            }
        }
        Locality::Local => {
            let quotas = allocate_counts(to_mask, &sizes);
            for (t, quota) in quotas.iter().enumerate() {
                for j in smallest_k_indices(&magnitudes[t], *quota) {
                    masks[t][j] = 0.0;
                }
            }
        }
    }
    masks
}

fn unflatten(global: usize, sizes: &[usize]) -> (usize, usize) {
    let mut g = global;
    for (t, &s) in sizes.iter().enumerate() {
        if g < s {
            return (t, g);
        }
        g -= s;
    }
    unreachable!("global index out of range")
}

/// Install per-tensor weight masks (in `weight_indices` order) into a
/// network and materialize them into theta.
pub(crate) fn install_masks(net: &mut Network, masks: Vec<Vec<f32>>) -> Result<()> {
    let wis = net.weight_indices();
    assert_eq!(wis.len(), masks.len());
    for (wi, m) in wis.into_iter().zip(masks) {
        let shape = net.params[wi].value.shape().to_vec();
        net.params[wi].mask = Some(crate::tensor::Tensor::from_vec(&shape, m)?);
    }
    net.apply_masks()
}

/// Dispatch a pruning method at an explicit sparsity level.
pub fn prune_with_method(
    net: &Network,
    data: &crate::dataset::Dataset,
    cfg: &PruneConfig,
    sparsity: f64,
) -> Result<Network> {
    let mut c = cfg.clone();
    c.target_sparsity = sparsity;
    c.validate()?;
    match c.method {
        PruneMethod::Magnitude => magnitude_prune(net, sparsity, c.effective_locality()),
        PruneMethod::Hydra => hydra_prune(net, data, &c),
        PruneMethod::Admm => Ok(admm_prune(net, data, &c)?.0),
        PruneMethod::Atmc => atmc_lite(net, data, &c),
    }
}
