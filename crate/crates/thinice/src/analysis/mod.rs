//! Sample-wise comparison of a dense/pruned model pair: population
//! partition, signed boundary distances, rank statistics, and the CSV
//! artifacts behind the robustness and thin-ice tables.
//!
//! Populations are keyed by the correctness of both models: `S11` both
//! right, `S00` both wrong, `S10` flipped wrong by pruning, `S01` corrected
//! by pruning. The boundary distance epsilon is measured on the dense
//! model with a minimum-norm attack and reported negative for samples the
//! dense model already misclassifies.

mod report;
mod stats;

pub use report::{
    boundary_grid_export, robustness_row, robustness_table_csv, scatter_export, stats_row,
    stats_table_csv, CellKey, RobustnessRow, StatsRow,
};
pub use stats::{auc_lower, mann_whitney_u, PMethod, StatResult};

use crate::attacks::{fmn, fmn_targeted};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::parallel::par_map;
use crate::tensor::{LossKind, Norm};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PopulationLabel {
    S00,
    S01,
    S10,
    S11,
}

impl PopulationLabel {
    pub fn from_correctness(dense_ok: bool, pruned_ok: bool) -> Self {
        match (dense_ok, pruned_ok) {
            (false, false) => PopulationLabel::S00,
            (false, true) => PopulationLabel::S01,
            (true, false) => PopulationLabel::S10,
            (true, true) => PopulationLabel::S11,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PopulationLabel::S00 => "S00",
            PopulationLabel::S01 => "S01",
            PopulationLabel::S10 => "S10",
            PopulationLabel::S11 => "S11",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub true_label: usize,
    pub dense_pred: usize,
    pub pruned_pred: usize,
    pub population: PopulationLabel,
    /// Minimum-norm distance to the dense decision boundary; negative for
    /// samples the dense model misclassifies (measured back toward the
    /// true class). NaN until attached.
    pub epsilon_signed: f64,
    /// Dense-model margin (logit loss): positive iff classified correctly.
    pub dense_logit_loss: f64,
    /// False when the minimum-norm attack failed to converge; such records
    /// are excluded from statistics and counted in report footers.
    pub fmn_converged: bool,
}

/// Evaluate both models on every sample and assign populations. Boundary
/// distances are attached separately by [`attach_boundary_distances`].
pub fn partition_populations(
    dense: &Network,
    pruned: &Network,
    data: &Dataset,
) -> Result<Vec<SampleRecord>> {
    if dense.classes != pruned.classes {
        return Err(Error::ShapeMismatch(format!(
            "class count mismatch: dense {} vs pruned {}",
            dense.classes, pruned.classes
        )));
    }
    let dense_logits = dense.forward(&data.inputs)?;
    let dense_preds = crate::nn::argmax_rows(&dense_logits);
    let pruned_preds = pruned.predict(&data.inputs)?;
    let classes = dense.classes;
    let mut records = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let y = data.labels[i];
        let row = crate::tensor::Tensor::from_vec(
            &[classes],
            dense_logits.data()[i * classes..(i + 1) * classes].to_vec(),
        )?;
        let loss = crate::nn::surrogate_loss(LossKind::Margin, &row, y, None)?;
        records.push(SampleRecord {
            sample_id: i,
            true_label: y,
            dense_pred: dense_preds[i],
            pruned_pred: pruned_preds[i],
            population: PopulationLabel::from_correctness(dense_preds[i] == y, pruned_preds[i] == y),
            epsilon_signed: f64::NAN,
            dense_logit_loss: loss,
            fmn_converged: false,
        });
    }
    Ok(records)
}

/// Signed boundary distance of one sample under the dense model: the
/// minimum-norm perturbation if it classifies `x` correctly, otherwise the
/// negated distance back to the true class (the attack targets `y`).
pub fn boundary_distance_signed(
    dense: &Network,
    x: &crate::tensor::Tensor,
    y: usize,
    norm: Norm,
    steps: usize,
) -> Result<(f64, bool)> {
    let pred = crate::nn::argmax_rows(&dense.forward(x)?)[0];
    if pred == y {
        let out = fmn(dense, x, y, norm, steps)?;
        Ok((out.epsilon_star, out.converged))
    } else {
        let out = fmn_targeted(dense, x, y, norm, steps)?;
        Ok((-out.epsilon_star, out.converged))
    }
}

/// Fill `epsilon_signed` on every record; distances depend only on the
/// dense model, so one pass serves every pruned counterpart.
pub fn attach_boundary_distances(
    records: &mut [SampleRecord],
    dense: &Network,
    data: &Dataset,
    norm: Norm,
    steps: usize,
    threads: usize,
) -> Result<()> {
    let results = par_map(threads, records.len(), |i| {
        let x = data.input(records[i].sample_id)?;
        boundary_distance_signed(dense, &x, records[i].true_label, norm, steps)
    })?;
    for (r, (eps, converged)) in records.iter_mut().zip(results) {
        r.epsilon_signed = if converged {
            eps
        } else if eps >= 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        };
        r.fmn_converged = converged;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::two_moons;
    use crate::nn::{build_network, preset, LayerSpec};
    use crate::tensor::Tensor;

    #[test]
    fn partition_assigns_the_four_populations() {
        // dense predicts class of x1 >= 0.5; pruned always predicts 0
        let mut dense = build_network(vec![LayerSpec::Dense { inp: 2, out: 2 }], &[2], 0).unwrap();
        dense.params[0]
            .value
            .data_mut()
            .copy_from_slice(&[-1.0, 1.0, 0.0, 0.0]);
        dense.params[1].value.data_mut().copy_from_slice(&[0.5, -0.5]);
        let mut pruned = dense.clone();
        for v in pruned.params[0].value.data_mut() {
            *v = 0.0;
        }
        pruned.params[1].value.data_mut().copy_from_slice(&[1.0, 0.0]);

        let inputs = Tensor::from_vec(&[4, 2], vec![0.9, 0.5, 0.9, 0.5, 0.1, 0.5, 0.1, 0.5])
            .unwrap();
        let data = Dataset {
            inputs,
            labels: vec![1, 0, 0, 1],
        };
        let records = partition_populations(&dense, &pruned, &data).unwrap();
        // dense: pred 1,1,0,0 ; pruned: pred 0,0,0,0
        assert_eq!(records[0].population, PopulationLabel::S10); // dense right, pruned wrong
        assert_eq!(records[1].population, PopulationLabel::S01); // dense wrong, pruned right
        assert_eq!(records[2].population, PopulationLabel::S11);
        assert_eq!(records[3].population, PopulationLabel::S00);
    }

    #[test]
    fn identical_models_have_no_flips() {
        let data = two_moons(40, 0.1, 3).unwrap();
        let net = preset("mlp-2x64", 2, 5).unwrap();
        let records = partition_populations(&net, &net, &data).unwrap();
        assert!(records.iter().all(|r| matches!(
            r.population,
            PopulationLabel::S00 | PopulationLabel::S11
        )));
    }

    #[test]
    fn signed_distance_linear_model() {
        // logits (-(x1-0.5)/1, +(x1-0.5)) scaled: boundary at x1 = 0.5
        let mut net = build_network(vec![LayerSpec::Dense { inp: 2, out: 2 }], &[2], 0).unwrap();
        net.params[0]
            .value
            .data_mut()
            .copy_from_slice(&[-0.5, 0.5, 0.0, 0.0]);
        net.params[1].value.data_mut().copy_from_slice(&[0.25, -0.25]);
        // x = (0.8, 0.5): margin w.x+b with w=(1,0),b=-0.5 -> 0.3, class 1
        let x = Tensor::from_vec(&[1, 2], vec![0.8, 0.5]).unwrap();
        let (eps, ok) = boundary_distance_signed(&net, &x, 1, Norm::L2, 100).unwrap();
        assert!(ok);
        assert!((eps - 0.3).abs() / 0.3 < 0.02, "eps {eps}");
        // same point with wrong label: strictly negative distance back
        let (neg, ok) = boundary_distance_signed(&net, &x, 0, Norm::L2, 100).unwrap();
        assert!(ok);
        assert!(neg < 0.0, "expected negative, got {neg}");
        assert!((neg + 0.3).abs() / 0.3 < 0.05, "neg {neg}");
    }

    #[test]
    fn sign_agrees_with_dense_margin() {
        let data = two_moons(30, 0.15, 9).unwrap();
        let dense = preset("mlp-2x64", 2, 21).unwrap();
        let pruned = crate::prune::magnitude_prune(&dense, 0.5, crate::prune::Locality::Global)
            .unwrap();
        let mut records = partition_populations(&dense, &pruned, &data).unwrap();
        attach_boundary_distances(&mut records, &dense, &data, Norm::L2, 60, 1).unwrap();
        for r in &records {
            if !r.fmn_converged || r.epsilon_signed == 0.0 || r.dense_logit_loss == 0.0 {
                continue;
            }
            assert_eq!(
                r.epsilon_signed > 0.0,
                r.dense_logit_loss > 0.0,
                "sample {}: eps {} loss {}",
                r.sample_id,
                r.epsilon_signed,
                r.dense_logit_loss
            );
        }
    }

    #[test]
    fn population_label_recomputable_from_predictions() {
        let data = two_moons(40, 0.1, 3).unwrap();
        let dense = preset("mlp-2x64", 2, 5).unwrap();
        let pruned = crate::prune::magnitude_prune(&dense, 0.9, crate::prune::Locality::Global)
            .unwrap();
        for r in partition_populations(&dense, &pruned, &data).unwrap() {
            let want = PopulationLabel::from_correctness(
                r.dense_pred == r.true_label,
                r.pruned_pred == r.true_label,
            );
            assert_eq!(r.population, want);
        }
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let a = preset("mlp-2x64", 2, 1).unwrap();
        let b = preset("mlp-2x64", 3, 1).unwrap();
        let data = two_moons(10, 0.1, 1).unwrap();
        assert!(partition_populations(&a, &b, &data).is_err());
    }
}
