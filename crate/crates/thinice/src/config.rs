//! Experiment configuration: strict JSON parsing (unknown keys rejected),
//! defaults, and validation with JSON-pointer error paths.
//!
//! Seeds inside nested training blocks are derived from the experiment
//! seed at run time, so one `seed` field pins the entire run.

use crate::attacks::EnsembleComponent;
use crate::error::{Error, Result};
use crate::prune::{AdmmParams, AtmcParams, HydraParams, Locality, PruneMethod};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    Circles,
    Blobs,
    File,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_test: usize,
    /// Robustness-evaluation subset size (the same samples for every grid
    /// cell). Defaults to 1000, capped at `n_test`.
    #[serde(default = "default_eval_n")]
    pub eval_n: usize,
    /// Statistics subset size; defaults to the full test split.
    #[serde(default)]
    pub stats_n: usize,
    #[serde(default)]
    pub noise: f64,
    /// Class count for `blobs`; point generators are binary.
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// TNSR file paths for `kind = "file"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_inputs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_inputs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

fn default_eval_n() -> usize {
    1000
}

fn default_classes() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `mlp-2x64` or `cnn-tiny`.
    pub preset: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub method: PruneMethod,
    pub sparsity: f64,
}

impl GridCell {
    /// Stable identifier used for directories and baseline lookups,
    /// e.g. `hydra_90`.
    pub fn id(&self) -> String {
        format!(
            "{}_{:.0}",
            match self.method {
                PruneMethod::Magnitude => "magnitude",
                PruneMethod::Hydra => "hydra",
                PruneMethod::Admm => "admm",
                PruneMethod::Atmc => "atmc",
            },
            self.sparsity * 100.0
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningConfig {
    pub grid: Vec<GridCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locality: Option<Locality>,
    /// Iterative schedule as fractions of each cell's target (e.g.
    /// `[0.5, 1.0]` prunes to half the target then the target). Default is
    /// one-shot.
    #[serde(default = "default_schedule")]
    pub schedule_fractions: Vec<f64>,
    #[serde(default)]
    pub hydra: HydraParams,
    #[serde(default)]
    pub admm: AdmmParams,
    #[serde(default)]
    pub atmc: AtmcParams,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
}

fn default_schedule() -> Vec<f64> {
    vec![1.0]
}

fn default_finetune_epochs() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackBlock {
    /// linf budget for evaluation.
    pub epsilon: f64,
    /// Ensemble composition; defaults to the full set admissible for the
    /// class count (DLR members need >= 3 classes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<EnsembleComponent>>,
    #[serde(default = "default_apgd_steps")]
    pub apgd_steps: usize,
    #[serde(default = "default_apgd_restarts")]
    pub apgd_restarts: usize,
    #[serde(default = "default_square_queries")]
    pub square_queries: usize,
    #[serde(default = "default_fmn_steps")]
    pub fmn_steps: usize,
    /// PGD-only evaluation knobs (the "reported-style" self-evaluation).
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
    #[serde(default = "default_pgd_restarts")]
    pub pgd_restarts: usize,
}

fn default_apgd_steps() -> usize {
    50
}
fn default_apgd_restarts() -> usize {
    5
}
fn default_square_queries() -> usize {
    5000
}
fn default_fmn_steps() -> usize {
    100
}
fn default_pgd_steps() -> usize {
    40
}
fn default_pgd_restarts() -> usize {
    1
}

/// Externally reported accuracy/robustness claims (percentages), keyed by
/// grid-cell id (`method_sparsity`, e.g. `hydra_90`).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportedBaseline {
    pub rep_acc: f64,
    pub rep_rob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub pruning: PruningConfig,
    pub attack: AttackBlock,
    #[serde(default)]
    pub reported_baselines: BTreeMap<String, ReportedBaseline>,
    pub output_dir: PathBuf,
}

/// Parse and validate a strict-mode JSON experiment config. Schema errors
/// carry a JSON pointer to the offending key.
pub fn config_parse(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        Error::config(path_to_pointer(&e.path().to_string()), e.inner().to_string())
    })?;
    validate(&cfg)?;
    Ok(cfg)
}

pub fn config_to_json(cfg: &ExperimentConfig) -> Result<String> {
    serde_json::to_string_pretty(cfg).map_err(|e| Error::Serde(e.to_string()))
}

/// `pruning.grid[0].sparsity` -> `/pruning/grid/0/sparsity`
fn path_to_pointer(path: &str) -> String {
    if path == "." {
        return "/".into();
    }
    let mut out = String::from("/");
    out.push_str(
        &path
            .replace('[', "/")
            .replace(']', "")
            .replace('.', "/"),
    );
    out
}

fn validate(cfg: &ExperimentConfig) -> Result<()> {
    let d = &cfg.dataset;
    if d.n_train < 2 {
        return Err(Error::config("/dataset/n_train", "need at least 2 samples"));
    }
    if d.n_test < 2 {
        return Err(Error::config("/dataset/n_test", "need at least 2 samples"));
    }
    if d.eval_n > d.n_test {
        return Err(Error::config(
            "/dataset/eval_n",
            format!("{} exceeds n_test {}", d.eval_n, d.n_test),
        ));
    }
    if d.stats_n > d.n_test {
        return Err(Error::config(
            "/dataset/stats_n",
            format!("{} exceeds n_test {}", d.stats_n, d.n_test),
        ));
    }
    if d.noise < 0.0 {
        return Err(Error::config("/dataset/noise", "must be >= 0"));
    }
    if d.classes < 2 {
        return Err(Error::config("/dataset/classes", "need >= 2 classes"));
    }
    if matches!(d.kind, DatasetKind::TwoMoons | DatasetKind::Circles) && d.classes != 2 {
        return Err(Error::config(
            "/dataset/classes",
            "point generators are binary",
        ));
    }
    if d.kind == DatasetKind::File {
        for (field, v) in [
            ("train_inputs", &d.train_inputs),
            ("train_labels", &d.train_labels),
            ("test_inputs", &d.test_inputs),
            ("test_labels", &d.test_labels),
        ] {
            if v.is_none() {
                return Err(Error::config(
                    format!("/dataset/{field}"),
                    "required for kind \"file\"",
                ));
            }
        }
    }
    if cfg.training.learning_rate <= 0.0 {
        return Err(Error::config("/training/learning_rate", "must be > 0"));
    }
    if cfg.training.epochs == 0 {
        return Err(Error::config("/training/epochs", "must be >= 1"));
    }
    if let Some(adv) = &cfg.training.adversarial {
        if adv.epsilon < 0.0 {
            return Err(Error::config("/training/adversarial/epsilon", "must be >= 0"));
        }
        if adv.steps == 0 {
            return Err(Error::config("/training/adversarial/steps", "must be >= 1"));
        }
    }
    if cfg.pruning.grid.is_empty() {
        return Err(Error::config("/pruning/grid", "grid must be nonempty"));
    }
    for (i, cell) in cfg.pruning.grid.iter().enumerate() {
        if !(0.0..1.0).contains(&cell.sparsity) {
            return Err(Error::config(
                format!("/pruning/grid/{i}/sparsity"),
                format!("{} outside [0,1)", cell.sparsity),
            ));
        }
    }
    if cfg.pruning.schedule_fractions.is_empty() {
        return Err(Error::config("/pruning/schedule_fractions", "must be nonempty"));
    }
    for (i, f) in cfg.pruning.schedule_fractions.iter().enumerate() {
        if !(0.0..=1.0).contains(f) {
            return Err(Error::config(
                format!("/pruning/schedule_fractions/{i}"),
                "fractions must lie in [0,1]",
            ));
        }
    }
    if cfg
        .pruning
        .schedule_fractions
        .windows(2)
        .any(|w| w[1] < w[0])
    {
        return Err(Error::config(
            "/pruning/schedule_fractions",
            "must be non-decreasing",
        ));
    }
    if (cfg.pruning.schedule_fractions.last().unwrap() - 1.0).abs() > 1e-12 {
        return Err(Error::config(
            "/pruning/schedule_fractions",
            "must end at 1.0 (the cell target)",
        ));
    }
    if cfg.pruning.admm.rho <= 0.0 {
        return Err(Error::config("/pruning/admm/rho", "must be > 0"));
    }
    if cfg.attack.epsilon < 0.0 {
        return Err(Error::config("/attack/epsilon", "must be >= 0"));
    }
    for key in cfg.reported_baselines.keys() {
        if !cfg.pruning.grid.iter().any(|c| &c.id() == key) {
            return Err(Error::config(
                format!("/reported_baselines/{key}"),
                "no matching grid cell",
            ));
        }
    }
    Ok(())
}

pub fn minimal_example() -> &'static str {
    r#"{
  "experiment": "two-moons-demo",
  "seed": 7,
  "dataset": { "kind": "two_moons", "n_train": 256, "n_test": 128, "eval_n": 64, "stats_n": 128, "noise": 0.1 },
  "model": { "preset": "mlp-2x64" },
  "training": { "epochs": 10, "batch_size": 32, "learning_rate": 0.1, "momentum": 0.9, "seed": 0,
                "adversarial": { "epsilon": 0.03, "steps": 7, "norm": "linf" } },
  "pruning": { "grid": [ { "method": "magnitude", "sparsity": 0.9 } ] },
  "attack": { "epsilon": 0.03, "apgd_steps": 20, "apgd_restarts": 1, "square_queries": 200, "fmn_steps": 60 },
  "output_dir": "out/two-moons-demo"
}"#
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = config_parse(minimal_example()).unwrap();
        assert_eq!(cfg.dataset.classes, 2);
        assert_eq!(cfg.pruning.finetune_epochs, 5);
        assert_eq!(cfg.pruning.schedule_fractions, vec![1.0]);
        assert_eq!(cfg.attack.pgd_steps, 40);
        assert!(cfg.attack.components.is_none());
    }

    #[test]
    fn sparsity_out_of_range_names_the_key() {
        let text = minimal_example().replace("\"sparsity\": 0.9", "\"sparsity\": 1.5");
        let err = config_parse(&text).unwrap_err();
        match err {
            Error::Config { pointer, .. } => {
                assert_eq!(pointer, "/pruning/grid/0/sparsity");
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let text = minimal_example().replace(
            "\"preset\": \"mlp-2x64\"",
            "\"preset\": \"mlp-2x64\", \"depht\": 3",
        );
        let err = config_parse(&text).unwrap_err();
        match err {
            Error::Config { pointer, .. } => assert!(pointer.starts_with("/model")),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn round_trip_parses_to_equal_config() {
        let cfg = config_parse(minimal_example()).unwrap();
        let text = config_to_json(&cfg).unwrap();
        let again = config_parse(&text).unwrap();
        assert_eq!(config_to_json(&again).unwrap(), text);
    }

    #[test]
    fn eval_n_larger_than_test_rejected() {
        let text = minimal_example().replace("\"eval_n\": 64", "\"eval_n\": 5000");
        let err = config_parse(&text).unwrap_err();
        match err {
            Error::Config { pointer, .. } => assert_eq!(pointer, "/dataset/eval_n"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn baseline_keys_must_match_grid() {
        let text = minimal_example().replace(
            "\"output_dir\"",
            "\"reported_baselines\": { \"hydra_95\": { \"rep_acc\": 80.0, \"rep_rob\": 50.0 } }, \"output_dir\"",
        );
        let err = config_parse(&text).unwrap_err();
        match err {
            Error::Config { pointer, .. } => {
                assert_eq!(pointer, "/reported_baselines/hydra_95")
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn exit_code_for_config_errors_is_two() {
        let err = config_parse("{").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
