//! Experiment orchestration: dataset, dense training, the pruning grid,
//! ensemble re-evaluation, PGD self-evaluation, sample-wise analysis, and
//! report rendering.
//!
//! Every stage is resumable: a stage records a content key (hash of its
//! resolved config subsection and upstream keys) next to its artifacts and
//! is skipped when the key still matches. Cell-scoped stage failures mark
//! the cell failed and the run continues with the other cells.
//!
//! Boundary distances are a dense-model property, so they are measured
//! once per experiment and shared by every grid cell.

use crate::analysis::{
    attach_boundary_distances, boundary_grid_export, partition_populations, robustness_table_csv,
    scatter_export, stats_row, stats_table_csv, CellKey, RobustnessRow, SampleRecord, StatsRow,
};
use crate::attacks::{
    default_components, ensemble_evaluate, outcomes_to_csv, pgd_robust_accuracy, EnsembleConfig,
};
use crate::config::{DatasetKind, ExperimentConfig, GridCell};
use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, preset, Network};
use crate::parallel::thread_count;
use crate::prune::{run_pipeline, PipelinePlan, PruneConfig};
use crate::rng::derive_seed;
use crate::tensor::Norm;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Grid resolution of the decision-boundary exports for 2-d models.
const GRID_RESOLUTION: usize = 81;

/// How far through the stage sequence a CLI verb drives the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum UpTo {
    Dataset,
    Train,
    Prune,
    Attack,
    Evaluate,
    Analyze,
    Report,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellStatus {
    pub completed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub tool_version: String,
    pub config_hash: String,
    pub config_snapshot: serde_json::Value,
    pub cells: BTreeMap<String, CellStatus>,
    /// Wall-clock seconds per stage that ran in some invocation.
    pub stage_seconds: BTreeMap<String, f64>,
    /// Relative path -> sha256 of every artifact under the output dir.
    pub artifacts: BTreeMap<String, String>,
    pub completed: bool,
}

#[derive(Serialize, Deserialize)]
struct StageDone {
    key: String,
    artifacts: Vec<String>,
}

fn sha256_hex(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(data);
    h.finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    out: PathBuf,
    threads: usize,
    timings: BTreeMap<String, f64>,
    cells: BTreeMap<String, CellStatus>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        let out = cfg.output_dir.clone();
        std::fs::create_dir_all(out.join(".stages"))?;
        std::fs::create_dir_all(out.join("analysis"))?;
        Ok(Runner {
            cfg,
            out,
            threads: thread_count(),
            timings: BTreeMap::new(),
            cells: BTreeMap::new(),
        })
    }

    fn stage_file(&self, stage: &str) -> PathBuf {
        self.out.join(".stages").join(format!("{stage}.json"))
    }

    fn is_done(&self, stage: &str, key: &str) -> bool {
        let Ok(raw) = std::fs::read_to_string(self.stage_file(stage)) else {
            return false;
        };
        let Ok(done) = serde_json::from_str::<StageDone>(&raw) else {
            return false;
        };
        done.key == key && done.artifacts.iter().all(|a| self.out.join(a).exists())
    }

    fn mark_done(&mut self, stage: &str, key: &str, artifacts: Vec<String>, started: Instant) -> Result<()> {
        let done = StageDone {
            key: key.to_string(),
            artifacts,
        };
        std::fs::write(
            self.stage_file(stage),
            serde_json::to_string_pretty(&done).map_err(|e| Error::Serde(e.to_string()))?,
        )?;
        self.timings
            .insert(stage.to_string(), started.elapsed().as_secs_f64());
        Ok(())
    }

    fn block_json<T: Serialize>(v: &T) -> String {
        serde_json::to_string(v).expect("config blocks serialize")
    }

    // -- keys ---------------------------------------------------------------

    fn dataset_key(&self) -> String {
        sha256_hex(
            format!(
                "dataset|{}|{}",
                Self::block_json(&self.cfg.dataset),
                self.cfg.seed
            )
            .as_bytes(),
        )
    }

    fn train_key(&self) -> String {
        sha256_hex(
            format!(
                "train|{}|{}|{}|{}",
                self.dataset_key(),
                Self::block_json(&self.cfg.training),
                Self::block_json(&self.cfg.model),
                self.cfg.seed
            )
            .as_bytes(),
        )
    }

    fn prune_key(&self, cell: &GridCell) -> String {
        sha256_hex(
            format!(
                "prune|{}|{}|{}|{}",
                self.train_key(),
                Self::block_json(&self.cfg.pruning),
                Self::block_json(cell),
                self.cfg.seed
            )
            .as_bytes(),
        )
    }

    fn attack_key(&self, cell: &GridCell) -> String {
        sha256_hex(
            format!(
                "attack|{}|{}",
                self.prune_key(cell),
                Self::block_json(&self.cfg.attack)
            )
            .as_bytes(),
        )
    }

    fn pgd_key(&self, cell: &GridCell) -> String {
        sha256_hex(
            format!(
                "pgd|{}|{}|{}|{}",
                self.prune_key(cell),
                self.cfg.attack.epsilon,
                self.cfg.attack.pgd_steps,
                self.cfg.attack.pgd_restarts
            )
            .as_bytes(),
        )
    }

    fn dense_eps_key(&self) -> String {
        sha256_hex(
            format!(
                "dense_eps|{}|{}|{}",
                self.train_key(),
                self.cfg.attack.fmn_steps,
                self.cfg.dataset.stats_n
            )
            .as_bytes(),
        )
    }

    fn analyze_key(&self, cell: &GridCell) -> String {
        sha256_hex(
            format!("analyze|{}|{}", self.prune_key(cell), self.dense_eps_key()).as_bytes(),
        )
    }

    /// Depends on the per-cell analysis keys AND on which cells completed
    /// this run, so a cell recovering from a transient failure refreshes
    /// the report.
    fn report_key(&self) -> String {
        let cell_keys: Vec<String> = self
            .cfg
            .pruning
            .grid
            .iter()
            .map(|c| format!("{}={}", self.analyze_key(c), self.cell_ok(c)))
            .collect();
        sha256_hex(
            format!(
                "report|{}|{}|{}",
                cell_keys.join(","),
                Self::block_json(&self.cfg.reported_baselines),
                self.attack_components_note()
            )
            .as_bytes(),
        )
    }

    fn attack_components_note(&self) -> String {
        let classes = self.classes();
        let comps = self
            .cfg
            .attack
            .components
            .clone()
            .unwrap_or_else(|| default_components(classes));
        comps
            .iter()
            .map(|c| c.name())
            .collect::<Vec<_>>()
            .join("+")
    }

    fn classes(&self) -> usize {
        self.cfg.dataset.classes
    }

    // -- stages -------------------------------------------------------------

    fn run_dataset(&mut self) -> Result<()> {
        let key = self.dataset_key();
        if self.is_done("dataset", &key) {
            return Ok(());
        }
        let t = Instant::now();
        let d = &self.cfg.dataset;
        let (train, test) = match d.kind {
            DatasetKind::TwoMoons => (
                dataset::two_moons(d.n_train, d.noise, derive_seed(self.cfg.seed, 10))?,
                dataset::two_moons(d.n_test, d.noise, derive_seed(self.cfg.seed, 11))?,
            ),
            DatasetKind::Circles => (
                dataset::circles(d.n_train, d.noise, derive_seed(self.cfg.seed, 10))?,
                dataset::circles(d.n_test, d.noise, derive_seed(self.cfg.seed, 11))?,
            ),
            DatasetKind::Blobs => (
                dataset::blobs(d.n_train, d.classes, d.noise, derive_seed(self.cfg.seed, 10))?,
                dataset::blobs(d.n_test, d.classes, d.noise, derive_seed(self.cfg.seed, 11))?,
            ),
            DatasetKind::File => (
                dataset::from_files(
                    d.train_inputs.as_ref().unwrap(),
                    d.train_labels.as_ref().unwrap(),
                )?,
                dataset::from_files(
                    d.test_inputs.as_ref().unwrap(),
                    d.test_labels.as_ref().unwrap(),
                )?,
            ),
        };
        let dir = self.out.join("dataset");
        std::fs::create_dir_all(&dir)?;
        dataset::to_files(&train, &dir.join("train_x.tnsr"), &dir.join("train_y.tnsr"))?;
        dataset::to_files(&test, &dir.join("test_x.tnsr"), &dir.join("test_y.tnsr"))?;
        self.mark_done(
            "dataset",
            &key,
            vec![
                "dataset/train_x.tnsr".into(),
                "dataset/train_y.tnsr".into(),
                "dataset/test_x.tnsr".into(),
                "dataset/test_y.tnsr".into(),
            ],
            t,
        )
    }

    fn load_split(&self, split: &str) -> Result<Dataset> {
        let dir = self.out.join("dataset");
        dataset::from_files(
            &dir.join(format!("{split}_x.tnsr")),
            &dir.join(format!("{split}_y.tnsr")),
        )
    }

    fn run_train(&mut self) -> Result<()> {
        let key = self.train_key();
        if self.is_done("train", &key) {
            return Ok(());
        }
        let t = Instant::now();
        let train = self.load_split("train")?;
        let classes = self.classes().max(train.classes());
        let mut net = preset(
            &self.cfg.model.preset,
            classes,
            derive_seed(self.cfg.seed, 20),
        )?;
        let mut tcfg = self.cfg.training.clone();
        tcfg.seed = derive_seed(self.cfg.seed, 21);
        let history = crate::train::train_loop(
            &mut net,
            &train,
            &tcfg,
            crate::train::TrainHooks::default(),
        )
        .map_err(|e| Error::stage("train", e))?;
        crate::nn::save_checkpoint(&net, &self.out.join("dense"))?;
        crate::train::write_history_csv(&self.out.join("history.csv"), &history)?;
        self.mark_done(
            "train",
            &key,
            vec!["dense/manifest.json".into(), "history.csv".into()],
            t,
        )
    }

    fn dense_net(&self) -> Result<Network> {
        load_checkpoint(&self.out.join("dense"))
    }

    fn cell_dir(&self, cell: &GridCell) -> PathBuf {
        self.out.join("cells").join(cell.id())
    }

    fn run_prune_cell(&mut self, cell: &GridCell) -> Result<()> {
        let stage = format!("prune:{}", cell.id());
        let key = self.prune_key(cell);
        if self.is_done(&stage, &key) {
            return Ok(());
        }
        let t = Instant::now();
        let train = self.load_split("train")?;
        let dense = self.dense_net()?;
        let cell_seed = derive_seed(self.cfg.seed, 40 ^ key_bits(&key));
        let p = &self.cfg.pruning;
        let plan = PipelinePlan {
            // the dense model is already trained; the per-cell pipeline
            // starts from it with a zero-epoch pretrain stage
            pretrain: TrainConfig {
                epochs: 0,
                seed: cell_seed,
                ..self.cfg.training.clone()
            },
            prune: PruneConfig {
                target_sparsity: cell.sparsity,
                locality: p.locality,
                method: cell.method,
                hydra: p.hydra.clone(),
                admm: p.admm.clone(),
                atmc: p.atmc.clone(),
                train: TrainConfig {
                    epochs: 0,
                    seed: derive_seed(cell_seed, 1),
                    ..self.cfg.training.clone()
                },
                seed: derive_seed(cell_seed, 2),
            },
            finetune: TrainConfig {
                epochs: p.finetune_epochs,
                seed: derive_seed(cell_seed, 3),
                ..self.cfg.training.clone()
            },
            schedule: p
                .schedule_fractions
                .iter()
                .map(|f| f * cell.sparsity)
                .collect(),
        };
        let dir = self.cell_dir(cell);
        run_pipeline(dense, &train, &plan, Some(&dir))?;
        self.mark_done(
            &stage,
            &key,
            vec![
                format!("cells/{}/pruned/manifest.json", cell.id()),
                format!("cells/{}/pipeline_log.csv", cell.id()),
            ],
            t,
        )
    }

    fn pruned_net(&self, cell: &GridCell) -> Result<Network> {
        load_checkpoint(&self.cell_dir(cell).join("pruned"))
    }

    fn eval_subset(&self, test: &Dataset) -> Vec<usize> {
        test.pick_indices(self.cfg.dataset.eval_n, derive_seed(self.cfg.seed, 12))
    }

    fn stats_subset(&self, test: &Dataset) -> Vec<usize> {
        let n = if self.cfg.dataset.stats_n == 0 {
            test.len()
        } else {
            self.cfg.dataset.stats_n
        };
        test.pick_indices(n, derive_seed(self.cfg.seed, 13))
    }

    fn ensemble_config(&self) -> EnsembleConfig {
        let a = &self.cfg.attack;
        EnsembleConfig {
            epsilon: a.epsilon,
            components: a
                .components
                .clone()
                .unwrap_or_else(|| default_components(self.classes())),
            apgd_steps: a.apgd_steps,
            apgd_restarts: a.apgd_restarts,
            square_queries: a.square_queries,
            fmn_steps: a.fmn_steps,
            targeted_count: self.classes().saturating_sub(1).min(9),
            seed: derive_seed(self.cfg.seed, 30),
            threads: self.threads,
        }
    }

    fn run_attack_cell(&mut self, cell: &GridCell) -> Result<()> {
        let stage = format!("attack:{}", cell.id());
        let key = self.attack_key(cell);
        if self.is_done(&stage, &key) {
            return Ok(());
        }
        let t = Instant::now();
        let test = self.load_split("test")?;
        let eval = test.subset(&self.eval_subset(&test))?;
        let net = self.pruned_net(cell)?;
        let report = ensemble_evaluate(&net, &eval, &self.ensemble_config())?;
        let dir = self.cell_dir(cell);
        // sample ids in outcome rows refer to the shared evaluation subset
        std::fs::write(dir.join("outcomes.csv"), outcomes_to_csv(&report.outcomes))?;
        let eval_json = serde_json::json!({
            "clean_acc": report.clean_accuracy,
            "robust_acc": report.robust_accuracy,
            "eval_n": eval.len(),
            "eval_sample_ids": self.eval_subset(&test),
        });
        std::fs::write(
            dir.join("eval.json"),
            serde_json::to_string_pretty(&eval_json).map_err(|e| Error::Serde(e.to_string()))?,
        )?;
        self.mark_done(
            &stage,
            &key,
            vec![
                format!("cells/{}/outcomes.csv", cell.id()),
                format!("cells/{}/eval.json", cell.id()),
            ],
            t,
        )
    }

    fn run_pgd_cell(&mut self, cell: &GridCell) -> Result<()> {
        let stage = format!("pgd:{}", cell.id());
        let key = self.pgd_key(cell);
        if self.is_done(&stage, &key) {
            return Ok(());
        }
        let t = Instant::now();
        let test = self.load_split("test")?;
        let eval = test.subset(&self.eval_subset(&test))?;
        let net = self.pruned_net(cell)?;
        let pgd_rob = pgd_robust_accuracy(
            &net,
            &eval,
            self.cfg.attack.epsilon,
            self.cfg.attack.pgd_steps,
            self.cfg.attack.pgd_restarts,
            derive_seed(self.cfg.seed, 31),
            self.threads,
        )?;
        let dir = self.cell_dir(cell);
        std::fs::write(
            dir.join("pgd_eval.json"),
            serde_json::to_string_pretty(&serde_json::json!({ "pgd_rob": pgd_rob }))
                .map_err(|e| Error::Serde(e.to_string()))?,
        )?;
        self.mark_done(
            &stage,
            &key,
            vec![format!("cells/{}/pgd_eval.json", cell.id())],
            t,
        )
    }

    /// Boundary distances under the dense model for the stats subset,
    /// measured once and reused by every cell.
    fn run_dense_eps(&mut self) -> Result<()> {
        let key = self.dense_eps_key();
        if self.is_done("dense_eps", &key) {
            return Ok(());
        }
        let t = Instant::now();
        let test = self.load_split("test")?;
        let idx = self.stats_subset(&test);
        let subset = test.subset(&idx)?;
        let dense = self.dense_net()?;
        let mut records = partition_populations(&dense, &dense, &subset)?;
        attach_boundary_distances(
            &mut records,
            &dense,
            &subset,
            Norm::L2,
            self.cfg.attack.fmn_steps,
            self.threads,
        )?;
        let mut csv = String::from("sample_id,epsilon_signed,converged\n");
        for (r, &test_id) in records.iter().zip(&idx) {
            csv.push_str(&format!(
                "{},{},{}\n",
                test_id,
                if r.epsilon_signed.is_finite() {
                    format!("{:.9}", r.epsilon_signed)
                } else if r.epsilon_signed > 0.0 {
                    "inf".into()
                } else {
                    "-inf".into()
                },
                r.fmn_converged
            ));
        }
        std::fs::write(self.out.join("analysis").join("dense_eps.csv"), csv)?;
        if self.grid_capable()? {
            let grid = boundary_grid_export(&dense, ((0.0, 1.0), (0.0, 1.0)), GRID_RESOLUTION)?;
            std::fs::write(self.out.join("analysis").join("boundary_grid_dense.csv"), grid)?;
        }
        let mut artifacts = vec!["analysis/dense_eps.csv".to_string()];
        if self.grid_capable()? {
            artifacts.push("analysis/boundary_grid_dense.csv".into());
        }
        self.mark_done("dense_eps", &key, artifacts, t)
    }

    fn grid_capable(&self) -> Result<bool> {
        Ok(self.cfg.model.preset == "mlp-2x64")
    }

    fn load_dense_eps(&self) -> Result<BTreeMap<usize, (f64, bool)>> {
        let raw = std::fs::read_to_string(self.out.join("analysis").join("dense_eps.csv"))?;
        let mut map = BTreeMap::new();
        for line in raw.lines().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Checkpoint("corrupt dense_eps.csv".into()));
            }
            let id: usize = parts[0]
                .parse()
                .map_err(|_| Error::Checkpoint("corrupt dense_eps.csv".into()))?;
            let eps = match parts[1] {
                "inf" => f64::INFINITY,
                "-inf" => f64::NEG_INFINITY,
                v => v
                    .parse()
                    .map_err(|_| Error::Checkpoint("corrupt dense_eps.csv".into()))?,
            };
            let converged = parts[2] == "true";
            map.insert(id, (eps, converged));
        }
        Ok(map)
    }

    fn run_analyze_cell(&mut self, cell: &GridCell) -> Result<()> {
        let stage = format!("analyze:{}", cell.id());
        let key = self.analyze_key(cell);
        if self.is_done(&stage, &key) {
            return Ok(());
        }
        let t = Instant::now();
        let test = self.load_split("test")?;
        let idx = self.stats_subset(&test);
        let subset = test.subset(&idx)?;
        let dense = self.dense_net()?;
        let pruned = self.pruned_net(cell)?;
        let eps = self.load_dense_eps()?;
        let mut records = partition_populations(&dense, &pruned, &subset)?;
        for (r, &test_id) in records.iter_mut().zip(&idx) {
            r.sample_id = test_id;
            let (e, c) = *eps
                .get(&test_id)
                .ok_or_else(|| Error::Checkpoint("dense_eps.csv missing sample".into()))?;
            r.epsilon_signed = e;
            r.fmn_converged = c;
        }
        let dir = self.cell_dir(cell);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("records.csv"), records_csv(&records))?;
        std::fs::write(dir.join("scatter.csv"), scatter_export(&records))?;
        let mut artifacts = vec![
            format!("cells/{}/records.csv", cell.id()),
            format!("cells/{}/scatter.csv", cell.id()),
        ];
        if self.grid_capable()? {
            let grid = boundary_grid_export(&pruned, ((0.0, 1.0), (0.0, 1.0)), GRID_RESOLUTION)?;
            std::fs::write(dir.join("boundary_grid_pruned.csv"), grid)?;
            artifacts.push(format!("cells/{}/boundary_grid_pruned.csv", cell.id()));
        }
        self.mark_done(&stage, &key, artifacts, t)
    }

    fn load_records(&self, cell: &GridCell) -> Result<Vec<SampleRecord>> {
        records_from_csv(&std::fs::read_to_string(
            self.cell_dir(cell).join("records.csv"),
        )?)
    }

    fn cell_key(&self, cell: &GridCell) -> CellKey {
        CellKey {
            method: cell.method.name().to_string(),
            sparsity: cell.sparsity,
            network: self.cfg.model.preset.clone(),
        }
    }

    fn run_report(&mut self) -> Result<()> {
        let key = self.report_key();
        if self.is_done("report", &key) {
            return Ok(());
        }
        let t = Instant::now();
        let mut rob_rows: Vec<RobustnessRow> = Vec::new();
        let mut stat_rows: Vec<StatsRow> = Vec::new();
        for cell in &self.cfg.pruning.grid {
            if !self.cell_ok(cell) {
                continue;
            }
            let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(
                self.cell_dir(cell).join("eval.json"),
            )?)
            .map_err(|e| Error::Serde(e.to_string()))?;
            let pgd: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(
                self.cell_dir(cell).join("pgd_eval.json"),
            )?)
            .map_err(|e| Error::Serde(e.to_string()))?;
            let baseline = self.cfg.reported_baselines.get(&cell.id());
            rob_rows.push(RobustnessRow {
                key: self.cell_key(cell),
                rep_acc: baseline.map(|b| b.rep_acc),
                rep_rob: baseline.map(|b| b.rep_rob),
                aa_acc: eval["clean_acc"].as_f64().unwrap_or(f64::NAN),
                aa_rob: eval["robust_acc"].as_f64().unwrap_or(f64::NAN),
                pgd_rob: pgd["pgd_rob"].as_f64().unwrap_or(f64::NAN),
            });
            let records = self.load_records(cell)?;
            stat_rows.push(stats_row(self.cell_key(cell), &records)?);
        }
        std::fs::write(
            self.out.join("robustness_table.csv"),
            robustness_table_csv(&rob_rows),
        )?;
        std::fs::write(self.out.join("stats_table.csv"), stats_table_csv(&stat_rows))?;
        std::fs::write(
            self.out.join("report.txt"),
            self.render_text_report(&rob_rows, &stat_rows)?,
        )?;
        self.mark_done(
            "report",
            &key,
            vec![
                "robustness_table.csv".into(),
                "stats_table.csv".into(),
                "report.txt".into(),
            ],
            t,
        )
    }

    fn render_text_report(&self, rob: &[RobustnessRow], stats: &[StatsRow]) -> Result<String> {
        let mut s = String::new();
        s.push_str(&format!("experiment: {}\n", self.cfg.experiment));
        s.push_str(&format!("seed: {}\n", self.cfg.seed));
        s.push_str(&format!("config sha256: {}\n", self.config_hash()));
        s.push_str(&format!(
            "model preset: {} ({} classes)\n",
            self.cfg.model.preset,
            self.classes()
        ));
        s.push_str(&format!(
            "attack ensemble (worst-case, fixed order): {}\n",
            self.attack_components_note()
        ));
        s.push_str(
            "note: the minimum-norm ensemble member is FMN; it also measures the\n\
             boundary distances used by the thin-ice statistics.\n",
        );
        s.push_str(&format!(
            "evaluation: eps = {}, eval_n = {}, stats_n = {}\n\n",
            self.cfg.attack.epsilon, self.cfg.dataset.eval_n, self.cfg.dataset.stats_n
        ));
        s.push_str("== robustness re-evaluation (percentages) ==\n");
        s.push_str(&robustness_table_csv(rob).replace(',', "\t"));
        s.push_str("\n== thin-ice statistics ==\n");
        s.push_str(&stats_table_csv(stats).replace(',', "\t"));
        s.push('\n');
        for row in stats {
            if row.excluded > 0 {
                s.push_str(&format!(
                    "note: {} {}: {} samples excluded (FMN non-convergence)\n",
                    row.key.method,
                    row.key.sparsity,
                    row.excluded
                ));
            }
        }
        for cell in &self.cfg.pruning.grid {
            if let Some(status) = self.cells.get(&cell.id()) {
                if let Some(err) = &status.failed {
                    s.push_str(&format!("FAILED cell {}: {err}\n", cell.id()));
                }
            }
        }
        Ok(s)
    }

    /// Provenance hash of the scientific configuration; the output
    /// directory is normalized out so relocating a run does not change its
    /// identity.
    fn config_hash(&self) -> String {
        let mut cfg = self.cfg.clone();
        cfg.output_dir = PathBuf::new();
        sha256_hex(
            crate::config::config_to_json(&cfg)
                .unwrap_or_default()
                .as_bytes(),
        )
    }

    fn cell_ok(&self, cell: &GridCell) -> bool {
        self.cells
            .get(&cell.id())
            .map(|s| s.completed)
            .unwrap_or(false)
    }

    fn finish(mut self) -> Result<RunManifest> {
        // merge timings from a previous manifest so skipped stages keep
        // their recorded durations
        let manifest_path = self.out.join("manifest.json");
        if let Ok(raw) = std::fs::read_to_string(&manifest_path) {
            if let Ok(prev) = serde_json::from_str::<RunManifest>(&raw) {
                for (k, v) in prev.stage_seconds {
                    self.timings.entry(k).or_insert(v);
                }
            }
        }
        let mut artifacts = BTreeMap::new();
        walk_files(&self.out, &self.out, &mut artifacts)?;
        artifacts.remove("manifest.json");
        let completed = !self.cells.is_empty() && self.cells.values().all(|c| c.completed);
        let manifest = RunManifest {
            experiment: self.cfg.experiment.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config_hash(),
            config_snapshot: serde_json::to_value(self.cfg)
                .map_err(|e| Error::Serde(e.to_string()))?,
            cells: self.cells.clone(),
            stage_seconds: self.timings.clone(),
            artifacts,
            completed,
        };
        std::fs::write(
            &manifest_path,
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?,
        )?;
        Ok(manifest)
    }
}

fn key_bits(key: &str) -> u64 {
    u64::from_str_radix(&key[..16], 16).unwrap_or(0)
}

fn walk_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            walk_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .map_err(|_| Error::Checkpoint("walk outside root".into()))?
                .to_string_lossy()
                .replace('\\', "/");
            let data = std::fs::read(&path)?;
            out.insert(rel, sha256_hex(&data));
        }
    }
    Ok(())
}

fn records_csv(records: &[SampleRecord]) -> String {
    let mut out = String::from(
        "sample_id,true_label,dense_pred,pruned_pred,population,epsilon_signed,dense_logit_loss,fmn_converged\n",
    );
    for r in records {
        let eps = if r.epsilon_signed.is_finite() {
            format!("{:.9}", r.epsilon_signed)
        } else if r.epsilon_signed > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.9},{}\n",
            r.sample_id,
            r.true_label,
            r.dense_pred,
            r.pruned_pred,
            r.population.name(),
            eps,
            r.dense_logit_loss,
            r.fmn_converged
        ));
    }
    out
}

fn records_from_csv(text: &str) -> Result<Vec<SampleRecord>> {
    use crate::analysis::PopulationLabel;
    let bad = || Error::Checkpoint("corrupt records.csv".into());
    let mut records = Vec::new();
    for line in text.lines().skip(1) {
        let p: Vec<&str> = line.split(',').collect();
        if p.len() != 8 {
            return Err(bad());
        }
        let population = match p[4] {
            "S00" => PopulationLabel::S00,
            "S01" => PopulationLabel::S01,
            "S10" => PopulationLabel::S10,
            "S11" => PopulationLabel::S11,
            _ => return Err(bad()),
        };
        let eps = match p[5] {
            "inf" => f64::INFINITY,
            "-inf" => f64::NEG_INFINITY,
            v => v.parse().map_err(|_| bad())?,
        };
        records.push(SampleRecord {
            sample_id: p[0].parse().map_err(|_| bad())?,
            true_label: p[1].parse().map_err(|_| bad())?,
            dense_pred: p[2].parse().map_err(|_| bad())?,
            pruned_pred: p[3].parse().map_err(|_| bad())?,
            population,
            epsilon_signed: eps,
            dense_logit_loss: p[6].parse().map_err(|_| bad())?,
            fmn_converged: p[7] == "true",
        });
    }
    Ok(records)
}

/// Run the experiment through the stage sequence up to `up_to`. Failures
/// inside a grid cell mark that cell failed and the run continues; failures
/// in shared stages abort.
pub fn run_experiment(cfg: &ExperimentConfig, up_to: UpTo) -> Result<RunManifest> {
    let mut runner = Runner::new(cfg)?;
    runner.run_dataset().map_err(|e| Error::stage("dataset", e))?;
    if up_to == UpTo::Dataset {
        return runner.finish();
    }
    runner.run_train()?;
    if up_to == UpTo::Train {
        return runner.finish();
    }

    // per-cell stage ladder with independent failure isolation
    let grid = cfg.pruning.grid.clone();
    for cell in &grid {
        let id = cell.id();
        let result = (|| -> Result<()> {
            runner
                .run_prune_cell(cell)
                .map_err(|e| Error::stage(format!("prune:{id}"), e))?;
            if up_to >= UpTo::Attack {
                runner
                    .run_attack_cell(cell)
                    .map_err(|e| Error::stage(format!("attack:{id}"), e))?;
            }
            if up_to >= UpTo::Evaluate {
                runner
                    .run_pgd_cell(cell)
                    .map_err(|e| Error::stage(format!("pgd:{id}"), e))?;
            }
            Ok(())
        })();
        match result {
            Ok(()) => {
                runner.cells.insert(
                    id,
                    CellStatus {
                        completed: true,
                        failed: None,
                    },
                );
            }
            Err(e) => {
                runner.cells.insert(
                    id,
                    CellStatus {
                        completed: false,
                        failed: Some(e.to_string()),
                    },
                );
            }
        }
    }
    if up_to <= UpTo::Evaluate {
        return runner.finish();
    }

    runner.run_dense_eps().map_err(|e| Error::stage("dense_eps", e))?;
    for cell in &grid {
        let id = cell.id();
        if !runner.cell_ok(cell) {
            continue;
        }
        if let Err(e) = runner.run_analyze_cell(cell) {
            runner.cells.insert(
                id.clone(),
                CellStatus {
                    completed: false,
                    failed: Some(Error::stage(format!("analyze:{id}"), e).to_string()),
                },
            );
        }
    }
    if up_to == UpTo::Analyze {
        return runner.finish();
    }

    runner.run_report().map_err(|e| Error::stage("report", e))?;
    runner.finish()
}

/// Render the human-readable report for an existing run directory.
pub fn report_render(cfg: &ExperimentConfig) -> Result<String> {
    let path = cfg.output_dir.join("report.txt");
    std::fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e} (run `report` first)", path.display())))
}
