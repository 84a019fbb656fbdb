//! Pretrain -> prune -> fine-tune pipeline, one-shot or iterative.
//!
//! The dense checkpoint is persisted before any pruning so the analysis
//! stage can always compare against the exact pre-pruning model. Stage
//! failures abort with the stage name and remove partially written
//! artifacts.

use super::{prune_with_method, PruneConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{save_checkpoint, Network};
use crate::rng::derive_seed;
use crate::train::{finetune_masked, train_loop, TrainHooks};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct PipelinePlan {
    pub pretrain: crate::train::TrainConfig,
    pub prune: PruneConfig,
    pub finetune: crate::train::TrainConfig,
    /// Sparsity per round, non-decreasing, ending at the target.
    /// `[target]` is one-shot pruning.
    pub schedule: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StageRecord {
    pub stage: String,
    pub round: usize,
    pub sparsity: f64,
    pub final_loss: f64,
    pub final_acc: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub dense: Network,
    pub pruned: Network,
    pub log: Vec<StageRecord>,
    pub dense_dir: Option<PathBuf>,
    pub pruned_dir: Option<PathBuf>,
}

fn validate_schedule(plan: &PipelinePlan) -> Result<()> {
    if plan.schedule.is_empty() {
        return Err(Error::config("/pipeline/schedule", "empty schedule"));
    }
    for w in plan.schedule.windows(2) {
        if w[1] < w[0] {
            return Err(Error::config(
                "/pipeline/schedule",
                "sparsity schedule must be non-decreasing",
            ));
        }
    }
    let last = *plan.schedule.last().unwrap();
    if (last - plan.prune.target_sparsity).abs() > 1e-12 {
        return Err(Error::config(
            "/pipeline/schedule",
            "schedule must end at the target sparsity",
        ));
    }
    Ok(())
}

/// Write a checkpoint atomically: build in a scratch sibling, rename into
/// place, so a crash never leaves a partial directory.
fn persist(net: &Network, dir: &Path) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    save_checkpoint(net, &tmp)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(())
}

fn eval_record(
    net: &mut Network,
    data: &Dataset,
    stage: &str,
    round: usize,
    started: Instant,
) -> Result<StageRecord> {
    // one probe epoch worth of statistics without updating anything
    let logits = net.forward(&data.inputs)?;
    let preds = crate::nn::argmax_rows(&logits);
    let acc = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| *p == *y)
        .count() as f64
        / data.len() as f64;
    let loss = crate::tensor::softmax_cross_entropy(&logits, &data.labels)?;
    Ok(StageRecord {
        stage: stage.to_string(),
        round,
        sparsity: net.sparsity(),
        final_loss: loss,
        final_acc: acc,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Run the full pipeline. When `out_dir` is given, the dense and pruned
/// checkpoints land in `<out_dir>/dense` and `<out_dir>/pruned`, and the
/// per-stage metrics in `<out_dir>/pipeline_log.csv`.
pub fn run_pipeline(
    net: Network,
    data: &Dataset,
    plan: &PipelinePlan,
    out_dir: Option<&Path>,
) -> Result<PipelineOutcome> {
    validate_schedule(plan)?;
    plan.prune.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut created: Vec<PathBuf> = Vec::new();
    let result = run_inner(net, data, plan, out_dir, &mut created);
    if result.is_err() {
        for p in created {
            if p.is_dir() {
                let _ = std::fs::remove_dir_all(&p);
            } else {
                let _ = std::fs::remove_file(&p);
            }
        }
    }
    result
}

fn run_inner(
    mut net: Network,
    data: &Dataset,
    plan: &PipelinePlan,
    out_dir: Option<&Path>,
    created: &mut Vec<PathBuf>,
) -> Result<PipelineOutcome> {
    let mut log = Vec::new();

    let t0 = Instant::now();
    train_loop(&mut net, data, &plan.pretrain, TrainHooks::default())
        .map_err(|e| Error::stage("pretrain", e))?;
    log.push(eval_record(&mut net, data, "pretrain", 0, t0)?);
    let dense = net.clone();

    let dense_dir = out_dir.map(|d| d.join("dense"));
    if let Some(dir) = &dense_dir {
        persist(&dense, dir).map_err(|e| Error::stage("persist-dense", e))?;
        created.push(dir.clone());
    }

    let mut current = dense.clone();
    for (round, &sparsity) in plan.schedule.iter().enumerate() {
        let t = Instant::now();
        let mut pcfg = plan.prune.clone();
        pcfg.seed = derive_seed(plan.prune.seed, round as u64);
        current = prune_with_method(&current, data, &pcfg, sparsity)
            .map_err(|e| Error::stage(format!("prune[{round}]"), e))?;
        log.push(eval_record(&mut current, data, "prune", round, t)?);

        let t = Instant::now();
        let mut fcfg = plan.finetune.clone();
        fcfg.seed = derive_seed(plan.finetune.seed, round as u64);
        finetune_masked(&mut current, data, &fcfg)
            .map_err(|e| Error::stage(format!("finetune[{round}]"), e))?;
        log.push(eval_record(&mut current, data, "finetune", round, t)?);
    }

    let pruned_dir = out_dir.map(|d| d.join("pruned"));
    if let Some(dir) = &pruned_dir {
        persist(&current, dir).map_err(|e| Error::stage("persist-pruned", e))?;
        created.push(dir.clone());
    }
    if let Some(dir) = out_dir {
        let path = dir.join("pipeline_log.csv");
        let mut csv = String::from("stage,round,sparsity,final_loss,final_acc,seconds\n");
        for r in &log {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{:.4},{:.3}\n",
                r.stage, r.round, r.sparsity, r.final_loss, r.final_acc, r.seconds
            ));
        }
        std::fs::write(&path, csv).map_err(|e| Error::stage("pipeline-log", e.into()))?;
        created.push(path);
    }

    Ok(PipelineOutcome {
        dense,
        pruned: current,
        log,
        dense_dir,
        pruned_dir,
    })
}
