//! Worst-case attack ensemble: a sample is robust iff it survives every
//! component. Components run in a fixed order with early exit, so later
//! attacks only see samples the earlier ones failed to flip.
//!
//! The minimum-norm member is FMN (success iff its eps* fits the budget),
//! standing in for the usual minimum-norm component of such ensembles.

use super::{apgd, apgd_targeted, fmn, pgd, square_attack, AttackConfig, AttackOutcome};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::parallel::par_map;
use crate::rng::{derive_seed, derive_seed2};
use crate::tensor::{LossKind, Norm};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnsembleComponent {
    #[serde(rename = "apgd-ce")]
    ApgdCe,
    #[serde(rename = "apgd-dlr")]
    ApgdDlr,
    #[serde(rename = "square")]
    Square,
    #[serde(rename = "fmn")]
    FmnCheck,
    #[serde(rename = "apgd-dlr-targeted")]
    ApgdDlrTargeted,
}

impl EnsembleComponent {
    pub fn name(&self) -> &'static str {
        match self {
            EnsembleComponent::ApgdCe => "apgd-ce",
            EnsembleComponent::ApgdDlr => "apgd-dlr",
            EnsembleComponent::Square => "square",
            EnsembleComponent::FmnCheck => "fmn",
            EnsembleComponent::ApgdDlrTargeted => "apgd-dlr-targeted",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    /// linf budget shared by every component.
    pub epsilon: f64,
    pub components: Vec<EnsembleComponent>,
    pub apgd_steps: usize,
    pub apgd_restarts: usize,
    pub square_queries: usize,
    pub fmn_steps: usize,
    /// Target classes for the targeted component (capped at C-1).
    pub targeted_count: usize,
    pub seed: u64,
    pub threads: usize,
}

impl EnsembleConfig {
    pub fn new(epsilon: f64, classes: usize, seed: u64) -> Self {
        EnsembleConfig {
            epsilon,
            components: default_components(classes),
            apgd_steps: 50,
            apgd_restarts: 5,
            square_queries: 5000,
            fmn_steps: 100,
            targeted_count: classes.saturating_sub(1).min(9),
            seed,
            threads: 1,
        }
    }
}

/// The paper-shaped composition, in fixed order. DLR components need at
/// least 3 classes and are dropped below that.
pub fn default_components(classes: usize) -> Vec<EnsembleComponent> {
    let mut v = vec![EnsembleComponent::ApgdCe];
    if classes >= 3 {
        v.push(EnsembleComponent::ApgdDlr);
    }
    v.push(EnsembleComponent::Square);
    v.push(EnsembleComponent::FmnCheck);
    if classes >= 3 {
        v.push(EnsembleComponent::ApgdDlrTargeted);
    }
    v
}

/// One line of the per-sample outcome CSV:
/// `sample_id,attack,success,delta_norm,queries,best_loss`.
#[derive(Debug, Clone)]
pub struct OutcomeRow {
    pub sample_id: usize,
    pub attack: &'static str,
    pub success: bool,
    pub delta_norm: f64,
    pub queries: usize,
    pub best_loss: f64,
}

#[derive(Debug, Clone)]
pub struct EnsembleReport {
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    /// Per-sample survival against the whole ensemble, in dataset order.
    pub robust: Vec<bool>,
    pub outcomes: Vec<OutcomeRow>,
}

pub fn clean_accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    let preds = net.predict(&data.inputs)?;
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| *p == *y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn component_outcome(
    net: &Network,
    component: EnsembleComponent,
    x: &crate::tensor::Tensor,
    y: usize,
    cfg: &EnsembleConfig,
    sample_seed: u64,
) -> Result<AttackOutcome> {
    let base = AttackConfig {
        epsilon: cfg.epsilon,
        steps: cfg.apgd_steps,
        restarts: cfg.apgd_restarts,
        loss: LossKind::Ce,
        targeted: None,
        query_budget: cfg.square_queries,
        seed: derive_seed(sample_seed, component as u64),
    };
    match component {
        EnsembleComponent::ApgdCe => apgd(net, x, y, &base),
        EnsembleComponent::ApgdDlr => {
            let mut c = base;
            c.loss = LossKind::Dlr;
            apgd(net, x, y, &c)
        }
        EnsembleComponent::Square => square_attack(net, x, y, &base),
        EnsembleComponent::FmnCheck => {
            let out = fmn(net, x, y, Norm::Linf, cfg.fmn_steps)?;
            let success = out.converged && out.epsilon_star <= cfg.epsilon;
            let best_loss = super::eval_gain(net, &out.x_adv, LossKind::Margin, y, None)?.0;
            Ok(AttackOutcome {
                success,
                delta_norm: out.epsilon_star,
                x_adv: out.x_adv,
                queries: out.queries,
                best_loss,
            })
        }
        EnsembleComponent::ApgdDlrTargeted => {
            let mut c = base;
            c.loss = LossKind::Dlr;
            apgd_targeted(net, x, y, cfg.targeted_count, &c)
        }
    }
}

/// Evaluate the whole ensemble: robust accuracy plus per-sample outcome
/// rows for every component that actually ran.
pub fn ensemble_evaluate(net: &Network, data: &Dataset, cfg: &EnsembleConfig) -> Result<EnsembleReport> {
    if cfg.components.is_empty() {
        return Err(Error::config("/attack/components", "ensemble is empty"));
    }
    if data.is_empty() {
        return Err(Error::config("/dataset", "empty evaluation set"));
    }
    for c in &cfg.components {
        let needs_dlr = matches!(
            c,
            EnsembleComponent::ApgdDlr | EnsembleComponent::ApgdDlrTargeted
        );
        if needs_dlr && net.classes < 3 {
            return Err(Error::Unsupported(format!(
                "component {} needs >= 3 classes, network has {}",
                c.name(),
                net.classes
            )));
        }
    }

    let per_sample = par_map(cfg.threads, data.len(), |i| {
        let x = data.input(i)?;
        let y = data.labels[i];
        let sample_seed = derive_seed2(cfg.seed, 0xA77, i as u64);
        let mut rows = Vec::new();
        let mut robust = true;
        for &component in &cfg.components {
            let out = component_outcome(net, component, &x, y, cfg, sample_seed)?;
            rows.push(OutcomeRow {
                sample_id: i,
                attack: component.name(),
                success: out.success,
                delta_norm: out.delta_norm,
                queries: out.queries,
                best_loss: out.best_loss,
            });
            if out.success {
                robust = false;
                break;
            }
        }
        Ok((robust, rows))
    })?;

    let mut robust_flags = Vec::with_capacity(data.len());
    let mut outcomes = Vec::new();
    for (robust, rows) in per_sample {
        robust_flags.push(robust);
        outcomes.extend(rows);
    }
    let robust_accuracy =
        robust_flags.iter().filter(|&&r| r).count() as f64 / data.len() as f64;
    Ok(EnsembleReport {
        clean_accuracy: clean_accuracy(net, data)?,
        robust_accuracy,
        robust: robust_flags,
        outcomes,
    })
}

/// PGD-only robust accuracy, the "reported-style" self-evaluation that the
/// ensemble re-checks.
pub fn pgd_robust_accuracy(
    net: &Network,
    data: &Dataset,
    epsilon: f64,
    steps: usize,
    restarts: usize,
    seed: u64,
    threads: usize,
) -> Result<f64> {
    let survived = par_map(threads, data.len(), |i| {
        let x = data.input(i)?;
        let cfg = AttackConfig {
            epsilon,
            steps,
            restarts,
            loss: LossKind::Ce,
            targeted: None,
            query_budget: 0,
            seed: derive_seed2(seed, 0xB66, i as u64),
        };
        Ok(!pgd(net, &x, data.labels[i], &cfg)?.success)
    })?;
    Ok(survived.iter().filter(|&&s| s).count() as f64 / data.len() as f64)
}

/// Render outcome rows as the per-sample CSV.
pub fn outcomes_to_csv(rows: &[OutcomeRow]) -> String {
    let mut out = String::from("sample_id,attack,success,delta_norm,queries,best_loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sample_id,
            r.attack,
            r.success,
            fmt_f64(r.delta_norm),
            r.queries,
            fmt_f64(r.best_loss)
        ));
    }
    out
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}
