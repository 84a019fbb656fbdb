//! Table and CSV artifact builders. Column orders are fixed; percentages
//! print with 2 decimals, AUC with 3, p-values in scientific notation with
//! one significant digit (e.g. `4e-170`).

use super::stats::{mann_whitney_u, StatResult};
use super::{PopulationLabel, SampleRecord};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CellKey {
    pub method: String,
    pub sparsity: f64,
    pub network: String,
}

#[derive(Debug, Clone)]
pub struct StatsRow {
    pub key: CellKey,
    /// Population percentages in S00, S01, S10, S11 order.
    pub pct: [f64; 4],
    /// AUC and p for eps(S10) < eps(S11); absent when a side is empty.
    pub s1: Option<StatResult>,
    /// AUC and p for |eps(S01)| < |eps(S00)|; absent when a side is empty.
    pub s0: Option<StatResult>,
    /// Records excluded because the minimum-norm attack did not converge.
    pub excluded: usize,
}

/// Build one thin-ice statistics row from attached records. Percentages
/// cover every record (populations never depend on epsilon); the rank
/// statistics use converged records only.
pub fn stats_row(key: CellKey, records: &[SampleRecord]) -> Result<StatsRow> {
    if records.is_empty() {
        return Err(Error::Unsupported("stats_row needs records".into()));
    }
    let mut counts = [0usize; 4];
    for r in records {
        counts[r.population as usize] += 1;
    }
    let total = records.len() as f64;
    let pct = [
        100.0 * counts[0] as f64 / total,
        100.0 * counts[1] as f64 / total,
        100.0 * counts[2] as f64 / total,
        100.0 * counts[3] as f64 / total,
    ];
    let excluded = records.iter().filter(|r| !r.fmn_converged).count();
    let eps_of = |p: PopulationLabel, absolute: bool| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.population == p && r.fmn_converged)
            .map(|r| {
                if absolute {
                    r.epsilon_signed.abs()
                } else {
                    r.epsilon_signed
                }
            })
            .collect()
    };
    let s10 = eps_of(PopulationLabel::S10, false);
    let s11 = eps_of(PopulationLabel::S11, false);
    let s1 = if s10.is_empty() || s11.is_empty() {
        None
    } else {
        Some(mann_whitney_u(&s10, &s11)?)
    };
    let s01 = eps_of(PopulationLabel::S01, true);
    let s00 = eps_of(PopulationLabel::S00, true);
    let s0 = if s01.is_empty() || s00.is_empty() {
        None
    } else {
        Some(mann_whitney_u(&s01, &s00)?)
    };
    Ok(StatsRow {
        key,
        pct,
        s1,
        s0,
        excluded,
    })
}

fn fmt_stat(s: &Option<StatResult>) -> (String, String) {
    match s {
        Some(r) => (format!("{:.3}", r.auc), format!("{:.0e}", r.p_value)),
        None => ("n/a".into(), "n/a".into()),
    }
}

/// `stats_table.csv`: method, sparsity, network, four population
/// percentages, the two AUC(p) pairs, and the non-convergence count.
pub fn stats_table_csv(rows: &[StatsRow]) -> String {
    let mut out = String::from(
        "method,sparsity,network,s00_pct,s01_pct,s10_pct,s11_pct,\
         auc_eps10_lt_eps11,p_s1,auc_abs_eps01_lt_abs_eps00,p_s0,fmn_excluded\n",
    );
    for r in rows {
        let (auc1, p1) = fmt_stat(&r.s1);
        let (auc0, p0) = fmt_stat(&r.s0);
        out.push_str(&format!(
            "{},{},{},{:.2},{:.2},{:.2},{:.2},{},{},{},{},{}\n",
            r.key.method,
            fmt_sparsity(r.key.sparsity),
            r.key.network,
            r.pct[0],
            r.pct[1],
            r.pct[2],
            r.pct[3],
            auc1,
            p1,
            auc0,
            p0,
            r.excluded
        ));
    }
    out
}

fn fmt_sparsity(s: f64) -> String {
    format!("{:.0}", s * 100.0)
}

#[derive(Debug, Clone)]
pub struct RobustnessRow {
    pub key: CellKey,
    /// Reported (externally claimed) accuracies, from config.
    pub rep_acc: Option<f64>,
    pub rep_rob: Option<f64>,
    /// Re-evaluated accuracies (fractions in [0,1]).
    pub aa_acc: f64,
    pub aa_rob: f64,
    /// PGD-only robust accuracy, for the overestimation comparison.
    pub pgd_rob: f64,
}

/// Drop = reported robustness minus re-evaluated robustness, in points.
pub fn robustness_row(row: &RobustnessRow) -> Option<f64> {
    row.rep_rob.map(|rep| rep - 100.0 * row.aa_rob)
}

/// `robustness_table.csv`: reported and ensemble accuracies as
/// percentages, with the Drop column derived (blank without a baseline).
pub fn robustness_table_csv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from(
        "method,sparsity,network,rep_acc,aa_acc,rep_rob,aa_rob,pgd_rob,drop\n",
    );
    for r in rows {
        let rep_acc = r.rep_acc.map_or(String::new(), |v| format!("{v:.2}"));
        let rep_rob = r.rep_rob.map_or(String::new(), |v| format!("{v:.2}"));
        let drop = robustness_row(r).map_or(String::new(), |v| format!("{v:.2}"));
        out.push_str(&format!(
            "{},{},{},{},{:.2},{},{:.2},{:.2},{}\n",
            r.key.method,
            fmt_sparsity(r.key.sparsity),
            r.key.network,
            rep_acc,
            100.0 * r.aa_acc,
            rep_rob,
            100.0 * r.aa_rob,
            100.0 * r.pgd_rob,
            drop
        ));
    }
    out
}

/// `scatter.csv`: one `(dense_logit_loss, epsilon_signed, population)` row
/// per converged record, for loss-versus-distance plots.
pub fn scatter_export(records: &[SampleRecord]) -> String {
    let mut out = String::from("dense_logit_loss,epsilon_signed,population\n");
    for r in records {
        if !r.fmn_converged {
            continue;
        }
        out.push_str(&format!(
            "{:.6},{:.6},{}\n",
            r.dense_logit_loss,
            r.epsilon_signed,
            r.population.name()
        ));
    }
    out
}

/// Predictions over a regular 2-d grid, as `x1,x2,predicted_class` rows
/// (exactly `resolution^2` of them). Only defined for 2-input networks.
pub fn boundary_grid_export(
    net: &Network,
    bounds: ((f64, f64), (f64, f64)),
    resolution: usize,
) -> Result<String> {
    if net.input_shape != vec![2] {
        return Err(Error::Unsupported(format!(
            "boundary grid needs a 2-d input network, got {:?}",
            net.input_shape
        )));
    }
    if resolution < 2 {
        return Err(Error::Unsupported("grid resolution must be >= 2".into()));
    }
    let ((x1min, x1max), (x2min, x2max)) = bounds;
    let mut points = Vec::with_capacity(resolution * resolution * 2);
    for i in 0..resolution {
        let x1 = x1min + (x1max - x1min) * i as f64 / (resolution - 1) as f64;
        for j in 0..resolution {
            let x2 = x2min + (x2max - x2min) * j as f64 / (resolution - 1) as f64;
            points.push(x1 as f32);
            points.push(x2 as f32);
        }
    }
    let batch = Tensor::from_vec(&[resolution * resolution, 2], points)?;
    let preds = net.predict(&batch)?;
    let mut out = String::from("x1,x2,predicted_class\n");
    for (k, pred) in preds.iter().enumerate() {
        out.push_str(&format!(
            "{:.6},{:.6},{}\n",
            batch.data()[2 * k],
            batch.data()[2 * k + 1],
            pred
        ));
    }
    Ok(out)
}
