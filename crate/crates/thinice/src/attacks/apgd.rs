//! Auto-PGD: momentum-accelerated ascent with a variable step size that
//! halves at checkpoint iterations when progress conditions fail,
//! restarting from the best point seen so far.
//!
//! Checkpoint schedule (fixed here for reproducibility): the first
//! checkpoint sits at `ceil(0.22 * steps)`, each following gap shrinks by
//! 3% of `steps` with a floor of 6%. At a checkpoint the step halves when
//! fewer than 75% of the intervening steps improved the loss, or when both
//! the step size and the best loss stalled since the previous checkpoint.

use super::{eval_gain, eval_gain_grad, random_ball_point, AttackConfig, AttackOutcome, BestTracker};
use crate::error::Result;
use crate::nn::Network;
use crate::rng::derive_seed;
use crate::tensor::{project, Norm, Tensor};

const MOMENTUM: f64 = 0.75;
const IMPROVEMENT_FRACTION: f64 = 0.75;

/// Per-iteration step sizes and gains, exposed for schedule tests.
#[derive(Debug, Clone, Default)]
pub struct ApgdTrace {
    pub step_sizes: Vec<f64>,
    pub visited_gains: Vec<f64>,
}

fn checkpoints(steps: usize) -> Vec<usize> {
    let mut pts = Vec::new();
    let mut p_prev = 0.0f64;
    let mut p = 0.22f64;
    while p < 1.0 {
        pts.push((p * steps as f64).ceil() as usize);
        let gap = (p - p_prev - 0.03).max(0.06);
        p_prev = p;
        p += gap;
    }
    pts.dedup();
    pts
}

/// Untargeted APGD with the loss from `cfg.loss`.
pub fn apgd(net: &Network, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackOutcome> {
    Ok(apgd_run(net, x, y, None, cfg)?.0)
}

/// Targeted APGD over up to `count` target classes (every class but the
/// true one, in descending clean-logit order). Succeeds when any target is
/// reached; returns the first successful outcome, else the best gain seen.
pub fn apgd_targeted(
    net: &Network,
    x: &Tensor,
    y: usize,
    count: usize,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    let logits = net.forward(x)?;
    let mut order: Vec<usize> = (0..net.classes).filter(|&c| c != y).collect();
    order.sort_by(|&a, &b| {
        logits.data()[b]
            .partial_cmp(&logits.data()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(count.min(net.classes.saturating_sub(1)));

    let mut best: Option<AttackOutcome> = None;
    let mut queries = 0usize;
    for (ti, target) in order.iter().enumerate() {
        let mut sub = cfg.clone();
        sub.seed = derive_seed(cfg.seed, 0x7A6 + ti as u64);
        let (outcome, _) = apgd_run(net, x, y, Some(*target), &sub)?;
        queries += outcome.queries;
        let done = outcome.success;
        let better = match &best {
            None => true,
            Some(b) => (outcome.success && !b.success) || outcome.best_loss > b.best_loss,
        };
        if better {
            best = Some(outcome);
        }
        if done {
            break;
        }
    }
    let mut out = best.expect("at least one target for C >= 2");
    out.queries = queries;
    Ok(out)
}

pub(crate) fn apgd_run(
    net: &Network,
    x: &Tensor,
    y: usize,
    target: Option<usize>,
    cfg: &AttackConfig,
) -> Result<(AttackOutcome, ApgdTrace)> {
    let success_of = |pred: usize| match target {
        Some(t) => pred == t,
        None => pred != y,
    };
    let mut trace = ApgdTrace::default();
    let (gain0, pred0) = eval_gain(net, x, cfg.loss, y, target)?;
    trace.visited_gains.push(gain0);
    if target.is_none() && pred0 != y {
        return Ok((
            AttackOutcome {
                success: true,
                x_adv: x.clone(),
                delta_norm: 0.0,
                queries: 1,
                best_loss: gain0,
            },
            trace,
        ));
    }

    let steps = cfg.steps.max(2);
    let marks = checkpoints(steps);
    let mut tracker = BestTracker::new();
    tracker.observe(x, gain0, success_of(pred0));
    let mut queries = 1usize;

    for restart in 0..cfg.restarts.max(1) {
        let start = if restart == 0 {
            x.clone()
        } else {
            random_ball_point(x, cfg.epsilon, derive_seed(cfg.seed, restart as u64))?
        };
        let mut eta = 2.0 * cfg.epsilon;
        let (mut f_cur, pred, grad) = eval_gain_grad(net, &start, cfg.loss, y, target)?;
        queries += 1;
        trace.visited_gains.push(f_cur);
        tracker.observe(&start, f_cur, success_of(pred));

        // best-so-far within this restart, for checkpoint restarts
        let mut f_best = f_cur;
        let mut x_best = start.clone();

        // first step: plain sign ascent
        let stepped = start.add_scaled(&grad.map(|g| g.signum())?, eta as f32)?;
        let mut cur = project(&stepped, x, cfg.epsilon, Norm::Linf)?;
        let mut prev = start.clone();
        trace.step_sizes.push(eta);

        let mut improvements = 0usize;
        let mut last_mark = 1usize;
        let mut eta_at_mark = eta;
        let mut f_best_at_mark = f_best;

        for k in 1..steps {
            let (f_next, pred, grad) = eval_gain_grad(net, &cur, cfg.loss, y, target)?;
            queries += 1;
            trace.visited_gains.push(f_next);
            tracker.observe(&cur, f_next, success_of(pred));
            if f_next > f_cur {
                improvements += 1;
            }
            if f_next > f_best {
                f_best = f_next;
                x_best = cur.clone();
            }
            f_cur = f_next;

            if marks.contains(&k) {
                let window = (k - last_mark).max(1);
                let stalled = improvements < (IMPROVEMENT_FRACTION * window as f64).ceil() as usize;
                let frozen = eta == eta_at_mark && f_best == f_best_at_mark;
                if stalled || frozen {
                    eta /= 2.0;
                    cur = x_best.clone();
                    prev = x_best.clone();
                }
                improvements = 0;
                last_mark = k;
                eta_at_mark = eta;
                f_best_at_mark = f_best;
            }

            trace.step_sizes.push(eta);
            let z = project(
                &cur.add_scaled(&grad.map(|g| g.signum())?, eta as f32)?,
                x,
                cfg.epsilon,
                Norm::Linf,
            )?;
            let mut blended = cur.clone();
            {
                let b = blended.data_mut();
                for (i, v) in b.iter_mut().enumerate() {
                    let zc = z.data()[i] as f64;
                    let cc = cur.data()[i] as f64;
                    let pc = prev.data()[i] as f64;
                    *v = (cc + MOMENTUM * (zc - cc) + (1.0 - MOMENTUM) * (cc - pc)) as f32;
                }
            }
            prev = cur;
            cur = project(&blended, x, cfg.epsilon, Norm::Linf)?;
        }
        let (f_last, pred) = eval_gain(net, &cur, cfg.loss, y, target)?;
        queries += 1;
        trace.visited_gains.push(f_last);
        tracker.observe(&cur, f_last, success_of(pred));
        if tracker.succeeded() {
            break;
        }
    }
    Ok((tracker.into_outcome(x, queries), trace))
}
