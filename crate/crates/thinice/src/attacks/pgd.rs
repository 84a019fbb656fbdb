//! FGSM, PGD with restarts, and the batched inner maximization used by
//! adversarial training.

use super::{eval_gain, eval_gain_grad, random_ball_point, AttackConfig, AttackOutcome, BestTracker};
use crate::error::Result;
use crate::nn::{argmax_rows, Network, TraceMode};
use crate::rng::derive_seed;
use crate::tensor::{project, LossKind, Norm, Tape, Tensor};

/// Single-step sign attack: `x_adv = clamp(x + eps * sign(dCE/dx))`.
pub fn fgsm(net: &Network, x: &Tensor, y: usize, epsilon: f64) -> Result<AttackOutcome> {
    let (_, _, grad) = eval_gain_grad(net, x, LossKind::Ce, y, None)?;
    let stepped = x.add_scaled(&grad.map(|g| g.signum())?, epsilon as f32)?;
    let x_adv = project(&stepped, x, epsilon, Norm::Linf)?;
    let (gain, pred) = eval_gain(net, &x_adv, LossKind::Ce, y, None)?;
    Ok(AttackOutcome {
        success: pred != y,
        delta_norm: x_adv.linf_dist(x),
        x_adv,
        queries: 2,
        best_loss: gain,
    })
}

/// Iterated gradient ascent with a fixed step (`2.5 * eps / steps`),
/// projecting every iterate into the eps-ball intersected with the box.
/// Restart 0 starts at `x`; later restarts start at seeded uniform points
/// in the ball. A sample already misclassified at `delta = 0` is an
/// immediate success.
pub fn pgd(net: &Network, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackOutcome> {
    let (gain0, pred0) = eval_gain(net, x, cfg.loss, y, None)?;
    if pred0 != y {
        return Ok(AttackOutcome {
            success: true,
            x_adv: x.clone(),
            delta_norm: 0.0,
            queries: 1,
            best_loss: gain0,
        });
    }
    let alpha = 2.5 * cfg.epsilon / cfg.steps.max(1) as f64;
    let mut tracker = BestTracker::new();
    tracker.observe(x, gain0, false);
    let mut queries = 1usize;
    for restart in 0..cfg.restarts.max(1) {
        let mut cur = if restart == 0 {
            x.clone()
        } else {
            random_ball_point(x, cfg.epsilon, derive_seed(cfg.seed, restart as u64))?
        };
        for _ in 0..cfg.steps {
            let (gain, pred, grad) = eval_gain_grad(net, &cur, cfg.loss, y, None)?;
            queries += 1;
            tracker.observe(&cur, gain, pred != y);
            let stepped = cur.add_scaled(&grad.map(|g| g.signum())?, alpha as f32)?;
            cur = project(&stepped, x, cfg.epsilon, Norm::Linf)?;
        }
        let (gain, pred) = eval_gain(net, &cur, cfg.loss, y, None)?;
        queries += 1;
        tracker.observe(&cur, gain, pred != y);
    }
    Ok(tracker.into_outcome(x, queries))
}

/// Batched PGD inner maximization for adversarial training: ascends the
/// batch-mean cross-entropy from the clean batch (no random start) and
/// returns the final iterate.
pub fn craft_pgd_batch(
    net: &Network,
    batch: &Tensor,
    labels: &[usize],
    epsilon: f64,
    steps: usize,
    step_size: f64,
    norm: Norm,
) -> Result<Tensor> {
    if epsilon == 0.0 || steps == 0 {
        return Ok(batch.clone());
    }
    let n = batch.shape()[0];
    let mut cur = batch.clone();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let h = net.trace(&mut tape, &cur, TraceMode::InputGrad)?;
        let loss = tape.softmax_cross_entropy(h.logits, labels)?;
        tape.backward(loss)?;
        let grad = tape.grad(h.input)?;
        let stepped = match norm {
            Norm::Linf => cur.add_scaled(&grad.map(|g| g.signum())?, step_size as f32)?,
            Norm::L2 => {
                // per-sample normalized gradient step
                let mut rows = Vec::with_capacity(n);
                for i in 0..n {
                    let gi = grad.sample(i)?;
                    let ci = cur.sample(i)?;
                    let nrm = gi.l2_dist(&Tensor::zeros(gi.shape())?).max(1e-12);
                    rows.push(ci.add_scaled(&gi, (step_size / nrm) as f32)?);
                }
                Tensor::stack(&rows)?
            }
        };
        // project each sample back into its own ball
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            rows.push(project(&stepped.sample(i)?, &batch.sample(i)?, epsilon, norm)?);
        }
        cur = Tensor::stack(&rows)?;
    }
    Ok(cur)
}

pub(crate) fn predict_one(net: &Network, x: &Tensor) -> Result<usize> {
    Ok(argmax_rows(&net.forward(x)?)[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, preset, LayerSpec};

    fn moon_net() -> Network {
        preset("mlp-2x64", 2, 11).unwrap()
    }

    fn point(v: &[f32]) -> Tensor {
        Tensor::from_vec(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn fgsm_zero_budget_is_identity() {
        let net = moon_net();
        let x = point(&[0.3, 0.6]);
        let out = fgsm(&net, &x, 0, 0.0).unwrap();
        assert_eq!(out.x_adv.to_bits(), x.to_bits());
        assert_eq!(out.delta_norm, 0.0);
    }

    #[test]
    fn fgsm_moves_unclipped_coordinates_by_eps() {
        let net = moon_net();
        let x = point(&[0.5, 0.5]);
        let eps = 0.05;
        let out = fgsm(&net, &x, 0, eps).unwrap();
        for (a, b) in out.x_adv.data().iter().zip(x.data()) {
            let d = (a - b).abs();
            // interior point, small eps: no box clipping applies
            assert!((d as f64 - eps).abs() < 1e-6 || d == 0.0);
        }
    }

    #[test]
    fn fgsm_is_optimal_for_linear_model() {
        // single dense layer: loss increase is linear in delta, so the
        // sign step attains the corner maximum over the linf ball.
        let net = build_network(vec![LayerSpec::Dense { inp: 2, out: 2 }], &[2], 3).unwrap();
        let x = point(&[0.4, 0.6]);
        let eps = 0.1;
        let out = fgsm(&net, &x, 0, eps).unwrap();
        let fgsm_gain = eval_gain(&net, &out.x_adv, LossKind::Ce, 0, None).unwrap().0;
        // compare against all four corners and a few interior ball points
        for (dx, dy) in [
            (eps, eps),
            (eps, -eps),
            (-eps, eps),
            (-eps, -eps),
            (eps / 2.0, -eps / 3.0),
            (0.0, 0.0),
        ] {
            let cand = point(&[
                (x.data()[0] as f64 + dx) as f32,
                (x.data()[1] as f64 + dy) as f32,
            ]);
            let gain = eval_gain(&net, &cand, LossKind::Ce, 0, None).unwrap().0;
            assert!(fgsm_gain >= gain - 1e-6);
        }
    }

    #[test]
    fn pgd_single_step_equals_fgsm() {
        let net = moon_net();
        // pick a correctly-classified point so pgd actually iterates
        let candidates = [[0.2f32, 0.7], [0.5, 0.4], [0.7, 0.3], [0.4, 0.8]];
        let mut checked = 0;
        for c in candidates {
            let x = point(&c);
            let y = predict_one(&net, &x).unwrap();
            let cfg = AttackConfig {
                epsilon: 0.1,
                steps: 1,
                restarts: 1,
                loss: LossKind::Ce,
                ..Default::default()
            };
            // steps=1 with step_size alpha=2.5*eps covers the whole ball,
            // landing on the same sign corner as fgsm after projection
            let p = pgd(&net, &x, y, &cfg).unwrap();
            let f = fgsm(&net, &x, y, 0.1).unwrap();
            assert_eq!(p.x_adv.to_bits(), f.x_adv.to_bits());
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn pgd_iterates_respect_ball_and_box() {
        let net = moon_net();
        let cfg = AttackConfig {
            epsilon: 0.07,
            steps: 15,
            restarts: 3,
            loss: LossKind::Ce,
            seed: 5,
            ..Default::default()
        };
        for i in 0..20 {
            let x = point(&[0.1 + 0.04 * i as f32, 0.9 - 0.04 * i as f32]);
            let y = (i % 2) as usize;
            let out = pgd(&net, &x, y, &cfg).unwrap();
            assert!(out.delta_norm <= cfg.epsilon + 1e-6);
            assert!(out.x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn pgd_clean_misclassified_is_immediate_success() {
        let net = moon_net();
        let x = point(&[0.5, 0.5]);
        let pred = predict_one(&net, &x).unwrap();
        let wrong_label = 1 - pred;
        let out = pgd(&net, &x, wrong_label, &AttackConfig::default()).unwrap();
        assert!(out.success);
        assert_eq!(out.delta_norm, 0.0);
        assert_eq!(out.queries, 1);
    }

    #[test]
    fn pgd_best_loss_monotone_in_restarts() {
        let net = moon_net();
        let x = point(&[0.35, 0.65]);
        let y = predict_one(&net, &x).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for restarts in [1usize, 2, 4] {
            let cfg = AttackConfig {
                epsilon: 0.05,
                steps: 10,
                restarts,
                loss: LossKind::Ce,
                seed: 3,
                ..Default::default()
            };
            let out = pgd(&net, &x, y, &cfg).unwrap();
            assert!(out.best_loss >= prev - 1e-12);
            prev = out.best_loss;
        }
    }

    #[test]
    fn pgd_deterministic() {
        let net = moon_net();
        let x = point(&[0.25, 0.55]);
        let y = predict_one(&net, &x).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.08,
            steps: 12,
            restarts: 3,
            seed: 17,
            ..Default::default()
        };
        let a = pgd(&net, &x, y, &cfg).unwrap();
        let b = pgd(&net, &x, y, &cfg).unwrap();
        assert_eq!(a.x_adv.to_bits(), b.x_adv.to_bits());
        assert_eq!(a.best_loss.to_bits(), b.best_loss.to_bits());
    }

    #[test]
    fn craft_batch_zero_eps_is_identity() {
        let net = moon_net();
        let batch = Tensor::from_vec(&[2, 2], vec![0.2, 0.3, 0.7, 0.8]).unwrap();
        let out = craft_pgd_batch(&net, &batch, &[0, 1], 0.0, 10, 0.01, Norm::Linf).unwrap();
        assert_eq!(out.to_bits(), batch.to_bits());
    }

    #[test]
    fn craft_batch_respects_ball() {
        let net = moon_net();
        let batch = Tensor::from_vec(&[3, 2], vec![0.2, 0.3, 0.7, 0.8, 0.5, 0.5]).unwrap();
        let eps = 0.06;
        for norm in [Norm::Linf, Norm::L2] {
            let out = craft_pgd_batch(&net, &batch, &[0, 1, 0], eps, 10, 0.02, norm).unwrap();
            for i in 0..3 {
                let d = out.sample(i).unwrap().dist(&batch.sample(i).unwrap(), norm);
                assert!(d <= eps + 1e-6, "{norm:?}: {d}");
            }
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
