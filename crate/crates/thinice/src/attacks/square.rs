//! Square attack: black-box random search with square-shaped ±eps patches.
//!
//! Only forward evaluations are used, counted as queries. A candidate is
//! accepted iff it strictly increases the margin-based objective. The
//! patch side starts from a fraction `p_init = 0.8` of the image area and
//! halves at these fractions of the query budget (per mille):
//!
//! | budget spent (permille) | 2 | 10 | 20 | 50 | 100 | 200 | 400 | 800 |
//! |-------------------------|---|----|----|----|-----|-----|-----|-----|
//! | halvings                | 1 | 2  | 3  | 4  | 5   | 6   | 7   | 8   |
//!
//! Flat feature vectors are treated as a 1-pixel-tall image, so patches
//! become runs of consecutive coordinates.

use super::{eval_gain, AttackConfig, AttackOutcome};
use crate::error::Result;
use crate::nn::Network;
use crate::rng::rng_from_seed;
use crate::tensor::{LossKind, Tensor};
use rand::Rng as _;

const P_INIT: f64 = 0.8;
const HALVING_MILESTONES_PERMILLE: [usize; 8] = [2, 10, 20, 50, 100, 200, 400, 800];

fn patch_fraction(queries_done: usize, budget: usize) -> f64 {
    let permille = queries_done * 1000 / budget.max(1);
    let halvings = HALVING_MILESTONES_PERMILLE
        .iter()
        .filter(|&&m| permille >= m)
        .count();
    P_INIT / (1u64 << halvings) as f64
}

/// Image geometry of a single-sample tensor `[1, ...]`.
fn geometry(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, 1, shape[1]),          // [1, d] -> 1 x 1 x d
        4 => (shape[1], shape[2], shape[3]), // [1, c, h, w]
        _ => (1, 1, shape.iter().product()),
    }
}

pub fn square_attack(
    net: &Network,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    let budget = cfg.query_budget;
    if budget == 0 {
        // no search performed; the consistency check below is free
        let pred = crate::attacks::pgd::predict_one(net, x)?;
        return Ok(AttackOutcome {
            success: pred != y,
            x_adv: x.clone(),
            delta_norm: 0.0,
            queries: 0,
            best_loss: f64::NEG_INFINITY,
        });
    }
    let eps = cfg.epsilon as f32;
    let (c, h, w) = geometry(x.shape());
    let mut rng = rng_from_seed(cfg.seed);

    let (mut best_gain, pred) = eval_gain(net, x, LossKind::Margin, y, None)?;
    let mut queries = 1usize;
    if pred != y {
        return Ok(AttackOutcome {
            success: true,
            x_adv: x.clone(),
            delta_norm: 0.0,
            queries,
            best_loss: best_gain,
        });
    }

    // delta entries live in {-eps, 0, +eps} before box clamping
    let mut delta = vec![0.0f32; x.len()];
    let apply = |delta: &[f32], x: &Tensor| -> Result<Tensor> {
        let data: Vec<f32> = x
            .data()
            .iter()
            .zip(delta)
            .map(|(&v, &d)| (v + d).clamp(0.0, 1.0))
            .collect();
        Tensor::from_vec(x.shape(), data)
    };

    let mut success = false;
    while queries < budget {
        let frac = patch_fraction(queries, budget);
        let side = ((frac * (h * w) as f64).sqrt().round() as usize)
            .clamp(1, h.min(w).max(1));
        let side_h = side.min(h);
        let side_w = if h == 1 {
            // flat input: the "square" is a run of coordinates of
            // equivalent area
            ((frac * w as f64).round() as usize).clamp(1, w)
        } else {
            side
        };
        let oy = rng.random_range(0..=(h - side_h));
        let ox = rng.random_range(0..=(w - side_w));
        let mut cand = delta.clone();
        for ci in 0..c {
            let sign: f32 = if rng.random::<bool>() { eps } else { -eps };
            for dy in 0..side_h {
                for dx in 0..side_w {
                    cand[(ci * h + oy + dy) * w + ox + dx] = sign;
                }
            }
        }
        let x_cand = apply(&cand, x)?;
        let (gain, pred) = eval_gain(net, &x_cand, LossKind::Margin, y, None)?;
        queries += 1;
        if gain > best_gain {
            best_gain = gain;
            delta = cand;
            if pred != y {
                success = true;
                break;
            }
        }
    }

    let x_adv = apply(&delta, x)?;
    Ok(AttackOutcome {
        success,
        delta_norm: x_adv.linf_dist(x),
        x_adv,
        queries,
        best_loss: best_gain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::preset;

    fn point(v: &[f32]) -> Tensor {
        Tensor::from_vec(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn queries_never_exceed_budget() {
        let net = preset("mlp-2x64", 2, 41).unwrap();
        for budget in [1usize, 5, 50, 200] {
            let cfg = AttackConfig {
                epsilon: 0.1,
                query_budget: budget,
                seed: 3,
                ..Default::default()
            };
            let out = square_attack(&net, &point(&[0.4, 0.6]), 0, &cfg).unwrap();
            assert!(out.queries <= budget, "{} > {budget}", out.queries);
        }
    }

    #[test]
    fn zero_budget_is_noop() {
        let net = preset("mlp-2x64", 2, 41).unwrap();
        let x = point(&[0.4, 0.6]);
        let cfg = AttackConfig {
            epsilon: 0.1,
            query_budget: 0,
            ..Default::default()
        };
        let out = square_attack(&net, &x, 0, &cfg).unwrap();
        assert_eq!(out.x_adv.to_bits(), x.to_bits());
        assert_eq!(out.queries, 0);
    }

    #[test]
    fn perturbed_coordinates_are_plus_minus_eps() {
        let net = preset("mlp-2x64", 2, 41).unwrap();
        // strictly interior point with small eps: box clamp never bites,
        // so delta must be exactly in {-eps, 0, +eps}
        let x = point(&[0.5, 0.5]);
        let y = crate::attacks::pgd::predict_one(&net, &x).unwrap();
        let eps = 0.05f32;
        let cfg = AttackConfig {
            epsilon: eps as f64,
            query_budget: 300,
            seed: 8,
            ..Default::default()
        };
        let out = square_attack(&net, &x, y, &cfg).unwrap();
        for (a, b) in out.x_adv.data().iter().zip(x.data()) {
            let d = a - b;
            assert!(
                d == 0.0 || (d - eps).abs() < 1e-7 || (d + eps).abs() < 1e-7,
                "delta {d}"
            );
        }
    }

    #[test]
    fn patch_schedule_is_monotone() {
        let budget = 1000;
        let mut prev = f64::INFINITY;
        for q in 0..budget {
            let f = patch_fraction(q, budget);
            assert!(f <= prev);
            prev = f;
        }
        assert!(patch_fraction(0, budget) == P_INIT);
        assert!(patch_fraction(900, budget) < P_INIT / 100.0);
    }

    #[test]
    fn square_on_image_input() {
        let net = preset("cnn-tiny", 2, 13).unwrap();
        let x = crate::dataset::tiny_images(4, 2, 0.1, 5).unwrap().input(0).unwrap();
        let cfg = AttackConfig {
            epsilon: 0.15,
            query_budget: 100,
            seed: 2,
            ..Default::default()
        };
        let out = square_attack(&net, &x, 0, &cfg).unwrap();
        assert!(out.delta_norm <= 0.15 + 1e-6);
        assert!(out.x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
