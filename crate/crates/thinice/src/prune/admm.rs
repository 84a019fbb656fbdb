//! ADMM concurrent adversarial training and weight pruning.
//!
//! The constrained problem (adversarial loss subject to per-tensor l0
//! budgets) splits into three alternating updates per outer iteration:
//!
//! * theta-update — epochs of adversarial SGD on the loss plus the
//!   proximal term `(rho/2) ||theta - z + u||^2`;
//! * z-update — Euclidean projection of `theta + u` onto the constraint
//!   set: keep the top-k magnitudes, zero the rest;
//! * dual update — `u += theta - z`.
//!
//! After the outer loop the mask is the index set selected by the last
//! z-update, applied hard to theta. Biases carry no constraint.

use super::{allocate_counts, masked_count, install_masks, Locality, PruneConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::train::{train_loop, TrainHooks};

#[derive(Debug, Clone)]
pub struct AdmmSnapshot {
    pub theta: Vec<Tensor>,
    pub z: Vec<Tensor>,
    pub u: Vec<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct AdmmState {
    /// `||theta - z||_2` after each outer iteration.
    pub residuals: Vec<f64>,
    /// Per-iteration (theta, z, u) copies when `record_snapshots` is set.
    pub snapshots: Vec<AdmmSnapshot>,
}

/// Keep the `keep` largest magnitudes of `values` (ties toward larger
/// index masked first), zero the rest. Returns (projected, kept-mask).
pub(crate) fn project_l0(values: &[f32], keep: usize) -> (Vec<f32>, Vec<f32>) {
    let mags: Vec<f64> = values.iter().map(|&v| (v as f64).abs()).collect();
    let to_zero = values.len().saturating_sub(keep);
    let mut out = values.to_vec();
    let mut mask = vec![1.0f32; values.len()];
    for i in super::smallest_k_indices(&mags, to_zero) {
        out[i] = 0.0;
        mask[i] = 0.0;
    }
    (out, mask)
}

pub fn admm_prune(net: &Network, data: &Dataset, cfg: &PruneConfig) -> Result<(Network, AdmmState)> {
    cfg.validate()?;
    let mut work = net.clone();
    work.apply_masks()?;
    let wis = work.weight_indices();
    let sizes: Vec<usize> = wis.iter().map(|&wi| work.params[wi].value.len()).collect();
    let total: usize = sizes.iter().sum();
    let keep_total = total - masked_count(total, cfg.target_sparsity);
    let keeps: Vec<usize> = match cfg.effective_locality() {
        Locality::Local => allocate_counts(keep_total, &sizes),
        Locality::Global => Vec::new(), // handled on the concatenated vector
    };

    // z-update over all weight tensors; returns (z, per-tensor kept masks)
    let project = |theta_plus_u: &[Vec<f32>]| -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
        match cfg.effective_locality() {
            Locality::Local => {
                let mut zs = Vec::with_capacity(theta_plus_u.len());
                let mut ms = Vec::with_capacity(theta_plus_u.len());
                for (t, v) in theta_plus_u.iter().enumerate() {
                    let (z, m) = project_l0(v, keeps[t]);
                    zs.push(z);
                    ms.push(m);
                }
                (zs, ms)
            }
            Locality::Global => {
                let flat: Vec<f32> = theta_plus_u.iter().flatten().copied().collect();
                let (zf, mf) = project_l0(&flat, keep_total);
                let mut zs = Vec::with_capacity(sizes.len());
                let mut ms = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &s in &sizes {
                    zs.push(zf[off..off + s].to_vec());
                    ms.push(mf[off..off + s].to_vec());
                    off += s;
                }
                (zs, ms)
            }
        }
    };

    let theta_of = |net: &Network| -> Vec<Vec<f32>> {
        wis.iter().map(|&wi| net.params[wi].value.data().to_vec()).collect()
    };

    // init: z = project(theta), u = 0
    let (mut z, mut kept_masks) = project(&theta_of(&work));
    let mut u: Vec<Vec<f32>> = sizes.iter().map(|&s| vec![0.0f32; s]).collect();
    let mut state = AdmmState::default();
    let rho = cfg.admm.rho as f32;

    // parameter index -> weight slot, for the proximal gradient hook
    let slot_of: Vec<Option<usize>> = {
        let mut v = vec![None; work.params.len()];
        for (slot, &wi) in wis.iter().enumerate() {
            v[wi] = Some(slot);
        }
        v
    };

    for outer in 0..cfg.admm.outer_iters {
        // theta-update: adversarial SGD + proximal pull toward z - u
        let mut tcfg = cfg.train.clone();
        tcfg.epochs = cfg.admm.inner_epochs;
        tcfg.seed = derive_seed(cfg.seed, outer as u64);
        let z_ref = &z;
        let u_ref = &u;
        let slot_ref = &slot_of;
        let mut extra = |pi: usize, value: &Tensor| -> Result<Option<Tensor>> {
            let Some(slot) = slot_ref[pi] else { return Ok(None) };
            let g: Vec<f32> = value
                .data()
                .iter()
                .zip(&z_ref[slot])
                .zip(&u_ref[slot])
                .map(|((&t, &zz), &uu)| rho * (t - zz + uu))
                .collect();
            Ok(Some(Tensor::from_vec(value.shape(), g)?))
        };
        train_loop(
            &mut work,
            data,
            &tcfg,
            TrainHooks {
                extra_grad: Some(&mut extra),
                post_step: None,
            },
        )
        .map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m} (ADMM outer iteration {outer})")),
            other => other,
        })?;

        // z-update and dual update
        let theta = theta_of(&work);
        let tpu: Vec<Vec<f32>> = theta
            .iter()
            .zip(&u)
            .map(|(t, uu)| t.iter().zip(uu).map(|(&a, &b)| a + b).collect())
            .collect();
        let (znew, masks) = project(&tpu);
        z = znew;
        kept_masks = masks;
        for ((uu, t), zz) in u.iter_mut().zip(&theta).zip(&z) {
            for i in 0..uu.len() {
                uu[i] += t[i] - zz[i];
            }
        }

        let mut residual = 0.0f64;
        for (t, zz) in theta.iter().zip(&z) {
            for (a, b) in t.iter().zip(zz) {
                let d = *a as f64 - *b as f64;
                residual += d * d;
            }
        }
        state.residuals.push(residual.sqrt());

        if cfg.admm.record_snapshots {
            let to_tensors = |vs: &Vec<Vec<f32>>| -> Result<Vec<Tensor>> {
                vs.iter()
                    .zip(&wis)
                    .map(|(v, &wi)| Tensor::from_vec(work.params[wi].value.shape(), v.clone()))
                    .collect()
            };
            state.snapshots.push(AdmmSnapshot {
                theta: to_tensors(&theta)?,
                z: to_tensors(&z)?,
                u: to_tensors(&u)?,
            });
        }
    }

    // hard mask = index set selected by the final z-update
    install_masks(&mut work, kept_masks)?;
    Ok((work, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::two_moons;
    use crate::nn::preset;
    use crate::prune::{AdmmParams, PruneMethod};
    use crate::train::TrainConfig;

    fn cfg(target: f64, outer: usize, seed: u64) -> PruneConfig {
        PruneConfig {
            target_sparsity: target,
            locality: None,
            method: PruneMethod::Admm,
            hydra: Default::default(),
            admm: AdmmParams {
                rho: 0.05,
                outer_iters: outer,
                inner_epochs: 1,
                record_snapshots: true,
            },
            atmc: Default::default(),
            train: TrainConfig {
                epochs: 0,
                batch_size: 16,
                learning_rate: 0.05,
                momentum: 0.9,
                seed,
                adversarial: None,
            },
            seed,
        }
    }

    #[test]
    fn z_is_k_sparse_per_tensor_after_every_update() {
        let data = two_moons(48, 0.1, 5).unwrap();
        let net = preset("mlp-2x64", 2, 9).unwrap();
        let c = cfg(0.9, 4, 3);
        let (_, state) = admm_prune(&net, &data, &c).unwrap();
        let sizes: Vec<usize> = net
            .weight_indices()
            .iter()
            .map(|&wi| net.params[wi].value.len())
            .collect();
        let total: usize = sizes.iter().sum();
        let keeps = allocate_counts(total - masked_count(total, 0.9), &sizes);
        for snap in &state.snapshots {
            for (zi, &k) in snap.z.iter().zip(&keeps) {
                let nonzeros = zi.data().iter().filter(|&&v| v != 0.0).count();
                assert!(nonzeros <= k, "{nonzeros} > {k}");
            }
        }
    }

    #[test]
    fn dual_update_algebra_holds_on_recorded_states() {
        let data = two_moons(48, 0.1, 5).unwrap();
        let net = preset("mlp-2x64", 2, 9).unwrap();
        let (_, state) = admm_prune(&net, &data, &cfg(0.8, 4, 7)).unwrap();
        // u_{t+1} == u_t + theta_{t+1} - z_{t+1}, with u_0 = 0
        for t in 0..state.snapshots.len() {
            let prev_u: Vec<Vec<f32>> = if t == 0 {
                state.snapshots[0]
                    .u
                    .iter()
                    .map(|x| vec![0.0; x.len()])
                    .collect()
            } else {
                state.snapshots[t - 1].u.iter().map(|x| x.data().to_vec()).collect()
            };
            let s = &state.snapshots[t];
            for (slot, pu) in prev_u.iter().enumerate() {
                for i in 0..pu.len() {
                    // same association as the implementation: u += (theta - z)
                    let want = pu[i] + (s.theta[slot].data()[i] - s.z[slot].data()[i]);
                    assert_eq!(s.u[slot].data()[i], want);
                }
            }
        }
    }

    #[test]
    fn final_sparsity_is_exact() {
        let data = two_moons(48, 0.1, 5).unwrap();
        let net = preset("mlp-2x64", 2, 9).unwrap();
        let total = net.weight_count();
        let (pruned, _) = admm_prune(&net, &data, &cfg(0.9, 3, 11)).unwrap();
        assert_eq!(
            pruned.sparsity(),
            masked_count(total, 0.9) as f64 / total as f64
        );
    }

    /// Scripted convex oracle: ADMM on `f(theta) = 0.5 ||theta - a||^2`
    /// with an exact theta-update. With the top-k of `a` well separated
    /// from the tail the projection support stabilizes immediately and the
    /// residual `||theta - z||` is non-increasing after iteration 2.
    #[test]
    fn convex_quadratic_residual_is_non_increasing() {
        let a: Vec<f32> = (0..30)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                if i < 5 {
                    sign * (5.0 + 0.1 * i as f32)
                } else {
                    sign * 0.5 * ((i as f32 * 37.0 + 11.0).sin().abs() + 0.1)
                }
            })
            .collect();
        let rho = 1.0f32;
        let keep = 5;
        let mut theta = vec![0.0f32; a.len()];
        let (mut z, _) = project_l0(&a, keep);
        let mut u = vec![0.0f32; a.len()];
        let mut residuals = Vec::new();
        for _ in 0..12 {
            // exact argmin of f + (rho/2)||theta - z + u||^2
            for i in 0..theta.len() {
                theta[i] = (a[i] + rho * (z[i] - u[i])) / (1.0 + rho);
            }
            let tpu: Vec<f32> = theta.iter().zip(&u).map(|(&t, &uu)| t + uu).collect();
            let (znew, _) = project_l0(&tpu, keep);
            z = znew;
            for i in 0..u.len() {
                u[i] += theta[i] - z[i];
            }
            let r: f64 = theta
                .iter()
                .zip(&z)
                .map(|(&t, &zz)| ((t - zz) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            residuals.push(r);
        }
        for w in residuals[1..].windows(2) {
            assert!(
                w[1] <= w[0] + 1e-9,
                "residuals not monotone: {residuals:?}"
            );
        }
    }
}
