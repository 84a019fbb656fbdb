//! Rank statistics: AUC as "probability of a lower value" and the
//! Mann-Whitney U test with exact and normal-approximation p-values.
//!
//! `u_statistic` is the classic U of the first sample (counting `a > b`
//! pairs, ties at half weight), so `auc = 1 - U / (n_a * n_b)`: the two
//! report complementary orientations and `a=[1,2], b=[3,4]` yields `U = 0`
//! with `auc = 1.0`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone)]
pub struct StatResult {
    /// Probability that a random draw from `a` is lower than one from `b`,
    /// ties at half weight.
    pub auc: f64,
    /// Classic Mann-Whitney U of sample `a` (greater-counting).
    pub u_statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub method: PMethod,
}

/// Midranks of the pooled sample plus tie-group sizes.
fn pooled_midranks(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let mut pooled: Vec<(f64, usize)> = a
        .iter()
        .map(|&v| (v, 0usize))
        .chain(b.iter().map(|&v| (v, 1usize)))
        .collect();
    pooled.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let n = pooled.len();
    let mut ranks = vec![0.0f64; n];
    let mut tie_groups = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let midrank = (i + j + 1) as f64 / 2.0;
        for r in ranks.iter_mut().take(j).skip(i) {
            *r = midrank;
        }
        tie_groups.push(j - i);
        i = j;
    }
    let mut ra = Vec::with_capacity(a.len());
    let mut rb = Vec::with_capacity(b.len());
    for (k, &(_, group)) in pooled.iter().enumerate() {
        if group == 0 {
            ra.push(ranks[k]);
        } else {
            rb.push(ranks[k]);
        }
    }
    (ra, rb, tie_groups)
}

/// `(#{pairs a < b} + 0.5 * #{ties}) / (n_a * n_b)` by rank sums,
/// O((n_a + n_b) log(n_a + n_b)).
pub fn auc_lower(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Unsupported("auc_lower needs nonempty samples".into()));
    }
    let (ra, _, _) = pooled_midranks(a, b);
    let n_a = a.len() as f64;
    let n_b = b.len() as f64;
    let r_a: f64 = ra.iter().sum();
    let u_greater = r_a - n_a * (n_a + 1.0) / 2.0;
    Ok((n_a * n_b - u_greater) / (n_a * n_b))
}

/// Exact U distribution counts via the standard recurrence
/// `f(u; m, n) = f(u - n; m-1, n) + f(u; m, n-1)`; index `u` ranges over
/// `0..=m*n`. Counts are in f64 (exact for the small sides used here).
fn exact_u_distribution(m: usize, n: usize) -> Vec<f64> {
    let mut dist: Vec<Vec<f64>> = (0..=m)
        .map(|mm| {
            let mut v = vec![0.0; mm * n + 1];
            v[0] = 1.0; // (mm, 0): only U = 0
            if mm == 0 {
                v = vec![1.0];
            }
            v
        })
        .collect();
    // dist[mm] holds f(.; mm, nn) as nn advances from 0 to n
    for nn in 1..=n {
        for mm in 1..=m {
            // f(u; mm, nn) = f(u; mm, nn-1) + f(u - nn; mm-1, nn)
            let prev_m = dist[mm - 1].clone(); // f(.; mm-1, nn) already updated
            let cur = &mut dist[mm];
            for u in (0..=mm * nn).rev() {
                let from_b = if u <= mm * (nn - 1) { cur[u] } else { 0.0 };
                let from_a = if u >= nn && (u - nn) < prev_m.len() {
                    prev_m[u - nn]
                } else {
                    0.0
                };
                cur[u] = from_b + from_a;
            }
        }
    }
    dist.swap_remove(m)
}

/// Two-sided Mann-Whitney U test. Exact enumeration when the smaller
/// sample has at most 8 values and there are no ties; otherwise a normal
/// approximation with tie and continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<StatResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Unsupported(
            "mann_whitney_u needs nonempty samples".into(),
        ));
    }
    let (ra, _, tie_groups) = pooled_midranks(a, b);
    let n_a = a.len();
    let n_b = b.len();
    let na = n_a as f64;
    let nb = n_b as f64;
    let r_a: f64 = ra.iter().sum();
    let u = r_a - na * (na + 1.0) / 2.0; // greater-counting U of sample a
    let auc = (na * nb - u) / (na * nb);
    let has_ties = tie_groups.iter().any(|&t| t > 1);
    let mu = na * nb / 2.0;

    let (p, method) = if n_a.min(n_b) <= 8 && !has_ties {
        let (m, n, u_side) = if n_a <= n_b {
            (n_a, n_b, u)
        } else {
            // U is symmetric under swapping samples: U_b = n_a n_b - U_a
            (n_b, n_a, na * nb - u)
        };
        let dist = exact_u_distribution(m, n);
        let total: f64 = dist.iter().sum();
        let dev = (u_side - mu).abs();
        let extreme: f64 = dist
            .iter()
            .enumerate()
            .filter(|(uu, _)| (*uu as f64 - mu).abs() >= dev - 1e-9)
            .map(|(_, c)| c)
            .sum();
        ((extreme / total).min(1.0), PMethod::Exact)
    } else {
        let n = na + nb;
        let tie_term: f64 = tie_groups
            .iter()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum();
        let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
        if var <= 0.0 {
            (1.0, PMethod::NormalApprox)
        } else {
            let dev = (u - mu).abs();
            let z = (dev - 0.5).max(0.0) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let p = (2.0 * normal.cdf(-z)).clamp(f64::MIN_POSITIVE, 1.0);
            (p, PMethod::NormalApprox)
        }
    };

    Ok(StatResult {
        auc,
        u_statistic: u,
        p_value: p,
        n_a,
        n_b,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    /// Brute-force pair enumeration oracle for the AUC.
    fn auc_oracle(a: &[f64], b: &[f64]) -> f64 {
        let mut score = 0.0;
        for &x in a {
            for &y in b {
                if x < y {
                    score += 1.0;
                } else if x == y {
                    score += 0.5;
                }
            }
        }
        score / (a.len() * b.len()) as f64
    }

    /// Exact permutation oracle: enumerate every assignment of the pooled
    /// (tie-free) values to groups of sizes (n_a, n_b) and count
    /// arrangements with a U at least as extreme.
    fn exact_p_oracle(a: &[f64], b: &[f64]) -> f64 {
        let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
        let n = pooled.len();
        let n_a = a.len();
        let u_of = |sel: &[usize]| -> f64 {
            let a_vals: Vec<f64> = sel.iter().map(|&i| pooled[i]).collect();
            let mut u = 0.0;
            for (i, &p) in pooled.iter().enumerate() {
                if sel.contains(&i) {
                    continue;
                }
                for &x in &a_vals {
                    if x > p {
                        u += 1.0;
                    }
                }
            }
            u
        };
        let observed = u_of(&(0..n_a).collect::<Vec<_>>());
        let mu = (n_a * (n - n_a)) as f64 / 2.0;
        let dev = (observed - mu).abs();
        let mut total = 0usize;
        let mut extreme = 0usize;
        let mut sel: Vec<usize> = (0..n_a).collect();
        loop {
            total += 1;
            if (u_of(&sel) - mu).abs() >= dev - 1e-9 {
                extreme += 1;
            }
            // next combination
            let mut i = n_a;
            loop {
                if i == 0 {
                    return extreme as f64 / total as f64;
                }
                i -= 1;
                if sel[i] != i + n - n_a {
                    sel[i] += 1;
                    for j in i + 1..n_a {
                        sel[j] = sel[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    #[test]
    fn auc_identical_distributions() {
        let a = vec![1.0, 2.0, 3.0];
        assert_eq!(auc_lower(&a, &a).unwrap(), 0.5);
    }

    #[test]
    fn auc_fully_separated() {
        assert_eq!(auc_lower(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
    }

    #[test]
    fn auc_interleaved() {
        // pairs: (1,2)<,(1,4)<,(3,2)>,(3,4)< -> 3/4
        assert_eq!(auc_lower(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.75);
    }

    #[test]
    fn auc_complementarity_is_exact() {
        let mut rng = rng_from_seed(31);
        for _ in 0..100 {
            let a: Vec<f64> = (0..rng.random_range(1..12))
                .map(|_| (rng.random_range(0..10) as f64) / 2.0)
                .collect();
            let b: Vec<f64> = (0..rng.random_range(1..12))
                .map(|_| (rng.random_range(0..10) as f64) / 2.0)
                .collect();
            assert_eq!(
                auc_lower(&a, &b).unwrap() + auc_lower(&b, &a).unwrap(),
                1.0
            );
        }
    }

    #[test]
    fn auc_matches_pair_oracle_with_ties() {
        let mut rng = rng_from_seed(77);
        for _ in 0..200 {
            let a: Vec<f64> = (0..rng.random_range(1..=8))
                .map(|_| rng.random_range(0..6) as f64)
                .collect();
            let b: Vec<f64> = (0..rng.random_range(1..=8))
                .map(|_| rng.random_range(0..6) as f64)
                .collect();
            assert_eq!(auc_lower(&a, &b).unwrap(), auc_oracle(&a, &b));
            let r = mann_whitney_u(&a, &b).unwrap();
            assert_eq!(r.auc, auc_oracle(&a, &b));
            // complementarity between the reported U and the AUC
            let complement = 1.0 - r.u_statistic / (r.n_a * r.n_b) as f64;
            assert!((r.auc - complement).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_case_u_zero_p_one_third() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u_statistic, 0.0);
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.method, PMethod::Exact);
        assert!((r.p_value - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn complete_tie_single_values() {
        let r = mann_whitney_u(&[5.0], &[5.0]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn exact_p_matches_permutation_oracle() {
        let mut rng = rng_from_seed(99);
        let mut checked = 0;
        while checked < 60 {
            let n_a = rng.random_range(1..=6);
            let n_b = rng.random_range(1..=6);
            // tie-free values
            let mut vals: Vec<f64> = (0..n_a + n_b).map(|i| i as f64).collect();
            crate::dataset::shuffle(&mut vals, rng.random());
            let a = vals[..n_a].to_vec();
            let b = vals[n_a..].to_vec();
            let r = mann_whitney_u(&a, &b).unwrap();
            assert_eq!(r.method, PMethod::Exact);
            let oracle = exact_p_oracle(&a, &b);
            assert!(
                (r.p_value - oracle).abs() < 1e-12,
                "a={a:?} b={b:?}: {} vs {oracle}",
                r.p_value
            );
            checked += 1;
        }
    }

    #[test]
    fn exact_and_normal_agree_at_the_switch_boundary() {
        let mut rng = rng_from_seed(41);
        for _ in 0..30 {
            // min(n) = 8, tie-free
            let mut vals: Vec<f64> = (0..28).map(|i| i as f64 + rng.random_range(0.0..0.4)).collect();
            crate::dataset::shuffle(&mut vals, rng.random());
            let a = vals[..8].to_vec();
            let b = vals[8..].to_vec();
            let exact = mann_whitney_u(&a, &b).unwrap();
            assert_eq!(exact.method, PMethod::Exact);
            // force the normal path by duplicating one b value far away
            // from a's range cannot work without changing U, so instead
            // recompute the normal approximation directly
            let (ra, _, _) = pooled_midranks(&a, &b);
            let na = 8.0;
            let nb = b.len() as f64;
            let r_a: f64 = ra.iter().sum();
            let u = r_a - na * (na + 1.0) / 2.0;
            let mu = na * nb / 2.0;
            let var = na * nb * (na + nb + 1.0) / 12.0;
            let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
            let normal = Normal::new(0.0, 1.0).unwrap();
            let p_norm = (2.0 * normal.cdf(-z)).min(1.0);
            assert!(
                (exact.p_value - p_norm).abs() < 0.02,
                "exact {} vs normal {p_norm}",
                exact.p_value
            );
        }
    }

    #[test]
    fn null_calibration_seeded() {
        // same-distribution samples: p should exceed 0.01 nearly always
        let mut ok = 0;
        for trial in 0..100u64 {
            let mut rng = rng_from_seed(1000 + trial);
            let a: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
            let r = mann_whitney_u(&a, &b).unwrap();
            if r.p_value > 0.01 {
                ok += 1;
            }
        }
        assert!(ok >= 95, "only {ok}/100 null trials had p > 0.01");
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(auc_lower(&[], &[1.0]).is_err());
        assert!(mann_whitney_u(&[1.0], &[]).is_err());
    }

    #[test]
    fn separated_large_samples_have_tiny_p() {
        let a: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..200).map(|i| 1000.0 + i as f64).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.method, PMethod::NormalApprox);
        assert!(r.p_value < 1e-50);
        assert!(r.p_value > 0.0);
        assert_eq!(r.auc, 1.0);
    }
}
