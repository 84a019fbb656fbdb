//! Synthetic point datasets and tiny-image loading.
//!
//! Generators scale everything into the `[0,1]` input box, keep classes
//! balanced (counts differ by at most one), and are bitwise-deterministic
//! per seed. The `file` kind reads a TNSR pair (f32 inputs, u32 labels).

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{io, Tensor};
use rand::Rng as _;
use rand_distr::StandardNormal;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn input(&self, i: usize) -> Result<Tensor> {
        self.inputs.sample(i)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let samples: Vec<Tensor> = indices
            .iter()
            .map(|&i| self.inputs.sample(i))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            inputs: Tensor::stack(&samples)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// First-`n` draw of a seeded shuffle of `0..len`; used to pin the
    /// "same samples for every model" evaluation subsets.
    pub fn pick_indices(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        shuffle(&mut idx, seed);
        idx.truncate(n.min(idx.len()));
        idx
    }
}

/// Fisher-Yates with the crate RNG; deterministic per seed.
pub fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = rng_from_seed(seed);
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Round-robin class labels: class `c` receives `ceil((n - c) / k)` samples,
/// so counts differ by at most one.
fn balanced_labels(n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| i % k).collect()
}

fn class_counts(labels: &[usize], k: usize) -> Vec<usize> {
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

fn check_n(n: usize, k: usize) -> Result<()> {
    if n < k.max(2) {
        return Err(Error::config(
            "/dataset/n",
            format!("need at least {} samples for {k} classes", k.max(2)),
        ));
    }
    Ok(())
}

/// Two interleaved half-moon arcs in `[0,1]^2`.
///
/// Class 0 follows `(cos t, sin t)`, class 1 follows `(1 - cos t, 0.5 - sin t)`
/// for `t` evenly spaced over `[0, pi]`; Gaussian noise is added before a
/// fixed affine map into the box (so a point's arc membership is recoverable
/// exactly when `noise = 0`).
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_n(n, 2)?;
    if noise < 0.0 {
        return Err(Error::config("/dataset/noise", "noise must be >= 0"));
    }
    let labels = balanced_labels(n, 2);
    let counts = class_counts(&labels, 2);
    let mut rng = rng_from_seed(seed);
    let mut seen = [0usize; 2];
    let mut data = Vec::with_capacity(2 * n);
    for &c in &labels {
        let j = seen[c];
        seen[c] += 1;
        let denom = (counts[c] - 1).max(1) as f64;
        let t = std::f64::consts::PI * j as f64 / denom;
        let (mut x, mut y) = if c == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        x += noise * nx;
        y += noise * ny;
        let (u, v) = moons_to_box(x, y);
        data.push(u as f32);
        data.push(v as f32);
    }
    Ok(Dataset {
        inputs: Tensor::from_vec(&[n, 2], data)?,
        labels,
    })
}

/// Fixed affine map from moon coordinates (x in [-1,2], y in [-0.5,1]) into
/// `[0.05, 0.95]^2`, clamped to the box.
fn moons_to_box(x: f64, y: f64) -> (f64, f64) {
    let u = 0.05 + 0.9 * (x + 1.0) / 3.0;
    let v = 0.05 + 0.9 * (y + 0.5) / 1.5;
    (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0))
}

/// Inverse of the moons box map, for geometry checks.
pub fn moons_from_box(u: f64, v: f64) -> (f64, f64) {
    ((u - 0.05) / 0.9 * 3.0 - 1.0, (v - 0.05) / 0.9 * 1.5 - 0.5)
}

/// Two concentric circles (radius 1.0 and 0.5) in `[0,1]^2`.
pub fn circles(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_n(n, 2)?;
    if noise < 0.0 {
        return Err(Error::config("/dataset/noise", "noise must be >= 0"));
    }
    let labels = balanced_labels(n, 2);
    let counts = class_counts(&labels, 2);
    let mut rng = rng_from_seed(seed);
    let mut seen = [0usize; 2];
    let mut data = Vec::with_capacity(2 * n);
    for &c in &labels {
        let j = seen[c];
        seen[c] += 1;
        let t = 2.0 * std::f64::consts::PI * j as f64 / counts[c] as f64;
        let r = if c == 0 { 1.0 } else { 0.5 };
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        let x = r * t.cos() + noise * nx;
        let y = r * t.sin() + noise * ny;
        let u = (0.05 + 0.9 * (x + 1.0) / 2.0).clamp(0.0, 1.0);
        let v = (0.05 + 0.9 * (y + 1.0) / 2.0).clamp(0.0, 1.0);
        data.push(u as f32);
        data.push(v as f32);
    }
    Ok(Dataset {
        inputs: Tensor::from_vec(&[n, 2], data)?,
        labels,
    })
}

/// `k` Gaussian blobs with centers evenly spaced on a circle of radius 0.3
/// around the box center; linearly separable for small noise.
pub fn blobs(n: usize, k: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::config("/dataset/classes", "blobs need >= 2 classes"));
    }
    check_n(n, k)?;
    if noise < 0.0 {
        return Err(Error::config("/dataset/noise", "noise must be >= 0"));
    }
    let labels = balanced_labels(n, k);
    let mut rng = rng_from_seed(seed);
    let mut data = Vec::with_capacity(2 * n);
    for &c in &labels {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
        let cx = 0.5 + 0.3 * angle.cos();
        let cy = 0.5 + 0.3 * angle.sin();
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        data.push(((cx + noise * nx).clamp(0.0, 1.0)) as f32);
        data.push(((cy + noise * ny).clamp(0.0, 1.0)) as f32);
    }
    Ok(Dataset {
        inputs: Tensor::from_vec(&[n, 2], data)?,
        labels,
    })
}

/// Tiny 1x6x6 images: one smooth template per class plus pixel noise.
/// Stand-in corpus for the conv preset.
pub fn tiny_images(n: usize, k: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::config("/dataset/classes", "need >= 2 classes"));
    }
    check_n(n, k)?;
    let templates: Vec<Tensor> = (0..k)
        .map(|c| {
            let raw = Tensor::normal(&[1, 6, 6], 0.5, 0.18, crate::rng::derive_seed(seed, c as u64))?;
            raw.map(|v| v.clamp(0.1, 0.9))
        })
        .collect::<Result<_>>()?;
    let labels = balanced_labels(n, k);
    let mut rng = rng_from_seed(crate::rng::derive_seed(seed, 0xA11CE));
    let mut data = Vec::with_capacity(n * 36);
    for &c in &labels {
        for &t in templates[c].data() {
            let z: f64 = rng.sample(StandardNormal);
            data.push(((t as f64 + noise * z).clamp(0.0, 1.0)) as f32);
        }
    }
    Ok(Dataset {
        inputs: Tensor::from_vec(&[n, 1, 6, 6], data)?,
        labels,
    })
}

pub fn from_files(inputs: &Path, labels: &Path) -> Result<Dataset> {
    let x = io::read_tensor(inputs)?;
    let y = io::read_labels(labels)?;
    if x.shape()[0] != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs vs {} labels",
            x.shape()[0],
            y.len()
        )));
    }
    Ok(Dataset {
        inputs: x,
        labels: y.into_iter().map(|v| v as usize).collect(),
    })
}

pub fn to_files(ds: &Dataset, inputs: &Path, labels: &Path) -> Result<()> {
    io::write_tensor(inputs, &ds.inputs)?;
    let y: Vec<u32> = ds.labels.iter().map(|&v| v as u32).collect();
    io::write_labels(labels, &y)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_noiseless_points_lie_on_arcs() {
        let ds = two_moons(100, 0.0, 3).unwrap();
        for i in 0..ds.len() {
            let u = ds.inputs.data()[2 * i] as f64;
            let v = ds.inputs.data()[2 * i + 1] as f64;
            let (x, y) = moons_from_box(u, v);
            let residual = if ds.labels[i] == 0 {
                ((x * x + y * y).sqrt() - 1.0).abs()
            } else {
                (((x - 1.0).powi(2) + (y - 0.5).powi(2)).sqrt() - 1.0).abs()
            };
            assert!(residual < 1e-6, "sample {i}: residual {residual}");
        }
    }

    #[test]
    fn moons_deterministic_per_seed() {
        let a = two_moons(64, 0.1, 9).unwrap();
        let b = two_moons(64, 0.1, 9).unwrap();
        assert_eq!(a.inputs.to_bits(), b.inputs.to_bits());
        assert_eq!(a.labels, b.labels);
        let c = two_moons(64, 0.1, 10).unwrap();
        assert_ne!(a.inputs.to_bits(), c.inputs.to_bits());
    }

    #[test]
    fn moons_balanced_even_n() {
        let ds = two_moons(100, 0.05, 1).unwrap();
        let ones = ds.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 50);
        let odd = two_moons(101, 0.05, 1).unwrap();
        let ones = odd.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 50); // class 0 gets the extra sample
    }

    #[test]
    fn blobs_balanced_three_classes() {
        let ds = blobs(31, 3, 0.02, 5).unwrap();
        let counts = class_counts(&ds.labels, 3);
        assert_eq!(counts.iter().sum::<usize>(), 31);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_eq!(ds.classes(), 3);
    }

    #[test]
    fn all_points_in_box() {
        for ds in [
            two_moons(80, 0.3, 2).unwrap(),
            circles(80, 0.3, 2).unwrap(),
            blobs(80, 4, 0.3, 2).unwrap(),
            tiny_images(20, 2, 0.3, 2).unwrap(),
        ] {
            assert!(ds
                .inputs
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_images(10, 2, 0.1, 7).unwrap();
        let xi = dir.path().join("x.tnsr");
        let yi = dir.path().join("y.tnsr");
        to_files(&ds, &xi, &yi).unwrap();
        let back = from_files(&xi, &yi).unwrap();
        assert_eq!(back.inputs.to_bits(), ds.inputs.to_bits());
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(two_moons(1, 0.0, 0).is_err());
        assert!(blobs(2, 3, 0.0, 0).is_err());
    }

    #[test]
    fn pick_indices_is_stable() {
        let ds = two_moons(50, 0.1, 4).unwrap();
        let a = ds.pick_indices(10, 99);
        let b = ds.pick_indices(10, 99);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
    }
}
