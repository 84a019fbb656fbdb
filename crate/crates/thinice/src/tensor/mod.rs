//! Dense f32 tensors, norm-ball projection, and reverse-mode autodiff.
//!
//! Values are stored row-major in 32-bit floats; dot products and
//! reductions accumulate in 64-bit. No operation lets a NaN escape
//! silently: every constructor and tape op validates its output and
//! raises [`Error::Numeric`] instead.

pub mod io;
mod tape;

pub use tape::{
    conv2d, finite_diff_gradient, matmul, relu, softmax_cross_entropy, LossKind, Tape, ValId,
};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Perturbation norms supported by projections and attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

/// Dense n-dimensional array of f32 with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("empty shape".into()));
    }
    let mut n: usize = 1;
    for &d in shape {
        if d == 0 {
            return Err(Error::InvalidShape(format!("zero dimension in {shape:?}")));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| Error::InvalidShape(format!("shape overflow: {shape:?}")))?;
    }
    Ok(n)
}

pub(crate) fn check_finite(data: &[f32], context: &str) -> Result<()> {
    for &v in data {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite value in {context}")));
        }
    }
    Ok(())
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        })
    }

    pub fn constant(shape: &[usize], value: f32) -> Result<Tensor> {
        let n = check_shape(shape)?;
        check_finite(&[value], "constant")?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        })
    }

    /// Gaussian init, deterministic per seed. Samples are drawn in f64 and
    /// narrowed to f32 so the stream does not depend on output precision.
    pub fn normal(shape: &[usize], mean: f64, std: f64, seed: u64) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if std < 0.0 {
            return Err(Error::InvalidShape(format!("negative std {std}")));
        }
        let mut rng = rng_from_seed(seed);
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                (mean + std * z) as f32
            })
            .collect();
        check_finite(&data, "normal init")?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        check_finite(&data, "from_vec")?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Direct mutable access. Callers are responsible for keeping values
    /// finite; public write paths re-validate before anything is consumed.
    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} values) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        let mut t = self.clone();
        t.shape = shape.to_vec();
        Ok(t)
    }

    /// Row `i` of a rank-2 tensor as a fresh `[1, cols]` tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "row() needs rank 2, got {:?}",
                self.shape
            )));
        }
        let cols = self.shape[1];
        Tensor::from_vec(&[1, cols], self.data[i * cols..(i + 1) * cols].to_vec())
    }

    /// Sample `i` of a batch tensor `[n, d0, d1, ...]` as `[1, d0, d1, ...]`.
    pub fn sample(&self, i: usize) -> Result<Tensor> {
        if self.shape.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "sample() needs rank >= 2, got {:?}",
                self.shape
            )));
        }
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::from_vec(&shape, self.data[i * per..(i + 1) * per].to_vec())
    }

    /// Stack single-sample tensors `[1, ...]` into a batch `[k, ...]`.
    pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidShape("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * samples.len());
        for s in samples {
            if s.shape != first.shape {
                return Err(Error::ShapeMismatch("stack of unequal shapes".into()));
            }
            data.extend_from_slice(&s.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = samples.len();
        Tensor::from_vec(&shape, data)
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &Tensor, scale: f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add_scaled {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        check_finite(&data, "add_scaled")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Elementwise product; used for mask application.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "hadamard {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data: Vec<f32> = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        check_finite(&data, "hadamard")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(&data, "map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn linf_dist(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_dist(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn dist(&self, other: &Tensor, norm: Norm) -> f64 {
        match norm {
            Norm::Linf => self.linf_dist(other),
            Norm::L2 => self.l2_dist(other),
        }
    }

    /// Bit pattern of every value, for bitwise-identity assertions.
    pub fn to_bits(&self) -> Vec<u32> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}

/// Nearest point to `x` (in `norm`) inside the ε-ball around `center`,
/// then clamped to the `[0,1]` input box. Idempotent; the box clamp cannot
/// re-exit the ball as long as `center` itself lies in the box, which holds
/// for every image-like input here.
pub fn project(x: &Tensor, center: &Tensor, epsilon: f64, norm: Norm) -> Result<Tensor> {
    if x.shape() != center.shape() {
        return Err(Error::ShapeMismatch(format!(
            "project {:?} vs {:?}",
            x.shape(),
            center.shape()
        )));
    }
    if epsilon < 0.0 {
        return Err(Error::InvalidShape(format!("negative radius {epsilon}")));
    }
    let eps = epsilon as f32;
    let mut out = vec![0.0f32; x.len()];
    match norm {
        Norm::Linf => {
            for (o, (&xi, &ci)) in out.iter_mut().zip(x.data().iter().zip(center.data())) {
                *o = xi.clamp(ci - eps, ci + eps).clamp(0.0, 1.0);
            }
        }
        Norm::L2 => {
            let mut sq = 0.0f64;
            for (&xi, &ci) in x.data().iter().zip(center.data()) {
                let d = xi as f64 - ci as f64;
                sq += d * d;
            }
            let dist = sq.sqrt();
            // Slack of 1e-6 keeps the projection idempotent in f32: a point
            // already rescaled onto the sphere re-measures within rounding
            // of epsilon and must not be rescaled again.
            let scale = if dist > epsilon + 1e-6 {
                (epsilon / dist) as f32
            } else {
                1.0
            };
            for (o, (&xi, &ci)) in out.iter_mut().zip(x.data().iter().zip(center.data())) {
                *o = (ci + scale * (xi - ci)).clamp(0.0, 1.0);
            }
        }
    }
    check_finite(&out, "project")?;
    Tensor::from_vec(x.shape(), out)
}
