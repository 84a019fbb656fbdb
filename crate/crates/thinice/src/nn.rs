//! Networks: layer specs, masked parameters, inference, surrogate losses,
//! sparsity accounting, and checkpoint persistence.
//!
//! A network always computes with effective weights `theta ⊙ m`. Masks are
//! binary companions of the weight tensors; biases are never masked.

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::{io, LossKind, Tape, Tensor, ValId};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        inp: usize,
        out: usize,
    },
    Conv {
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Flatten,
}

/// One parameter tensor plus its pruning mask (weights only).
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    /// `Some` for weight tensors, `None` for biases.
    pub mask: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<LayerSpec>,
    pub params: Vec<Param>,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

/// How a traced forward pass participates in differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceMode {
    NoGrad,
    /// Gradients flow to the input batch (attacks).
    InputGrad,
    /// Gradients flow to the effective weights and biases (training).
    ParamGrad,
}

/// Tape handles produced by [`Network::trace`].
pub struct TraceHandles {
    pub input: ValId,
    pub logits: ValId,
    /// One handle per parameter, in `params` order (training mode only).
    pub param_leaves: Vec<ValId>,
}

/// Shape-propagate `layers` from `input_shape`; returns the logits width.
fn validate_composition(layers: &[LayerSpec], input_shape: &[usize]) -> Result<usize> {
    let mut shape: Vec<usize> = input_shape.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        match *layer {
            LayerSpec::Dense { inp, out } => {
                if shape.len() != 1 || shape[0] != inp {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i}: dense expects [{inp}], feeding shape is {shape:?}"
                    )));
                }
                shape = vec![out];
            }
            LayerSpec::Conv {
                c_in,
                c_out,
                kh,
                kw,
                stride,
                pad,
            } => {
                if shape.len() != 3 || shape[0] != c_in {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i}: conv expects [{c_in},h,w], feeding shape is {shape:?}"
                    )));
                }
                let (h, w) = (shape[1], shape[2]);
                if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i}: kernel {kh}x{kw}/stride {stride} does not fit {h}x{w} pad {pad}"
                    )));
                }
                shape = vec![
                    c_out,
                    (h + 2 * pad - kh) / stride + 1,
                    (w + 2 * pad - kw) / stride + 1,
                ];
            }
            LayerSpec::Relu => {}
            LayerSpec::Flatten => {
                shape = vec![shape.iter().product()];
            }
        }
    }
    if shape.len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "network must end in a flat logits vector, got {shape:?}"
        )));
    }
    Ok(shape[0])
}

/// Build a network with He-scaled normal init (`std = sqrt(2 / fan_in)`),
/// zero biases, and all-ones masks. Deterministic per seed.
pub fn build_network(layers: Vec<LayerSpec>, input_shape: &[usize], seed: u64) -> Result<Network> {
    let classes = validate_composition(&layers, input_shape)?;
    let mut params = Vec::new();
    let mut pidx = 0u64;
    for layer in &layers {
        match *layer {
            LayerSpec::Dense { inp, out } => {
                let std = (2.0 / inp as f64).sqrt();
                let w = Tensor::normal(&[inp, out], 0.0, std, derive_seed(seed, pidx))?;
                params.push(Param {
                    mask: Some(Tensor::constant(&[inp, out], 1.0)?),
                    value: w,
                });
                pidx += 1;
                params.push(Param {
                    value: Tensor::zeros(&[out])?,
                    mask: None,
                });
                pidx += 1;
            }
            LayerSpec::Conv {
                c_in,
                c_out,
                kh,
                kw,
                ..
            } => {
                let fan_in = c_in * kh * kw;
                let std = (2.0 / fan_in as f64).sqrt();
                let shape = [c_out, c_in, kh, kw];
                let w = Tensor::normal(&shape, 0.0, std, derive_seed(seed, pidx))?;
                params.push(Param {
                    mask: Some(Tensor::constant(&shape, 1.0)?),
                    value: w,
                });
                pidx += 1;
                params.push(Param {
                    value: Tensor::zeros(&[c_out])?,
                    mask: None,
                });
                pidx += 1;
            }
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
    }
    Ok(Network {
        layers,
        params,
        input_shape: input_shape.to_vec(),
        classes,
        seed,
    })
}

/// Named reference architectures.
///
/// * `mlp-2x64` — 2 -> 64 -> 64 -> C for 2-d point datasets.
/// * `cnn-tiny` — two stride-2 3x3 convolutions (8 and 16 channels) then a
///   dense head, for 1x6x6 tiny images.
pub fn preset(name: &str, classes: usize, seed: u64) -> Result<Network> {
    match name {
        "mlp-2x64" => build_network(
            vec![
                LayerSpec::Dense { inp: 2, out: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense { inp: 64, out: 64 },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inp: 64,
                    out: classes,
                },
            ],
            &[2],
            seed,
        ),
        "cnn-tiny" => build_network(
            vec![
                LayerSpec::Conv {
                    c_in: 1,
                    c_out: 8,
                    kh: 3,
                    kw: 3,
                    stride: 2,
                    pad: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    c_in: 8,
                    c_out: 16,
                    kh: 3,
                    kw: 3,
                    stride: 2,
                    pad: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inp: 16 * 2 * 2,
                    out: classes,
                },
            ],
            &[1, 6, 6],
            seed,
        ),
        other => Err(Error::config(
            "/model/preset",
            format!("unknown preset `{other}`"),
        )),
    }
}

impl Network {
    /// Effective weight `theta ⊙ m` for parameter `i` (or the raw value for
    /// unmasked tensors).
    pub fn effective(&self, i: usize) -> Result<Tensor> {
        let p = &self.params[i];
        match &p.mask {
            Some(m) => p.value.hadamard(m),
            None => Ok(p.value.clone()),
        }
    }

    /// Record a forward pass on `tape`. The batch may be `[n, d]` for dense
    /// stacks or `[n, c, h, w]` for conv stacks.
    pub fn trace(&self, tape: &mut Tape, batch: &Tensor, mode: TraceMode) -> Result<TraceHandles> {
        let expected: Vec<usize> = std::iter::once(batch.shape().first().copied().unwrap_or(0))
            .chain(self.input_shape.iter().copied())
            .collect();
        if batch.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "batch {:?} does not match input shape {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        let input = tape.leaf(batch, mode == TraceMode::InputGrad);
        let want_param_grad = mode == TraceMode::ParamGrad;
        let mut param_leaves = Vec::with_capacity(self.params.len());
        for i in 0..self.params.len() {
            let eff = self.effective(i)?;
            param_leaves.push(tape.leaf(&eff, want_param_grad));
        }

        let mut cur = input;
        let mut pi = 0;
        for layer in &self.layers {
            match *layer {
                LayerSpec::Dense { .. } => {
                    let w = param_leaves[pi];
                    let b = param_leaves[pi + 1];
                    pi += 2;
                    cur = tape.matmul(cur, w)?;
                    cur = tape.add_bias(cur, b)?;
                }
                LayerSpec::Conv { stride, pad, .. } => {
                    let w = param_leaves[pi];
                    let b = param_leaves[pi + 1];
                    pi += 2;
                    cur = tape.conv2d(cur, w, stride, pad)?;
                    cur = tape.add_chan_bias(cur, b)?;
                }
                LayerSpec::Relu => {
                    cur = tape.relu(cur);
                }
                LayerSpec::Flatten => {
                    let n = tape.shape(cur)[0];
                    let rest: usize = tape.shape(cur)[1..].iter().product();
                    cur = tape.reshape(cur, &[n, rest])?;
                }
            }
        }
        Ok(TraceHandles {
            input,
            logits: cur,
            param_leaves,
        })
    }

    /// Pure inference: logits `[n, classes]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = self.trace(&mut tape, batch, TraceMode::NoGrad)?;
        Ok(tape.value(h.logits))
    }

    /// Argmax per row; exact ties break toward the smaller class index.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok(argmax_rows(&logits))
    }

    /// Fraction of weight entries currently masked to zero.
    pub fn sparsity(&self) -> f64 {
        let mut zeros = 0usize;
        let mut total = 0usize;
        for p in &self.params {
            if let Some(m) = &p.mask {
                total += m.len();
                zeros += m.data().iter().filter(|&&v| v == 0.0).count();
            }
        }
        if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        }
    }

    /// Total number of weight entries (mask-bearing parameters).
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter_map(|p| p.mask.as_ref().map(|m| m.len()))
            .sum()
    }

    /// Indices (into `params`) of the weight tensors, in layer order.
    pub fn weight_indices(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.mask.as_ref().map(|_| i))
            .collect()
    }

    /// Re-apply masks so masked weights are exactly zero in `theta` itself.
    pub fn apply_masks(&mut self) -> Result<()> {
        for p in &mut self.params {
            if let Some(m) = &p.mask {
                p.value = p.value.hadamard(m)?;
            }
        }
        Ok(())
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[logits.shape().len() - 1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Surrogate losses on a single logits vector, as plain values.
///
/// * `margin` (the logit loss): `z_label - max_{j != label} z_j`; positive
///   iff the sample is classified correctly (modulo argmax tie-break).
/// * `dlr`: `-(z_label - max_{j != label} z_j) / (z_(1) - z_(3))` with
///   descending order statistics `z_(i)`; needs at least 3 classes.
/// * targeted variants substitute the target class for the runner-up
///   (margin: `z_target - max_{j != target} z_j`).
pub fn surrogate_loss(
    kind: LossKind,
    logits: &Tensor,
    label: usize,
    target: Option<usize>,
) -> Result<f64> {
    let flat = logits.data();
    let c = flat.len();
    if label >= c {
        return Err(Error::InvalidLabel(format!("label {label} >= classes {c}")));
    }
    if c < 2 {
        return Err(Error::Unsupported("losses need >= 2 classes".into()));
    }
    let row = Tensor::from_vec(&[1, c], flat.to_vec())?;
    let mut tape = Tape::new();
    let il = tape.leaf(&row, false);
    let gain = tape.attack_gain(il, kind, label, target)?;
    let g = tape.scalar(gain)?;
    // attack_gain is oriented for ascent; margin flips sign so that
    // "positive means correct", dlr and ce are reported as-is.
    Ok(match (kind, target) {
        (LossKind::Margin, None) => -g,
        (LossKind::Margin, Some(_)) => g,
        (LossKind::Ce, None) => g,
        (LossKind::Ce, Some(_)) => -g,
        (LossKind::Dlr, _) => g,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    arch: Arch,
    seed: u64,
    classes: usize,
    sparsity: f64,
    provenance: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Arch {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
}

/// Persist a network as `manifest.json` plus one TNSR file per parameter
/// (`param_<i>.tnsr`) and per weight mask (`mask_<i>.tnsr`).
pub fn save_checkpoint(net: &Network, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        arch: Arch {
            layers: net.layers.clone(),
            input_shape: net.input_shape.clone(),
        },
        seed: net.seed,
        classes: net.classes,
        sparsity: net.sparsity(),
        provenance: format!("thinice {}", env!("CARGO_PKG_VERSION")),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    for (i, p) in net.params.iter().enumerate() {
        io::write_tensor(&dir.join(format!("param_{i}.tnsr")), &p.value)?;
        if let Some(m) = &p.mask {
            io::write_tensor(&dir.join(format!("mask_{i}.tnsr")), m)?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Network> {
    let manifest_path = dir.join("manifest.json");
    let raw = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&raw)
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    let skeleton = build_network(
        manifest.arch.layers.clone(),
        &manifest.arch.input_shape,
        manifest.seed,
    )?;
    let mut params = Vec::with_capacity(skeleton.params.len());
    for (i, p) in skeleton.params.iter().enumerate() {
        let value = io::read_tensor(&dir.join(format!("param_{i}.tnsr")))?;
        if value.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "param_{i} shape {:?} does not match architecture {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        let mask = if p.mask.is_some() {
            let m = io::read_tensor(&dir.join(format!("mask_{i}.tnsr")))?;
            if m.shape() != value.shape() {
                return Err(Error::Checkpoint(format!("mask_{i} shape mismatch")));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Checkpoint(format!("mask_{i} is not binary")));
            }
            Some(m)
        } else {
            None
        };
        params.push(Param { value, mask });
    }
    let net = Network {
        layers: manifest.arch.layers,
        params,
        input_shape: manifest.arch.input_shape,
        classes: manifest.classes,
        seed: manifest.seed,
    };
    let stored = net.sparsity();
    if (stored - manifest.sparsity).abs() > 1e-12 {
        return Err(Error::Checkpoint(format!(
            "manifest sparsity {} disagrees with tensors {stored}",
            manifest.sparsity
        )));
    }
    Ok(net)
}
