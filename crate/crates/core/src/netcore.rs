//! Dense network primitives with hand-derived reverse-mode gradients.
//!
//! Three networks make up the pipeline: the affine embedding `zeta`, the drift
//! MLP `gamma(t, z)` (time enters as an extra leading input feature), and the
//! classifier MLP. All values are `f64`; matrices are row-major.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `W x + b` without shape checks.
    fn affine(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .zip(b)
            .map(|(row, &bi)| dot(row, x) + bi)
            .collect()
    }

    /// `out += W^T v`.
    fn add_transpose_product(&self, v: &[f64], out: &mut [f64]) {
        for (row, &vi) in self.data.chunks_exact(self.cols).zip(v) {
            if vi != 0.0 {
                axpy(vi, row, out);
            }
        }
    }

    /// `self += v a^T`.
    fn add_outer(&mut self, v: &[f64], a: &[f64]) {
        let cols = self.cols;
        for (row, &vi) in self.data.chunks_exact_mut(cols).zip(v) {
            if vi != 0.0 {
                axpy(vi, a, row);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch(format!("{what}: length {got}, expected {want}")));
    }
    Ok(())
}

/// The embedding `zeta(x) = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub weight: DenseMat,
    pub bias: Vec<f64>,
}

impl AffineParams {
    pub fn new(weight: DenseMat, bias: Vec<f64>) -> Result<Self> {
        check_len("affine bias", bias.len(), weight.rows())?;
        Ok(Self { weight, bias })
    }

    pub fn zeros(d_out: usize, d_in: usize) -> Self {
        Self {
            weight: DenseMat::zeros(d_out, d_in),
            bias: vec![0.0; d_out],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }
}

pub fn affine_forward(params: &AffineParams, x: &[f64]) -> Result<Vec<f64>> {
    check_len("affine input", x.len(), params.input_dim())?;
    Ok(params.weight.affine(x, &params.bias))
}

/// Gradient of `<cotangent, zeta(x)>` with respect to the parameters and `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrad {
    pub params: AffineParams,
    pub input: Vec<f64>,
}

pub fn affine_backward(params: &AffineParams, x: &[f64], cotangent: &[f64]) -> Result<AffineGrad> {
    check_len("affine input", x.len(), params.input_dim())?;
    check_len("affine cotangent", cotangent.len(), params.output_dim())?;
    let mut grad = AffineParams::zeros(params.output_dim(), params.input_dim());
    grad.weight.add_outer(cotangent, x);
    grad.bias.copy_from_slice(cotangent);
    let mut input = vec![0.0; x.len()];
    params.weight.add_transpose_product(cotangent, &mut input);
    Ok(AffineGrad {
        params: grad,
        input,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Identity => {}
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DenseMat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Fully connected network; every hidden layer carries a nonlinearity and the
/// last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// Per-hidden-layer multiplicative masks (the naive drift-dropout baseline).
pub type HiddenMasks = Vec<Vec<f64>>;

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("MLP needs at least one layer".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            check_len("layer bias", layer.bias.len(), layer.weight.rows())?;
            if layer.weight.rows() == 0 || layer.weight.cols() == 0 {
                return Err(Error::Config(format!("layer {k} has zero width")));
            }
            if k > 0 && layer.weight.cols() != layers[k - 1].weight.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {k} expects {} inputs, previous layer emits {}",
                    layer.weight.cols(),
                    layers[k - 1].weight.rows()
                )));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::Config("final MLP layer must be linear".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    /// Widths of the hidden layers.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.weight.rows())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Same shapes and activations, all parameters zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: DenseMat::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.rows() == b.weight.rows()
                    && a.weight.cols() == b.weight.cols()
                    && a.activation == b.activation
            })
    }

    fn check_masks(&self, masks: Option<&HiddenMasks>) -> Result<()> {
        if let Some(masks) = masks {
            let widths = self.hidden_widths();
            check_len("hidden masks", masks.len(), widths.len())?;
            for (m, w) in masks.iter().zip(widths) {
                check_len("hidden mask", m.len(), w)?;
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("MLP input", input.len(), self.input_dim())?;
        Ok(self.forward_cached(input, None).output)
    }

    pub(crate) fn forward_cached(&self, input: &[f64], masks: Option<&HiddenMasks>) -> MlpCache {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut activated = Vec::with_capacity(last);
        let mut current = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = layer.weight.affine(&current, &layer.bias);
            layer.activation.apply(&mut out);
            inputs.push(current);
            if k < last {
                activated.push(out.clone());
                if let Some(masks) = masks {
                    out.iter_mut().zip(&masks[k]).for_each(|(o, m)| *o *= m);
                }
            }
            current = out;
        }
        MlpCache {
            inputs,
            activated,
            output: current,
        }
    }

    /// Accumulates parameter gradients of `<cotangent, output>` into `grads`
    /// and returns the input gradient.
    pub(crate) fn backward_accumulate(
        &self,
        cache: &MlpCache,
        cotangent: &[f64],
        masks: Option<&HiddenMasks>,
        grads: &mut MlpParams,
    ) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut delta = cotangent.to_vec();
        for k in (0..=last).rev() {
            let layer = &self.layers[k];
            if k < last {
                if let Some(masks) = masks {
                    delta.iter_mut().zip(&masks[k]).for_each(|(d, m)| *d *= m);
                }
                for (d, &y) in delta.iter_mut().zip(&cache.activated[k]) {
                    *d *= layer.activation.derivative_from_output(y);
                }
            }
            let g = &mut grads.layers[k];
            g.weight.add_outer(&delta, &cache.inputs[k]);
            axpy(1.0, &delta, &mut g.bias);
            let mut prev = vec![0.0; layer.weight.cols()];
            layer.weight.add_transpose_product(&delta, &mut prev);
            delta = prev;
        }
        delta
    }

    /// Visits every parameter slice in declaration order (weight then bias,
    /// layer by layer).
    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data.as_mut_slice(), l.bias.as_mut_slice()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MlpCache {
    inputs: Vec<Vec<f64>>,
    activated: Vec<Vec<f64>>,
    pub(crate) output: Vec<f64>,
}

/// Parameter and input gradients of an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub params: MlpParams,
    pub input: Vec<f64>,
}

pub(crate) fn drift_input(t: f64, z: &[f64]) -> Vec<f64> {
    let mut input = Vec::with_capacity(z.len() + 1);
    input.push(t);
    input.extend_from_slice(z);
    input
}

fn check_drift(params: &MlpParams, z: &[f64]) -> Result<()> {
    check_len("drift state", z.len() + 1, params.input_dim())?;
    check_len("drift state", z.len(), params.output_dim())
}

/// `gamma(t, z)`: the MLP evaluated on `[t, z]`.
pub fn drift_forward(params: &MlpParams, t: f64, z: &[f64]) -> Result<Vec<f64>> {
    drift_forward_masked(params, t, z, None)
}

pub fn drift_forward_masked(
    params: &MlpParams,
    t: f64,
    z: &[f64],
    masks: Option<&HiddenMasks>,
) -> Result<Vec<f64>> {
    check_drift(params, z)?;
    params.check_masks(masks)?;
    Ok(params.forward_cached(&drift_input(t, z), masks).output)
}

/// Vector-Jacobian product of the drift; `input` holds the gradient with
/// respect to `z` only (the time slot is dropped).
pub fn drift_backward(params: &MlpParams, t: f64, z: &[f64], cotangent: &[f64]) -> Result<MlpGrad> {
    drift_backward_masked(params, t, z, cotangent, None)
}

pub fn drift_backward_masked(
    params: &MlpParams,
    t: f64,
    z: &[f64],
    cotangent: &[f64],
    masks: Option<&HiddenMasks>,
) -> Result<MlpGrad> {
    check_drift(params, z)?;
    check_len("drift cotangent", cotangent.len(), z.len())?;
    params.check_masks(masks)?;
    let cache = params.forward_cached(&drift_input(t, z), masks);
    let mut grads = params.zeros_like();
    let mut input = params.backward_accumulate(&cache, cotangent, masks, &mut grads);
    input.remove(0);
    Ok(MlpGrad {
        params: grads,
        input,
    })
}

pub fn classifier_forward(params: &MlpParams, z: &[f64]) -> Result<Vec<f64>> {
    params.forward(z)
}

pub fn classifier_backward(params: &MlpParams, z: &[f64], cotangent: &[f64]) -> Result<MlpGrad> {
    check_len("classifier input", z.len(), params.input_dim())?;
    check_len("classifier cotangent", cotangent.len(), params.output_dim())?;
    let cache = params.forward_cached(z, None);
    let mut grads = params.zeros_like();
    let input = params.backward_accumulate(&cache, cotangent, None, &mut grads);
    Ok(MlpGrad {
        params: grads,
        input,
    })
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_label(label: usize, n_classes: usize) -> Result<()> {
    if label >= n_classes {
        return Err(Error::InvalidLabel { label, n_classes });
    }
    Ok(())
}

/// `-log softmax(logits)[label]`, computed through log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_label(label, logits.len())?;
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

/// Gradient of [`cross_entropy`] with respect to the logits.
pub fn cross_entropy_backward(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    check_label(label, logits.len())?;
    let mut g = softmax(logits);
    g[label] -= 1.0;
    Ok(g)
}

/// He-uniform bound, used for layers that feed a nonlinearity.
pub fn he_uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Glorot-uniform bound, used for linear layers.
pub fn glorot_uniform_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> DenseMat {
    DenseMat::from_fn(rows, cols, |_, _| (2.0 * rng.random::<f64>() - 1.0) * bound)
}

pub fn init_affine<R: Rng + ?Sized>(d_out: usize, d_in: usize, rng: &mut R) -> Result<AffineParams> {
    if d_out == 0 || d_in == 0 {
        return Err(Error::Config(format!("affine map {d_in} -> {d_out} has zero width")));
    }
    Ok(AffineParams {
        weight: uniform_matrix(d_out, d_in, glorot_uniform_bound(d_in, d_out), rng),
        bias: vec![0.0; d_out],
    })
}

/// Random MLP with layer widths `sizes` (input first, output last); hidden
/// layers use `hidden`, the output layer is linear. Biases start at zero.
pub fn init_mlp<R: Rng + ?Sized>(
    sizes: &[usize],
    hidden: Activation,
    rng: &mut R,
) -> Result<MlpParams> {
    if sizes.len() < 2 {
        return Err(Error::Config("MLP needs input and output sizes".into()));
    }
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Config(format!("layer width {k} is zero")));
    }
    let last = sizes.len() - 2;
    let layers = sizes
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let activation = if k == last { Activation::Identity } else { hidden };
            let bound = if activation == Activation::Identity {
                glorot_uniform_bound(fan_in, fan_out)
            } else {
                he_uniform_bound(fan_in)
            };
            Layer {
                weight: uniform_matrix(fan_out, fan_in, bound, rng),
                bias: vec![0.0; fan_out],
                activation,
            }
        })
        .collect();
    MlpParams::new(layers)
}

/// Parameter checkpoint: a `key = value` descriptor plus a flat little-endian
/// `f64` array, stored as `<stem>.txt` and `<stem>.bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub descriptor: BTreeMap<String, String>,
    pub values: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "continuum-dropout-checkpoint/1";

impl Checkpoint {
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut text = String::new();
        text.push_str(&format!("format = {CHECKPOINT_FORMAT}\n"));
        text.push_str(&format!("value_count = {}\n", self.values.len()));
        for (k, v) in &self.descriptor {
            text.push_str(&format!("{k} = {v}\n"));
        }
        fs::write(dir.join(format!("{stem}.txt")), text)?;
        let mut bin = fs::File::create(dir.join(format!("{stem}.bin")))?;
        let mut bytes = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bin.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let text = fs::read_to_string(dir.join(format!("{stem}.txt")))?;
        let mut descriptor = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n as u64 + 1,
                message: "expected `key = value`".into(),
            })?;
            descriptor.insert(k.trim().to_string(), v.trim().to_string());
        }
        match descriptor.remove("format").as_deref() {
            Some(CHECKPOINT_FORMAT) => {}
            other => {
                return Err(Error::CheckpointMismatch(format!(
                    "unsupported checkpoint format {other:?}"
                )))
            }
        }
        let count: usize = descriptor
            .remove("value_count")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::CheckpointMismatch("missing value_count".into()))?;
        let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
        if bytes.len() != count * 8 {
            return Err(Error::CheckpointMismatch(format!(
                "binary holds {} bytes, descriptor declares {count} values",
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(Self { descriptor, values })
    }
}
