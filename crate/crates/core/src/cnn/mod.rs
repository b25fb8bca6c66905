//! 1-D convolutional regressor over the nine-stream window.
//!
//! Activations are `(channels, len)` row-major. Convolution is
//! cross-correlation with valid padding:
//! `out[o][t] = b[o] + sum_i sum_k w[o][i][k] * x[i][t*stride + k]`.

mod io;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_model, save_model, MODEL_SCHEMA_VERSION};
pub use train::{
    mae, oversample, oversample_indices, predict_all, rmse, train, write_loss_csv, EpochLoss, MetricError,
    Optimizer, TrainConfig, TrainOutcome,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CnnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergenceDetected { epoch: usize, loss: f64 },
    #[error("model schema version {found} unsupported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("model document: {0}")]
    Parse(String),
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T, CnnError> {
    Err(CnnError::ShapeMismatch(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        out_filters: usize,
        filter_length: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    Maxpool1d {
        pool_len: usize,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Relu,
}

fn one() -> usize {
    1
}

/// Activation geometry: `(channels, len)`.
pub type Shape = (usize, usize);

impl LayerSpec {
    pub fn output_shape(&self, (ch, len): Shape) -> Result<Shape, CnnError> {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_filters,
                filter_length,
                stride,
            } => {
                if ch != in_channels {
                    return shape_err(format!("conv1d expects {in_channels} channels, got {ch}"));
                }
                if filter_length == 0 || stride == 0 || out_filters == 0 {
                    return shape_err("conv1d with zero filter_length/stride/filters");
                }
                if len < filter_length {
                    return shape_err(format!("conv1d filter {filter_length} longer than input {len}"));
                }
                Ok((out_filters, conv_out_len(len, filter_length, stride)))
            }
            LayerSpec::Maxpool1d { pool_len } => {
                if pool_len == 0 || len < pool_len {
                    return shape_err(format!("maxpool {pool_len} over length {len}"));
                }
                Ok((ch, len / pool_len))
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return shape_err(format!("dropout rate {rate} outside [0,1)"));
                }
                Ok((ch, len))
            }
            LayerSpec::Relu => Ok((ch, len)),
            LayerSpec::Flatten => Ok((ch * len, 1)),
            LayerSpec::Dense { in_dim, out_dim } => {
                if ch * len != in_dim || out_dim == 0 {
                    return shape_err(format!("dense expects {in_dim} inputs, got {}", ch * len));
                }
                Ok((out_dim, 1))
            }
        }
    }

    /// `(weight shape, bias length)` for parametric layers.
    pub fn param_shape(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                out_filters,
                filter_length,
                ..
            } => Some((vec![out_filters, in_channels, filter_length], out_filters)),
            LayerSpec::Dense { in_dim, out_dim } => Some((vec![out_dim, in_dim], out_dim)),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                filter_length,
                ..
            } => in_channels * filter_length,
            LayerSpec::Dense { in_dim, .. } => in_dim,
            _ => 0,
        }
    }
}

/// `floor((len - k) / stride) + 1`.
pub fn conv_out_len(len: usize, k: usize, stride: usize) -> usize {
    (len - k) / stride + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub input_shape: Shape,
    pub layers: Vec<Layer>,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub ch: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }
}

/// Everything the backward pass and LRP need from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[l]` is the input of layer `l`; the last entry is the output.
    pub acts: Vec<Tensor>,
    pub argmax: Vec<Option<Vec<usize>>>,
    pub dropout_mask: Vec<Option<Vec<f64>>>,
}

impl Trace {
    pub fn output(&self) -> f64 {
        self.acts.last().map(|t| t.data[0]).unwrap_or(f64::NAN)
    }
}

/// Per-layer parameter gradients; empty vectors for parameter-free layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &CnnModel) -> Self {
        Self {
            weight: model.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            bias: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.weight
            .iter()
            .chain(&self.bias)
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Conv widths for a stack of `conv -> relu -> maxpool` stages followed by
/// `dropout -> flatten -> dense(hidden) -> relu -> dense(1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    /// `(filters, filter_length)` per convolutional stage.
    pub conv: Vec<(usize, usize)>,
    pub pool_len: usize,
    pub dropout: f64,
    pub hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            conv: vec![(16, 15), (16, 9)],
            pool_len: 4,
            dropout: 0.25,
            hidden: 32,
        }
    }
}

impl Architecture {
    /// `layers` identical stages of `filters` x `filter_length`.
    pub fn uniform(layers: usize, filters: usize, filter_length: usize) -> Self {
        Self {
            conv: vec![(filters, filter_length); layers],
            ..Self::default()
        }
    }

    pub fn layer_specs(&self, input: Shape) -> Result<Vec<LayerSpec>, CnnError> {
        fn push(specs: &mut Vec<LayerSpec>, shape: &mut Shape, s: LayerSpec) -> Result<(), CnnError> {
            *shape = s.output_shape(*shape)?;
            specs.push(s);
            Ok(())
        }
        let mut specs = Vec::new();
        let mut shape = input;
        for &(filters, k) in &self.conv {
            let conv = LayerSpec::Conv1d {
                in_channels: shape.0,
                out_filters: filters,
                filter_length: k,
                stride: 1,
            };
            push(&mut specs, &mut shape, conv)?;
            push(&mut specs, &mut shape, LayerSpec::Relu)?;
            push(&mut specs, &mut shape, LayerSpec::Maxpool1d { pool_len: self.pool_len })?;
        }
        push(&mut specs, &mut shape, LayerSpec::Dropout { rate: self.dropout })?;
        push(&mut specs, &mut shape, LayerSpec::Flatten)?;
        let hidden = LayerSpec::Dense {
            in_dim: shape.0 * shape.1,
            out_dim: self.hidden,
        };
        push(&mut specs, &mut shape, hidden)?;
        push(&mut specs, &mut shape, LayerSpec::Relu)?;
        let out = LayerSpec::Dense {
            in_dim: self.hidden,
            out_dim: 1,
        };
        push(&mut specs, &mut shape, out)?;
        Ok(specs)
    }
}

impl CnnModel {
    /// Seeded init: weights uniform in `+-sqrt(6 / fan_in)` (He, for relu),
    /// `+-sqrt(3 / fan_in)` for the output layer; biases zero.
    pub fn new(input_shape: Shape, specs: Vec<LayerSpec>, seed: u64) -> Result<Self, CnnError> {
        let last_param = specs.iter().rposition(|s| s.param_shape().is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let (weight, bias) = match spec.param_shape() {
                Some((wshape, nb)) => {
                    let gain = if Some(i) == last_param { 3.0 } else { 6.0 };
                    let limit = (gain / spec.fan_in() as f64).sqrt();
                    let n: usize = wshape.iter().product();
                    let w = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
                    (w, vec![0.0; nb])
                }
                None => (Vec::new(), Vec::new()),
            };
            layers.push(Layer { spec, weight, bias });
        }
        let model = Self {
            input_shape,
            layers,
            rng_seed: seed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn from_architecture(arch: &Architecture, input_shape: Shape, seed: u64) -> Result<Self, CnnError> {
        Self::new(input_shape, arch.layer_specs(input_shape)?, seed)
    }

    pub fn validate(&self) -> Result<(), CnnError> {
        let mut shape = self.input_shape;
        if shape.0 == 0 || shape.1 == 0 {
            return shape_err("empty input geometry");
        }
        if self.layers.is_empty() {
            return shape_err("model has no layers");
        }
        for (i, l) in self.layers.iter().enumerate() {
            shape = l
                .spec
                .output_shape(shape)
                .map_err(|e| CnnError::ShapeMismatch(format!("layer {i}: {e}")))?;
            let (nw, nb) = match l.spec.param_shape() {
                Some((ws, nb)) => (ws.iter().product(), nb),
                None => (0, 0),
            };
            if l.weight.len() != nw || l.bias.len() != nb {
                return shape_err(format!(
                    "layer {i}: expected {nw} weights / {nb} biases, found {} / {}",
                    l.weight.len(),
                    l.bias.len()
                ));
            }
        }
        if shape != (1, 1) {
            return shape_err(format!("final layer emits {shape:?}, expected a scalar"));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, input: &[f64]) -> Result<(), CnnError> {
        let want = self.input_shape.0 * self.input_shape.1;
        if input.len() != want {
            return shape_err(format!("input has {} values, model expects {want}", input.len()));
        }
        Ok(())
    }

    /// Inference forward pass (dropout inactive) with the activation trace.
    pub fn forward(&self, input: &[f64]) -> Result<(f64, Trace), CnnError> {
        self.check_input(input)?;
        let trace = self.run(input, None);
        Ok((trace.output(), trace))
    }

    pub fn predict(&self, input: &[f64]) -> Result<f64, CnnError> {
        self.forward(input).map(|(y, _)| y)
    }

    /// Training-mode pass: dropout masks drawn from `rng`, scaled by
    /// `1 / (1 - rate)` so inference needs no rescaling.
    pub fn forward_train(&self, input: &[f64], rng: &mut ChaCha8Rng) -> Result<(f64, Trace), CnnError> {
        self.check_input(input)?;
        let trace = self.run(input, Some(rng));
        Ok((trace.output(), trace))
    }

    fn run(&self, input: &[f64], mut rng: Option<&mut ChaCha8Rng>) -> Trace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut argmax = Vec::with_capacity(self.layers.len());
        let mut dropout_mask = Vec::with_capacity(self.layers.len());
        let mut x = Tensor {
            ch: self.input_shape.0,
            len: self.input_shape.1,
            data: input.to_vec(),
        };
        for layer in &self.layers {
            let mut am = None;
            let mut dm = None;
            let y = match layer.spec {
                LayerSpec::Conv1d {
                    out_filters,
                    filter_length,
                    stride,
                    ..
                } => conv_forward(&x, &layer.weight, &layer.bias, out_filters, filter_length, stride),
                LayerSpec::Maxpool1d { pool_len } => {
                    let (y, idx) = maxpool_forward(&x, pool_len);
                    am = Some(idx);
                    y
                }
                LayerSpec::Dropout { rate } => match rng.as_deref_mut() {
                    Some(r) if rate > 0.0 => {
                        let keep = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..x.data.len())
                            .map(|_| if r.random::<f64>() < rate { 0.0 } else { keep })
                            .collect();
                        let data = x.data.iter().zip(&mask).map(|(a, m)| a * m).collect();
                        dm = Some(mask);
                        Tensor { data, ..x.clone() }
                    }
                    _ => x.clone(),
                },
                LayerSpec::Relu => Tensor {
                    data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                    ..x.clone()
                },
                LayerSpec::Flatten => Tensor {
                    ch: x.ch * x.len,
                    len: 1,
                    data: x.data.clone(),
                },
                LayerSpec::Dense { in_dim, out_dim } => {
                    let data = (0..out_dim)
                        .map(|o| layer.bias[o] + dot(&layer.weight[o * in_dim..(o + 1) * in_dim], &x.data))
                        .collect();
                    Tensor {
                        ch: out_dim,
                        len: 1,
                        data,
                    }
                }
            };
            argmax.push(am);
            dropout_mask.push(dm);
            acts.push(x);
            x = y;
        }
        acts.push(x);
        Trace {
            acts,
            argmax,
            dropout_mask,
        }
    }

    /// Gradients of `(y - label)^2` with respect to every parameter block.
    pub fn backward(&self, trace: &Trace, label: f64) -> Result<Gradients, CnnError> {
        if trace.acts.len() != self.layers.len() + 1 {
            return shape_err("trace does not belong to this model");
        }
        let y = trace.output();
        self.backward_from(trace, 2.0 * (y - label))
    }

    /// Backpropagates `d loss / d output = dy`.
    pub fn backward_from(&self, trace: &Trace, dy: f64) -> Result<Gradients, CnnError> {
        let mut grads = Gradients::zeros_like(self);
        let mut g = vec![dy];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.acts[l];
            if trace.acts[l + 1].data.len() != g.len() {
                return shape_err(format!("layer {l}: gradient/activation size mismatch"));
            }
            let need_input_grad = l > 0;
            g = match layer.spec {
                LayerSpec::Conv1d {
                    out_filters,
                    filter_length,
                    stride,
                    ..
                } => {
                    let (gw, gb) = (&mut grads.weight[l], &mut grads.bias[l]);
                    conv_backward(
                        x,
                        &layer.weight,
                        &g,
                        out_filters,
                        filter_length,
                        stride,
                        gw,
                        gb,
                        need_input_grad,
                    )
                }
                LayerSpec::Maxpool1d { .. } => {
                    let idx = trace.argmax[l].as_ref().expect("maxpool trace");
                    let mut gx = vec![0.0; x.data.len()];
                    for (o, &i) in idx.iter().enumerate() {
                        gx[i] += g[o];
                    }
                    gx
                }
                LayerSpec::Dropout { .. } => match &trace.dropout_mask[l] {
                    Some(m) => g.iter().zip(m).map(|(a, b)| a * b).collect(),
                    None => g,
                },
                LayerSpec::Relu => g
                    .iter()
                    .zip(&x.data)
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect(),
                LayerSpec::Flatten => g,
                LayerSpec::Dense { in_dim, out_dim } => {
                    let gw = &mut grads.weight[l];
                    let mut gx = vec![0.0; in_dim];
                    for o in 0..out_dim {
                        let d = g[o];
                        grads.bias[l][o] += d;
                        let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                        axpy(row, d, &x.data);
                        if need_input_grad {
                            axpy(&mut gx, d, &layer.weight[o * in_dim..(o + 1) * in_dim]);
                        }
                    }
                    gx
                }
            };
        }
        Ok(grads)
    }

    /// Mutable flat views of every parameter, in layer order (weights then bias).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// Dot product with eight interleaved partial sums (fixed summation order).
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn conv_forward(x: &Tensor, w: &[f64], b: &[f64], out_f: usize, k: usize, stride: usize) -> Tensor {
    let in_ch = x.ch;
    let out_len = conv_out_len(x.len, k, stride);
    let mut data = vec![0.0; out_f * out_len];
    for o in 0..out_f {
        let out = &mut data[o * out_len..(o + 1) * out_len];
        out.fill(b[o]);
        for i in 0..in_ch {
            let xr = x.row(i);
            let wr = &w[(o * in_ch + i) * k..(o * in_ch + i + 1) * k];
            for (kk, &wv) in wr.iter().enumerate() {
                if stride == 1 {
                    axpy(out, wv, &xr[kk..kk + out_len]);
                } else {
                    for (t, ov) in out.iter_mut().enumerate() {
                        *ov += wv * xr[t * stride + kk];
                    }
                }
            }
        }
    }
    Tensor {
        ch: out_f,
        len: out_len,
        data,
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    w: &[f64],
    g: &[f64],
    out_f: usize,
    k: usize,
    stride: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    need_input_grad: bool,
) -> Vec<f64> {
    let in_ch = x.ch;
    let out_len = conv_out_len(x.len, k, stride);
    let mut gx = if need_input_grad {
        vec![0.0; x.data.len()]
    } else {
        Vec::new()
    };
    for o in 0..out_f {
        let go = &g[o * out_len..(o + 1) * out_len];
        gb[o] += go.iter().sum::<f64>();
        for i in 0..in_ch {
            let xr = x.row(i);
            let base = (o * in_ch + i) * k;
            for kk in 0..k {
                if stride == 1 {
                    gw[base + kk] += dot(go, &xr[kk..kk + out_len]);
                    if need_input_grad {
                        axpy(&mut gx[i * x.len + kk..i * x.len + kk + out_len], w[base + kk], go);
                    }
                } else {
                    for (t, &gv) in go.iter().enumerate() {
                        gw[base + kk] += gv * xr[t * stride + kk];
                        if need_input_grad {
                            gx[i * x.len + t * stride + kk] += w[base + kk] * gv;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Max over non-overlapping blocks; ties go to the lowest index. Returns the
/// flat input index of every selected element.
fn maxpool_forward(x: &Tensor, pool: usize) -> (Tensor, Vec<usize>) {
    let out_len = x.len / pool;
    let mut data = Vec::with_capacity(x.ch * out_len);
    let mut idx = Vec::with_capacity(x.ch * out_len);
    for c in 0..x.ch {
        let row = x.row(c);
        for j in 0..out_len {
            let mut best = j * pool;
            for t in j * pool + 1..(j + 1) * pool {
                if row[t] > row[best] {
                    best = t;
                }
            }
            data.push(row[best]);
            idx.push(c * x.len + best);
        }
    }
    (
        Tensor {
            ch: x.ch,
            len: out_len,
            data,
        },
        idx,
    )
}
