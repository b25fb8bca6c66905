//! Layer-wise relevance propagation (epsilon rule) and first-layer channel
//! weight profiles.
//!
//! Relevance starts at the output as the prediction itself and flows back
//! through every layer. For a linear unit `z_j = sum_i a_i w_ij + b_j`:
//!
//! `R_i += a_i w_ij / (z_j + eps * sign(z_j)) * R_j`, with `sign(0) = +1`.
//!
//! The bias share `b_j / (z_j + eps * sign(z_j)) * R_j` is absorbed and
//! reported as `bias_relevance`, so
//! `sum(relevance) + bias_relevance == prediction` up to the epsilon leak.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnn::{CnnError, CnnModel, LayerSpec, Trace};
use crate::dsp::{WindowedDataset, N_STREAMS, STREAM_NAMES};
use crate::frameio::fmt_f64;

pub const DEFAULT_EPSILON: f64 = 1e-9;
/// Any relevance above this magnitude aborts the explanation.
pub const BLOWUP_LIMIT: f64 = 1e12;

pub const CHANNEL_NAMES: [&str; 3] = ["red", "green", "blue"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExplainError {
    #[error("relevance magnitude {value} at layer {layer} exceeds {BLOWUP_LIMIT}; epsilon too small")]
    NumericalBlowup { layer: usize, value: f64 },
    #[error("first layer must be conv1d over {N_STREAMS} streams: {0}")]
    WrongFirstLayer(String),
    #[error("epsilon {0} must be finite and >= 0")]
    BadEpsilon(f64),
    #[error("dataset has no windows")]
    EmptyDataset,
    #[error("window {index}: {source}")]
    Window {
        index: usize,
        #[source]
        source: Box<ExplainError>,
    },
    #[error(transparent)]
    Model(#[from] CnnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub streams: usize,
    pub window_len: usize,
    /// `streams x window_len`, row-major.
    pub relevance: Vec<f64>,
    pub stream_totals: Vec<f64>,
    /// Red, green, blue: each the sum of that channel's raw/ac/dc streams.
    pub channel_totals: [f64; 3],
    pub prediction: f64,
    /// Relevance absorbed by biases on the way down.
    pub bias_relevance: f64,
    /// Sum of |bias share| over all units; bounds |bias_relevance|.
    pub bias_bound: f64,
}

impl RelevanceMap {
    pub fn total(&self) -> f64 {
        self.relevance.iter().sum()
    }

    pub fn row(&self, stream: usize) -> &[f64] {
        &self.relevance[stream * self.window_len..(stream + 1) * self.window_len]
    }

    /// `prediction - (sum(relevance) + bias_relevance)`.
    pub fn conservation_error(&self) -> f64 {
        self.prediction - (self.total() + self.bias_relevance)
    }
}

fn stabilise(z: f64, eps: f64) -> f64 {
    if z >= 0.0 {
        z + eps
    } else {
        z - eps
    }
}

/// Relevance of one input under the epsilon rule.
pub fn lrp(model: &CnnModel, input: &[f64], epsilon: f64) -> Result<RelevanceMap, ExplainError> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(ExplainError::BadEpsilon(epsilon));
    }
    let (prediction, trace) = model.forward(input)?;
    let mut rel = vec![prediction];
    let mut bias_relevance = 0.0;
    let mut bias_bound = 0.0;
    for (l, layer) in model.layers.iter().enumerate().rev() {
        let x = &trace.acts[l];
        let z = &trace.acts[l + 1].data;
        let mut down = vec![0.0; x.data.len()];
        match layer.spec {
            LayerSpec::Dense { in_dim, out_dim } => {
                for j in 0..out_dim {
                    let Some(s) = share(z[j], epsilon, rel[j]) else {
                        continue;
                    };
                    let w = &layer.weight[j * in_dim..(j + 1) * in_dim];
                    for i in 0..in_dim {
                        down[i] += x.data[i] * w[i] * s;
                    }
                    let b = layer.bias[j] * s;
                    bias_relevance += b;
                    bias_bound += b.abs();
                }
            }
            LayerSpec::Conv1d {
                in_channels,
                out_filters,
                filter_length: k,
                stride,
            } => {
                let out_len = trace.acts[l + 1].len;
                for o in 0..out_filters {
                    for t in 0..out_len {
                        let j = o * out_len + t;
                        let Some(s) = share(z[j], epsilon, rel[j]) else {
                            continue;
                        };
                        for i in 0..in_channels {
                            let w = &layer.weight[(o * in_channels + i) * k..(o * in_channels + i + 1) * k];
                            let base = i * x.len + t * stride;
                            for kk in 0..k {
                                down[base + kk] += x.data[base + kk] * w[kk] * s;
                            }
                        }
                        let b = layer.bias[o] * s;
                        bias_relevance += b;
                        bias_bound += b.abs();
                    }
                }
            }
            LayerSpec::Maxpool1d { .. } => {
                let idx = argmax_of(&trace, l)?;
                for (r, &src) in rel.iter().zip(idx) {
                    down[src] += r;
                }
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::Flatten => down.copy_from_slice(&rel),
        }
        if let Some(&v) = down.iter().find(|v| !(v.abs() <= BLOWUP_LIMIT)) {
            return Err(ExplainError::NumericalBlowup { layer: l, value: v });
        }
        rel = down;
    }
    let (streams, window_len) = model.input_shape;
    let stream_totals: Vec<f64> = rel.chunks(window_len).map(|r| r.iter().sum()).collect();
    let mut channel_totals = [0.0; 3];
    if streams == N_STREAMS {
        for (s, t) in stream_totals.iter().enumerate() {
            channel_totals[s / 3] += t;
        }
    }
    Ok(RelevanceMap {
        streams,
        window_len,
        relevance: rel,
        stream_totals,
        channel_totals,
        prediction,
        bias_relevance,
        bias_bound,
    })
}

/// `R_j / (z_j + eps sign z_j)`, or `None` when the unit carries nothing or
/// the denominator is exactly zero (only possible with `eps = 0`).
fn share(z: f64, eps: f64, r: f64) -> Option<f64> {
    let d = stabilise(z, eps);
    (r != 0.0 && d != 0.0).then(|| r / d)
}

fn argmax_of(trace: &Trace, l: usize) -> Result<&[usize], ExplainError> {
    trace.argmax[l]
        .as_deref()
        .ok_or_else(|| ExplainError::Model(CnnError::ShapeMismatch(format!("no pooling indices at layer {l}"))))
}

/// Per-colour aggregate of absolute first-layer weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelWeightProfile {
    pub scores: [f64; 3],
    pub shares: [f64; 3],
}

fn shares_of(scores: [f64; 3]) -> [f64; 3] {
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.map(|s| s / total)
    } else {
        [1.0 / 3.0; 3]
    }
}

pub fn channel_weight_profile(model: &CnnModel) -> Result<ChannelWeightProfile, ExplainError> {
    let first = model
        .layers
        .first()
        .ok_or_else(|| ExplainError::WrongFirstLayer("model has no layers".into()))?;
    let LayerSpec::Conv1d {
        in_channels,
        out_filters,
        filter_length: k,
        ..
    } = first.spec
    else {
        return Err(ExplainError::WrongFirstLayer(format!("{:?}", first.spec)));
    };
    if in_channels != N_STREAMS {
        return Err(ExplainError::WrongFirstLayer(format!("{in_channels} input channels")));
    }
    let mut scores = [0.0; 3];
    for o in 0..out_filters {
        for i in 0..in_channels {
            let w = &first.weight[(o * in_channels + i) * k..(o * in_channels + i + 1) * k];
            scores[i / 3] += w.iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    Ok(ChannelWeightProfile {
        scores,
        shares: shares_of(scores),
    })
}

/// Mean over windows of each channel's summed |relevance|, plus shares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRelevanceReport {
    pub windows: usize,
    pub mean_abs: [f64; 3],
    pub shares: [f64; 3],
}

pub fn channel_relevance_report(
    model: &CnnModel,
    dataset: &WindowedDataset,
    epsilon: f64,
) -> Result<ChannelRelevanceReport, ExplainError> {
    if dataset.windows.is_empty() {
        return Err(ExplainError::EmptyDataset);
    }
    let mut sum = [0.0; 3];
    for (index, w) in dataset.windows.iter().enumerate() {
        let map = lrp(model, &w.input, epsilon).map_err(|e| ExplainError::Window {
            index,
            source: Box::new(e),
        })?;
        for (s, row) in map.relevance.chunks(map.window_len).enumerate() {
            sum[s / 3] += row.iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    let n = dataset.windows.len() as f64;
    let mean_abs = sum.map(|s| s / n);
    Ok(ChannelRelevanceReport {
        windows: dataset.windows.len(),
        mean_abs,
        shares: shares_of(mean_abs),
    })
}

/// Header of the relevance CSV.
pub const RELEVANCE_CSV_HEADER: &str = "window,stream,sample_index,relevance";

/// Appends one map to a relevance CSV body. The absorbed bias relevance is
/// written as stream `bias`, sample 0, so each window's rows sum to the
/// prediction.
pub fn write_relevance_rows(out: &mut String, window: usize, map: &RelevanceMap) {
    use std::fmt::Write;
    for s in 0..map.streams {
        let name = STREAM_NAMES.get(s).copied().unwrap_or("stream");
        for (t, r) in map.row(s).iter().enumerate() {
            let _ = writeln!(out, "{window},{name},{t},{}", fmt_f64(*r));
        }
    }
    let _ = writeln!(out, "{window},bias,0,{}", fmt_f64(map.bias_relevance));
}

pub fn relevance_csv(maps: &[RelevanceMap]) -> String {
    let mut out = format!("{RELEVANCE_CSV_HEADER}\n");
    for (i, m) in maps.iter().enumerate() {
        write_relevance_rows(&mut out, i, m);
    }
    out
}

#[derive(Serialize)]
struct ProfileDoc<'a> {
    channels: [&'static str; 3],
    weight_profile: &'a ChannelWeightProfile,
    #[serde(skip_serializing_if = "Option::is_none")]
    relevance: Option<&'a ChannelRelevanceReport>,
}

/// Profile JSON: channel names, weight scores/shares and optional relevance shares.
pub fn profile_json(weights: &ChannelWeightProfile, relevance: Option<&ChannelRelevanceReport>) -> String {
    let mut s = serde_json::to_string_pretty(&ProfileDoc {
        channels: CHANNEL_NAMES,
        weight_profile: weights,
        relevance,
    })
    .expect("profile serialises");
    s.push('\n');
    s
}
