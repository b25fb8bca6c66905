//! Zero-phase filtering, the nine-stream stack (raw / ac / dc per colour
//! channel) and sliding-window dataset construction.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roi::ColorSignal;

pub const N_STREAMS: usize = 9;
pub const RAW: usize = 0;
pub const AC: usize = 1;
pub const DC: usize = 2;
/// Gain applied to relative (AC/DC) inputs so they are O(1).
pub const RELATIVE_GAIN: f64 = 100.0;

/// Stream layout is channel-major: `[R_raw, R_ac, R_dc, G_raw, .., B_dc]`.
pub const fn stream_index(channel: usize, kind: usize) -> usize {
    channel * 3 + kind
}

pub const STREAM_NAMES: [&str; N_STREAMS] = [
    "r_raw", "r_ac", "r_dc", "g_raw", "g_ac", "g_dc", "b_raw", "b_ac", "b_dc",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("bad band: {0}")]
    BadBand(String),
    #[error("series of {len} samples is shorter than the required {required}")]
    TooShort { len: usize, required: usize },
    #[error("window label {0} outside [70,100]")]
    LabelRange(f64),
    #[error("dataset format: {0}")]
    Format(String),
}

/// Second-order section in transposed direct form II, `a0` normalised to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn normalised(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Self {
            b: b.map(|v| v / a0),
            a: [a1 / a0, a2 / a0],
        }
    }

    /// Butterworth (Q = 1/sqrt 2) low-pass, bilinear transform prewarped at `cutoff`.
    pub fn lowpass(cutoff_hz: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * FRAC_1_SQRT_2);
        let k = (1.0 - c) / 2.0;
        Self::normalised([k, 1.0 - c, k], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    pub fn highpass(cutoff_hz: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / fs;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * FRAC_1_SQRT_2);
        let k = (1.0 + c) / 2.0;
        Self::normalised([k, -(1.0 + c), k], 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1])
    }

    /// State that holds the output steady for a constant input of 1.
    fn steady_state(&self) -> [f64; 2] {
        let y = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * y;
        let z1 = self.b[1] - self.a[0] * y + z2;
        [z1, z2]
    }

    fn run(&self, x: &mut [f64], mut z: [f64; 2]) {
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b[0] * input + z[0];
            z[0] = self.b[1] * input - self.a[0] * y + z[1];
            z[1] = self.b[2] * input - self.a[1] * y;
            *v = y;
        }
    }
}

/// One causal pass through the cascade, starting from the steady state of
/// the first sample.
fn cascade_pass(sections: &[Biquad], x: &mut [f64]) {
    let mut level = match x.first() {
        Some(&v) => v,
        None => return,
    };
    for s in sections {
        let zi = s.steady_state().map(|z| z * level);
        s.run(x, zi);
        level *= s.dc_gain();
    }
}

/// Forward-backward filtering with odd-reflection padding of `pad` samples.
pub fn filtfilt(sections: &[Biquad], x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = pad.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (x[0], x[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));
    cascade_pass(sections, &mut ext);
    ext.reverse();
    cascade_pass(sections, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Samples needed for the slowest pole to settle: one period of the lowest
/// corner frequency.
fn settle_len(fs: f64, lowest_hz: f64) -> usize {
    (fs / lowest_hz).ceil() as usize
}

fn check_len(len: usize, settle: usize) -> Result<(), DspError> {
    let required = 3 * settle;
    if len < required {
        return Err(DspError::TooShort { len, required });
    }
    Ok(())
}

/// Zero-phase Butterworth band-pass: a 2nd-order high-pass at `low_hz`
/// cascaded with a 2nd-order low-pass at `high_hz`.
pub fn bandpass(series: &[f64], fps: f64, low_hz: f64, high_hz: f64) -> Result<Vec<f64>, DspError> {
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fps / 2.0) {
        return Err(DspError::BadBand(format!(
            "need 0 < {low_hz} < {high_hz} < {}",
            fps / 2.0
        )));
    }
    let settle = settle_len(fps, low_hz);
    check_len(series.len(), settle)?;
    let sections = [Biquad::highpass(low_hz, fps), Biquad::lowpass(high_hz, fps)];
    Ok(filtfilt(&sections, series, settle))
}

/// Zero-phase 2nd-order Butterworth low-pass: the slowly varying "bias" level.
pub fn bias(series: &[f64], fps: f64, cutoff_hz: f64) -> Result<Vec<f64>, DspError> {
    if !(cutoff_hz > 0.0 && cutoff_hz < fps / 2.0) {
        return Err(DspError::BadBand(format!(
            "need 0 < {cutoff_hz} < {}",
            fps / 2.0
        )));
    }
    let settle = settle_len(fps, cutoff_hz);
    check_len(series.len(), settle)?;
    Ok(filtfilt(&[Biquad::lowpass(cutoff_hz, fps)], series, settle))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DspConfig {
    pub ac_low_hz: f64,
    pub ac_high_hz: f64,
    pub dc_cutoff_hz: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            ac_low_hz: 0.7,
            ac_high_hz: 4.0,
            dc_cutoff_hz: 0.3,
        }
    }
}

/// Nine aligned streams over a whole recording.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStack {
    pub fps: f64,
    pub streams: [Vec<f64>; N_STREAMS],
}

impl StreamStack {
    pub fn build(signal: &ColorSignal, cfg: &DspConfig) -> Result<Self, DspError> {
        let mut streams: [Vec<f64>; N_STREAMS] = Default::default();
        for c in 0..3 {
            let raw = signal.channel(c);
            streams[stream_index(c, AC)] =
                bandpass(&raw, signal.fps, cfg.ac_low_hz, cfg.ac_high_hz)?;
            streams[stream_index(c, DC)] = bias(&raw, signal.fps, cfg.dc_cutoff_hz)?;
            streams[stream_index(c, RAW)] = raw;
        }
        Ok(Self {
            fps: signal.fps,
            streams,
        })
    }

    pub fn len(&self) -> usize {
        self.streams[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-window constants used to normalise the CNN input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowNorm {
    pub raw_mean: [f64; 3],
    pub dc_mean: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    /// Un-normalised streams, `N_STREAMS x len`, stream-major.
    pub streams: Vec<f64>,
    /// Normalised CNN input, same layout.
    pub input: Vec<f64>,
    pub norm: WindowNorm,
    pub label: Option<f64>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn stream(&self, s: usize) -> &[f64] {
        let l = self.len();
        &self.streams[s * l..(s + 1) * l]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub fps: f64,
    pub window_len: usize,
    pub stride: usize,
    pub windows: Vec<Window>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn labels(&self) -> Option<Vec<f64>> {
        self.windows.iter().map(|w| w.label).collect()
    }

    pub fn is_labeled(&self) -> bool {
        self.windows.iter().all(|w| w.label.is_some())
    }

    pub fn subset(&self, idx: &[usize]) -> WindowedDataset {
        WindowedDataset {
            windows: idx.iter().map(|&i| self.windows[i].clone()).collect(),
            ..self.shallow()
        }
    }

    fn shallow(&self) -> WindowedDataset {
        WindowedDataset {
            fps: self.fps,
            window_len: self.window_len,
            stride: self.stride,
            windows: Vec::new(),
        }
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Normalises one window: raw as percent deviation from its own mean, ac as
/// percent of the window's mean dc level, dc scaled by 1/255.
pub fn normalise_window(streams: &[f64], len: usize) -> (Vec<f64>, WindowNorm) {
    let mut input = vec![0.0; streams.len()];
    let mut norm = WindowNorm {
        raw_mean: [0.0; 3],
        dc_mean: [0.0; 3],
    };
    for c in 0..3 {
        let seg = |k: usize| {
            let s = stream_index(c, k);
            s * len..(s + 1) * len
        };
        let raw_mean = mean(&streams[seg(RAW)]).max(1e-6);
        let dc_mean = mean(&streams[seg(DC)]).max(1e-6);
        norm.raw_mean[c] = raw_mean;
        norm.dc_mean[c] = dc_mean;
        for i in seg(RAW) {
            input[i] = RELATIVE_GAIN * (streams[i] - raw_mean) / raw_mean;
        }
        for i in seg(AC) {
            input[i] = RELATIVE_GAIN * streams[i] / dc_mean;
        }
        for i in seg(DC) {
            input[i] = streams[i] / 255.0;
        }
    }
    (input, norm)
}

pub fn make_windows(
    signal: &ColorSignal,
    window_s: f64,
    stride_s: f64,
    cfg: &DspConfig,
) -> Result<WindowedDataset, DspError> {
    let window_len = (window_s * signal.fps).round() as usize;
    let stride = (stride_s * signal.fps).round() as usize;
    if window_len == 0 || stride == 0 {
        return Err(DspError::BadBand(format!(
            "window {window_s} s / stride {stride_s} s round to zero samples"
        )));
    }
    if signal.len() < window_len {
        return Err(DspError::TooShort {
            len: signal.len(),
            required: window_len,
        });
    }
    let stack = StreamStack::build(signal, cfg)?;
    windows_from_stack(&stack, signal.spo2.as_deref(), window_len, stride)
}

pub fn window_starts(len: usize, window_len: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..)
        .map(move |k| k * stride)
        .take_while(move |&s| s + window_len <= len)
}

pub fn windows_from_stack(
    stack: &StreamStack,
    spo2: Option<&[f64]>,
    window_len: usize,
    stride: usize,
) -> Result<WindowedDataset, DspError> {
    let mut windows = Vec::new();
    for start in window_starts(stack.len(), window_len, stride) {
        let end = start + window_len;
        let mut streams = Vec::with_capacity(N_STREAMS * window_len);
        for s in &stack.streams {
            streams.extend_from_slice(&s[start..end]);
        }
        let (input, norm) = normalise_window(&streams, window_len);
        let label = match spo2 {
            Some(t) => {
                let l = mean(&t[start..end]);
                if !(70.0..=100.0).contains(&l) {
                    return Err(DspError::LabelRange(l));
                }
                Some(l)
            }
            None => None,
        };
        windows.push(Window {
            start,
            end,
            streams,
            input,
            norm,
            label,
        });
    }
    Ok(WindowedDataset {
        fps: stack.fps,
        window_len,
        stride,
        windows,
    })
}

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// JSON side of the on-disk dataset. The companion blob holds, per window,
/// `N_STREAMS * window_len` little-endian f64 un-normalised samples followed
/// by the same number of normalised input samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub fps: f64,
    pub window_len: usize,
    pub stride: usize,
    pub streams: Vec<String>,
    pub normalization: NormalizationFlags,
    pub windows: Vec<WindowEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationFlags {
    pub raw: String,
    pub ac: String,
    pub dc: String,
    pub relative_gain: f64,
}

impl Default for NormalizationFlags {
    fn default() -> Self {
        Self {
            raw: "percent_of_window_raw_mean".into(),
            ac: "percent_of_window_dc_mean".into(),
            dc: "divide_by_255".into(),
            relative_gain: RELATIVE_GAIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub start: usize,
    pub end: usize,
    pub label: Option<f64>,
    pub norm: WindowNorm,
}

impl WindowedDataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            schema_version: DATASET_SCHEMA_VERSION,
            fps: self.fps,
            window_len: self.window_len,
            stride: self.stride,
            streams: STREAM_NAMES.iter().map(|s| s.to_string()).collect(),
            normalization: NormalizationFlags::default(),
            windows: self
                .windows
                .iter()
                .map(|w| WindowEntry {
                    start: w.start,
                    end: w.end,
                    label: w.label,
                    norm: w.norm,
                })
                .collect(),
        }
    }

    pub fn write_blob<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for w in &self.windows {
            for v in w.streams.iter().chain(&w.input) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_parts<R: Read>(manifest: &DatasetManifest, mut blob: R) -> Result<Self, DspError> {
        if manifest.schema_version != DATASET_SCHEMA_VERSION {
            return Err(DspError::Format(format!(
                "schema version {} unsupported",
                manifest.schema_version
            )));
        }
        let block = N_STREAMS * manifest.window_len;
        let mut buf = [0u8; 8];
        let mut read_block = |n: usize| -> Result<Vec<f64>, DspError> {
            (0..n)
                .map(|_| {
                    blob.read_exact(&mut buf)
                        .map_err(|e| DspError::Format(format!("blob: {e}")))?;
                    Ok(f64::from_le_bytes(buf))
                })
                .collect()
        };
        let mut windows = Vec::with_capacity(manifest.windows.len());
        for e in &manifest.windows {
            if e.end < e.start || e.end - e.start != manifest.window_len {
                return Err(DspError::Format(format!(
                    "window span {}..{} does not match window_len",
                    e.start, e.end
                )));
            }
            let streams = read_block(block)?;
            let input = read_block(block)?;
            windows.push(Window {
                start: e.start,
                end: e.end,
                streams,
                input,
                norm: e.norm,
                label: e.label,
            });
        }
        let mut rest = Vec::new();
        let _ = blob.read_to_end(&mut rest);
        if !rest.is_empty() {
            return Err(DspError::Format(format!("{} trailing blob bytes", rest.len())));
        }
        Ok(Self {
            fps: manifest.fps,
            window_len: manifest.window_len,
            stride: manifest.stride,
            windows,
        })
    }
}
