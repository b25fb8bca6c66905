//! Skin segmentation (Otsu on luma + largest 4-connected component) and
//! spatial averaging of the skin region into R/G/B time series.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frameio::{FrameSequence, Rgb, SignalTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoiError {
    #[error("histogram has no separable mass (all pixels in one bin)")]
    NoSeparation,
    #[error("histogram total {0} exceeds the supported 2^28 pixels")]
    TooManyPixels(u64),
    #[error("skin mask is empty")]
    EmptyMask,
    #[error("frame {index}: {source}")]
    Frame { index: usize, source: Box<RoiError> },
    #[error("invalid color signal: {0}")]
    InvalidSignal(String),
}

/// Per-frame spatial means of the skin region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorSignal {
    pub fps: f64,
    pub samples: Vec<[f64; 3]>,
    #[serde(default)]
    pub spo2: Option<Vec<f64>>,
    /// Sample indices framing each breathing cycle: `[0, b1, .., len]`.
    #[serde(default)]
    pub cycle_boundaries: Option<Vec<usize>>,
}

impl ColorSignal {
    pub fn new(
        fps: f64,
        samples: Vec<[f64; 3]>,
        spo2: Option<Vec<f64>>,
        cycle_boundaries: Option<Vec<usize>>,
    ) -> Result<Self, RoiError> {
        let s = Self {
            fps,
            samples,
            spo2,
            cycle_boundaries,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), RoiError> {
        let bad = |m: String| Err(RoiError::InvalidSignal(m));
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps {} must be positive", self.fps));
        }
        if self.samples.is_empty() {
            return bad("no samples".into());
        }
        if let Some(i) = self
            .samples
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=255.0).contains(v)))
        {
            return bad(format!("sample {i} outside [0,255]"));
        }
        if let Some(s) = &self.spo2 {
            if s.len() != self.samples.len() {
                return bad(format!(
                    "spo2 length {} != sample count {}",
                    s.len(),
                    self.samples.len()
                ));
            }
        }
        if let Some(b) = &self.cycle_boundaries {
            if b.len() < 2 || b.windows(2).any(|w| w[0] >= w[1]) {
                return bad("cycle boundaries must be strictly increasing".into());
            }
            if b[b.len() - 1] > self.samples.len() {
                return bad("cycle boundary beyond signal end".into());
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[c]).collect()
    }

    /// CSV rows with `time_s = i / fps`; cycle indices expand the boundaries.
    pub fn to_table(&self) -> SignalTable {
        let cycle = self.cycle_boundaries.as_ref().map(|b| {
            let mut c = vec![0u32; self.len()];
            for (k, w) in b.windows(2).enumerate() {
                c[w[0]..w[1]].fill(k as u32);
            }
            c
        });
        SignalTable {
            time_s: (0..self.len()).map(|i| i as f64 / self.fps).collect(),
            rgb: self.samples.clone(),
            spo2: self.spo2.clone(),
            cycle,
        }
    }

    /// Inverse of [`ColorSignal::to_table`]; fps is inferred from the time
    /// column and rounded to 1e-6 Hz.
    pub fn from_table(t: &SignalTable) -> Result<Self, RoiError> {
        let fps = t
            .infer_fps()
            .map_err(|e| RoiError::InvalidSignal(e.to_string()))?;
        Self::new(
            (fps * 1e6).round() / 1e6,
            t.rgb.clone(),
            t.spo2.clone(),
            t.cycle_boundaries(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkinMask {
    pub width: u32,
    pub height: u32,
    pub membership: Vec<bool>,
    pub threshold: u8,
}

impl SkinMask {
    pub fn area(&self) -> usize {
        self.membership.iter().filter(|&&m| m).count()
    }

    pub fn iou(&self, other: &[bool]) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.membership.iter().zip(other) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

const MAX_OTSU_TOTAL: u64 = 1 << 28;

/// `a * b` as a (high, low) pair, exact.
fn mul_wide(a: u128, b: u64) -> (u128, u64) {
    let lo = (a as u64 as u128) * b as u128;
    let hi = (a >> 64) * b as u128 + (lo >> 64);
    (hi, lo as u64)
}

/// Exact between-class score for a split: `(S0*N - S*n0)^2 / (n0*n1)`, kept
/// as numerator/denominator so candidates compare without rounding.
#[derive(Clone, Copy)]
struct Score {
    num: u128,
    den: u64,
}

impl Score {
    fn cmp(&self, other: &Score) -> Ordering {
        mul_wide(self.num, other.den).cmp(&mul_wide(other.num, self.den))
    }
}

/// Otsu's threshold: the level `t` maximizing between-class variance of
/// `[0, t]` vs `(t, 255]`. Ties resolve to the smallest `t`.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8, RoiError> {
    let total: u64 = histogram.iter().sum();
    if total > MAX_OTSU_TOTAL {
        return Err(RoiError::TooManyPixels(total));
    }
    let sum_all: u128 = histogram
        .iter()
        .enumerate()
        .map(|(v, &c)| v as u128 * c as u128)
        .sum();
    let n = total as u128;
    let mut best: Option<(u8, Score)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for (t, &count) in histogram.iter().enumerate().take(255) {
        n0 += count as u128;
        s0 += t as u128 * count as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let a = s0 * n;
        let b = sum_all * n0;
        let x = a.abs_diff(b);
        let score = Score {
            num: x * x,
            den: (n0 * n1) as u64,
        };
        match &best {
            Some((_, s)) if score.cmp(s) != Ordering::Greater => {}
            _ => best = Some((t as u8, score)),
        }
    }
    match best {
        Some((t, s)) if s.num > 0 => Ok(t),
        _ => Err(RoiError::NoSeparation),
    }
}

/// Integer luma, `round(0.299 r + 0.587 g + 0.114 b)` with halves rounded up.
pub fn luma(px: Rgb) -> u8 {
    let v = 299 * px[0] as u32 + 587 * px[1] as u32 + 114 * px[2] as u32;
    ((v + 500) / 1000) as u8
}

/// Keeps the largest 4-connected component of `mask`. Equal sizes resolve to
/// the component whose first pixel comes first in row-major order.
pub fn largest_component(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut label = vec![u32::MAX; mask.len()];
    let mut best: Option<(u32, usize)> = None;
    let mut stack = Vec::new();
    let mut next = 0u32;
    for start in 0..mask.len() {
        if !mask[start] || label[start] != u32::MAX {
            continue;
        }
        let id = next;
        next += 1;
        let mut size = 0usize;
        label[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if mask[q] && label[q] == u32::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((id, size));
        }
    }
    match best {
        Some((id, _)) => label.iter().map(|&l| l == id).collect(),
        None => vec![false; mask.len()],
    }
}

pub fn extract_mask(frame: &[Rgb], width: u32, height: u32) -> Result<SkinMask, RoiError> {
    let mut hist = [0u64; 256];
    let lum: Vec<u8> = frame.iter().map(|&p| luma(p)).collect();
    for &l in &lum {
        hist[l as usize] += 1;
    }
    let threshold = otsu_threshold(&hist)?;
    let bright: Vec<bool> = lum.iter().map(|&l| l > threshold).collect();
    let membership = largest_component(&bright, width as usize, height as usize);
    if !membership.iter().any(|&m| m) {
        return Err(RoiError::EmptyMask);
    }
    Ok(SkinMask {
        width,
        height,
        membership,
        threshold,
    })
}

pub fn masked_mean(frame: &[Rgb], mask: &SkinMask) -> [f64; 3] {
    let mut acc = [0u64; 3];
    let mut n = 0u64;
    for (px, _) in frame.iter().zip(&mask.membership).filter(|(_, &m)| m) {
        for c in 0..3 {
            acc[c] += px[c] as u64;
        }
        n += 1;
    }
    acc.map(|s| s as f64 / n as f64)
}

pub fn extract_color_signal(seq: &FrameSequence) -> Result<ColorSignal, RoiError> {
    let (w, h) = (seq.width(), seq.height());
    let samples = seq
        .frames()
        .par_iter()
        .enumerate()
        .map(|(index, frame)| {
            extract_mask(frame, w, h)
                .map(|m| masked_mean(frame, &m))
                .map_err(|e| RoiError::Frame {
                    index,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    ColorSignal::new(seq.fps() as f64, samples, None, None)
}
