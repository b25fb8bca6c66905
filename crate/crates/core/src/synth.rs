//! Optophysiological forward model for ground-truthed synthetic recordings.
//!
//! Every channel follows `s_c(t) = DC_c - AC_c(t) * pulse(t) + n_c(t)` with
//!
//! * `DC_c = base_dc_c * (1 - melanin * k_c)`, `k = (0.3, 0.5, 0.7)`
//! * `AC_B(t) = DC_B * g(t)` and `AC_R(t) = DC_R * g(t) * R(t)`, where
//!   `g(t) = perfusion * hand_factor * (1 + v sin(2 pi t / T + phi))` and
//!   `R(t) = (a - spo2(t)) / b`, so `(AC_R/DC_R)/(AC_B/DC_B) = R(t)` exactly.
//! * `AC_G = DC_G * perfusion * hand_factor`: the green channel pulses but its
//!   amplitude carries neither SpO2 nor perfusion variation (decoy).

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frameio::{FrameError, FrameSequence, Rgb};
use crate::roi::ColorSignal;

/// Melanin attenuation weights per channel (R, G, B).
pub const MELANIN_WEIGHTS: [f64; 3] = [0.3, 0.5, 0.7];
pub const PALM_AC_FACTOR: f64 = 0.6;
pub const BACK_AC_FACTOR: f64 = 1.0;
pub const BACKGROUND_MAX: u8 = 39;
pub const MIN_GEOMETRY: u32 = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("fps {fps} below Nyquist for heart rate {heart_rate_hz} Hz")]
    NyquistViolation { fps: f64, heart_rate_hz: f64 },
    #[error("sample {index} channel {channel} = {value} leaves [0,255]")]
    RangeOverflow {
        index: usize,
        channel: usize,
        value: f64,
    },
    #[error("geometry {width}x{height} cannot hold a hand mask")]
    GeometryTooSmall { width: u32, height: u32 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandSide {
    Palm,
    Back,
}

impl HandSide {
    pub fn ac_factor(self) -> f64 {
        match self {
            HandSide::Palm => PALM_AC_FACTOR,
            HandSide::Back => BACK_AC_FACTOR,
        }
    }
}

/// Linear calibration `SpO2 = a - b * R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub a: f64,
    pub b: f64,
}

impl Default for CalibrationModel {
    fn default() -> Self {
        Self { a: 110.0, b: 25.0 }
    }
}

impl CalibrationModel {
    pub fn ratio_for(&self, spo2: f64) -> f64 {
        (self.a - spo2) / self.b
    }

    pub fn spo2_for(&self, ratio: f64) -> f64 {
        self.a - self.b * ratio
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubjectProfile {
    /// Melanin factor in [0, 1].
    pub skin_tone: f64,
    pub hand_side: HandSide,
    pub base_dc: [f64; 3],
    /// Relative pulsatile amplitude, in [0, 0.1].
    pub perfusion: f64,
    pub noise_sigma: f64,
    pub calibration: CalibrationModel,
}

impl Default for SubjectProfile {
    fn default() -> Self {
        Self {
            skin_tone: 0.3,
            hand_side: HandSide::Back,
            base_dc: [190.0, 140.0, 110.0],
            perfusion: 0.02,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            calibration: CalibrationModel::default(),
        }
    }
}

/// Default additive sensor noise, intensity units per sample.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.3;

impl SubjectProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParameter(m));
        if !(0.0..=1.0).contains(&self.skin_tone) {
            return bad(format!("skin_tone {} outside [0,1]", self.skin_tone));
        }
        if !(0.0..=0.1).contains(&self.perfusion) {
            return bad(format!("perfusion {} outside [0,0.1]", self.perfusion));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(self.calibration.b > 0.0) {
            return bad("calibration slope b must be positive".into());
        }
        for (c, dc) in self.effective_dc().iter().enumerate() {
            if !(*dc > 0.0 && *dc < 255.0) {
                return bad(format!("effective DC {dc} of channel {c} outside (0,255)"));
            }
        }
        Ok(())
    }

    pub fn effective_dc(&self) -> [f64; 3] {
        std::array::from_fn(|c| self.base_dc[c] * (1.0 - self.skin_tone * MELANIN_WEIGHTS[c]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Spo2Trace {
    Constant { value: f64 },
    /// One smooth dip per breathing cycle; `nadirs` cycles if shorter than the cycle count.
    CycleDips { baseline: f64, nadirs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysioTrace {
    pub duration_s: f64,
    pub heart_rate_hz: f64,
    pub spo2: Spo2Trace,
    pub breathing_cycles: usize,
    /// Relative amplitude of slow perfusion variation, shared by R and B.
    pub perfusion_variation: f64,
    pub perfusion_period_s: f64,
    pub perfusion_phase: f64,
}

impl Default for PhysioTrace {
    fn default() -> Self {
        Self {
            duration_s: 10.0,
            heart_rate_hz: 1.2,
            spo2: Spo2Trace::CycleDips {
                baseline: 98.0,
                nadirs: vec![85.0],
            },
            breathing_cycles: 3,
            perfusion_variation: 0.1,
            perfusion_period_s: 17.0,
            perfusion_phase: 0.0,
        }
    }
}

// Dip shape inside a cycle: raised-cosine centred at this fraction of the
// cycle, half-width as a fraction of the cycle length.
const DIP_CENTER: f64 = 0.55;
const DIP_HALF_WIDTH: f64 = 0.35;

impl PhysioTrace {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParameter(m));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad("duration_s must be positive".into());
        }
        if !(0.7..=4.0).contains(&self.heart_rate_hz) {
            return bad(format!("heart_rate_hz {} outside [0.7,4]", self.heart_rate_hz));
        }
        if self.breathing_cycles == 0 {
            return bad("breathing_cycles must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.perfusion_variation) {
            return bad("perfusion_variation outside [0,1)".into());
        }
        if !(self.perfusion_period_s > 0.0) {
            return bad("perfusion_period_s must be positive".into());
        }
        let in_range = |v: f64| (70.0..=100.0).contains(&v);
        match &self.spo2 {
            Spo2Trace::Constant { value } if !in_range(*value) => {
                return bad(format!("spo2 {value} outside [70,100]"));
            }
            Spo2Trace::CycleDips { baseline, nadirs }
                if nadirs.is_empty() || !in_range(*baseline) || !nadirs.iter().all(|&n| in_range(n)) =>
            {
                return bad("cycle dips must be non-empty and within [70,100]".into());
            }
            _ => {}
        }
        Ok(())
    }

    /// Cycle boundary timestamps `[0, .., duration_s]`, equal-length cycles.
    pub fn cycle_boundaries_s(&self) -> Vec<f64> {
        let n = self.breathing_cycles;
        (0..=n)
            .map(|k| self.duration_s * k as f64 / n as f64)
            .collect()
    }

    pub fn spo2_at(&self, t: f64) -> f64 {
        match &self.spo2 {
            Spo2Trace::Constant { value } => *value,
            Spo2Trace::CycleDips { baseline, nadirs } => {
                let len = self.duration_s / self.breathing_cycles as f64;
                let k = ((t / len).floor().max(0.0) as usize).min(self.breathing_cycles - 1);
                let nadir = nadirs[k % nadirs.len()];
                let u = (t - k as f64 * len) / len;
                let d = (u - DIP_CENTER) / DIP_HALF_WIDTH;
                if d.abs() >= 1.0 {
                    *baseline
                } else {
                    baseline - (baseline - nadir) * 0.5 * (1.0 + (PI * d).cos())
                }
            }
        }
    }

    pub fn perfusion_gain_at(&self, t: f64) -> f64 {
        1.0 + self.perfusion_variation
            * (2.0 * PI * t / self.perfusion_period_s + self.perfusion_phase).sin()
    }

    pub fn sample_count(&self, fps: f64) -> usize {
        (self.duration_s * fps).round() as usize
    }
}

/// Mean of [`pulse_waveform`] over one period: 0.5 * 0.5 + 0.25 * 0.4.
pub const PULSE_MEAN: f64 = 0.35;

/// Unit-amplitude pulse: raised-cosine systolic peak (height 1) followed by a
/// dicrotic bump of height 0.5. Range is exactly [0, 1].
pub fn pulse_waveform(phase: f64) -> f64 {
    let p = phase.rem_euclid(1.0);
    if p < 0.5 {
        0.5 * (1.0 - (2.0 * PI * p / 0.5).cos())
    } else if p < 0.9 {
        0.25 * (1.0 - (2.0 * PI * (p - 0.5) / 0.4).cos())
    } else {
        0.0
    }
}

/// Noise-free per-sample model terms.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel {
    pub fps: f64,
    pub dc: [f64; 3],
    /// AC amplitude per channel per sample.
    pub ac: Vec<[f64; 3]>,
    pub pulse: Vec<f64>,
    pub spo2: Vec<f64>,
    pub cycle_boundaries: Vec<usize>,
}

impl ForwardModel {
    /// Absorption dips around `dc`; the pulse is centred so `dc` is the
    /// mean level over whole beats.
    pub fn clean_sample(&self, i: usize) -> [f64; 3] {
        std::array::from_fn(|c| self.dc[c] - self.ac[i][c] * (self.pulse[i] - PULSE_MEAN))
    }

    /// `(AC_R/DC_R) / (AC_B/DC_B)` at sample `i`.
    pub fn ratio_of_ratios(&self, i: usize) -> f64 {
        (self.ac[i][0] / self.dc[0]) / (self.ac[i][2] / self.dc[2])
    }
}

pub fn forward_model(
    profile: &SubjectProfile,
    physio: &PhysioTrace,
    fps: f64,
) -> Result<ForwardModel, SynthError> {
    profile.validate()?;
    physio.validate()?;
    if !(fps.is_finite() && fps >= 2.0 * physio.heart_rate_hz) {
        return Err(SynthError::NyquistViolation {
            fps,
            heart_rate_hz: physio.heart_rate_hz,
        });
    }
    let n = physio.sample_count(fps);
    if n == 0 {
        return Err(SynthError::InvalidParameter("recording has no samples".into()));
    }
    let dc = profile.effective_dc();
    let base = profile.perfusion * profile.hand_side.ac_factor();
    let cal = profile.calibration;
    let mut ac = Vec::with_capacity(n);
    let mut pulse = Vec::with_capacity(n);
    let mut spo2 = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / fps;
        let s = physio.spo2_at(t);
        let g = base * physio.perfusion_gain_at(t);
        ac.push([dc[0] * g * cal.ratio_for(s), dc[1] * base, dc[2] * g]);
        pulse.push(pulse_waveform(physio.heart_rate_hz * t));
        spo2.push(s);
    }
    let cycle_boundaries = physio
        .cycle_boundaries_s()
        .iter()
        .map(|&t| ((t * fps).round() as usize).min(n))
        .collect();
    Ok(ForwardModel {
        fps,
        dc,
        ac,
        pulse,
        spo2,
        cycle_boundaries,
    })
}

pub fn generate_color_signal(
    profile: &SubjectProfile,
    physio: &PhysioTrace,
    fps: f64,
    seed: u64,
) -> Result<ColorSignal, SynthError> {
    let model = forward_model(profile, physio, fps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, profile.noise_sigma)
        .map_err(|e| SynthError::InvalidParameter(e.to_string()))?;
    let mut samples = Vec::with_capacity(model.pulse.len());
    for i in 0..model.pulse.len() {
        let clean = model.clean_sample(i);
        let mut s = [0.0; 3];
        for c in 0..3 {
            let v = clean[c] + noise.sample(&mut rng);
            if !(0.0..=255.0).contains(&v) {
                return Err(SynthError::RangeOverflow {
                    index: i,
                    channel: c,
                    value: v,
                });
            }
            s[c] = v;
        }
        samples.push(s);
    }
    Ok(ColorSignal {
        fps,
        samples,
        spo2: Some(model.spo2),
        cycle_boundaries: Some(model.cycle_boundaries),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    /// Per-pixel i.i.d. texture noise std on skin pixels.
    pub texture_sigma: f64,
    /// Scales the hand silhouette; 0 renders background only.
    pub hand_scale: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            texture_sigma: 2.0,
            hand_scale: 1.0,
        }
    }
}

/// Hand silhouette: an elliptical palm with four finger bars rising from its
/// upper edge. Always a single 4-connected region.
pub fn hand_mask(width: u32, height: u32, scale: f64) -> Vec<bool> {
    let (w, h) = (width as f64, height as f64);
    let (cx, cy) = (0.5 * w, 0.62 * h);
    let (rx, ry) = (0.30 * w * scale, 0.26 * h * scale);
    let finger_w = 0.09 * w * scale;
    let finger_top = cy - ry - 0.28 * h * scale;
    let mut mask = Vec::with_capacity((width * height) as usize);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside_palm = rx > 0.0
                && ry > 0.0
                && ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0;
            let inside_finger = finger_w > 0.0
                && py >= finger_top
                && py <= cy
                && (0..4).any(|k| {
                    let fx = cx - rx * 0.75 + k as f64 * rx * 0.5;
                    (px - fx).abs() <= finger_w / 2.0
                });
            mask.push(inside_palm || inside_finger);
        }
    }
    mask
}

/// Rendered recording plus the silhouette it was drawn with.
#[derive(Debug, Clone)]
pub struct RenderedRecording {
    pub frames: FrameSequence,
    pub mask: Vec<bool>,
    pub signal: ColorSignal,
}

pub fn generate_frames(
    profile: &SubjectProfile,
    physio: &PhysioTrace,
    fps: f64,
    render: &RenderConfig,
    seed: u64,
) -> Result<RenderedRecording, SynthError> {
    let too_small = SynthError::GeometryTooSmall {
        width: render.width,
        height: render.height,
    };
    if render.width < MIN_GEOMETRY || render.height < MIN_GEOMETRY {
        return Err(too_small);
    }
    let mask = hand_mask(render.width, render.height, render.hand_scale);
    if !mask.iter().any(|&m| m) {
        return Err(too_small);
    }
    if !(render.texture_sigma >= 0.0) {
        return Err(SynthError::InvalidParameter("texture_sigma must be >= 0".into()));
    }
    let signal = generate_color_signal(profile, physio, fps, seed)?;
    // Separate stream so the colour signal is identical with or without rendering.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let texture = Normal::new(0.0, render.texture_sigma)
        .map_err(|e| SynthError::InvalidParameter(e.to_string()))?;
    let bg = rand::distr::Uniform::new_inclusive(4u8, BACKGROUND_MAX)
        .map_err(|e| SynthError::InvalidParameter(e.to_string()))?;
    let mut frames = Vec::with_capacity(signal.len());
    for (i, s) in signal.samples.iter().enumerate() {
        let mut frame: Vec<Rgb> = Vec::with_capacity(mask.len());
        for &skin in &mask {
            if skin {
                let mut px = [0u8; 3];
                for c in 0..3 {
                    let v = s[c] + texture.sample(&mut rng);
                    if !(0.0..=255.0).contains(&v) {
                        return Err(SynthError::RangeOverflow {
                            index: i,
                            channel: c,
                            value: v,
                        });
                    }
                    px[c] = v.round() as u8;
                }
                frame.push(px);
            } else {
                frame.push([bg.sample(&mut rng), bg.sample(&mut rng), bg.sample(&mut rng)]);
            }
        }
        frames.push(frame);
    }
    let frames = FrameSequence::new(render.width, render.height, fps as f32, frames)?;
    Ok(RenderedRecording {
        frames,
        mask,
        signal,
    })
}
