//! Ratio-of-ratios baseline: per-window AC/DC features, least-squares
//! calibration and clamped linear prediction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{stream_index, Window, AC, DC};
pub use crate::synth::CalibrationModel;

pub const DC_EPSILON: f64 = 1e-6;
pub const SPO2_FLOOR: f64 = 70.0;
pub const SPO2_CEIL: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RorError {
    #[error("channel {channel} dc mean {value} <= {DC_EPSILON}")]
    DegenerateDC { channel: usize, value: f64 },
    #[error("ratio {0} is not finite and positive")]
    DegenerateRatio(f64),
    #[error("all ratios are equal; calibration is rank deficient")]
    RankDeficient,
    #[error("{features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
}

/// Which colour channel divides the red channel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceChannel {
    Green,
    #[default]
    Blue,
}

impl ReferenceChannel {
    fn index(self) -> usize {
        match self {
            ReferenceChannel::Green => 1,
            ReferenceChannel::Blue => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioFeatures {
    pub ac_rms: [f64; 3],
    pub dc_mean: [f64; 3],
    /// `(ac_rms_R / dc_mean_R) / (ac_rms_ref / dc_mean_ref)`.
    pub ratio: f64,
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn ratio_of_ratios(window: &Window, reference: ReferenceChannel) -> Result<RatioFeatures, RorError> {
    let mut ac_rms = [0.0; 3];
    let mut dc_mean = [0.0; 3];
    for c in 0..3 {
        ac_rms[c] = rms(window.stream(stream_index(c, AC)));
        let dc = window.stream(stream_index(c, DC));
        dc_mean[c] = dc.iter().sum::<f64>() / dc.len() as f64;
        if !(dc_mean[c] > DC_EPSILON) {
            return Err(RorError::DegenerateDC {
                channel: c,
                value: dc_mean[c],
            });
        }
    }
    let r = reference.index();
    let ratio = (ac_rms[0] / dc_mean[0]) / (ac_rms[r] / dc_mean[r]);
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(RorError::DegenerateRatio(ratio));
    }
    Ok(RatioFeatures {
        ac_rms,
        dc_mean,
        ratio,
    })
}

/// Persisted calibration: `{a, b, fit_rmse, n}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedCalibration {
    pub a: f64,
    pub b: f64,
    pub fit_rmse: f64,
    pub n: usize,
}

impl FittedCalibration {
    pub fn model(&self) -> CalibrationModel {
        CalibrationModel {
            a: self.a,
            b: self.b,
        }
    }
}

/// Ordinary least squares for `label = a - b * ratio`.
pub fn fit_calibration(ratios: &[f64], labels: &[f64]) -> Result<FittedCalibration, RorError> {
    if ratios.len() != labels.len() {
        return Err(RorError::LengthMismatch {
            features: ratios.len(),
            labels: labels.len(),
        });
    }
    if ratios.is_empty() || ratios.iter().all(|&r| r == ratios[0]) {
        return Err(RorError::RankDeficient);
    }
    let n = ratios.len() as f64;
    let mr = ratios.iter().sum::<f64>() / n;
    let my = labels.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (r, y) in ratios.iter().zip(labels) {
        sxy += (r - mr) * (y - my);
        sxx += (r - mr) * (r - mr);
    }
    let b = -sxy / sxx;
    let a = my + b * mr;
    let sse: f64 = ratios
        .iter()
        .zip(labels)
        .map(|(r, y)| (y - (a - b * r)).powi(2))
        .sum();
    Ok(FittedCalibration {
        a,
        b,
        fit_rmse: (sse / n).sqrt(),
        n: ratios.len(),
    })
}

pub fn fit_features(features: &[RatioFeatures], labels: &[f64]) -> Result<FittedCalibration, RorError> {
    let r: Vec<f64> = features.iter().map(|f| f.ratio).collect();
    fit_calibration(&r, labels)
}

pub fn predict_ratio(cal: &CalibrationModel, ratio: f64) -> f64 {
    (cal.a - cal.b * ratio).clamp(SPO2_FLOOR, SPO2_CEIL)
}

pub fn predict_ror(cal: &CalibrationModel, features: &RatioFeatures) -> f64 {
    predict_ratio(cal, features.ratio)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAL: CalibrationModel = CalibrationModel { a: 110.0, b: 25.0 };

    fn window(ac: [f64; 3], dc: [f64; 3]) -> Window {
        let len = 60;
        let mut streams = Vec::new();
        for c in 0..3 {
            let pulse: Vec<f64> = (0..len)
                .map(|i| ac[c] * (i as f64 * 0.7).sin())
                .collect();
            streams.extend(pulse.iter().map(|p| dc[c] + p));
            streams.extend(pulse);
            streams.extend(std::iter::repeat_n(dc[c], len));
        }
        Window {
            start: 0,
            end: len,
            input: streams.clone(),
            streams,
            norm: crate::dsp::WindowNorm {
                raw_mean: dc,
                dc_mean: dc,
            },
            label: None,
        }
    }

    #[test]
    fn symmetric_channels_give_unit_ratio() {
        let w = window([2.0, 1.0, 2.0], [150.0, 90.0, 150.0]);
        let f = ratio_of_ratios(&w, ReferenceChannel::Blue).unwrap();
        assert!((f.ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_dc_is_degenerate() {
        let w = window([2.0, 1.0, 2.0], [150.0, 90.0, 0.0]);
        assert!(matches!(
            ratio_of_ratios(&w, ReferenceChannel::Blue),
            Err(RorError::DegenerateDC { channel: 2, .. })
        ));
    }

    #[test]
    fn green_reference() {
        let w = window([3.0, 1.0, 2.0], [150.0, 100.0, 100.0]);
        let f = ratio_of_ratios(&w, ReferenceChannel::Green).unwrap();
        assert!((f.ratio - 2.0).abs() < 1e-9);
    }

    #[test]
    fn two_point_fit_is_exact() {
        let c = fit_calibration(&[0.48, 1.0], &[98.0, 85.0]).unwrap();
        assert!((c.a - 110.0).abs() < 1e-9 && (c.b - 25.0).abs() < 1e-9);
        assert!(c.fit_rmse < 1e-9);
        assert_eq!(c.n, 2);
    }

    #[test]
    fn constant_ratios_are_rank_deficient() {
        assert_eq!(
            fit_calibration(&[0.5, 0.5, 0.5], &[90.0, 91.0, 92.0]),
            Err(RorError::RankDeficient)
        );
    }

    #[test]
    fn prediction_and_clamp() {
        assert!((predict_ratio(&CAL, 0.48) - 98.0).abs() < 1e-12);
        assert_eq!(predict_ratio(&CAL, 1.0), 85.0);
        assert_eq!(predict_ratio(&CAL, 2.0), 70.0);
        assert_eq!(predict_ratio(&CAL, 0.0), 100.0);
    }

    #[test]
    fn linear_labels_are_reproduced() {
        let r: Vec<f64> = (0..20).map(|i| 0.4 + 0.03 * i as f64).collect();
        let y: Vec<f64> = r.iter().map(|x| 107.0 - 21.0 * x).collect();
        let c = fit_calibration(&r, &y).unwrap();
        for (x, t) in r.iter().zip(&y) {
            assert!((predict_ratio(&c.model(), *x) - t).abs() < 1e-9);
        }
    }
}
