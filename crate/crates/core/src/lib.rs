//! Contactless SpO2 estimation from hand video.
//!
//! Pipeline: [`synth`] (ground-truthed synthetic recordings) → [`roi`] (skin
//! mask, spatial RGB means) → [`dsp`] (raw / AC / DC streams, sliding windows)
//! → [`cnn`] or [`ror`] (estimators) → [`explain`] (LRP, weight profiles).
//! [`harness`] runs the cycle-split / multi-instance / grid-search protocol;
//! [`plot`] renders deterministic SVG.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cnn;
pub mod dsp;
pub mod explain;
pub mod frameio;
pub mod harness;
pub mod plot;
pub mod roi;
pub mod ror;
pub mod synth;
