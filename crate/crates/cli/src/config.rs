//! JSON config documents for the `synth` and `pipeline` subcommands. Every
//! field is optional; unknown fields are rejected.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use oxipipe_core::explain::DEFAULT_EPSILON;
use oxipipe_core::harness::{ExperimentConfig, GridSpec, SyntheticPair};
use oxipipe_core::synth::{HandSide, PhysioTrace, RenderConfig, SubjectProfile};

use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub profile: SubjectProfile,
    pub physio: PhysioTrace,
    pub fps: f64,
    pub render: RenderConfig,
    /// Also render an RVF video (otherwise only the signal CSV).
    pub frames: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            profile: SubjectProfile::default(),
            physio: PhysioTrace::default(),
            fps: 30.0,
            render: RenderConfig::default(),
            frames: true,
        }
    }
}

/// Recording inputs. With no paths, a synthetic pair is generated from the
/// master seed. Paths may name RVF videos or signal CSVs; RVF inputs take
/// SpO2 labels and cycle indices from a companion CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticPair,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// Labelled profiles; they must differ in at most one factor.
    pub profiles: Vec<(String, SubjectProfile)>,
    /// Seeds used are `master + k` for `k < seed_count`.
    pub seed_count: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let back = SubjectProfile::default();
        let palm = SubjectProfile {
            hand_side: HandSide::Palm,
            ..back.clone()
        };
        Self {
            profiles: vec![("back".into(), back), ("palm".into(), palm)],
            seed_count: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub epsilon: f64,
    /// Explain every `window_step`-th test window.
    pub window_step: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            window_step: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub experiment: ExperimentConfig,
    pub data: DataConfig,
    pub grid: GridSpec,
    pub compare: CompareConfig,
    pub explain: ExplainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            experiment: ExperimentConfig::default(),
            data: DataConfig::default(),
            grid: GridSpec::default(),
            compare: CompareConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

/// Parses a JSON document; syntax and type errors carry line and column.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| {
        CliError::ConfigInvalid(format!("{origin}:{}:{}: {e}", e.line(), e.column()))
    })
}

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            parse_json(&text, &p.display().to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let c: PipelineConfig = parse_json("{}", "t").unwrap();
        assert_eq!(c, PipelineConfig::default());
    }

    #[test]
    fn syntax_error_has_position() {
        let e = parse_json::<SynthConfig>("{\n  \"fps\": 30,\n  oops\n}", "c.json").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("c.json:3:3"), "{msg}");
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(matches!(
            parse_json::<SynthConfig>("{\"fsp\": 30}", "c"),
            Err(CliError::ConfigInvalid(_))
        ));
    }
}
