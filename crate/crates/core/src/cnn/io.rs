//! Versioned model JSON. Floats are written as shortest round-trip decimals,
//! so `load_model(save_model(m)) == m` bit for bit.

use serde::{Deserialize, Serialize};

use super::{CnnError, CnnModel, Layer, LayerSpec};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    schema_version: u32,
    input_channels: usize,
    input_len: usize,
    rng_seed: u64,
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    #[serde(flatten)]
    spec: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    weight: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    bias: Vec<f64>,
}

pub fn save_model(model: &CnnModel) -> String {
    let doc = ModelDoc {
        schema_version: MODEL_SCHEMA_VERSION,
        input_channels: model.input_shape.0,
        input_len: model.input_shape.1,
        rng_seed: model.rng_seed,
        layers: model
            .layers
            .iter()
            .map(|l| LayerDoc {
                spec: l.spec,
                weight_shape: l.spec.param_shape().map(|(s, _)| s),
                weight: l.weight.clone(),
                bias: l.bias.clone(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("model serialises");
    s.push('\n');
    s
}

pub fn load_model(text: &str) -> Result<CnnModel, CnnError> {
    #[derive(Deserialize)]
    struct Version {
        schema_version: u32,
    }
    let v: Version = serde_json::from_str(text).map_err(|e| CnnError::Parse(e.to_string()))?;
    if v.schema_version != MODEL_SCHEMA_VERSION {
        return Err(CnnError::SchemaVersionMismatch {
            found: v.schema_version,
            expected: MODEL_SCHEMA_VERSION,
        });
    }
    let doc: ModelDoc = serde_json::from_str(text).map_err(|e| CnnError::Parse(e.to_string()))?;
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (i, l) in doc.layers.into_iter().enumerate() {
        let expected = l.spec.param_shape().map(|(s, _)| s);
        if l.weight_shape != expected {
            return Err(CnnError::ShapeMismatch(format!(
                "layer {i}: weight_shape {:?} does not match spec {:?}",
                l.weight_shape, expected
            )));
        }
        layers.push(Layer {
            spec: l.spec,
            weight: l.weight,
            bias: l.bias,
        });
    }
    let model = CnnModel {
        input_shape: (doc.input_channels, doc.input_len),
        layers,
        rng_seed: doc.rng_seed,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::Architecture;

    fn model() -> CnnModel {
        CnnModel::from_architecture(&Architecture::uniform(2, 3, 4), (9, 40), 5).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let m = model();
        let back = load_model(&save_model(&m)).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.layers.iter().zip(&m.layers) {
            for (x, y) in a.weight.iter().zip(&b.weight) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn tampered_shape_rejected() {
        let s = save_model(&model()).replacen("\"weight_shape\": [\n        3,", "\"weight_shape\": [\n        4,", 1);
        assert!(matches!(load_model(&s), Err(CnnError::ShapeMismatch(_))));
    }

    #[test]
    fn version_bump_rejected() {
        let s = save_model(&model()).replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
        assert_eq!(
            load_model(&s),
            Err(CnnError::SchemaVersionMismatch {
                found: 2,
                expected: 1
            })
        );
    }

    #[test]
    fn truncated_weights_rejected() {
        let mut m = model();
        m.layers[0].weight.pop();
        assert!(matches!(load_model(&save_model(&m)), Err(CnnError::ShapeMismatch(_))));
    }
}
