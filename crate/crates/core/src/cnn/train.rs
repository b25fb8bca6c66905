use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CnnError, CnnModel, Gradients, LayerSpec};
use crate::dsp::WindowedDataset;
use crate::frameio::fmt_f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{0} predictions but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no values")]
    Empty,
}

fn check(pred: &[f64], labels: &[f64]) -> Result<(), MetricError> {
    if pred.len() != labels.len() {
        return Err(MetricError::LengthMismatch(pred.len(), labels.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

pub fn rmse(pred: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    check(pred, labels)?;
    let sse: f64 = pred.iter().zip(labels).map(|(p, l)| (p - l).powi(2)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    check(pred, labels)?;
    let sae: f64 = pred.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum();
    Ok(sae / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Loss is always mean squared error on SpO2 percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub oversample: bool,
    /// Start the output bias at the mean training label.
    pub init_output_bias: bool,
    /// Decoupled decay on weights (not biases): `w -= lr * weight_decay * w`
    /// before each optimizer step.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            oversample: true,
            init_output_bias: true,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CnnError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CnnError::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CnnError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(CnnError::InvalidConfig("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Bootstrap oversampling over 1-point SpO2 bins (`floor(label)`): every
/// original index is kept and each bin is topped up with draws (with
/// replacement) from itself until it matches the largest bin. Output is
/// grouped by ascending bin; originals precede draws inside a bin.
pub fn oversample_indices(labels: &[f64], seed: u64) -> Vec<usize> {
    let mut bins: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        bins.entry(l.floor() as i64).or_default().push(i);
    }
    let target = bins.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(target * bins.len());
    for members in bins.values() {
        out.extend_from_slice(members);
        for _ in members.len()..target {
            out.push(members[rng.random_range(0..members.len())]);
        }
    }
    out
}

pub fn oversample(dataset: &WindowedDataset, seed: u64) -> Result<WindowedDataset, CnnError> {
    let labels = dataset
        .labels()
        .ok_or_else(|| CnnError::InvalidConfig("oversampling needs labels".into()))?;
    Ok(dataset.subset(&oversample_indices(&labels, seed)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_rmse: f64,
    pub val_rmse: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CnnModel,
    pub history: Vec<EpochLoss>,
}

pub fn write_loss_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,train_rmse,val_rmse\n");
    for e in history {
        let val = e.val_rmse.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", e.epoch, fmt_f64(e.train_rmse), val);
    }
    out
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn apply_update(model: &mut CnnModel, grads: &Gradients, cfg: &TrainConfig, state: &mut AdamState) {
    let lr = cfg.learning_rate;
    if cfg.weight_decay > 0.0 {
        let keep = 1.0 - lr * cfg.weight_decay;
        for layer in &mut model.layers {
            layer.weight.iter_mut().for_each(|w| *w *= keep);
        }
    }
    let flat_grads = model
        .layers
        .iter()
        .enumerate()
        .flat_map(|(l, _)| grads.weight[l].iter().chain(&grads.bias[l]));
    match cfg.optimizer {
        Optimizer::Sgd => {
            let g: Vec<f64> = flat_grads.copied().collect();
            for (p, g) in model.params_mut().zip(g) {
                *p -= lr * g;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            state.t += 1;
            let c1 = 1.0 - beta1.powi(state.t);
            let c2 = 1.0 - beta2.powi(state.t);
            let g: Vec<f64> = flat_grads.copied().collect();
            for (k, (p, g)) in model.params_mut().zip(g).enumerate() {
                let m = &mut state.m[k];
                let v = &mut state.v[k];
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

pub fn predict_all(model: &CnnModel, dataset: &WindowedDataset) -> Result<Vec<f64>, CnnError> {
    dataset.windows.iter().map(|w| model.predict(&w.input)).collect()
}

fn labels_of(ds: &WindowedDataset) -> Result<Vec<f64>, CnnError> {
    ds.labels()
        .ok_or_else(|| CnnError::InvalidConfig("dataset is unlabeled".into()))
}

/// Mini-batch training of `model` on `train_set`, with optional per-epoch
/// validation. Sequential and fully determined by `config.seed`.
pub fn train(
    model: &CnnModel,
    train_set: &WindowedDataset,
    val_set: Option<&WindowedDataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome, CnnError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(CnnError::InvalidConfig("empty training set".into()));
    }
    let labels = labels_of(train_set)?;
    let val_labels = val_set.map(labels_of).transpose()?;
    let mut model = model.clone();
    let mut order: Vec<usize> = if config.oversample {
        oversample_indices(&labels, config.seed.wrapping_add(0x0005_EED0))
    } else {
        (0..labels.len()).collect()
    };
    if config.init_output_bias {
        let mean = labels.iter().sum::<f64>() / labels.len() as f64;
        if let Some(last) = model
            .layers
            .iter_mut()
            .rev()
            .find(|l| matches!(l.spec, LayerSpec::Dense { .. }))
        {
            last.bias.fill(mean);
        }
    }
    let n_params = model.parameter_count();
    let mut state = AdamState {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sse = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc = Gradients::zeros_like(&model);
            for &i in batch {
                let (y, trace) = model.forward_train(&train_set.windows[i].input, &mut rng)?;
                let err = y - labels[i];
                if !err.is_finite() {
                    return Err(CnnError::DivergenceDetected {
                        epoch,
                        loss: err * err,
                    });
                }
                sse += err * err;
                let g = model.backward_from(&trace, 2.0 * err)?;
                acc.add_scaled(&g, 1.0 / batch.len() as f64);
            }
            apply_update(&mut model, &acc, config, &mut state);
        }
        let train_rmse = (sse / order.len() as f64).sqrt();
        if !train_rmse.is_finite() {
            return Err(CnnError::DivergenceDetected {
                epoch,
                loss: train_rmse,
            });
        }
        let val_rmse = match (val_set, &val_labels) {
            (Some(v), Some(vl)) if !v.is_empty() => {
                let p = predict_all(&model, v)?;
                let r = rmse(&p, vl).map_err(|e| CnnError::InvalidConfig(e.to_string()))?;
                if !r.is_finite() {
                    return Err(CnnError::DivergenceDetected { epoch, loss: r });
                }
                Some(r)
            }
            _ => None,
        };
        history.push(EpochLoss {
            epoch,
            train_rmse,
            val_rmse,
        });
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::Layer;
    use crate::dsp::{Window, WindowNorm};

    fn scalar_dataset(xs: &[f64], f: impl Fn(f64) -> f64) -> WindowedDataset {
        WindowedDataset {
            fps: 1.0,
            window_len: 1,
            stride: 1,
            windows: xs
                .iter()
                .enumerate()
                .map(|(i, &x)| Window {
                    start: i,
                    end: i + 1,
                    streams: vec![x],
                    input: vec![x],
                    norm: WindowNorm {
                        raw_mean: [0.0; 3],
                        dc_mean: [0.0; 3],
                    },
                    label: Some(f(x)),
                })
                .collect(),
        }
    }

    fn linear_model() -> CnnModel {
        CnnModel {
            input_shape: (1, 1),
            layers: vec![Layer {
                spec: LayerSpec::Dense { in_dim: 1, out_dim: 1 },
                weight: vec![0.0],
                bias: vec![0.0],
            }],
            rng_seed: 0,
        }
    }

    #[test]
    fn metrics_by_hand() {
        assert_eq!(rmse(&[1.0, 1.0], &[0.0, 2.0]), Ok(1.0));
        assert_eq!(mae(&[1.0, 1.0], &[0.0, 2.0]), Ok(1.0));
        assert_eq!(rmse(&[3.0], &[3.0]), Ok(0.0));
        assert_eq!(rmse(&[], &[]), Err(MetricError::Empty));
        assert_eq!(mae(&[1.0], &[]), Err(MetricError::LengthMismatch(1, 0)));
    }

    #[test]
    fn oversampling_fills_bins() {
        let mut labels = vec![90.2; 10];
        labels.extend([95.5, 95.9]);
        let idx = oversample_indices(&labels, 7);
        assert_eq!(idx.len(), 20);
        assert_eq!(&idx[..10], &(0..10).collect::<Vec<_>>()[..]);
        assert!(idx[10..].iter().all(|&i| i == 10 || i == 11));
        assert_eq!(&idx[10..12], &[10, 11]);
        let balanced = [90.0, 91.0, 92.0];
        assert_eq!(oversample_indices(&balanced, 1), vec![0, 1, 2]);
    }

    #[test]
    fn oversampling_is_seeded() {
        let mut labels: Vec<f64> = vec![97.0; 50];
        labels.extend(vec![88.0; 3]);
        let a = oversample_indices(&labels, 1);
        assert_eq!(a, oversample_indices(&labels, 1));
        assert_ne!(a, oversample_indices(&labels, 2));
    }

    #[test]
    fn fits_a_line() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 10.0 - 1.0).collect();
        let ds = scalar_dataset(&xs, |x| 3.0 * x + 2.0);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 1,
            learning_rate: 0.01,
            optimizer: Optimizer::Sgd,
            oversample: false,
            init_output_bias: false,
            ..TrainConfig::default()
        };
        let out = train(&linear_model(), &ds, None, &cfg).unwrap();
        assert!(out.history.last().unwrap().train_rmse.powi(2) <= 1e-3);
        let p = predict_all(&out.model, &ds).unwrap();
        assert!(rmse(&p, &ds.labels().unwrap()).unwrap().powi(2) <= 1e-3);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let ds = scalar_dataset(&xs, |x| 3.0 * x + 2.0);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 1,
            learning_rate: 1e6,
            optimizer: Optimizer::Sgd,
            oversample: false,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&linear_model(), &ds, None, &cfg),
            Err(CnnError::DivergenceDetected { .. })
        ));
    }

    #[test]
    fn loss_csv_layout() {
        let h = [
            EpochLoss {
                epoch: 1,
                train_rmse: 2.5,
                val_rmse: Some(3.0),
            },
            EpochLoss {
                epoch: 2,
                train_rmse: 1.0,
                val_rmse: None,
            },
        ];
        assert_eq!(write_loss_csv(&h), "epoch,train_rmse,val_rmse\n1,2.5,3.0\n2,1.0,\n");
    }
}
