//! Oracles and generators shared by the integration tests. Nothing here
//! calls into the code under test's internals; each oracle is an
//! independent formulation.
#![allow(dead_code)]

use num::{BigInt, BigRational};
use oxipipe_core::cnn::{CnnModel, LayerSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

/// Exhaustive Otsu: between-class variance `w0 w1 (mu0 - mu1)^2` in exact
/// rationals for every threshold; first maximiser wins. `None` when no
/// threshold leaves both classes non-empty.
pub fn otsu_oracle(h: &[u64; 256]) -> Option<u8> {
    let total: u64 = h.iter().sum();
    let big = |v: u64| BigRational::from_integer(BigInt::from(v));
    let n = big(total);
    let mut best: Option<(u8, BigRational)> = None;
    for t in 0..=255usize {
        let (mut n0, mut s0, mut n1, mut s1) = (0u64, 0u64, 0u64, 0u64);
        for (v, &c) in h.iter().enumerate() {
            if v <= t {
                n0 += c;
                s0 += c * v as u64;
            } else {
                n1 += c;
                s1 += c * v as u64;
            }
        }
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let w0 = big(n0) / &n;
        let w1 = big(n1) / &n;
        let d = big(s0) / big(n0) - big(s1) / big(n1);
        let var = w0 * w1 * &d * &d;
        if best.as_ref().is_none_or(|(_, b)| var > *b) {
            best = Some((t as u8, var));
        }
    }
    best.map(|(t, _)| t)
}

/// Single-sided amplitude of the DFT bin nearest `freq` over `x`.
pub fn fft_amplitude(x: &[f64], fs: f64, freq: f64) -> f64 {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let k = (freq * n as f64 / fs).round() as usize;
    let scale = if k == 0 { 1.0 } else { 2.0 };
    buf[k].norm() * scale / n as f64
}

/// Random small model touching every layer kind, with non-zero biases.
pub fn random_model(rng: &mut ChaCha8Rng) -> (CnnModel, Vec<f64>) {
    let channels = rng.random_range(1..=4);
    let len = rng.random_range(24..=48);
    let mut specs = Vec::new();
    let mut shape = (channels, len);
    let push = |specs: &mut Vec<LayerSpec>, shape: &mut (usize, usize), s: LayerSpec| {
        *shape = s.output_shape(*shape).expect("generator builds valid stacks");
        specs.push(s);
    };
    for _ in 0..rng.random_range(1..=2) {
        let k = rng.random_range(2..=5).min(shape.1);
        let stride = rng.random_range(1..=2);
        let conv = LayerSpec::Conv1d {
            in_channels: shape.0,
            out_filters: rng.random_range(2..=4),
            filter_length: k,
            stride,
        };
        push(&mut specs, &mut shape, conv);
        push(&mut specs, &mut shape, LayerSpec::Relu);
        if shape.1 >= 4 {
            push(&mut specs, &mut shape, LayerSpec::Maxpool1d { pool_len: 2 });
        }
    }
    push(&mut specs, &mut shape, LayerSpec::Dropout { rate: 0.25 });
    push(&mut specs, &mut shape, LayerSpec::Flatten);
    let hidden = rng.random_range(3..=6);
    let flat = shape.0;
    push(
        &mut specs,
        &mut shape,
        LayerSpec::Dense {
            in_dim: flat,
            out_dim: hidden,
        },
    );
    push(&mut specs, &mut shape, LayerSpec::Relu);
    push(
        &mut specs,
        &mut shape,
        LayerSpec::Dense {
            in_dim: hidden,
            out_dim: 1,
        },
    );
    let mut model = CnnModel::new((channels, len), specs, rng.random()).unwrap();
    for l in &mut model.layers {
        for b in &mut l.bias {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let input = (0..channels * len).map(|_| rng.random_range(-1.0..1.0)).collect();
    (model, input)
}

/// Loss `(y - label)^2` of a training-mode pass with a replayable dropout mask.
pub fn train_loss(model: &CnnModel, input: &[f64], label: f64, mask_seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
    let (y, _) = model.forward_train(input, &mut r).unwrap();
    (y - label) * (y - label)
}

/// Per parametric layer: `||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12)`,
/// numeric by central differences with step `h`.
pub fn gradient_errors(model: &CnnModel, input: &[f64], label: f64, mask_seed: u64, h: f64) -> Vec<(usize, f64)> {
    let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
    let (_, trace) = model.forward_train(input, &mut r).unwrap();
    let g = model.backward(&trace, label).unwrap();
    let mut out = Vec::new();
    for l in 0..model.layers.len() {
        if model.layers[l].weight.is_empty() {
            continue;
        }
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for which in 0..2 {
            let n = if which == 0 {
                model.layers[l].weight.len()
            } else {
                model.layers[l].bias.len()
            };
            for i in 0..n {
                let mut plus = model.clone();
                let mut minus = model.clone();
                if which == 0 {
                    plus.layers[l].weight[i] += h;
                    minus.layers[l].weight[i] -= h;
                } else {
                    plus.layers[l].bias[i] += h;
                    minus.layers[l].bias[i] -= h;
                }
                let num = (train_loss(&plus, input, label, mask_seed) - train_loss(&minus, input, label, mask_seed))
                    / (2.0 * h);
                let ana = if which == 0 { g.weight[l][i] } else { g.bias[l][i] };
                diff += (ana - num) * (ana - num);
                na += ana * ana;
                nn += num * num;
            }
        }
        out.push((l, diff.sqrt() / (na.sqrt() + nn.sqrt()).max(1e-12)));
    }
    out
}

/// Random histogram from one of several shapes, including tie-prone ones.
pub fn random_histogram(rng: &mut ChaCha8Rng) -> [u64; 256] {
    let mut h = [0u64; 256];
    match rng.random_range(0..4) {
        // Sparse, few levels, often tied scores.
        0 => {
            for _ in 0..rng.random_range(2..=4) {
                h[rng.random_range(0..256)] += rng.random_range(1..=5);
            }
        }
        // Symmetric pairs: mirrored histograms give exact ties.
        1 => {
            let a = rng.random_range(0..128);
            let c = rng.random_range(1..50);
            h[a] = c;
            h[255 - a] = c;
            if rng.random_bool(0.5) {
                h[127] += 2 * rng.random_range(0..3);
            }
        }
        // Bimodal image-like.
        2 => {
            let (m0, m1) = (rng.random_range(10..100), rng.random_range(130..240));
            for _ in 0..rng.random_range(100..3000) {
                let m = if rng.random_bool(0.4) { m0 } else { m1 };
                let v = (m as i64 + rng.random_range(-12..=12)).clamp(0, 255);
                h[v as usize] += 1;
            }
        }
        // Dense uniform counts.
        _ => {
            for b in h.iter_mut() {
                *b = rng.random_range(0..20);
            }
        }
    }
    h
}
