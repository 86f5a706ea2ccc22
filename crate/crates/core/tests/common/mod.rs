//! Helpers shared by the integration tests.
#![allow(dead_code)]

use veritas_core::features::{FeatureSequence, Modality, PaddedBatch};
use veritas_core::layers::{
    bilstm, bind_dense, dense_stack_graph, dot_attention_graph, residual_layer_norm_graph,
    simple_attention_graph, BiLstmParams, BiLstmVars, DenseParams,
};
use veritas_core::models::{
    attach_lora_branch, build_cross_attention, build_unimodal, unimodal_clip_graph, AttentionKind,
    CrossArch, ModelConfig, Profile, StreamSpec,
};
use veritas_core::numeric::{
    compute_gradients, finite_diff_gradient, max_relative_error, Graph, ParameterStore, Tensor, Var,
};
use veritas_core::rng::Rng;
use veritas_core::training::{CrossObjective, Objective};
use veritas_core::Result;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-3;
/// Denominator floor for the relative error of near-zero gradients.
pub const FD_FLOOR: f64 = 1e-6;

pub fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

/// Weighted sum of every entry of `v` with fixed random weights.
pub fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let (r, c) = (g.value(v).rows(), g.value(v).cols());
    let mut rng = Rng::new(seed ^ 0x5EED);
    let w = g.constant(random_tensor(&mut rng, r, c))?;
    let prod = g.mul(v, w)?;
    let ones_c = g.constant(Tensor::filled(&[c, 1], 1.0))?;
    let col = g.matmul(prod, ones_c)?;
    let row = g.transpose(col)?;
    let ones_r = g.constant(Tensor::filled(&[r, 1], 1.0))?;
    g.matmul(row, ones_r)
}

/// Max relative error between reverse-mode and central-difference
/// gradients of the scalar built by `build`.
pub fn gradient_error<F>(store: &ParameterStore, build: F) -> f64
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store).unwrap();
    let exact = compute_gradients(&g, loss, store).unwrap();
    let numeric = finite_diff_gradient(
        |s| {
            let mut g = Graph::new();
            let l = build(&mut g, s)?;
            Ok(g.value(l).data()[0])
        },
        store,
        FD_EPS,
    )
    .unwrap();
    max_relative_error(&exact, &numeric, FD_FLOOR).unwrap()
}

fn keep_mask(n: usize, valid: usize) -> Vec<bool> {
    (0..n).map(|t| t < valid).collect()
}

/// Gradient error of every layer for one seed, inputs included.
pub fn layer_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();

    let (t, d, h) = (5, 3, 4);
    let mut s = ParameterStore::new();
    s.insert("x", random_tensor(&mut rng, t, d)).unwrap();
    BiLstmParams::init(&mut rng, d, h)
        .register(&mut s, "l")
        .unwrap();
    out.push((
        "bilstm",
        gradient_error(&s, |g, s| {
            let x = g.param(s, "x")?;
            let p = BiLstmVars::bind(g, s, "l")?;
            let y = bilstm(g, x, &p)?;
            weighted_sum(g, y, seed)
        }),
    ));

    let (n, dm) = (6, 4);
    let mut s = ParameterStore::new();
    s.insert("v", random_tensor(&mut rng, n, dm)).unwrap();
    s.insert("w", random_tensor(&mut rng, dm, 1)).unwrap();
    s.insert("b", random_tensor(&mut rng, n, 1)).unwrap();
    for (name, valid) in [("simple_attention", n), ("simple_attention_masked", n - 2)] {
        let keep = keep_mask(n, valid);
        out.push((
            name,
            gradient_error(&s, |g, s| {
                let (v, w, b) = (g.param(s, "v")?, g.param(s, "w")?, g.param(s, "b")?);
                let (c, alpha) =
                    simple_attention_graph(g, v, w, b, (valid < n).then_some(&keep[..]))?;
                let lc = weighted_sum(g, c, seed)?;
                let la = weighted_sum(g, alpha, seed + 1)?;
                g.add(lc, la)
            }),
        ));
    }

    let (nq, nk, dk) = (3, 5, 4);
    let mut s = ParameterStore::new();
    s.insert("q", random_tensor(&mut rng, nq, dk)).unwrap();
    s.insert("k", random_tensor(&mut rng, nk, dk)).unwrap();
    s.insert("v", random_tensor(&mut rng, nk, dk)).unwrap();
    for (name, valid) in [("dot_attention", nk), ("dot_attention_masked", nk - 2)] {
        let keep = keep_mask(nk, valid);
        out.push((
            name,
            gradient_error(&s, |g, s| {
                let (q, k, v) = (g.param(s, "q")?, g.param(s, "k")?, g.param(s, "v")?);
                let (o, scores) =
                    dot_attention_graph(g, q, k, v, (valid < nk).then_some(&keep[..]))?;
                let lo = weighted_sum(g, o, seed)?;
                let ls = weighted_sum(g, scores, seed + 1)?;
                g.add(lo, ls)
            }),
        ));
    }

    let mut s = ParameterStore::new();
    s.insert("x", random_tensor(&mut rng, 6, 4)).unwrap();
    for (name, rows) in [("max_pool", None), ("max_pool_masked", Some(4))] {
        out.push((
            name,
            gradient_error(&s, |g, s| {
                let x = g.param(s, "x")?;
                let p = g.max_rows(x, rows)?;
                weighted_sum(g, p, seed)
            }),
        ));
    }

    let mut s = ParameterStore::new();
    s.insert("x", random_tensor(&mut rng, 3, 5)).unwrap();
    s.insert("sub", random_tensor(&mut rng, 3, 5)).unwrap();
    s.insert("gain", random_tensor(&mut rng, 1, 5)).unwrap();
    s.insert("shift", random_tensor(&mut rng, 1, 5)).unwrap();
    out.push((
        "residual_layer_norm",
        gradient_error(&s, |g, s| {
            let (x, sub) = (g.param(s, "x")?, g.param(s, "sub")?);
            let (gain, shift) = (g.param(s, "gain")?, g.param(s, "shift")?);
            let y = residual_layer_norm_graph(g, x, sub, gain, shift)?;
            weighted_sum(g, y, seed)
        }),
    ));

    let mut s = ParameterStore::new();
    s.insert("x", random_tensor(&mut rng, 1, 6)).unwrap();
    let widths = [5, 4];
    DenseParams::init(&mut rng, 6, &widths)
        .unwrap()
        .register(&mut s, "dense")
        .unwrap();
    randomize_biases(&mut s, &mut rng);
    let label = (seed % 2) as usize;
    out.push((
        "dense_softmax_nll",
        gradient_error(&s, |g, s| {
            let x = g.param(s, "x")?;
            let layers = bind_dense(g, s, "dense", widths.len() + 1)?;
            let p = dense_stack_graph(g, x, &layers, true)?;
            g.nll(p, label)
        }),
    ));
    out
}

pub fn tiny_model(attention: AttentionKind, mask: bool) -> ModelConfig {
    ModelConfig {
        modality: Modality::Visual,
        bilstm_widths: vec![3, 2],
        dense_widths: vec![4, 3],
        attention,
        mask,
        profile: Profile::Trial,
    }
}

/// Replaces every tensor whose name contains `needle` with random values.
pub fn randomize(store: &mut ParameterStore, needle: &str, rng: &mut Rng) {
    randomize_where(store, |n| n.contains(needle), rng);
}

/// Zero-initialized dense biases put a ReLU exactly on its kink whenever
/// the layer below is fully inactive; random biases keep the check at a
/// differentiable point.
pub fn randomize_biases(store: &mut ParameterStore, rng: &mut Rng) {
    randomize_where(store, |n| n.ends_with(".b"), rng);
}

fn randomize_where(store: &mut ParameterStore, keep: impl Fn(&str) -> bool, rng: &mut Rng) {
    let names: Vec<String> = store
        .names()
        .filter(|n| keep(n))
        .map(str::to_owned)
        .collect();
    for name in names {
        let shape = store.tensor(&name).unwrap().shape().to_vec();
        let t = random_tensor(rng, shape[0], shape[1]);
        store.set_tensor(&name, t).unwrap();
    }
}

pub fn single_batch(modality: Modality, data: Tensor, valid: usize, label: usize) -> PaddedBatch {
    let mut seq = FeatureSequence::new(modality, data).unwrap();
    seq.valid_length = valid;
    let mut batch = veritas_core::features::pad_and_mask(&[seq], None).unwrap();
    batch.labels = vec![label];
    batch.clip_ids = vec!["clip".into()];
    batch
}

/// Gradient error of the full unimodal, calibrated and cross-attention
/// models for one seed.
pub fn model_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed ^ 0xC0FFEE);
    let (t, d) = (5, 3);
    let clip = random_tensor(&mut rng, t, d);
    let label = (seed % 2) as usize;
    let mut out = Vec::new();

    let cases = [
        ("unimodal_simple", AttentionKind::Simple, false),
        ("unimodal_simple_masked", AttentionKind::Simple, true),
        ("unimodal_dot", AttentionKind::DotProduct, false),
        ("unimodal_dot_masked", AttentionKind::DotProduct, true),
    ];
    for (name, attention, mask) in cases {
        let mut store = build_unimodal(&tiny_model(attention, mask), d, t, seed).unwrap();
        randomize_biases(&mut store, &mut rng);
        let clip = clip.clone();
        out.push((
            name,
            gradient_error(&store, move |g, s| {
                let o = unimodal_clip_graph(g, s, &clip, t - 1)?;
                g.nll(o.probs, label)
            }),
        ));
    }

    let mut base =
        build_unimodal(&tiny_model(AttentionKind::DotProduct, true), d, t, seed).unwrap();
    randomize_biases(&mut base, &mut rng);
    let mut calibrated = attach_lora_branch(&base, 2, seed).unwrap();
    randomize(&mut calibrated, "branch.td", &mut rng);
    let c = clip.clone();
    out.push((
        "calibrated_branch",
        gradient_error(&calibrated, move |g, s| {
            let o = unimodal_clip_graph(g, s, &c, t - 1)?;
            g.nll(o.probs, label)
        }),
    ));

    for (name, mask) in [("cross_attention", false), ("cross_attention_masked", true)] {
        let stream = |input_dim, max_len, widths: &[usize]| StreamSpec {
            input_dim,
            max_len,
            bilstm_widths: widths.to_vec(),
        };
        let arch = CrossArch {
            profile: Profile::Trial,
            visual: stream(3, 4, &[3, 2]),
            audio: stream(2, 5, &[2]),
            text: stream(3, 3, &[2]),
            dense_widths: vec![4, 3],
            mask,
        };
        let mut store = build_cross_attention(&arch, seed).unwrap();
        randomize(&mut store, "ln_", &mut rng);
        randomize_biases(&mut store, &mut rng);
        let v = single_batch(Modality::Visual, random_tensor(&mut rng, 4, 3), 3, label);
        let a = single_batch(Modality::Audio, random_tensor(&mut rng, 5, 2), 4, label);
        let tx = single_batch(Modality::Text, random_tensor(&mut rng, 3, 3), 2, label);
        let obj = CrossObjective::new(&v, &a, &tx).unwrap();
        out.push((
            name,
            gradient_error(&store, |g, s| {
                let p = obj.probs(g, s, 0)?;
                g.nll(p, label)
            }),
        ));
    }
    out
}

/// Straightforward MFCC reference: naive DFT per frame, explicit mel
/// triangles and a textbook orthonormal DCT-II. Settings are fixed at
/// 25 ms frames, 10 ms hop, 26 filters and pre-emphasis 0.97.
pub fn reference_mfcc(samples: &[f64], sample_rate: f64, n_mfcc: usize) -> Vec<Vec<f64>> {
    use std::f64::consts::PI;
    let frame_len = (0.025 * sample_rate).round() as usize;
    let hop = (0.010 * sample_rate).round() as usize;
    let mut n_fft = 1;
    while n_fft < frame_len {
        n_fft *= 2;
    }
    let n_mels = 26;

    let mut emph = vec![samples[0]];
    for i in 1..samples.len() {
        emph.push(samples[i] - 0.97 * samples[i - 1]);
    }

    let mel = |hz: f64| 2595.0 * (1.0 + hz / 700.0).log10();
    let inv_mel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(sample_rate / 2.0);
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| inv_mel(i as f64 * top / (n_mels + 1) as f64))
        .collect();
    let triangle = |m: usize, f: f64| {
        let (a, b, c) = (centers[m], centers[m + 1], centers[m + 2]);
        if f > a && f <= b {
            (f - a) / (b - a)
        } else if f > b && f < c {
            (c - f) / (c - b)
        } else {
            0.0
        }
    };

    let mut frames = Vec::new();
    let mut start = 0;
    while start + frame_len <= samples.len() {
        let windowed: Vec<f64> = (0..frame_len)
            .map(|n| {
                emph[start + n]
                    * (0.5 - 0.5 * (2.0 * PI * n as f64 / (frame_len as f64 - 1.0)).cos())
            })
            .collect();
        let power: Vec<f64> = (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, x) in windowed.iter().enumerate() {
                    let phase = -2.0 * PI * (k * n % n_fft) as f64 / n_fft as f64;
                    re += x * phase.cos();
                    im += x * phase.sin();
                }
                (re * re + im * im) / n_fft as f64
            })
            .collect();
        let log_mel: Vec<f64> = (0..n_mels)
            .map(|m| {
                let e: f64 = power
                    .iter()
                    .enumerate()
                    .map(|(k, p)| triangle(m, k as f64 * sample_rate / n_fft as f64) * p)
                    .sum();
                e.max(1e-10).ln()
            })
            .collect();
        let coeffs = (0..n_mfcc)
            .map(|k| {
                let norm = if k == 0 {
                    (1.0 / n_mels as f64).sqrt()
                } else {
                    (2.0 / n_mels as f64).sqrt()
                };
                norm * log_mel
                    .iter()
                    .enumerate()
                    .map(|(m, e)| {
                        e * (PI * k as f64 * (2 * m + 1) as f64 / (2 * n_mels) as f64).cos()
                    })
                    .sum::<f64>()
            })
            .collect();
        frames.push(coeffs);
        start += hop;
    }
    frames
}

pub fn tone(freq: f64, sample_rate: f64, seconds: f64, amplitude: f64) -> Vec<f64> {
    let n = (sample_rate * seconds).round() as usize;
    (0..n)
        .map(|i| amplitude * (2.0 * std::f64::consts::PI * freq * i as f64 / sample_rate).sin())
        .collect()
}

/// Largest absolute difference between the library MFCC of `samples` and
/// [`reference_mfcc`].
pub fn mfcc_max_deviation(samples: &[f64], sample_rate: u32) -> f64 {
    let ours =
        veritas_core::features::compute_mfcc(samples, sample_rate, &Default::default()).unwrap();
    let reference = reference_mfcc(samples, sample_rate as f64, 13);
    assert_eq!(ours.rows(), reference.len());
    let mut worst: f64 = 0.0;
    for (r, row) in reference.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((ours.get(r, c) - v).abs());
        }
    }
    worst
}
