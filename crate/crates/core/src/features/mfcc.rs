//! MFCC extraction: pre-emphasis, framing, Hann window, power spectrum,
//! triangular mel filterbank, log, orthonormal DCT-II.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FeatureSequence, Modality};
use crate::error::{shape_err, Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub n_mfcc: usize,
    pub frame_seconds: f64,
    pub hop_seconds: f64,
    pub n_mels: usize,
    pub pre_emphasis: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_mfcc: 13,
            frame_seconds: 0.025,
            hop_seconds: 0.010,
            n_mels: 26,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `n_mels x (n_fft / 2 + 1)` triangular filters spanning 0 Hz to Nyquist,
/// evaluated at the exact bin frequencies.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II basis, `n_out x n_in`.
fn dct_matrix(n_out: usize, n_in: usize) -> Vec<Vec<f64>> {
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n_in as f64).sqrt()
            } else {
                (2.0 / n_in as f64).sqrt()
            };
            (0..n_in)
                .map(|m| {
                    scale * (std::f64::consts::PI * k as f64 * (m as f64 + 0.5) / n_in as f64).cos()
                })
                .collect()
        })
        .collect()
}

/// `frames x n_mfcc` coefficients with
/// `frames = floor((len - frame_len) / hop) + 1`.
pub fn compute_mfcc(samples: &[f64], sample_rate: u32, config: &MfccConfig) -> Result<Tensor> {
    if sample_rate == 0 {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    if config.n_mfcc == 0 || config.n_mfcc > config.n_mels {
        return Err(Error::Config(format!(
            "n_mfcc must be in 1..={}, got {}",
            config.n_mels, config.n_mfcc
        )));
    }
    let sr = sample_rate as f64;
    let frame_len = (config.frame_seconds * sr).round() as usize;
    let hop = (config.hop_seconds * sr).round() as usize;
    if frame_len < 2 || hop == 0 {
        return Err(Error::Config(
            "frame and hop must span at least one sample".into(),
        ));
    }
    if samples.len() < frame_len {
        return Err(shape_err!(
            "waveform of {} samples is shorter than one {frame_len}-sample frame",
            samples.len()
        ));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "waveform contains non-finite samples".into(),
        ));
    }

    let emphasized: Vec<f64> = std::iter::once(samples[0])
        .chain(
            samples
                .windows(2)
                .map(|w| w[1] - config.pre_emphasis * w[0]),
        )
        .collect();

    let n_fft = frame_len.next_power_of_two();
    let window: Vec<f64> = (0..frame_len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (frame_len - 1) as f64).cos())
        .collect();
    let filters = mel_filterbank(config.n_mels, n_fft, sr);
    let dct = dct_matrix(config.n_mfcc, config.n_mels);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let frames = (samples.len() - frame_len) / hop + 1;
    let mut out = Vec::with_capacity(frames * config.n_mfcc);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut log_energy = vec![0.0; config.n_mels];
    for f in 0..frames {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < frame_len {
                emphasized[start + i] * window[i]
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_fft / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr() / n_fft as f64)
            .collect();
        for (e, filt) in log_energy.iter_mut().zip(&filters) {
            let energy: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            *e = energy.max(config.log_floor).ln();
        }
        for basis in &dct {
            out.push(basis.iter().zip(&log_energy).map(|(b, e)| b * e).sum());
        }
    }
    Tensor::new(vec![frames, config.n_mfcc], out)
}

/// Averages consecutive windows of `round(t / hop)` MFCC frames; a final
/// partial window is averaged over the frames it has.
pub fn mean_pool_audio(mfcc: &Tensor, hop_seconds: f64, t_seconds: f64) -> Result<FeatureSequence> {
    if mfcc.is_empty() || !mfcc.is_matrix() {
        return Err(shape_err!("empty MFCC matrix"));
    }
    if !(hop_seconds > 0.0) || t_seconds < hop_seconds {
        return Err(Error::Config(format!(
            "pooling window {t_seconds}s must be at least the hop {hop_seconds}s"
        )));
    }
    let window = (t_seconds / hop_seconds).round() as usize;
    let cols = mfcc.cols();
    let mut out = Vec::new();
    let mut start = 0;
    while start < mfcc.rows() {
        let end = (start + window).min(mfcc.rows());
        let n = (end - start) as f64;
        for c in 0..cols {
            out.push((start..end).map(|r| mfcc.get(r, c)).sum::<f64>() / n);
        }
        start = end;
    }
    let rows = out.len() / cols;
    let mut seq = FeatureSequence::new(Modality::Audio, Tensor::new(vec![rows, cols], out)?)?;
    seq.step_seconds = t_seconds;
    Ok(seq)
}

/// Reads a 16-bit PCM mono WAV file as samples in `[-1, 1)`.
pub fn read_wav_mono(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Data(format!(
            "{}: expected 16-bit PCM mono, got {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    Ok((samples, spec.sample_rate))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}
