//! Seeded synthetic datasets with a controllable class signal.
//!
//! Every step of a clip is `class_mean + speaker_offset + noise`, where the
//! class mean is `+delta/2` (deceptive) or `-delta/2` (truthful) along a
//! fixed random unit direction per modality and the noise is white with
//! standard deviation `noise`. Values are rounded to 6 decimals so the CSV
//! files reproduce them exactly.
//!
//! The individual-cluster variant gives every speaker a large random
//! offset and, for the held-out ("shifted") speakers, rotates the class
//! direction by `shift_degrees` towards a speaker-specific orthogonal
//! direction. A model trained on the other speakers then fails on them
//! while their own clips stay separable.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{write_dataset, ClipRecord, FeatureSequence, Label, Modality};
use crate::numeric::Tensor;
use crate::rng::Rng;

pub const INFO_FILE: &str = "synth_info.json";

const DIRECTION_STREAM: u64 = 1;
const SPEAKER_STREAM: u64 = 2;
const LENGTH_STREAM: u64 = 3;
const CLIP_STREAM_BASE: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthConfig {
    pub clips_per_class: usize,
    /// Feature width of every generated modality.
    pub modalities: Vec<(Modality, usize)>,
    /// Inclusive range of visual/audio steps; text gets one step per 5.
    pub min_len: usize,
    pub max_len: usize,
    pub delta: f64,
    pub speaker_offset: f64,
    pub noise: f64,
    pub speakers: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clips_per_class: 100,
            modalities: vec![
                (Modality::Visual, 128),
                (Modality::Audio, 13),
                (Modality::Text, 100),
            ],
            min_len: 50,
            max_len: 250,
            delta: 4.0,
            speaker_offset: 0.0,
            noise: 1.0,
            speakers: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !(self.noise >= 0.0) || !(self.speaker_offset >= 0.0) {
            return Err(Error::Config(
                "delta, noise and speaker offset must be non-negative".into(),
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "length range {}..={} is invalid",
                self.min_len, self.max_len
            )));
        }
        if self.modalities.is_empty() || self.modalities.iter().any(|&(_, d)| d == 0) {
            return Err(Error::Config(
                "at least one modality with a positive width is required".into(),
            ));
        }
        if self.speakers == 0 || self.clips_per_class == 0 {
            return Err(Error::Config(
                "speaker and clip counts must be positive".into(),
            ));
        }
        Ok(())
    }

    fn steps(&self, modality: Modality, len: usize) -> usize {
        match modality {
            Modality::Text => (len / 5).max(1),
            _ => len,
        }
    }
}

/// Settings for the individual-cluster dataset on top of [`SynthConfig`]
/// (whose `speakers` and `clips_per_class` are ignored there).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterConfig {
    pub train_speakers: usize,
    pub held_out_speakers: usize,
    /// Clips per label for every speaker.
    pub clips_per_label: usize,
    pub shift_degrees: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            train_speakers: 12,
            held_out_speakers: 6,
            clips_per_label: 8,
            shift_degrees: 180.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub records: Vec<ClipRecord>,
    pub held_out_speakers: Vec<String>,
}

#[derive(Serialize)]
struct SynthInfo<'a> {
    synthetic: bool,
    description: &'static str,
    config: &'a SynthConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    clusters: Option<&'a ClusterConfig>,
    held_out_speakers: &'a [String],
}

impl SynthDataset {
    /// Writes the manifest, feature CSVs and a JSON description of how the
    /// data were generated. Returns the manifest path.
    pub fn write(
        &self,
        dir: &Path,
        config: &SynthConfig,
        clusters: Option<&ClusterConfig>,
    ) -> Result<PathBuf> {
        let manifest = write_dataset(&self.records, dir)?;
        let info = SynthInfo {
            synthetic: true,
            description: if clusters.is_some() {
                "synthetic individual clusters: per-speaker offsets, held-out speakers use a rotated class direction"
            } else {
                "synthetic separable dataset: class means +-delta/2 along a fixed direction plus white noise"
            },
            config,
            clusters,
            held_out_speakers: &self.held_out_speakers,
        };
        let path = dir.join(INFO_FILE);
        let text = serde_json::to_string_pretty(&info).expect("info serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

fn quantize(v: f64) -> f64 {
    let q = (v * 1e6).round() / 1e6;
    // avoid a negative zero in the CSV
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

/// Unit vector orthogonal to `u`.
fn orthogonal_unit(rng: &mut Rng, u: &[f64]) -> Vec<f64> {
    loop {
        let mut w = rng.unit_vector(u.len());
        let dot: f64 = w.iter().zip(u).map(|(a, b)| a * b).sum();
        for (wi, ui) in w.iter_mut().zip(u) {
            *wi -= dot * ui;
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return w.into_iter().map(|v| v / norm).collect();
        }
    }
}

struct Speaker {
    id: String,
    /// Per modality: offset vector and class direction.
    modalities: Vec<(Vec<f64>, Vec<f64>)>,
}

fn clip(
    config: &SynthConfig,
    index: usize,
    label: Label,
    speaker: &Speaker,
    len: usize,
) -> Result<ClipRecord> {
    let mut rng = Rng::derived(config.seed, CLIP_STREAM_BASE + index as u64);
    let sign = match label {
        Label::Deceptive => 0.5,
        Label::Truthful => -0.5,
    };
    let mut features = Vec::with_capacity(config.modalities.len());
    for (&(modality, dim), (offset, direction)) in config.modalities.iter().zip(&speaker.modalities)
    {
        let steps = config.steps(modality, len);
        let mean: Vec<f64> = (0..dim)
            .map(|j| sign * config.delta * direction[j] + offset[j])
            .collect();
        let mut data = Vec::with_capacity(steps * dim);
        for _ in 0..steps {
            for m in &mean {
                data.push(quantize(m + config.noise * rng.normal()));
            }
        }
        features.push(FeatureSequence::new(
            modality,
            Tensor::new(vec![steps, dim], data)?,
        )?);
    }
    Ok(ClipRecord {
        clip_id: format!("clip{index:05}"),
        speaker_id: speaker.id.clone(),
        label,
        features,
    })
}

fn base_directions(config: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = Rng::derived(config.seed, DIRECTION_STREAM);
    config
        .modalities
        .iter()
        .map(|&(_, d)| rng.unit_vector(d))
        .collect()
}

fn lengths(config: &SynthConfig, n: usize) -> Vec<usize> {
    let mut rng = Rng::derived(config.seed, LENGTH_STREAM);
    let span = config.max_len - config.min_len + 1;
    (0..n).map(|_| config.min_len + rng.index(span)).collect()
}

/// Balanced dataset: `clips_per_class` clips of each label with labels
/// alternating and speakers assigned to label pairs in turn.
pub fn generate_base_dataset(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let directions = base_directions(config);
    let mut rng = Rng::derived(config.seed, SPEAKER_STREAM);
    let speakers: Vec<Speaker> = (0..config.speakers)
        .map(|s| Speaker {
            id: format!("spk{s:03}"),
            modalities: config
                .modalities
                .iter()
                .zip(&directions)
                .map(|(&(_, d), u)| {
                    let offset = rng
                        .unit_vector(d)
                        .into_iter()
                        .map(|v| v * config.speaker_offset)
                        .collect();
                    (offset, u.clone())
                })
                .collect(),
        })
        .collect();
    let n = 2 * config.clips_per_class;
    let lens = lengths(config, n);
    let records = (0..n)
        .map(|i| {
            let label = if i % 2 == 0 {
                Label::Deceptive
            } else {
                Label::Truthful
            };
            clip(
                config,
                i,
                label,
                &speakers[(i / 2) % config.speakers],
                lens[i],
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        records,
        held_out_speakers: Vec::new(),
    })
}

/// Speakers `spk000..` follow the shared class direction; held-out
/// speakers `heldout000..` use a direction rotated by `shift_degrees`.
pub fn generate_individual_clusters(
    config: &SynthConfig,
    clusters: &ClusterConfig,
) -> Result<SynthDataset> {
    config.validate()?;
    if clusters.held_out_speakers == 0 {
        return Err(Error::Config(
            "at least one held-out speaker is required".into(),
        ));
    }
    if clusters.clips_per_label < 5 {
        return Err(Error::Config(format!(
            "held-out speakers need at least 5 clips per label, got {}",
            clusters.clips_per_label
        )));
    }
    let directions = base_directions(config);
    let theta = clusters.shift_degrees.to_radians();
    let mut rng = Rng::derived(config.seed, SPEAKER_STREAM);
    let total = clusters.train_speakers + clusters.held_out_speakers;
    let mut speakers = Vec::with_capacity(total);
    for s in 0..total {
        let held_out = s >= clusters.train_speakers;
        let id = if held_out {
            format!("heldout{:03}", s - clusters.train_speakers)
        } else {
            format!("spk{s:03}")
        };
        let modalities = config
            .modalities
            .iter()
            .zip(&directions)
            .map(|(&(_, d), u)| {
                let offset: Vec<f64> = rng
                    .unit_vector(d)
                    .into_iter()
                    .map(|v| v * config.speaker_offset)
                    .collect();
                let direction = if held_out && d > 1 {
                    let w = orthogonal_unit(&mut rng, u);
                    u.iter()
                        .zip(&w)
                        .map(|(a, b)| theta.cos() * a + theta.sin() * b)
                        .collect()
                } else {
                    u.clone()
                };
                (offset, direction)
            })
            .collect();
        speakers.push(Speaker { id, modalities });
    }

    let per_speaker = 2 * clusters.clips_per_label;
    let lens = lengths(config, total * per_speaker);
    let mut records = Vec::with_capacity(total * per_speaker);
    for (s, speaker) in speakers.iter().enumerate() {
        for j in 0..per_speaker {
            let i = s * per_speaker + j;
            let label = if j % 2 == 0 {
                Label::Deceptive
            } else {
                Label::Truthful
            };
            records.push(clip(config, i, label, speaker, lens[i])?);
        }
    }
    Ok(SynthDataset {
        records,
        held_out_speakers: speakers[clusters.train_speakers..]
            .iter()
            .map(|s| s.id.clone())
            .collect(),
    })
}
