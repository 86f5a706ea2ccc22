//! Feature ingestion: frame sampling, gap filling, MFCC extraction, pooling,
//! padding and the on-disk manifest.

mod batch;
mod manifest;
mod mfcc;
mod sampling;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub use batch::{pad_and_mask, PaddedBatch};
pub use manifest::{
    load_manifest, load_manifest_with, read_feature_csv, write_dataset, write_feature_csv,
    DimRules, MANIFEST_FILE,
};
pub use mfcc::{compute_mfcc, mean_pool_audio, read_wav_mono, MfccConfig};
pub use sampling::{carry_forward_fill, sample_visual_frames, FilledFrames, FrameSampling};

/// Seconds per step after visual sampling at 5 frames/s or audio pooling
/// every 0.2 s.
pub const STEP_SECONDS: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Audio, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }

    pub fn default_step_seconds(self) -> f64 {
        match self {
            Modality::Visual | Modality::Audio => STEP_SECONDS,
            // one step per sentence or token; no wall-clock meaning
            Modality::Text => 1.0,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(Modality::Visual),
            "audio" => Ok(Modality::Audio),
            "text" => Ok(Modality::Text),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Class label. Deceptive is class index 0 and the positive class for F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Deceptive,
    Truthful,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Deceptive => 0,
            Label::Truthful => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Deceptive),
            1 => Ok(Label::Truthful),
            other => Err(Error::InvalidLabel(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Deceptive => "deceptive",
            Label::Truthful => "truthful",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deceptive" => Ok(Label::Deceptive),
            "truthful" => Ok(Label::Truthful),
            other => Err(Error::Data(format!("unknown label `{other}`"))),
        }
    }
}

/// One modality of one clip: `T x D` rows, of which the first
/// `valid_length` are real steps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub data: Tensor,
    pub valid_length: usize,
    pub step_seconds: f64,
}

impl FeatureSequence {
    pub fn new(modality: Modality, data: Tensor) -> Result<Self> {
        if !data.is_matrix() {
            return Err(Error::Shape(format!(
                "feature sequence must be T x D, got {:?}",
                data.shape()
            )));
        }
        Ok(Self {
            modality,
            valid_length: data.rows(),
            step_seconds: modality.default_step_seconds(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_length == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub speaker_id: String,
    pub label: Label,
    pub features: Vec<FeatureSequence>,
}

impl ClipRecord {
    pub fn feature(&self, modality: Modality) -> Option<&FeatureSequence> {
        self.features.iter().find(|f| f.modality == modality)
    }

    pub fn require(&self, modality: Modality) -> Result<&FeatureSequence> {
        self.feature(modality).ok_or_else(|| {
            Error::Data(format!(
                "clip `{}` has no {modality} features",
                self.clip_id
            ))
        })
    }
}

/// Longest valid length of `modality` across `clips`.
pub fn max_length(clips: &[ClipRecord], modality: Modality) -> Result<usize> {
    clips
        .iter()
        .map(|c| c.require(modality).map(|f| f.valid_length))
        .try_fold(0, |m, l| l.map(|l| m.max(l)))
}
