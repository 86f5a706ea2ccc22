//! Model assembly: the unimodal BiLSTM + attention classifier, the
//! cross-attention fusion model and the calibration branch.

mod checkpoint;
mod cross;
mod unimodal;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Modality;
pub use crate::layers::AttentionKind;
pub use crate::numeric::ParameterStore;

pub use checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, FORMAT_VERSION,
};
pub use cross::{
    build_cross_attention, cross_attention_outputs, forward_cross_attention, CrossAttentionOutputs,
    CrossTraces,
};
pub(crate) use cross::{check_aligned, cross_clip_probs};
pub use unimodal::{
    attach_lora_branch, build_unimodal, forward_unimodal, forward_unimodal_with_latent,
    unimodal_clip_graph, UnimodalOutput,
};

/// Hyperparameter presets for the two reference datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Courtroom trial clips.
    Trial,
    /// Interview clips of university students.
    Atsface,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trial" => Ok(Profile::Trial),
            "atsface" => Ok(Profile::Atsface),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

/// Widths and training length a profile assigns to one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileDefaults {
    pub bilstm_widths: Vec<usize>,
    pub dense_widths: Vec<usize>,
    pub epochs: usize,
    pub hold_epoch: usize,
}

impl Profile {
    pub fn unimodal(self, modality: Modality) -> ProfileDefaults {
        use Modality::*;
        let (bilstm, dense, epochs, hold): (&[usize], &[usize], usize, usize) =
            match (self, modality) {
                (Profile::Trial, Visual) => (&[64, 32], &[64, 16, 8], 20, 10),
                (Profile::Trial, Audio) => (&[64, 32], &[32, 16, 8], 30, 20),
                (Profile::Trial, Text) => (&[32], &[64, 16, 8], 30, 25),
                (Profile::Atsface, Visual) => (&[64, 32], &[64, 16, 8], 40, 20),
                (Profile::Atsface, Audio) => (&[64, 32], &[64, 16, 8], 40, 30),
                (Profile::Atsface, Text) => (&[128, 64], &[64, 16, 8], 30, 20),
            };
        ProfileDefaults {
            bilstm_widths: bilstm.to_vec(),
            dense_widths: dense.to_vec(),
            epochs,
            hold_epoch: hold,
        }
    }

    /// Fusion head defaults; BiLSTM widths are taken per modality from
    /// [`Profile::unimodal`].
    pub fn cross_attention(self) -> ProfileDefaults {
        let (epochs, hold) = match self {
            Profile::Trial => (15, 10),
            Profile::Atsface => (20, 10),
        };
        ProfileDefaults {
            bilstm_widths: Vec::new(),
            dense_widths: vec![256, 64, 16],
            epochs,
            hold_epoch: hold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub modality: Modality,
    pub bilstm_widths: Vec<usize>,
    pub dense_widths: Vec<usize>,
    pub attention: AttentionKind,
    /// Restrict attention and pooling to valid (unpadded) steps.
    pub mask: bool,
    pub profile: Profile,
}

impl ModelConfig {
    pub fn from_profile(profile: Profile, modality: Modality, attention: AttentionKind) -> Self {
        let d = profile.unimodal(modality);
        Self {
            modality,
            bilstm_widths: d.bilstm_widths,
            dense_widths: d.dense_widths,
            attention,
            mask: false,
            profile,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bilstm_widths.is_empty() || self.bilstm_widths.contains(&0) {
            return Err(Error::Config(format!(
                "BiLSTM widths must be non-empty and positive, got {:?}",
                self.bilstm_widths
            )));
        }
        crate::layers::validate_widths(&self.dense_widths)
    }

    /// Width of the BiLSTM output feeding attention.
    pub fn model_width(&self) -> usize {
        2 * self.bilstm_widths.last().copied().unwrap_or(0)
    }
}

/// Calibration branch attached after the second BiLSTM layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub bilstm_hidden: usize,
    /// Output width of the time-distributed dense layer; must equal the
    /// base model's pooled width.
    pub td_dense_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnimodalArch {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub max_len: usize,
    pub branch: Option<BranchSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub input_dim: usize,
    pub max_len: usize,
    pub bilstm_widths: Vec<usize>,
}

impl StreamSpec {
    pub fn width(&self) -> usize {
        2 * self.bilstm_widths.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossArch {
    pub profile: Profile,
    pub visual: StreamSpec,
    pub audio: StreamSpec,
    pub text: StreamSpec,
    pub dense_widths: Vec<usize>,
    pub mask: bool,
}

impl CrossArch {
    pub fn stream(&self, m: Modality) -> &StreamSpec {
        match m {
            Modality::Visual => &self.visual,
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
        }
    }
}

/// Architecture descriptor stored with every parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Unimodal(UnimodalArch),
    CrossAttention(CrossArch),
}

impl Architecture {
    pub fn unimodal(store: &ParameterStore) -> Result<&UnimodalArch> {
        match &store.architecture {
            Some(Architecture::Unimodal(a)) => Ok(a),
            _ => Err(Error::Config(
                "parameters do not describe a unimodal model".into(),
            )),
        }
    }

    pub fn cross(store: &ParameterStore) -> Result<&CrossArch> {
        match &store.architecture {
            Some(Architecture::CrossAttention(a)) => Ok(a),
            _ => Err(Error::Config(
                "parameters do not describe a cross-attention model".into(),
            )),
        }
    }
}
