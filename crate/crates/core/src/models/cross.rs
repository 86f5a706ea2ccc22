use rayon::prelude::*;

use super::{Architecture, CrossArch, Profile, StreamSpec};
use crate::error::{shape_err, Error, Result};
use crate::features::{Modality, PaddedBatch};
use crate::layers::{
    bilstm, bind_dense, dense_stack_graph, dot_attention_graph, residual_layer_norm_graph,
    validate_widths, AttentionKind, AttentionTrace, BiLstmParams, BiLstmVars, DenseParams,
};
use crate::numeric::{Graph, ParameterStore, Tensor, Var};
use crate::rng::Rng;

impl CrossArch {
    /// Profile defaults for every stream; `dims` holds `(input_dim, max_len)`
    /// for visual, audio and text.
    pub fn from_profile(profile: Profile, dims: [(usize, usize); 3]) -> Self {
        let stream = |m: Modality, (input_dim, max_len): (usize, usize)| StreamSpec {
            input_dim,
            max_len,
            bilstm_widths: profile.unimodal(m).bilstm_widths,
        };
        Self {
            profile,
            visual: stream(Modality::Visual, dims[0]),
            audio: stream(Modality::Audio, dims[1]),
            text: stream(Modality::Text, dims[2]),
            dense_widths: profile.cross_attention().dense_widths,
            mask: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in Modality::ALL {
            let s = self.stream(m);
            if s.input_dim == 0 || s.bilstm_widths.is_empty() || s.bilstm_widths.contains(&0) {
                return Err(Error::Config(format!("invalid {m} stream {s:?}")));
            }
        }
        if self.visual.width() != self.audio.width() {
            return Err(Error::Config(format!(
                "cross-attention needs equal visual and audio widths, got {} and {}",
                self.visual.width(),
                self.audio.width()
            )));
        }
        validate_widths(&self.dense_widths)
    }

    fn pooled_width(&self) -> usize {
        self.visual.width() + self.audio.width() + self.text.width()
    }
}

pub fn build_cross_attention(arch: &CrossArch, seed: u64) -> Result<ParameterStore> {
    arch.validate()?;
    let mut rng = Rng::new(seed);
    let mut store = ParameterStore::new();
    for m in Modality::ALL {
        let s = arch.stream(m);
        let mut width = s.input_dim;
        for (i, &h) in s.bilstm_widths.iter().enumerate() {
            BiLstmParams::init(&mut rng, width, h)
                .register(&mut store, &format!("{m}.bilstm{i}"))?;
            width = 2 * h;
        }
        store.insert(format!("ln_{m}.gain"), Tensor::filled(&[1, width], 1.0))?;
        store.insert(format!("ln_{m}.shift"), Tensor::zeros(&[1, width]))?;
    }
    DenseParams::init(&mut rng, arch.pooled_width(), &arch.dense_widths)?
        .register(&mut store, "dense")?;
    store.architecture = Some(Architecture::CrossAttention(arch.clone()));
    Ok(store)
}

/// Intermediate tensors of one clip: the normalized cross-attended visual
/// and audio sequences and the pooled text vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionOutputs {
    pub ca_visual: Tensor,
    pub ca_audio: Tensor,
    pub text_pooled: Tensor,
}

/// Attention weights of one clip, one per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossTraces {
    /// Visual queries over audio keys.
    pub visual: AttentionTrace,
    /// Audio queries over visual keys.
    pub audio: AttentionTrace,
    /// Text self-attention.
    pub text: AttentionTrace,
}

struct CrossNodes {
    probs: Var,
    ca_visual: Var,
    ca_audio: Var,
    text_pooled: Var,
    scores: [Var; 3],
}

fn stream_graph(
    g: &mut Graph,
    store: &ParameterStore,
    spec: &StreamSpec,
    m: Modality,
    x: &Tensor,
) -> Result<Var> {
    if x.cols() != spec.input_dim {
        return Err(shape_err!(
            "{m} stream expects {}-wide features, got {}",
            spec.input_dim,
            x.cols()
        ));
    }
    let mut h = g.constant(x.clone())?;
    for i in 0..spec.bilstm_widths.len() {
        let p = BiLstmVars::bind(g, store, &format!("{m}.bilstm{i}"))?;
        h = bilstm(g, h, &p)?;
    }
    Ok(h)
}

fn norm(
    g: &mut Graph,
    store: &ParameterStore,
    m: Modality,
    query: Var,
    attended: Var,
) -> Result<Var> {
    let gain = g.param(store, &format!("ln_{m}.gain"))?;
    let shift = g.param(store, &format!("ln_{m}.shift"))?;
    residual_layer_norm_graph(g, query, attended, gain, shift)
}

fn cross_clip_graph(
    g: &mut Graph,
    store: &ParameterStore,
    inputs: [&Tensor; 3],
    valid: [usize; 3],
) -> Result<CrossNodes> {
    let arch = Architecture::cross(store)?;
    let keep = |i: usize| -> Option<Vec<bool>> {
        arch.mask
            .then(|| (0..inputs[i].rows()).map(|t| t < valid[i]).collect())
    };
    let rows = |i: usize| arch.mask.then_some(valid[i].max(1));

    let vv = stream_graph(g, store, &arch.visual, Modality::Visual, inputs[0])?;
    let va = stream_graph(g, store, &arch.audio, Modality::Audio, inputs[1])?;
    let vt = stream_graph(g, store, &arch.text, Modality::Text, inputs[2])?;

    let (att_v, score_v) = dot_attention_graph(g, vv, va, va, keep(1).as_deref())?;
    let ca_visual = norm(g, store, Modality::Visual, vv, att_v)?;
    let (att_a, score_a) = dot_attention_graph(g, va, vv, vv, keep(0).as_deref())?;
    let ca_audio = norm(g, store, Modality::Audio, va, att_a)?;
    let (att_t, score_t) = dot_attention_graph(g, vt, vt, vt, keep(2).as_deref())?;
    let sa_text = norm(g, store, Modality::Text, vt, att_t)?;

    let pv = g.max_rows(ca_visual, rows(0))?;
    let pa = g.max_rows(ca_audio, rows(1))?;
    let pt = g.max_rows(sa_text, rows(2))?;
    let fused = g.concat_cols(&[pv, pa, pt])?;
    let layers = bind_dense(g, store, "dense", arch.dense_widths.len() + 1)?;
    let probs = dense_stack_graph(g, fused, &layers, true)?;
    Ok(CrossNodes {
        probs,
        ca_visual,
        ca_audio,
        text_pooled: pt,
        scores: [score_v, score_a, score_t],
    })
}

/// Loss-ready graph for one clip; returns the `1 x 2` probability node.
pub(crate) fn cross_clip_probs(
    g: &mut Graph,
    store: &ParameterStore,
    inputs: [&Tensor; 3],
    valid: [usize; 3],
) -> Result<Var> {
    Ok(cross_clip_graph(g, store, inputs, valid)?.probs)
}

/// Unpadded single-clip intermediates.
pub fn cross_attention_outputs(
    store: &ParameterStore,
    visual: &Tensor,
    audio: &Tensor,
    text: &Tensor,
) -> Result<CrossAttentionOutputs> {
    let mut g = Graph::new();
    let valid = [visual.rows(), audio.rows(), text.rows()];
    let n = cross_clip_graph(&mut g, store, [visual, audio, text], valid)?;
    Ok(CrossAttentionOutputs {
        ca_visual: g.value(n.ca_visual).clone(),
        ca_audio: g.value(n.ca_audio).clone(),
        text_pooled: g.value(n.text_pooled).clone(),
    })
}

pub(crate) fn check_aligned(
    visual: &PaddedBatch,
    audio: &PaddedBatch,
    text: &PaddedBatch,
) -> Result<()> {
    if visual.len() != audio.len() || visual.len() != text.len() {
        return Err(Error::Data(format!(
            "batch sizes differ: visual {}, audio {}, text {}",
            visual.len(),
            audio.len(),
            text.len()
        )));
    }
    for b in 0..visual.len() {
        let id = visual.clip_id(b);
        if audio.clip_id(b) != id || text.clip_id(b) != id {
            return Err(Error::Data(format!(
                "clip misalignment at position {b}: visual `{id}`, audio `{}`, text `{}`",
                audio.clip_id(b),
                text.clip_id(b)
            )));
        }
    }
    Ok(())
}

pub fn forward_cross_attention(
    store: &ParameterStore,
    visual: &PaddedBatch,
    audio: &PaddedBatch,
    text: &PaddedBatch,
) -> Result<(Tensor, Vec<CrossTraces>)> {
    Architecture::cross(store)?;
    check_aligned(visual, audio, text)?;
    let per_clip = (0..visual.len())
        .into_par_iter()
        .map(|b| {
            let mut g = Graph::new();
            let clips = [visual.clip(b), audio.clip(b), text.clip(b)];
            let valid = [
                visual.valid_length(b),
                audio.valid_length(b),
                text.valid_length(b),
            ];
            let n = cross_clip_graph(&mut g, store, [&clips[0], &clips[1], &clips[2]], valid)?;
            let trace = |v: Var| AttentionTrace {
                kind: AttentionKind::DotProduct,
                scores: g.value(v).clone(),
                clip_id: visual.clip_id(b).to_owned(),
            };
            Ok((
                g.value(n.probs).data().to_vec(),
                CrossTraces {
                    visual: trace(n.scores[0]),
                    audio: trace(n.scores[1]),
                    text: trace(n.scores[2]),
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut probs = Vec::with_capacity(2 * per_clip.len());
    let mut traces = Vec::with_capacity(per_clip.len());
    for (p, t) in per_clip {
        probs.extend(p);
        traces.push(t);
    }
    Ok((Tensor::new(vec![traces.len(), 2], probs)?, traces))
}
