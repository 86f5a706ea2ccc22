use rayon::prelude::*;

use super::{Architecture, BranchSpec, ModelConfig, UnimodalArch};
use crate::error::{shape_err, Error, Result};
use crate::features::PaddedBatch;
use crate::layers::{
    bilstm, bind_dense, dense_stack_graph, dot_attention_graph, simple_attention_graph,
    AttentionKind, AttentionTrace, BiLstmParams, BiLstmVars, DenseParams, LstmParams,
    SimpleAttentionParams,
};
use crate::numeric::{Graph, ParameterStore, Tensor, Var};
use crate::rng::Rng;

/// Index of the BiLSTM layer whose output feeds the calibration branch.
const BRANCH_AFTER_LAYER: usize = 1;

pub fn build_unimodal(
    config: &ModelConfig,
    input_dim: usize,
    max_len: usize,
    seed: u64,
) -> Result<ParameterStore> {
    config.validate()?;
    if input_dim == 0 || max_len == 0 {
        return Err(Error::Config(format!(
            "input width {input_dim} and sequence length {max_len} must be positive"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut store = ParameterStore::new();
    let mut width = input_dim;
    for (i, &h) in config.bilstm_widths.iter().enumerate() {
        BiLstmParams::init(&mut rng, width, h).register(&mut store, &format!("bilstm{i}"))?;
        width = 2 * h;
    }
    if config.attention == AttentionKind::Simple {
        SimpleAttentionParams::init(&mut rng, width, max_len).register(&mut store, "attn")?;
    }
    DenseParams::init(&mut rng, width, &config.dense_widths)?.register(&mut store, "dense")?;
    store.architecture = Some(Architecture::Unimodal(UnimodalArch {
        config: config.clone(),
        input_dim,
        max_len,
        branch: None,
    }));
    Ok(store)
}

/// Freezes every base parameter and adds a trainable branch
/// `BiLSTM(h) -> time-distributed dense -> max pool` whose pooled output is
/// added to the base pooled vector. The dense projection starts at zero.
pub fn attach_lora_branch(
    base: &ParameterStore,
    bilstm_hidden: usize,
    seed: u64,
) -> Result<ParameterStore> {
    let arch = Architecture::unimodal(base)?;
    if arch.branch.is_some() {
        return Err(Error::Config(
            "model already carries a calibration branch".into(),
        ));
    }
    if arch.config.attention != AttentionKind::DotProduct {
        return Err(Error::Config(
            "calibration branch requires a dot-product attention model with a pooling layer".into(),
        ));
    }
    if arch.config.bilstm_widths.len() <= BRANCH_AFTER_LAYER {
        return Err(Error::Config(format!(
            "calibration branch attaches after BiLSTM layer {}, model has {}",
            BRANCH_AFTER_LAYER + 1,
            arch.config.bilstm_widths.len()
        )));
    }
    if bilstm_hidden == 0 {
        return Err(Error::Config("branch BiLSTM width must be positive".into()));
    }
    let tap_width = 2 * arch.config.bilstm_widths[BRANCH_AFTER_LAYER];
    let pooled_width = arch.config.model_width();

    let mut store = base.clone();
    store.freeze_all();
    let mut rng = Rng::new(seed);
    let branch = BiLstmParams {
        forward: LstmParams::init(&mut rng, tap_width, bilstm_hidden),
        backward: LstmParams::init(&mut rng, tap_width, bilstm_hidden),
    };
    branch.register(&mut store, "branch.bilstm")?;
    store.insert(
        "branch.td.w",
        Tensor::zeros(&[2 * bilstm_hidden, pooled_width]),
    )?;
    store.insert("branch.td.b", Tensor::zeros(&[1, pooled_width]))?;

    let mut arch = arch.clone();
    arch.branch = Some(BranchSpec {
        bilstm_hidden,
        td_dense_out: pooled_width,
    });
    store.architecture = Some(Architecture::Unimodal(arch));
    Ok(store)
}

/// Graph nodes of one clip's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct UnimodalOutput {
    /// `1 x 2` class probabilities.
    pub probs: Var,
    /// Attention scores (`1 x T` or `T x T`).
    pub scores: Var,
    /// Pooled vector fed to the dense stack.
    pub latent: Var,
}

/// Builds the forward graph for one `T x D` clip. `valid` is the number of
/// unpadded rows; it only matters when the model's mask flag is on.
pub fn unimodal_clip_graph(
    g: &mut Graph,
    store: &ParameterStore,
    clip: &Tensor,
    valid: usize,
) -> Result<UnimodalOutput> {
    let arch = Architecture::unimodal(store)?;
    let cfg = &arch.config;
    if clip.cols() != arch.input_dim {
        return Err(shape_err!(
            "model expects {}-wide {} features, got {}",
            arch.input_dim,
            cfg.modality,
            clip.cols()
        ));
    }
    let steps = clip.rows();
    let keep: Option<Vec<bool>> = cfg.mask.then(|| (0..steps).map(|t| t < valid).collect());
    let pool_rows = cfg.mask.then_some(valid.max(1));

    let mut h = g.constant(clip.clone())?;
    let mut tap = None;
    for i in 0..cfg.bilstm_widths.len() {
        let p = BiLstmVars::bind(g, store, &format!("bilstm{i}"))?;
        h = bilstm(g, h, &p)?;
        if i == BRANCH_AFTER_LAYER {
            tap = Some(h);
        }
    }

    let (mut pooled, scores) = match cfg.attention {
        AttentionKind::Simple => {
            if steps != arch.max_len {
                return Err(shape_err!(
                    "simple attention was built for {} steps, clip has {steps}",
                    arch.max_len
                ));
            }
            let w = g.param(store, "attn.w")?;
            let b = g.param(store, "attn.b")?;
            simple_attention_graph(g, h, w, b, keep.as_deref())?
        }
        AttentionKind::DotProduct => {
            let (out, scores) = dot_attention_graph(g, h, h, h, keep.as_deref())?;
            (g.max_rows(out, pool_rows)?, scores)
        }
    };

    if arch.branch.is_some() {
        let tap = tap.ok_or_else(|| Error::Config("branch tap layer missing".into()))?;
        let p = BiLstmVars::bind(g, store, "branch.bilstm")?;
        let b = bilstm(g, tap, &p)?;
        let w = g.param(store, "branch.td.w")?;
        let bias = g.param(store, "branch.td.b")?;
        let td = g.matmul(b, w)?;
        let td = g.add_row(td, bias)?;
        let delta = g.max_rows(td, pool_rows)?;
        pooled = g.add(pooled, delta)?;
    }

    let layers = bind_dense(g, store, "dense", cfg.dense_widths.len() + 1)?;
    let probs = dense_stack_graph(g, pooled, &layers, true)?;
    Ok(UnimodalOutput {
        probs,
        scores,
        latent: pooled,
    })
}

/// Class probabilities (`B x 2`) and one attention trace per clip. Clips are
/// evaluated in parallel; results keep batch order.
pub fn forward_unimodal(
    store: &ParameterStore,
    batch: &PaddedBatch,
) -> Result<(Tensor, Vec<AttentionTrace>)> {
    let (probs, traces, _) = forward_unimodal_with_latent(store, batch)?;
    Ok((probs, traces))
}

/// Like [`forward_unimodal`] and also returns the pooled representation
/// of each clip (`B x d`).
pub fn forward_unimodal_with_latent(
    store: &ParameterStore,
    batch: &PaddedBatch,
) -> Result<(Tensor, Vec<AttentionTrace>, Tensor)> {
    let arch = Architecture::unimodal(store)?;
    if batch.dim() != arch.input_dim {
        return Err(shape_err!(
            "batch has {}-wide features, model expects {}",
            batch.dim(),
            arch.input_dim
        ));
    }
    let kind = arch.config.attention;
    let per_clip = (0..batch.len())
        .into_par_iter()
        .map(|b| {
            let mut g = Graph::new();
            let out = unimodal_clip_graph(&mut g, store, &batch.clip(b), batch.valid_length(b))?;
            Ok((
                g.value(out.probs).data().to_vec(),
                g.value(out.scores).clone(),
                g.value(out.latent).data().to_vec(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut probs = Vec::with_capacity(2 * batch.len());
    let mut latent = Vec::new();
    let mut traces = Vec::with_capacity(batch.len());
    for (b, (p, scores, l)) in per_clip.into_iter().enumerate() {
        probs.extend(p);
        latent.extend(l);
        traces.push(AttentionTrace {
            kind,
            scores,
            clip_id: batch.clip_id(b).to_owned(),
        });
    }
    let width = latent.len() / batch.len().max(1);
    Ok((
        Tensor::new(vec![batch.len(), 2], probs)?,
        traces,
        Tensor::new(vec![batch.len(), width], latent)?,
    ))
}
