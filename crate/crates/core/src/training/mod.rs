//! Optimization loop, learning-rate schedule, calibration, data splits and
//! scoring.

mod metrics;
mod optim;
mod split;

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rayon::prelude::*;

pub use metrics::{predict_label, predictions, CvSummary, Metrics};
pub use optim::{adam_update, lr_schedule, lr_trajectory, AdamState, LR_DECAY};
pub use split::{
    calibration_split, kfold_grouped, kfold_split, select_calibration_clips, train_test_split,
    CalibrationSplit,
};

use crate::error::{Error, Result};
use crate::features::{ClipRecord, PaddedBatch};
use crate::models::{
    check_aligned, cross_clip_probs, forward_cross_attention, forward_unimodal,
    unimodal_clip_graph, Architecture, ProfileDefaults,
};
use crate::numeric::{compute_gradients, GradientMap, Graph, ParameterStore, Var};
use crate::rng::Rng;

const SHUFFLE_STREAM: u64 = 0x7368_7566;

/// Epoch cap for calibration when training accuracy never reaches 100 %.
pub const CALIBRATION_EPOCH_CAP: usize = 200;

/// Adam step size for calibration. Four clips make 1e-3 too slow to reach
/// 100 % training accuracy within the cap on most individuals.
pub const CALIBRATION_LR: f64 = 5e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs `0..hold_epoch` run at `base_lr`; each later epoch multiplies
    /// the rate by `e^-0.1`.
    pub hold_epoch: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl TrainConfig {
    pub fn new(epochs: usize, hold_epoch: usize, seed: u64) -> Self {
        Self {
            epochs,
            hold_epoch,
            batch_size: 32,
            base_lr: 1e-3,
            seed,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    pub fn from_profile(defaults: &ProfileDefaults, seed: u64) -> Self {
        Self::new(defaults.epochs, defaults.hold_epoch, seed)
    }

    /// Settings for calibration: the epoch cap with no decay.
    pub fn calibration(seed: u64) -> Self {
        Self {
            base_lr: CALIBRATION_LR,
            ..Self::new(CALIBRATION_EPOCH_CAP, CALIBRATION_EPOCH_CAP, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.hold_epoch > self.epochs {
            return Err(Error::Config(format!(
                "hold epoch {} exceeds the {} training epochs",
                self.hold_epoch, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.base_lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn learning_rates(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Tab-separated log: `epoch lr loss train_acc`, one line per epoch.
    pub fn to_log(&self) -> String {
        let mut out = String::from("epoch\tlr\tloss\ttrain_acc\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:e}\t{:e}\t{}",
                e.epoch, e.lr, e.loss, e.train_accuracy
            );
        }
        out
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_log()).map_err(|e| Error::io(path, e))
    }
}

/// A labelled set of examples the optimizer can build a graph for.
pub trait Objective: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> usize;

    fn clip_id(&self, i: usize) -> &str;

    /// Builds example `i` into `g` and returns its `1 x 2` probability node.
    fn probs(&self, g: &mut Graph, params: &ParameterStore, i: usize) -> Result<Var>;
}

pub struct UnimodalObjective<'a> {
    pub batch: &'a PaddedBatch,
}

impl Objective for UnimodalObjective<'_> {
    fn len(&self) -> usize {
        self.batch.len()
    }

    fn label(&self, i: usize) -> usize {
        self.batch.labels[i]
    }

    fn clip_id(&self, i: usize) -> &str {
        self.batch.clip_id(i)
    }

    fn probs(&self, g: &mut Graph, params: &ParameterStore, i: usize) -> Result<Var> {
        Ok(unimodal_clip_graph(g, params, &self.batch.clip(i), self.batch.valid_length(i))?.probs)
    }
}

pub struct CrossObjective<'a> {
    pub visual: &'a PaddedBatch,
    pub audio: &'a PaddedBatch,
    pub text: &'a PaddedBatch,
}

impl<'a> CrossObjective<'a> {
    pub fn new(
        visual: &'a PaddedBatch,
        audio: &'a PaddedBatch,
        text: &'a PaddedBatch,
    ) -> Result<Self> {
        check_aligned(visual, audio, text)?;
        Ok(Self {
            visual,
            audio,
            text,
        })
    }
}

impl Objective for CrossObjective<'_> {
    fn len(&self) -> usize {
        self.visual.len()
    }

    fn label(&self, i: usize) -> usize {
        self.visual.labels[i]
    }

    fn clip_id(&self, i: usize) -> &str {
        self.visual.clip_id(i)
    }

    fn probs(&self, g: &mut Graph, params: &ParameterStore, i: usize) -> Result<Var> {
        let clips = [self.visual.clip(i), self.audio.clip(i), self.text.clip(i)];
        let valid = [
            self.visual.valid_length(i),
            self.audio.valid_length(i),
            self.text.valid_length(i),
        ];
        cross_clip_probs(g, params, [&clips[0], &clips[1], &clips[2]], valid)
    }
}

struct ClipStep {
    grads: GradientMap,
    loss: f64,
    correct: bool,
}

fn clip_step(data: &dyn Objective, params: &ParameterStore, i: usize) -> Result<ClipStep> {
    let mut g = Graph::new();
    let probs = data.probs(&mut g, params, i)?;
    let label = data.label(i);
    let correct = predict_label(g.value(probs).data()) == label;
    let loss = g.nll(probs, label)?;
    let value = g.value(loss).data()[0];
    let grads = compute_gradients(&g, loss, params)?;
    Ok(ClipStep {
        grads,
        loss: value,
        correct,
    })
}

/// Mini-batch Adam on the mean cross-entropy. Clips of a batch are
/// differentiated in parallel and their gradients summed in batch order,
/// so results do not depend on the thread count.
pub fn train(
    params: &mut ParameterStore,
    data: &dyn Objective,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    fit(params, data, config, false)
}

fn fit(
    params: &mut ParameterStore,
    data: &dyn Objective,
    config: &TrainConfig,
    stop_when_perfect: bool,
) -> Result<TrainHistory> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if params.trainable_count() == 0 {
        return Err(Error::Config("model has no trainable parameters".into()));
    }
    let mut state = AdamState::new(config.beta1, config.beta2, config.adam_eps);
    let mut history = TrainHistory::default();
    let mut lr = config.base_lr;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::derived(config.seed, SHUFFLE_STREAM ^ ((epoch as u64) << 32)).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let snapshot: &ParameterStore = params;
            let steps = chunk
                .par_iter()
                .map(|&i| clip_step(data, snapshot, i))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = GradientMap::zeros_like(params);
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for s in &steps {
                grads.accumulate(&s.grads, scale)?;
                batch_loss += s.loss;
                correct += usize::from(s.correct);
            }
            if !batch_loss.is_finite()
                || !grads
                    .iter()
                    .all(|(_, g)| g.data().iter().all(|v| v.is_finite()))
            {
                let ids: Vec<&str> = chunk.iter().map(|&i| data.clip_id(i)).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient in epoch {epoch}, batch {b} (clips {})",
                    ids.join(", ")
                )));
            }
            loss_sum += batch_loss;
            adam_update(params, &grads, &mut state, lr)?;
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        };
        debug!(
            "epoch {epoch}: lr {:e} loss {:.6} acc {:.4}",
            record.lr, record.loss, record.train_accuracy
        );
        let perfect = correct == data.len();
        history.epochs.push(record);
        if stop_when_perfect && perfect {
            history.stopped_early = true;
            info!("training accuracy reached 100% after epoch {epoch}");
            break;
        }
        lr = lr_schedule(lr, epoch + 1, config.hold_epoch);
    }
    Ok(history)
}

/// Trains only the calibration branch of `base` on one individual's clips,
/// stopping after the first epoch with 100 % training accuracy.
pub fn calibrate(
    base: &ParameterStore,
    person_clips: &[ClipRecord],
    config: &TrainConfig,
) -> Result<(ParameterStore, TrainHistory)> {
    let arch = Architecture::unimodal(base)?;
    if arch.branch.is_none() {
        return Err(Error::Config(
            "calibration needs a model with an attached branch".into(),
        ));
    }
    for label in [
        crate::features::Label::Deceptive,
        crate::features::Label::Truthful,
    ] {
        let n = person_clips.iter().filter(|c| c.label == label).count();
        if n < 2 {
            return Err(Error::Data(format!(
                "calibration needs at least 2 {} clips, got {n}",
                label.name()
            )));
        }
    }
    let batch = PaddedBatch::from_clips(person_clips, arch.config.modality, Some(arch.max_len))?;
    let mut params = base.clone();
    let history = fit(
        &mut params,
        &UnimodalObjective { batch: &batch },
        config,
        true,
    )?;
    Ok((params, history))
}

pub fn evaluate(params: &ParameterStore, batch: &PaddedBatch) -> Result<Metrics> {
    if batch.is_empty() {
        return Err(Error::Data("cannot evaluate an empty batch".into()));
    }
    let (probs, _) = forward_unimodal(params, batch)?;
    Metrics::from_predictions(&predictions(&probs), &batch.labels)
}

pub fn evaluate_cross(
    params: &ParameterStore,
    visual: &PaddedBatch,
    audio: &PaddedBatch,
    text: &PaddedBatch,
) -> Result<Metrics> {
    if visual.is_empty() {
        return Err(Error::Data("cannot evaluate an empty batch".into()));
    }
    let (probs, _) = forward_cross_attention(params, visual, audio, text)?;
    Metrics::from_predictions(&predictions(&probs), &visual.labels)
}

/// Runs `fit_and_score(train, test)` for every fold of a `k`-fold split of
/// `0..n` and summarizes the results.
pub fn cross_validate<F>(folds: &[Vec<usize>], mut fit_and_score: F) -> Result<CvSummary>
where
    F: FnMut(usize, &[usize], &[usize]) -> Result<Metrics>,
{
    let mut scores = Vec::with_capacity(folds.len());
    for (i, test) in folds.iter().enumerate() {
        let train: Vec<usize> = folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        scores.push(fit_and_score(i, &train, test)?);
    }
    if scores.is_empty() {
        return Err(Error::Config(
            "cross-validation needs at least one fold".into(),
        ));
    }
    Ok(CvSummary::new(scores))
}
