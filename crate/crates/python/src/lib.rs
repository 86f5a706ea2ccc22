//! Python bindings: synthetic data, training, calibration, voting and
//! attention profiles over the core engine.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use veritas_core::ensemble::majority_vote;
use veritas_core::features::{
    compute_mfcc, load_manifest_with, max_length, ClipRecord, DimRules, Label, MfccConfig,
    Modality, PaddedBatch,
};
use veritas_core::interpret::{attention_profile, padding_mass, top_k_frames, AttentionProfile};
use veritas_core::models::{
    attach_lora_branch, build_unimodal, forward_cross_attention, forward_unimodal, load_checkpoint,
    save_checkpoint, Architecture, AttentionKind, ModelConfig, ParameterStore, Profile,
};
use veritas_core::synth::{
    generate_base_dataset, generate_individual_clusters, ClusterConfig, SynthConfig,
};
use veritas_core::training::{self, Metrics, TrainConfig, TrainHistory, UnimodalObjective};
use veritas_core::{cli, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for veritas_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().py()
}

fn records(manifest: &str, relaxed_dims: bool) -> PyResult<Vec<ClipRecord>> {
    let rules = if relaxed_dims {
        DimRules::any()
    } else {
        DimRules::default()
    };
    load_manifest_with(&cli::resolve_manifest(Path::new(manifest)), &rules).py()
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("f1", m.f1)?;
    d.set_item("macro_f1", m.macro_f1)?;
    d.set_item("tp", m.tp)?;
    d.set_item("fp", m.fp)?;
    d.set_item("fn", m.fn_)?;
    d.set_item("tn", m.tn)?;
    Ok(d)
}

fn history_dicts<'py>(py: Python<'py>, h: &TrainHistory) -> PyResult<Vec<Bound<'py, PyDict>>> {
    h.epochs
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("lr", e.lr)?;
            d.set_item("loss", e.loss)?;
            d.set_item("train_acc", e.train_accuracy)?;
            Ok(d)
        })
        .collect()
}

/// A trained parameter set: unimodal, calibrated or cross-attention.
#[pyclass(module = "veritas")]
pub struct Model {
    params: ParameterStore,
}

impl Model {
    fn score(
        &self,
        clips: &[ClipRecord],
        stream: Modality,
    ) -> PyResult<(Vec<[f64; 2]>, Vec<AttentionProfile>)> {
        let (probs, traces, batch) = match &self.params.architecture {
            Some(Architecture::Unimodal(a)) => {
                let batch =
                    PaddedBatch::from_clips(clips, a.config.modality, Some(a.max_len)).py()?;
                let (p, t) = forward_unimodal(&self.params, &batch).py()?;
                (p, t, batch)
            }
            Some(Architecture::CrossAttention(a)) => {
                let b =
                    |m: Modality| PaddedBatch::from_clips(clips, m, Some(a.stream(m).max_len)).py();
                let (v, au, t) = (
                    b(Modality::Visual)?,
                    b(Modality::Audio)?,
                    b(Modality::Text)?,
                );
                let (p, traces) = forward_cross_attention(&self.params, &v, &au, &t).py()?;
                let (picked, batch) = match stream {
                    Modality::Visual => (traces.into_iter().map(|x| x.visual).collect(), v),
                    Modality::Audio => (traces.into_iter().map(|x| x.audio).collect(), au),
                    Modality::Text => (traces.into_iter().map(|x| x.text).collect(), t),
                };
                (p, picked, batch)
            }
            None => {
                return Err(PyValueError::new_err(
                    "model has no architecture descriptor",
                ))
            }
        };
        let pairs = (0..probs.rows())
            .map(|r| [probs.get(r, 0), probs.get(r, 1)])
            .collect();
        let profiles = traces
            .iter()
            .enumerate()
            .map(|(b, tr)| attention_profile(tr, batch.step_seconds, batch.valid_length(b)))
            .collect();
        Ok((pairs, profiles))
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            params: load_checkpoint(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.params, &path).py()
    }

    /// "unimodal" or "cross_attention".
    #[getter]
    fn kind(&self) -> &'static str {
        match self.params.architecture {
            Some(Architecture::CrossAttention(_)) => "cross_attention",
            _ => "unimodal",
        }
    }

    #[getter]
    fn architecture_json(&self) -> String {
        serde_json::to_string(&self.params.architecture).unwrap_or_default()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    #[getter]
    fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    #[getter]
    fn calibrated(&self) -> bool {
        matches!(&self.params.architecture, Some(Architecture::Unimodal(a)) if a.branch.is_some())
    }

    /// `(clip_id, p_deceptive, p_truthful)` for every clip in the manifest.
    #[pyo3(signature = (manifest, relaxed_dims = false))]
    fn predict(&self, manifest: &str, relaxed_dims: bool) -> PyResult<Vec<(String, f64, f64)>> {
        let clips = records(manifest, relaxed_dims)?;
        let (pairs, _) = self.score(&clips, Modality::Visual)?;
        Ok(clips
            .iter()
            .zip(pairs)
            .map(|(c, p)| (c.clip_id.clone(), p[0], p[1]))
            .collect())
    }

    /// Metrics on the clips of `manifest`, optionally only some speakers.
    #[pyo3(signature = (manifest, speakers = None, relaxed_dims = false))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        manifest: &str,
        speakers: Option<Vec<String>>,
        relaxed_dims: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut clips = records(manifest, relaxed_dims)?;
        if let Some(s) = speakers {
            clips.retain(|c| s.contains(&c.speaker_id));
        }
        let (pairs, _) = self.score(&clips, Modality::Visual)?;
        let predicted: Vec<usize> = pairs.iter().map(|p| training::predict_label(p)).collect();
        let labels: Vec<usize> = clips.iter().map(|c| c.label.index()).collect();
        metrics_dict(py, &Metrics::from_predictions(&predicted, &labels).py()?)
    }

    /// Per-clip attention profiles: dicts with `clip_id`, `scores`,
    /// `step_seconds`, `valid_length`, `padding_mass` and `top_k`.
    #[pyo3(signature = (manifest, k = 5, stream = "visual", relaxed_dims = false))]
    fn attention_profiles<'py>(
        &self,
        py: Python<'py>,
        manifest: &str,
        k: usize,
        stream: &str,
        relaxed_dims: bool,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let clips = records(manifest, relaxed_dims)?;
        let (_, profiles) = self.score(&clips, parse(stream)?)?;
        profiles
            .iter()
            .map(|p| {
                let d = PyDict::new(py);
                d.set_item("clip_id", &p.clip_id)?;
                d.set_item("scores", &p.scores)?;
                d.set_item("step_seconds", p.step_seconds)?;
                d.set_item("valid_length", p.valid_length)?;
                d.set_item("padding_mass", padding_mass(p))?;
                d.set_item("top_k", top_k_frames(p, k.min(p.len())).py()?)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(kind={}, parameters={})",
            self.kind(),
            self.parameter_count()
        )
    }
}

/// Writes a synthetic dataset into `out_dir` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (
    out_dir, seed = 0, clips_per_class = 100, modalities = None, min_len = 50, max_len = 250,
    delta = 4.0, speaker_offset = 0.0, noise = 1.0, speakers = 10, clusters = false,
    train_speakers = 12, held_out_speakers = 6, clips_per_label = 8, shift_degrees = 180.0
))]
#[allow(clippy::too_many_arguments)]
fn synth(
    out_dir: PathBuf,
    seed: u64,
    clips_per_class: usize,
    modalities: Option<Vec<(String, usize)>>,
    min_len: usize,
    max_len: usize,
    delta: f64,
    speaker_offset: f64,
    noise: f64,
    speakers: usize,
    clusters: bool,
    train_speakers: usize,
    held_out_speakers: usize,
    clips_per_label: usize,
    shift_degrees: f64,
) -> PyResult<String> {
    let mut config = SynthConfig {
        clips_per_class,
        min_len,
        max_len,
        delta,
        speaker_offset,
        noise,
        speakers,
        seed,
        ..SynthConfig::default()
    };
    if let Some(m) = modalities {
        config.modalities = m
            .iter()
            .map(|(name, d)| Ok((parse(name)?, *d)))
            .collect::<PyResult<_>>()?;
    }
    let cluster = clusters.then_some(ClusterConfig {
        train_speakers,
        held_out_speakers,
        clips_per_label,
        shift_degrees,
    });
    let data = match &cluster {
        Some(c) => generate_individual_clusters(&config, c).py()?,
        None => generate_base_dataset(&config).py()?,
    };
    let path = data.write(&out_dir, &config, cluster.as_ref()).py()?;
    Ok(path.display().to_string())
}

/// Trains a unimodal model on every clip of `manifest` except the excluded
/// speakers. Returns the model and the per-epoch log.
#[pyfunction]
#[pyo3(signature = (
    manifest, modality, profile = "trial", attention = "simple", epochs = None, hold_epoch = None,
    lr = 1e-3, batch_size = 32, mask = false, seed = 0, exclude_speakers = None, relaxed_dims = false
))]
#[allow(clippy::too_many_arguments)]
fn train_unimodal<'py>(
    py: Python<'py>,
    manifest: &str,
    modality: &str,
    profile: &str,
    attention: &str,
    epochs: Option<usize>,
    hold_epoch: Option<usize>,
    lr: f64,
    batch_size: usize,
    mask: bool,
    seed: u64,
    exclude_speakers: Option<Vec<String>>,
    relaxed_dims: bool,
) -> PyResult<(Model, Vec<Bound<'py, PyDict>>)> {
    let modality: Modality = parse(modality)?;
    let profile: Profile = parse(profile)?;
    let mut clips = records(manifest, relaxed_dims)?;
    let exclude = exclude_speakers.unwrap_or_default();
    clips.retain(|c| !exclude.contains(&c.speaker_id));
    let defaults = profile.unimodal(modality);
    let epochs = epochs.unwrap_or(defaults.epochs);
    let mut config = TrainConfig::new(
        epochs,
        hold_epoch.unwrap_or(defaults.hold_epoch.min(epochs)),
        seed,
    );
    config.base_lr = lr;
    config.batch_size = batch_size;
    let mut model =
        ModelConfig::from_profile(profile, modality, parse::<AttentionKind>(attention)?);
    model.mask = mask;
    let (params, history) = py
        .detach(|| -> veritas_core::Result<_> {
            let max_len = max_length(&clips, modality)?;
            let batch = PaddedBatch::from_clips(&clips, modality, Some(max_len))?;
            let mut params = build_unimodal(&model, batch.dim(), max_len, seed)?;
            let history =
                training::train(&mut params, &UnimodalObjective { batch: &batch }, &config)?;
            Ok((params, history))
        })
        .py()?;
    Ok((Model { params }, history_dicts(py, &history)?))
}

/// Calibrates a dot-product model for one speaker with `clips_per_label`
/// clips of each label. Returns the calibrated model and a report with
/// accuracy before and after on the speaker's remaining clips.
#[pyfunction]
#[pyo3(signature = (
    model, manifest, speaker, clips_per_label = 2, branch_hidden = 32,
    lr = training::CALIBRATION_LR, max_epochs = training::CALIBRATION_EPOCH_CAP, seed = 0, relaxed_dims = false
))]
#[allow(clippy::too_many_arguments)]
fn calibrate<'py>(
    py: Python<'py>,
    model: &Model,
    manifest: &str,
    speaker: &str,
    clips_per_label: usize,
    branch_hidden: usize,
    lr: f64,
    max_epochs: usize,
    seed: u64,
    relaxed_dims: bool,
) -> PyResult<(Model, Bound<'py, PyDict>)> {
    let arch = Architecture::unimodal(&model.params).py()?.clone();
    let person: Vec<ClipRecord> = records(manifest, relaxed_dims)?
        .into_iter()
        .filter(|c| c.speaker_id == speaker)
        .collect();
    let mut config = TrainConfig::calibration(seed);
    config.base_lr = lr;
    config.epochs = max_epochs;
    config.hold_epoch = max_epochs;
    let base = &model.params;
    let (calibrated, history, before, after) = py
        .detach(|| -> veritas_core::Result<_> {
            let (chosen, rest) =
                training::select_calibration_clips(&person, clips_per_label, seed)?;
            if rest.is_empty() {
                return Err(Error::Data(format!(
                    "speaker `{speaker}` has no clips left to score"
                )));
            }
            let pick = |idx: &[usize]| idx.iter().map(|&i| person[i].clone()).collect::<Vec<_>>();
            let held =
                PaddedBatch::from_clips(&pick(&rest), arch.config.modality, Some(arch.max_len))?;
            let before = training::evaluate(base, &held)?;
            let branched = attach_lora_branch(base, branch_hidden, seed)?;
            let (calibrated, history) = training::calibrate(&branched, &pick(&chosen), &config)?;
            let after = training::evaluate(&calibrated, &held)?;
            Ok((calibrated, history, before, after))
        })
        .py()?;
    let report = PyDict::new(py);
    report.set_item("before", metrics_dict(py, &before)?)?;
    report.set_item("after", metrics_dict(py, &after)?)?;
    report.set_item("epochs", history.epochs.len())?;
    report.set_item("stopped_early", history.stopped_early)?;
    Ok((Model { params: calibrated }, report))
}

/// MFCC matrix (frames x n_mfcc) of a mono waveform.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, n_mfcc = 13, frame_seconds = 0.025, hop_seconds = 0.010, n_mels = 26))]
fn mfcc(
    samples: Vec<f64>,
    sample_rate: u32,
    n_mfcc: usize,
    frame_seconds: f64,
    hop_seconds: f64,
    n_mels: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let config = MfccConfig {
        n_mfcc,
        frame_seconds,
        hop_seconds,
        n_mels,
        ..MfccConfig::default()
    };
    Ok(compute_mfcc(&samples, sample_rate, &config).py()?.to_rows())
}

/// Final label ("deceptive" or "truthful") from visual, audio and text
/// probability pairs.
#[pyfunction]
fn vote(visual: [f64; 2], audio: [f64; 2], text: [f64; 2]) -> PyResult<&'static str> {
    let preds = [
        (Modality::Visual, visual),
        (Modality::Audio, audio),
        (Modality::Text, text),
    ];
    Ok(majority_vote("", &preds).py()?.final_label.name())
}

#[pyfunction]
fn label_names() -> Vec<&'static str> {
    vec![Label::Deceptive.name(), Label::Truthful.name()]
}

#[pyfunction]
fn lr_trajectory(base_lr: f64, epochs: usize, hold_epoch: usize) -> Vec<f64> {
    training::lr_trajectory(base_lr, epochs, hold_epoch)
}

#[pyfunction]
#[pyo3(signature = (n, k, seed = 0))]
fn kfold_split(n: usize, k: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    training::kfold_split(n, k, seed).py()
}

/// Runs the command-line tool with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| cli::run(std::iter::once("veritas".to_owned()).chain(args)))
}

#[pymodule]
fn veritas(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train_unimodal, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(mfcc, m)?)?;
    m.add_function(wrap_pyfunction!(vote, m)?)?;
    m.add_function(wrap_pyfunction!(label_names, m)?)?;
    m.add_function(wrap_pyfunction!(lr_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(kfold_split, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
