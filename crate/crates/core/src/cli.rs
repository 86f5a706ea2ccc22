//! Command-line driver: `veritas <subcommand> [flags]`.
//!
//! Settings resolve as built-in profile < `--config` file < flags. Exit
//! codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::ensemble::{
    predictions_from_probs, read_predictions, vote_files, write_predictions, write_votes,
    Prediction,
};
use crate::error::{Error, Result};
use crate::features::{
    compute_mfcc, load_manifest_with, max_length, mean_pool_audio, read_wav_mono,
    write_feature_csv, ClipRecord, DimRules, Label, MfccConfig, Modality, PaddedBatch,
    MANIFEST_FILE, STEP_SECONDS,
};
use crate::interpret::{
    attention_profile, export_profiles, padding_mass, top_k_frames, AttentionProfile,
};
use crate::layers::{AttentionKind, AttentionTrace};
use crate::models::{
    attach_lora_branch, build_cross_attention, build_unimodal, forward_cross_attention,
    forward_unimodal, load_checkpoint, save_checkpoint, Architecture, CrossArch, ModelConfig,
    ParameterStore, Profile,
};
use crate::numeric::Tensor;
use crate::synth::{
    generate_base_dataset, generate_individual_clusters, ClusterConfig, SynthConfig,
};
use crate::training::{
    calibrate, cross_validate, kfold_grouped, kfold_split, predictions, select_calibration_clips,
    train, train_test_split, CrossObjective, Metrics, TrainConfig, TrainHistory, UnimodalObjective,
    CALIBRATION_EPOCH_CAP, CALIBRATION_LR,
};

const PROFILE_TABLE: &str = "\
Profile defaults (epochs / epochs before decay):
  trial    visual 20/10  audio 30/20  text 30/25  fuse-cross 15/10
  atsface  visual 40/20  audio 40/30  text 30/20  fuse-cross 20/10
BiLSTM widths: 64,32 (trial text 32; atsface text 128,64).
Dense widths: 64,16,8 (trial audio 32,16,8); fuse-cross 256,64,16.
Batch size 32, Adam lr 1e-3, test fraction 0.2, seed 0.";

#[derive(Parser, Debug)]
#[command(
    name = "veritas",
    version,
    about = "Attention BiLSTM deception classifiers: train, fuse, calibrate, explain"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic dataset (manifest + feature CSVs)
    Synth(SynthArgs),
    /// Extract pooled MFCC features from a 16-bit mono WAV file
    Mfcc(MfccArgs),
    /// Train a unimodal model and write a checkpoint plus `<out>.log`
    #[command(after_help = PROFILE_TABLE)]
    Train(TrainArgs),
    /// Score a checkpoint on a manifest; writes predictions and metrics
    Evaluate(EvaluateArgs),
    /// Majority vote over visual, audio and text prediction files
    Vote(VoteArgs),
    /// Train and evaluate the cross-attention fusion model
    #[command(after_help = PROFILE_TABLE)]
    FuseCross(FuseCrossArgs),
    /// Adapt a trained dot-product model to one speaker with 2+2 clips
    Calibrate(CalibrateArgs),
    /// Export per-step attention profiles and print the top-k steps
    Explain(ExplainArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Seed for every random choice [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` file; flags given on the command line win
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Manifest file, or the directory holding manifest.jsonl
    #[arg(long)]
    pub manifest: PathBuf,
    /// Accept any feature width per modality (widths must still agree)
    #[arg(long)]
    pub relaxed_dims: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// Hyperparameter preset: trial or atsface [default: trial]
    #[arg(long)]
    pub profile: Option<Profile>,
    /// Training epochs [default: from profile]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs run at the base rate before the e^-0.1 decay [default: from profile]
    #[arg(long)]
    pub hold_epoch: Option<usize>,
    /// Mini-batch size [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fraction of clips held out for testing [default: 0.2]
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Restrict attention and pooling to unpadded steps [default: off]
    #[arg(long)]
    pub mask: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Clips per label [default: 100]
    #[arg(long)]
    pub clips_per_class: Option<usize>,
    /// Modalities to generate, comma separated [default: visual,audio,text]
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<Modality>>,
    /// Visual feature width [default: 128]
    #[arg(long)]
    pub visual_dim: Option<usize>,
    /// Audio feature width [default: 13]
    #[arg(long)]
    pub audio_dim: Option<usize>,
    /// Text feature width [default: 100]
    #[arg(long)]
    pub text_dim: Option<usize>,
    /// Shortest clip in visual/audio steps [default: 50]
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Longest clip in visual/audio steps [default: 250]
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Distance between class means [default: 4]
    #[arg(long)]
    pub delta: Option<f64>,
    /// Norm of each speaker's offset vector [default: 0]
    #[arg(long)]
    pub speaker_offset: Option<f64>,
    /// Standard deviation of the white noise [default: 1]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Number of speakers [default: 10]
    #[arg(long)]
    pub speakers: Option<usize>,
    /// Generate the individual-cluster variant with held-out speakers
    #[arg(long)]
    pub clusters: bool,
    /// Speakers sharing the class direction (cluster variant) [default: 12]
    #[arg(long)]
    pub train_speakers: Option<usize>,
    /// Speakers with a rotated class direction (cluster variant) [default: 6]
    #[arg(long)]
    pub held_out_speakers: Option<usize>,
    /// Clips per label per speaker (cluster variant) [default: 8]
    #[arg(long)]
    pub clips_per_label: Option<usize>,
    /// Rotation of the held-out class direction (cluster variant) [default: 180]
    #[arg(long)]
    pub shift_degrees: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct MfccArgs {
    /// 16-bit PCM mono WAV file
    #[arg(long)]
    pub wav: PathBuf,
    /// Output CSV, one row per pooled step
    #[arg(long)]
    pub out: PathBuf,
    /// Coefficients per frame [default: 13]
    #[arg(long)]
    pub n_mfcc: Option<usize>,
    /// Mel filters [default: 26]
    #[arg(long)]
    pub n_mels: Option<usize>,
    /// Frame length in seconds [default: 0.025]
    #[arg(long)]
    pub frame_seconds: Option<f64>,
    /// Hop in seconds [default: 0.01]
    #[arg(long)]
    pub hop_seconds: Option<f64>,
    /// Mean-pool window in seconds [default: 0.2]
    #[arg(long)]
    pub pool_seconds: Option<f64>,
    /// Write the per-frame coefficients without pooling
    #[arg(long)]
    pub raw: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// visual, audio or text
    #[arg(long)]
    pub modality: Option<Modality>,
    /// simple or dot [default: simple]
    #[arg(long)]
    pub attention: Option<AttentionKind>,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Run k-fold cross-validation on the training split first; 0 skips it [default: 0]
    #[arg(long)]
    pub cv_folds: Option<usize>,
    /// Keep each speaker's clips inside one fold [default: off]
    #[arg(long)]
    pub group_by_speaker: bool,
    /// Speakers left out of training and testing, comma separated
    #[arg(long, value_delimiter = ',')]
    pub exclude_speakers: Vec<String>,
    /// Checkpoint path; the epoch log goes to `<out>.log`, the split to `<out>.split.json`
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split file written by `train`; only its test clips are scored
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Predictions TSV
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics JSON
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct VoteArgs {
    /// Predictions from the visual model
    #[arg(long)]
    pub visual: Option<PathBuf>,
    /// Predictions from the audio model
    #[arg(long)]
    pub audio: Option<PathBuf>,
    /// Predictions from the text model
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// Votes TSV
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics JSON (needs labels in the prediction files)
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct FuseCrossArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Checkpoint path; the epoch log goes to `<out>.log`, the split to `<out>.split.json`
    #[arg(long)]
    pub out: PathBuf,
    /// Test-set predictions TSV
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Test-set metrics JSON
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Trained dot-product unimodal checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Speaker to calibrate for
    #[arg(long)]
    pub speaker: String,
    /// Calibrated checkpoint; the epoch log goes to `<out>.log`
    #[arg(long)]
    pub out: PathBuf,
    /// Calibration clips per label [default: 2]
    #[arg(long)]
    pub clips_per_label: Option<usize>,
    /// Width of the branch BiLSTM [default: 32]
    #[arg(long)]
    pub branch_hidden: Option<usize>,
    /// Adam learning rate [default: 0.005]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epoch cap when 100 % training accuracy is never reached [default: 200]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Before/after metrics on the speaker's remaining clips (JSON)
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split file written by `train`; only its test clips are explained
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Profiles TSV
    #[arg(long)]
    pub out: PathBuf,
    /// Steps listed per clip [default: 5]
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Attention block of a fusion model: visual, audio or text [default: visual]
    #[arg(long)]
    pub stream: Option<Modality>,
    #[command(flatten)]
    pub common: Common,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
    pub modality: Option<Modality>,
    pub attention: Option<AttentionKind>,
    pub mask: Option<bool>,
    pub epochs: Option<usize>,
    pub hold_epoch: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub test_fraction: Option<f64>,
    pub cv_folds: Option<usize>,
    pub group_by_speaker: Option<bool>,
    pub relaxed_dims: Option<bool>,
    pub clips_per_label: Option<usize>,
    pub branch_hidden: Option<usize>,
    pub calibration_lr: Option<f64>,
    pub max_epochs: Option<usize>,
    pub top_k: Option<usize>,
    pub clips_per_class: Option<usize>,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub delta: Option<f64>,
    pub speaker_offset: Option<f64>,
    pub noise: Option<f64>,
    pub speakers: Option<usize>,
    pub train_speakers: Option<usize>,
    pub held_out_speakers: Option<usize>,
    pub shift_degrees: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings for a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub profile: Profile,
    pub modality: Option<Modality>,
    pub attention: AttentionKind,
    pub mask: bool,
    pub relaxed_dims: bool,
    pub test_fraction: f64,
    pub cv_folds: usize,
    pub group_by_speaker: bool,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    fn resolve(
        data: &DataArgs,
        flags: &TrainFlags,
        file: &FileConfig,
        seed: u64,
        out: &Path,
        defaults: impl Fn(Profile) -> crate::models::ProfileDefaults,
    ) -> Result<Self> {
        let profile = flags.profile.or(file.profile).unwrap_or(Profile::Trial);
        let d = defaults(profile);
        let mut train = TrainConfig::new(
            flags.epochs.or(file.epochs).unwrap_or(d.epochs),
            flags.hold_epoch.or(file.hold_epoch).unwrap_or(d.hold_epoch),
            seed,
        );
        if train.hold_epoch > train.epochs && flags.hold_epoch.or(file.hold_epoch).is_none() {
            train.hold_epoch = train.epochs;
        }
        if let Some(b) = flags.batch_size.or(file.batch_size) {
            train.batch_size = b;
        }
        if let Some(lr) = flags.lr.or(file.lr) {
            train.base_lr = lr;
        }
        train.validate()?;
        let test_fraction = flags.test_fraction.or(file.test_fraction).unwrap_or(0.2);
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!(
                "test fraction {test_fraction} must be in [0, 1)"
            )));
        }
        Ok(Self {
            manifest: resolve_manifest(&data.manifest),
            profile,
            modality: file.modality,
            attention: file.attention.unwrap_or(AttentionKind::Simple),
            mask: flags.mask || file.mask.unwrap_or(false),
            relaxed_dims: data.relaxed_dims || file.relaxed_dims.unwrap_or(false),
            test_fraction,
            cv_folds: file.cv_folds.unwrap_or(0),
            group_by_speaker: file.group_by_speaker.unwrap_or(false),
            train,
            out: out.to_path_buf(),
            seed,
        })
    }
}

/// Clip ids of a train/test split, stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub test_fraction: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Debug, Serialize)]
struct CalibrationReport<'a> {
    speaker: &'a str,
    calibration_clips: Vec<&'a str>,
    epochs: usize,
    stopped_early: bool,
    before: Metrics,
    after: Metrics,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

enum Failure {
    Usage(Error),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn usage<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn execute(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Synth(a) => {
            let (synth, clusters) = usage(synth_settings(&a))?;
            run_synth(&a.out, &synth, clusters.as_ref())?;
        }
        Command::Mfcc(a) => {
            usage(FileConfig::load(a.common.config.as_deref()))?;
            run_mfcc(&a)?;
        }
        Command::Train(a) => {
            let file = usage(FileConfig::load(a.common.config.as_deref()))?;
            let seed = a.common.seed.or(file.seed).unwrap_or(0);
            let modality = usage(a.modality.or(file.modality).ok_or_else(|| {
                Error::Config("--modality is required (visual, audio or text)".into())
            }))?;
            let mut run = usage(RunConfig::resolve(
                &a.data,
                &a.flags,
                &file,
                seed,
                &a.out,
                |p| p.unimodal(modality),
            ))?;
            run.modality = Some(modality);
            run.attention = a.attention.unwrap_or(run.attention);
            run.cv_folds = a.cv_folds.unwrap_or(run.cv_folds);
            run.group_by_speaker |= a.group_by_speaker;
            if run.cv_folds == 1 {
                return Err(Failure::Usage(Error::Config(
                    "--cv-folds must be 0 or at least 2".into(),
                )));
            }
            run_train(&run, &a.exclude_speakers)?;
        }
        Command::Evaluate(a) => {
            let file = usage(FileConfig::load(a.common.config.as_deref()))?;
            let relaxed = a.data.relaxed_dims || file.relaxed_dims.unwrap_or(false);
            run_evaluate(&a, relaxed)?;
        }
        Command::Vote(a) => {
            usage(FileConfig::load(a.common.config.as_deref()))?;
            run_vote(&a)?;
        }
        Command::FuseCross(a) => {
            let file = usage(FileConfig::load(a.common.config.as_deref()))?;
            let seed = a.common.seed.or(file.seed).unwrap_or(0);
            let run = usage(RunConfig::resolve(
                &a.data,
                &a.flags,
                &file,
                seed,
                &a.out,
                |p| p.cross_attention(),
            ))?;
            run_fuse_cross(&run, a.predictions.as_deref(), a.metrics.as_deref())?;
        }
        Command::Calibrate(a) => {
            let file = usage(FileConfig::load(a.common.config.as_deref()))?;
            let seed = a.common.seed.or(file.seed).unwrap_or(0);
            let mut config = TrainConfig::calibration(seed);
            config.base_lr = a.lr.or(file.calibration_lr).unwrap_or(CALIBRATION_LR);
            config.epochs = a
                .max_epochs
                .or(file.max_epochs)
                .unwrap_or(CALIBRATION_EPOCH_CAP);
            config.hold_epoch = config.epochs;
            usage(config.validate())?;
            let per_label = a.clips_per_label.or(file.clips_per_label).unwrap_or(2);
            if per_label < 2 {
                return Err(Failure::Usage(Error::Config(
                    "--clips-per-label must be at least 2".into(),
                )));
            }
            let hidden = a.branch_hidden.or(file.branch_hidden).unwrap_or(32);
            let relaxed = a.data.relaxed_dims || file.relaxed_dims.unwrap_or(false);
            run_calibrate(&a, &config, per_label, hidden, relaxed)?;
        }
        Command::Explain(a) => {
            let file = usage(FileConfig::load(a.common.config.as_deref()))?;
            let k = a.top_k.or(file.top_k).unwrap_or(5);
            if k == 0 {
                return Err(Failure::Usage(Error::Config(
                    "--top-k must be at least 1".into(),
                )));
            }
            let relaxed = a.data.relaxed_dims || file.relaxed_dims.unwrap_or(false);
            run_explain(&a, k, relaxed)?;
        }
    }
    Ok(())
}

fn synth_settings(a: &SynthArgs) -> Result<(SynthConfig, Option<ClusterConfig>)> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let d = SynthConfig::default();
    let width = |m: Modality, flag: Option<usize>| {
        flag.unwrap_or_else(|| {
            d.modalities
                .iter()
                .find(|(x, _)| *x == m)
                .map_or(0, |&(_, w)| w)
        })
    };
    let wanted = a
        .modalities
        .clone()
        .unwrap_or_else(|| Modality::ALL.to_vec());
    let modalities = wanted
        .iter()
        .map(|&m| {
            let flag = match m {
                Modality::Visual => a.visual_dim,
                Modality::Audio => a.audio_dim,
                Modality::Text => a.text_dim,
            };
            (m, width(m, flag))
        })
        .collect();
    let synth = SynthConfig {
        clips_per_class: a
            .clips_per_class
            .or(file.clips_per_class)
            .unwrap_or(d.clips_per_class),
        modalities,
        min_len: a.min_len.or(file.min_len).unwrap_or(d.min_len),
        max_len: a.max_len.or(file.max_len).unwrap_or(d.max_len),
        delta: a.delta.or(file.delta).unwrap_or(d.delta),
        speaker_offset: a
            .speaker_offset
            .or(file.speaker_offset)
            .unwrap_or(d.speaker_offset),
        noise: a.noise.or(file.noise).unwrap_or(d.noise),
        speakers: a.speakers.or(file.speakers).unwrap_or(d.speakers),
        seed: a.common.seed.or(file.seed).unwrap_or(0),
    };
    synth.validate()?;
    let clusters = a.clusters.then(|| {
        let c = ClusterConfig::default();
        ClusterConfig {
            train_speakers: a
                .train_speakers
                .or(file.train_speakers)
                .unwrap_or(c.train_speakers),
            held_out_speakers: a
                .held_out_speakers
                .or(file.held_out_speakers)
                .unwrap_or(c.held_out_speakers),
            clips_per_label: a
                .clips_per_label
                .or(file.clips_per_label)
                .unwrap_or(c.clips_per_label),
            shift_degrees: a
                .shift_degrees
                .or(file.shift_degrees)
                .unwrap_or(c.shift_degrees),
        }
    });
    Ok((synth, clusters))
}

fn run_synth(out: &Path, synth: &SynthConfig, clusters: Option<&ClusterConfig>) -> Result<()> {
    let data = match clusters {
        Some(c) => generate_individual_clusters(synth, c)?,
        None => generate_base_dataset(synth)?,
    };
    let manifest = data.write(out, synth, clusters)?;
    println!(
        "wrote {} clips to {}",
        data.records.len(),
        manifest.display()
    );
    Ok(())
}

fn run_mfcc(a: &MfccArgs) -> Result<()> {
    let d = MfccConfig::default();
    let config = MfccConfig {
        n_mfcc: a.n_mfcc.unwrap_or(d.n_mfcc),
        n_mels: a.n_mels.unwrap_or(d.n_mels),
        frame_seconds: a.frame_seconds.unwrap_or(d.frame_seconds),
        hop_seconds: a.hop_seconds.unwrap_or(d.hop_seconds),
        ..d
    };
    let (samples, rate) = read_wav_mono(&a.wav)?;
    let mfcc = compute_mfcc(&samples, rate, &config)?;
    let out = if a.raw {
        mfcc
    } else {
        mean_pool_audio(
            &mfcc,
            config.hop_seconds,
            a.pool_seconds.unwrap_or(STEP_SECONDS),
        )?
        .data
    };
    write_feature_csv(&a.out, &out, out.rows())?;
    println!(
        "wrote {} x {} MFCC rows to {}",
        out.rows(),
        out.cols(),
        a.out.display()
    );
    Ok(())
}

/// Accepts the manifest file itself, its directory, or its path without
/// the `.jsonl` extension.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        return path.join(MANIFEST_FILE);
    }
    if !path.exists() {
        let with_ext = path.with_extension("jsonl");
        if with_ext.exists() {
            return with_ext;
        }
    }
    path.to_path_buf()
}

fn load_records(manifest: &Path, relaxed: bool) -> Result<Vec<ClipRecord>> {
    let rules = if relaxed {
        DimRules::any()
    } else {
        DimRules::default()
    };
    let records = load_manifest_with(&resolve_manifest(manifest), &rules)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no clips", manifest.display())));
    }
    Ok(records)
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn pick(records: &[ClipRecord], idx: &[usize]) -> Vec<ClipRecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

fn split_records(
    records: &[ClipRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>, SplitFile)> {
    let (train_idx, test_idx) = train_test_split(records.len(), fraction, seed)?;
    if train_idx.is_empty() {
        return Err(Error::Data("no clips left for training".into()));
    }
    let ids = |idx: &[usize]| idx.iter().map(|&i| records[i].clip_id.clone()).collect();
    let split = SplitFile {
        seed,
        test_fraction: fraction,
        train: ids(&train_idx),
        test: ids(&test_idx),
    };
    Ok((pick(records, &train_idx), pick(records, &test_idx), split))
}

fn restrict_to_split(records: Vec<ClipRecord>, split: Option<&Path>) -> Result<Vec<ClipRecord>> {
    let Some(path) = split else {
        return Ok(records);
    };
    let split = SplitFile::read(path)?;
    let chosen: Vec<ClipRecord> = split
        .test
        .iter()
        .map(|id| {
            records
                .iter()
                .find(|r| &r.clip_id == id)
                .cloned()
                .ok_or_else(|| Error::Data(format!("split clip `{id}` is not in the manifest")))
        })
        .collect::<Result<_>>()?;
    if chosen.is_empty() {
        return Err(Error::Data(format!(
            "{}: the split has no test clips",
            path.display()
        )));
    }
    Ok(chosen)
}

fn log_summary(history: &TrainHistory) {
    if let Some(last) = history.last() {
        info!(
            "finished {} epochs: loss {:.4}, train accuracy {:.3}",
            history.epochs.len(),
            last.loss,
            last.train_accuracy
        );
    }
}

fn run_train(run: &RunConfig, exclude: &[String]) -> Result<()> {
    let modality = run.modality.expect("resolved before");
    let mut records = load_records(&run.manifest, run.relaxed_dims)?;
    records.retain(|r| !exclude.contains(&r.speaker_id));
    if records.is_empty() {
        return Err(Error::Data(
            "every clip belongs to an excluded speaker".into(),
        ));
    }
    let max_len = max_length(&records, modality)?;
    let (train_set, test_set, split) = split_records(&records, run.test_fraction, run.seed)?;
    let batch = PaddedBatch::from_clips(&train_set, modality, Some(max_len))?;
    let mut config = ModelConfig::from_profile(run.profile, modality, run.attention);
    config.mask = run.mask;

    if run.cv_folds >= 2 {
        let folds = if run.group_by_speaker {
            let speakers: Vec<String> = train_set.iter().map(|r| r.speaker_id.clone()).collect();
            kfold_grouped(&speakers, run.cv_folds, run.seed)?
        } else {
            kfold_split(train_set.len(), run.cv_folds, run.seed)?
        };
        let summary = cross_validate(&folds, |i, tr, te| {
            let mut params = build_unimodal(&config, batch.dim(), max_len, run.seed)?;
            train(
                &mut params,
                &UnimodalObjective {
                    batch: &batch.subset(tr),
                },
                &run.train,
            )?;
            let m = crate::training::evaluate(&params, &batch.subset(te))?;
            info!("fold {i}: accuracy {:.4}, F1 {:.4}", m.accuracy, m.f1);
            Ok(m)
        })?;
        println!(
            "cross-validation ({} folds): accuracy {:.4} +- {:.4}, F1 {:.4} +- {:.4}",
            folds.len(),
            summary.mean_accuracy,
            summary.sd_accuracy,
            summary.mean_f1,
            summary.sd_f1
        );
        write_json(&sidecar(&run.out, ".cv.json"), &summary)?;
    }

    let mut params = build_unimodal(&config, batch.dim(), max_len, run.seed)?;
    let history = train(
        &mut params,
        &UnimodalObjective { batch: &batch },
        &run.train,
    )?;
    log_summary(&history);
    save_checkpoint(&params, &run.out)?;
    history.write_log(&sidecar(&run.out, ".log"))?;
    split.write(&sidecar(&run.out, ".split.json"))?;
    if !test_set.is_empty() {
        let test = PaddedBatch::from_clips(&test_set, modality, Some(max_len))?;
        let m = crate::training::evaluate(&params, &test)?;
        println!(
            "test accuracy {:.4}, F1 {:.4} on {} clips",
            m.accuracy,
            m.f1,
            m.total()
        );
    }
    println!("wrote {}", run.out.display());
    Ok(())
}

fn cross_batches(records: &[ClipRecord], arch: &CrossArch) -> Result<[PaddedBatch; 3]> {
    let batch = |m: Modality| PaddedBatch::from_clips(records, m, Some(arch.stream(m).max_len));
    Ok([
        batch(Modality::Visual)?,
        batch(Modality::Audio)?,
        batch(Modality::Text)?,
    ])
}

/// Probabilities and traces of any checkpoint kind on `records`.
fn score(
    params: &ParameterStore,
    records: &[ClipRecord],
    stream: Modality,
) -> Result<(Tensor, Vec<AttentionTrace>, PaddedBatch)> {
    match &params.architecture {
        Some(Architecture::Unimodal(arch)) => {
            let batch = PaddedBatch::from_clips(records, arch.config.modality, Some(arch.max_len))?;
            let (probs, traces) = forward_unimodal(params, &batch)?;
            Ok((probs, traces, batch))
        }
        Some(Architecture::CrossAttention(arch)) => {
            let [v, a, t] = cross_batches(records, arch)?;
            let (probs, traces) = forward_cross_attention(params, &v, &a, &t)?;
            let picked = traces
                .into_iter()
                .map(|tr| match stream {
                    Modality::Visual => tr.visual,
                    Modality::Audio => tr.audio,
                    Modality::Text => tr.text,
                })
                .collect();
            let batch = match stream {
                Modality::Visual => v,
                Modality::Audio => a,
                Modality::Text => t,
            };
            Ok((probs, picked, batch))
        }
        None => Err(Error::Data(
            "checkpoint has no architecture descriptor".into(),
        )),
    }
}

fn run_evaluate(a: &EvaluateArgs, relaxed: bool) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let records = restrict_to_split(load_records(&a.data.manifest, relaxed)?, a.split.as_deref())?;
    let (probs, _, batch) = score(&params, &records, Modality::Visual)?;
    let preds = predictions_from_probs(&batch.clip_ids, &probs, &batch.labels)?;
    write_predictions(&a.out, &preds)?;
    let m = Metrics::from_predictions(&predictions(&probs), &batch.labels)?;
    if let Some(path) = &a.metrics {
        write_json(path, &m)?;
    }
    println!(
        "accuracy {:.4}, F1 {:.4}, macro F1 {:.4} on {} clips",
        m.accuracy,
        m.f1,
        m.macro_f1,
        m.total()
    );
    Ok(())
}

fn run_vote(a: &VoteArgs) -> Result<()> {
    let given = [
        (Modality::Visual, &a.visual),
        (Modality::Audio, &a.audio),
        (Modality::Text, &a.text),
    ];
    let missing: Vec<&str> = given
        .iter()
        .filter(|(_, p)| p.is_none())
        .map(|(m, _)| m.name())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing predictions for modality {}",
            missing.join(", ")
        )));
    }
    let sets = given
        .iter()
        .map(|(m, p)| Ok((*m, read_predictions(p.as_ref().expect("checked above"))?)))
        .collect::<Result<Vec<(Modality, Vec<Prediction>)>>>()?;
    let records = vote_files(&sets)?;
    write_votes(&a.out, &records)?;
    let labelled: Vec<(usize, usize)> = records
        .iter()
        .filter_map(|(r, t)| t.map(|t| (r.final_label.index(), t.index())))
        .collect();
    if labelled.len() == records.len() && !records.is_empty() {
        let (pred, truth): (Vec<usize>, Vec<usize>) = labelled.into_iter().unzip();
        let m = Metrics::from_predictions(&pred, &truth)?;
        if let Some(path) = &a.metrics {
            write_json(path, &m)?;
        }
        println!(
            "voting accuracy {:.4}, F1 {:.4} on {} clips",
            m.accuracy,
            m.f1,
            m.total()
        );
    } else if a.metrics.is_some() {
        return Err(Error::Data("metrics need a label for every clip".into()));
    } else {
        println!("voted on {} clips", records.len());
    }
    Ok(())
}

fn run_fuse_cross(
    run: &RunConfig,
    predictions_out: Option<&Path>,
    metrics_out: Option<&Path>,
) -> Result<()> {
    let records = load_records(&run.manifest, run.relaxed_dims)?;
    let mut dims = [(0, 0); 3];
    for (d, m) in dims.iter_mut().zip(Modality::ALL) {
        let first = records[0].require(m)?;
        *d = (first.dim(), max_length(&records, m)?);
    }
    let mut arch = CrossArch::from_profile(run.profile, dims);
    arch.mask = run.mask;
    let (train_set, test_set, split) = split_records(&records, run.test_fraction, run.seed)?;
    let [v, a, t] = cross_batches(&train_set, &arch)?;
    let mut params = build_cross_attention(&arch, run.seed)?;
    let history = train(&mut params, &CrossObjective::new(&v, &a, &t)?, &run.train)?;
    log_summary(&history);
    save_checkpoint(&params, &run.out)?;
    history.write_log(&sidecar(&run.out, ".log"))?;
    split.write(&sidecar(&run.out, ".split.json"))?;
    if test_set.is_empty() {
        if predictions_out.is_some() || metrics_out.is_some() {
            return Err(Error::Data(
                "no test clips to score; use a positive --test-fraction".into(),
            ));
        }
    } else {
        let [v, a, t] = cross_batches(&test_set, &arch)?;
        let (probs, _) = forward_cross_attention(&params, &v, &a, &t)?;
        let m = Metrics::from_predictions(&predictions(&probs), &v.labels)?;
        if let Some(path) = predictions_out {
            write_predictions(
                path,
                &predictions_from_probs(&v.clip_ids, &probs, &v.labels)?,
            )?;
        }
        if let Some(path) = metrics_out {
            write_json(path, &m)?;
        }
        println!(
            "test accuracy {:.4}, F1 {:.4} on {} clips",
            m.accuracy,
            m.f1,
            m.total()
        );
    }
    println!("wrote {}", run.out.display());
    Ok(())
}

fn run_calibrate(
    a: &CalibrateArgs,
    config: &TrainConfig,
    per_label: usize,
    hidden: usize,
    relaxed: bool,
) -> Result<()> {
    let base = load_checkpoint(&a.checkpoint)?;
    let arch = Architecture::unimodal(&base)?;
    if arch.branch.is_some() {
        return Err(Error::Config("the checkpoint is already calibrated".into()));
    }
    let records = load_records(&a.data.manifest, relaxed)?;
    let person: Vec<ClipRecord> = records
        .into_iter()
        .filter(|r| r.speaker_id == a.speaker)
        .collect();
    if person.is_empty() {
        return Err(Error::Data(format!(
            "speaker `{}` has no clips in the manifest",
            a.speaker
        )));
    }
    let (chosen, rest) = select_calibration_clips(&person, per_label, config.seed)?;
    if rest.is_empty() {
        return Err(Error::Data(format!(
            "speaker `{}` has no clips left to score",
            a.speaker
        )));
    }
    let cal = pick(&person, &chosen);
    let held = PaddedBatch::from_clips(
        &pick(&person, &rest),
        arch.config.modality,
        Some(arch.max_len),
    )?;
    let before = crate::training::evaluate(&base, &held)?;
    let branched = attach_lora_branch(&base, hidden, config.seed)?;
    let (calibrated, history) = calibrate(&branched, &cal, config)?;
    let after = crate::training::evaluate(&calibrated, &held)?;
    save_checkpoint(&calibrated, &a.out)?;
    history.write_log(&sidecar(&a.out, ".log"))?;
    if let Some(path) = &a.metrics {
        let report = CalibrationReport {
            speaker: &a.speaker,
            calibration_clips: cal.iter().map(|c| c.clip_id.as_str()).collect(),
            epochs: history.epochs.len(),
            stopped_early: history.stopped_early,
            before,
            after,
        };
        write_json(path, &report)?;
    }
    println!(
        "{}: accuracy {:.4} -> {:.4} on {} clips after {} epochs{}",
        a.speaker,
        before.accuracy,
        after.accuracy,
        after.total(),
        history.epochs.len(),
        if history.stopped_early {
            ""
        } else {
            " (epoch cap reached)"
        }
    );
    Ok(())
}

fn run_explain(a: &ExplainArgs, k: usize, relaxed: bool) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let records = restrict_to_split(load_records(&a.data.manifest, relaxed)?, a.split.as_deref())?;
    let stream = a.stream.unwrap_or(Modality::Visual);
    let (probs, traces, batch) = score(&params, &records, stream)?;
    let profiles: Vec<AttentionProfile> = traces
        .iter()
        .enumerate()
        .map(|(b, tr)| attention_profile(tr, batch.step_seconds, batch.valid_length(b)))
        .collect();
    export_profiles(&profiles, &a.out)?;

    let mut order: Vec<usize> = (0..profiles.len()).collect();
    order.sort_by(|&x, &y| profiles[x].clip_id.cmp(&profiles[y].clip_id));
    let mut out = String::new();
    for b in order {
        let p = &profiles[b];
        let top = top_k_frames(p, k.min(p.len()))?;
        let label = Label::from_index(crate::training::predict_label(probs.row(b)))?;
        let steps: Vec<String> = top
            .iter()
            .map(|&(i, s)| format!("{i}@{:.1}s={s:.4}", p.time_seconds(i)))
            .collect();
        out.push_str(&format!(
            "{}\t{}\tpadding {:.4}\t{}\n",
            p.clip_id,
            label.name(),
            padding_mass(p),
            steps.join(" ")
        ));
    }
    let mean_padding = profiles.iter().map(padding_mass).sum::<f64>() / profiles.len() as f64;
    out.push_str(&format!(
        "mean padding mass {mean_padding:.4} over {} clips\n",
        profiles.len()
    ));
    std::io::stdout()
        .write_all(out.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn grammar_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(run(["veritas", "train", "--bogus"]), 1);
        assert_eq!(run(["veritas", "frobnicate"]), 1);
        assert_eq!(run(["veritas", "--help"]), 0);
    }

    #[test]
    fn help_lists_defaults() {
        let mut cmd = Cli::command();
        let help = cmd
            .find_subcommand_mut("train")
            .unwrap()
            .render_long_help()
            .to_string();
        for needle in [
            "--seed",
            "--config",
            "--epochs",
            "--relaxed-dims",
            "trial    visual 20/10",
            "default: 32",
        ] {
            assert!(help.contains(needle), "missing {needle}");
        }
    }

    #[test]
    fn config_file_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "epochs = 7\nlr = 0.01\nprofile = \"atsface\"\n").unwrap();
        let file = FileConfig::load(Some(&path)).unwrap();
        let data = DataArgs {
            manifest: dir.path().to_path_buf(),
            relaxed_dims: false,
        };
        let flags = TrainFlags {
            epochs: Some(3),
            ..TrainFlags::default()
        };
        let run = RunConfig::resolve(&data, &flags, &file, 1, Path::new("m"), |p| {
            p.unimodal(Modality::Visual)
        })
        .unwrap();
        assert_eq!(run.profile, Profile::Atsface);
        assert_eq!(run.train.epochs, 3);
        assert_eq!(run.train.hold_epoch, 3);
        assert_eq!(run.train.base_lr, 0.01);
        assert_eq!(run.train.batch_size, 32);

        let plain = RunConfig::resolve(
            &data,
            &TrainFlags::default(),
            &FileConfig::default(),
            1,
            Path::new("m"),
            |p| p.unimodal(Modality::Visual),
        )
        .unwrap();
        assert_eq!((plain.train.epochs, plain.train.hold_epoch), (20, 10));

        fs::write(&path, "epochs = 7\nunknown_key = 1\n").unwrap();
        assert!(FileConfig::load(Some(&path)).is_err());
    }

    #[test]
    fn manifest_path_forms() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join(MANIFEST_FILE);
        fs::write(&manifest, "").unwrap();
        assert_eq!(resolve_manifest(dir.path()), manifest);
        assert_eq!(resolve_manifest(&dir.path().join("manifest")), manifest);
        assert_eq!(resolve_manifest(&manifest), manifest);
    }

    #[test]
    fn vote_names_missing_modality() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.tsv");
        write_predictions(&p, &[]).unwrap();
        let out = dir.path().join("votes.tsv");
        let args = VoteArgs {
            visual: Some(p.clone()),
            audio: None,
            text: Some(p),
            out,
            metrics: None,
            common: Common::default(),
        };
        let err = run_vote(&args).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("audio"), "{err}");
    }
}
