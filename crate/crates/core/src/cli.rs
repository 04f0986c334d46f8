//! Command-line front end: `gen`, `train`, `decode`, `eval` and `pipeline`.
//!
//! Every run reads one flat TOML file (all keys optional) and applies
//! command-line overrides on top. The effective configuration is written to
//! `<out>/config.toml` before any work starts.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{generate, read_corpus, write_corpus, Corpus, CorpusSpec, OverlapMode};
use crate::decode::{attention_csv, longform_decode, BeamConfig};
use crate::eval::{score_segments, write_reports};
use crate::model::{load_checkpoint, Aggregation, ModelConfig, SpeakerAttributedModel};
use crate::stno::{read_annotations, write_annotations, DiarizationSegment};
use crate::train::{examples_from_recordings, RunOptions, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn config(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Flat view of corpus, model, training and decoding settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds corpus generation, model initialization and batch sampling.
    pub seed: u64,

    pub train_recordings: usize,
    pub dev_recordings: usize,
    pub test_recordings: usize,
    pub speakers_min: usize,
    pub speakers_max: usize,
    pub overlap_mode: OverlapMode,
    pub windows_per_recording: usize,
    pub frame_s: f64,
    pub noise_std: f64,
    pub word_frames_min: usize,
    pub word_frames_max: usize,
    pub words_min: usize,
    pub words_max: usize,
    pub pause_prob: f64,
    pub pause_frames_min: usize,
    pub pause_frames_max: usize,
    pub gap_mean_s: f64,
    pub overlap_prob: f64,

    pub vocab_size: usize,
    pub max_speakers: usize,
    pub num_timestamps: usize,
    pub window_s: f64,
    pub feature_dim: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_width: usize,
    pub max_tokens: usize,
    pub aggregation: Aggregation,

    /// Single-speaker steps on the base weights before fine-tuning.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub warmup_steps: usize,
    pub stage2_lr_new: f64,
    pub stage2_lr_base: f64,
    pub effective_batch: usize,
    pub max_steps: usize,
    pub spk_ts_loss_weight: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub augment: bool,
    pub freeze_fddt: bool,
    pub val_every: usize,
    pub val_max_examples: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,

    pub beam_size: usize,
    pub length_norm: f64,
    pub enforce_constraints: bool,
    pub dump_attention: bool,
    /// Lowercase and strip punctuation before scoring.
    pub normalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            train_recordings: 4000,
            dev_recordings: 32,
            test_recordings: 64,
            speakers_min: 2,
            speakers_max: 2,
            overlap_mode: OverlapMode::LeftAlignedFull,
            windows_per_recording: 1,
            frame_s: 0.2,
            noise_std: 0.1,
            word_frames_min: 2,
            word_frames_max: 3,
            words_min: 2,
            words_max: 4,
            pause_prob: 1.0,
            pause_frames_min: 1,
            pause_frames_max: 2,
            gap_mean_s: 0.4,
            overlap_prob: 0.2,
            vocab_size: 16,
            max_speakers: 6,
            num_timestamps: 41,
            window_s: 8.0,
            feature_dim: 16,
            model_dim: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ffn_dim: 64,
            conv_width: 3,
            max_tokens: 64,
            aggregation: Aggregation::Concatenation,
            pretrain_steps: 1500,
            pretrain_lr: 1e-3,
            stage1_steps: 300,
            stage1_lr: 1e-3,
            warmup_steps: 100,
            stage2_lr_new: 1e-3,
            stage2_lr_base: 1e-3,
            effective_batch: 8,
            max_steps: 3000,
            spk_ts_loss_weight: 5.0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            augment: true,
            freeze_fddt: false,
            val_every: 500,
            val_max_examples: 32,
            checkpoint_every: 1000,
            log_every: 100,
            beam_size: 4,
            length_norm: 0.6,
            enforce_constraints: true,
            dump_attention: false,
            normalize: true,
        }
    }
}

impl RunConfig {
    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            train_recordings: self.train_recordings,
            dev_recordings: self.dev_recordings,
            test_recordings: self.test_recordings,
            speakers_min: self.speakers_min,
            speakers_max: self.speakers_max,
            max_speakers: self.max_speakers,
            vocab_size: self.vocab_size,
            overlap_mode: self.overlap_mode,
            window_s: self.window_s,
            frame_s: self.frame_s,
            windows_per_recording: self.windows_per_recording,
            feature_dim: self.feature_dim,
            noise_std: self.noise_std,
            word_frames_min: self.word_frames_min,
            word_frames_max: self.word_frames_max,
            words_min: self.words_min,
            words_max: self.words_max,
            pause_prob: self.pause_prob,
            pause_frames_min: self.pause_frames_min,
            pause_frames_max: self.pause_frames_max,
            gap_mean_s: self.gap_mean_s,
            overlap_prob: self.overlap_prob,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            model_dim: self.model_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            num_words: self.vocab_size,
            num_speakers: self.max_speakers,
            num_timestamps: self.num_timestamps,
            window_s: self.window_s,
            aggregation: self.aggregation,
            max_frames: (self.window_s / self.frame_s).round() as usize,
            max_tokens: self.max_tokens,
            conv_width: self.conv_width,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            stage1_steps: self.stage1_steps,
            stage1_lr: self.stage1_lr,
            warmup_steps: self.warmup_steps,
            stage2_lr_new: self.stage2_lr_new,
            stage2_lr_base: self.stage2_lr_base,
            effective_batch: self.effective_batch,
            max_steps: self.max_steps,
            spk_ts_loss_weight: self.spk_ts_loss_weight,
            seed: self.seed,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            augment: self.augment,
            freeze_fddt: self.freeze_fddt,
            val_every: self.val_every,
            val_max_examples: self.val_max_examples,
            checkpoint_every: self.checkpoint_every,
            ..TrainConfig::default()
        }
    }

    /// Base-weight training on single-speaker renderings of the same
    /// vocabulary.
    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            stage1_steps: 0,
            warmup_steps: 0,
            stage2_lr_new: self.pretrain_lr,
            stage2_lr_base: self.pretrain_lr,
            max_steps: self.pretrain_steps,
            freeze_new: true,
            augment: false,
            checkpoint_every: 0,
            ..self.train_config()
        }
    }

    pub fn pretrain_corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            speakers_min: 1,
            speakers_max: 1,
            overlap_mode: OverlapMode::LeftAlignedFull,
            ..self.corpus_spec()
        }
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam_size: self.beam_size,
            max_tokens: None,
            length_norm: self.length_norm,
            enforce_constraints: self.enforce_constraints,
        }
    }

    /// Check every section and their agreement.
    pub fn validate(&self) -> Result<(), CliError> {
        self.corpus_spec().validate().map_err(config)?;
        let model = self.model_config();
        model.validate().map_err(config)?;
        let frames = self.window_s / self.frame_s;
        if (frames - frames.round()).abs() > 1e-6 {
            return Err(config(format!(
                "window_s {} is not a whole number of {} s frames",
                self.window_s, self.frame_s
            )));
        }
        self.train_config().validate().map_err(config)?;
        if self.pretrain_steps > 0 {
            self.pretrain_config().validate().map_err(config)?;
        }
        self.beam_config().validate().map_err(config)?;
        Ok(())
    }
}

/// Parse `key=value`; the value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
fn parse_override(s: &str) -> Result<(String, toml::Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config(format!("override {s:?} is not key=value")))?;
    let value = match format!("v = {v}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(v.to_string()),
    };
    Ok((k.trim().to_string(), value))
}

/// Load `path` (if any), apply overrides in order, then validate.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = parse_override(o)?;
        table.insert(k, v);
    }
    let cfg = RunConfig::deserialize(toml::Value::Table(table)).map_err(config)?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Parser)]
#[command(name = "mtasr", version, about = "Speaker-attributed multi-talker ASR on synthetic mixtures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat TOML config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory; every output lands under it.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub beam: Option<usize>,
    #[arg(long, global = true)]
    pub aggregation: Option<Aggregation>,
    #[arg(long = "spk-ts-weight", global = true)]
    pub spk_ts_weight: Option<f64>,
    #[arg(long = "dump-attention", global = true)]
    pub dump_attention: bool,
    /// Override any config key, e.g. `--set max_steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus into `<out>/corpus`.
    Gen,
    /// Train on a corpus; writes `<out>/train`.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Long-form decode of a corpus split with oracle diarization.
    Decode {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score hypothesis segments against references.
    Eval {
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        hypothesis: Option<PathBuf>,
    },
    /// gen, train, decode and eval in one run directory.
    Pipeline,
}

impl CommonArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(b) = self.beam {
            o.push(format!("beam_size={b}"));
        }
        if let Some(a) = self.aggregation {
            o.push(format!("aggregation=\"{a}\""));
        }
        if let Some(w) = self.spk_ts_weight {
            o.push(format!("spk_ts_loss_weight={w:?}"));
        }
        if self.dump_attention {
            o.push("dump_attention=true".into());
        }
        o.extend(self.set.iter().cloned());
        o
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    write(&out.join("config.toml"), &toml::to_string(cfg).map_err(runtime)?)
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Corpus, CliError> {
    let corpus = generate(&cfg.corpus_spec()).map_err(config)?;
    write_corpus(&corpus, &out.join("corpus")).map_err(runtime)?;
    eprintln!(
        "wrote {} train, {} dev, {} test recordings to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        out.join("corpus").display()
    );
    Ok(corpus)
}

fn check_corpus(cfg: &RunConfig, corpus: &Corpus) -> Result<(), CliError> {
    let s = &corpus.spec;
    if s.feature_dim != cfg.feature_dim
        || s.vocab_size != cfg.vocab_size
        || (s.window_s - cfg.window_s).abs() > 1e-9
        || (s.frame_s - cfg.frame_s).abs() > 1e-9
    {
        return Err(config(
            "corpus on disk disagrees with the config in feature_dim, vocab_size, window_s or frame_s",
        ));
    }
    if s.speakers_max > cfg.max_speakers {
        return Err(config(format!(
            "corpus has up to {} speakers but the model holds {}",
            s.speakers_max, cfg.max_speakers
        )));
    }
    Ok(())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) => CliError::Config(m),
        e => runtime(e),
    }
}

/// Single-speaker pre-training of the base weights.
pub fn pretrain(cfg: &RunConfig, out: Option<&Path>) -> Result<SpeakerAttributedModel<f32>, CliError> {
    let model = SpeakerAttributedModel::<f32>::new(cfg.model_config(), cfg.seed).map_err(config)?;
    if cfg.pretrain_steps == 0 {
        return Ok(model);
    }
    let spec = CorpusSpec {
        test_recordings: 0,
        ..cfg.pretrain_corpus_spec()
    };
    let corpus = generate(&spec).map_err(config)?;
    let mcfg = cfg.model_config();
    let train = examples_from_recordings(&mcfg, &corpus.train).map_err(train_error)?;
    let dev = examples_from_recordings(&mcfg, &corpus.dev).map_err(train_error)?;
    let mut t = Trainer::new(model, cfg.pretrain_config()).map_err(train_error)?;
    t.run(
        &train,
        &dev,
        &RunOptions {
            out_dir: out.map(Path::to_path_buf),
            log_every: cfg.log_every,
        },
    )
    .map_err(train_error)?;
    Ok(t.model)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, corpus_dir: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let corpus = read_corpus(corpus_dir).map_err(runtime)?;
    check_corpus(cfg, &corpus)?;
    let mcfg = cfg.model_config();
    let train = examples_from_recordings(&mcfg, &corpus.train).map_err(train_error)?;
    let dev = examples_from_recordings(&mcfg, &corpus.dev).map_err(train_error)?;
    let dir = out.join("train");
    let mut trainer = match resume {
        Some(ck) => {
            let t = Trainer::resume(ck).map_err(runtime)?;
            eprintln!("resuming at step {}", t.step + 1);
            t
        }
        None => {
            let model = pretrain(cfg, Some(&dir.join("pretrain")))?;
            Trainer::new(model, cfg.train_config()).map_err(train_error)?
        }
    };
    trainer
        .run(
            &train,
            &dev,
            &RunOptions {
                out_dir: Some(dir.clone()),
                log_every: cfg.log_every,
            },
        )
        .map_err(train_error)?;
    eprintln!("model written to {}", dir.join("model").display());
    Ok(())
}

#[derive(Serialize)]
struct WindowRecord<'a> {
    recording_id: &'a str,
    window: usize,
    offset_s: f64,
    tokens: String,
    score: Option<f64>,
    error: Option<&'a str>,
}

pub fn cmd_decode(
    cfg: &RunConfig,
    out: &Path,
    corpus_dir: &Path,
    checkpoint: &Path,
    split: &str,
) -> Result<Vec<DiarizationSegment>, CliError> {
    let model = load_checkpoint::<f32>(checkpoint).map_err(runtime)?;
    let corpus = read_corpus(corpus_dir).map_err(runtime)?;
    let recordings = corpus
        .split(split)
        .ok_or_else(|| config(format!("unknown split {split:?}")))?;
    let vocab = model.vocabulary();
    let beam = cfg.beam_config();
    let dir = out.join("decode");
    let mut segments = Vec::new();
    let mut windows = String::new();
    let mut failed = 0;
    for rec in recordings {
        let res = longform_decode(&model, &rec.id, &rec.features, &rec.segments, &beam, cfg.dump_attention)
            .map_err(runtime)?;
        for w in &res.windows {
            let record = WindowRecord {
                recording_id: &rec.id,
                window: w.index,
                offset_s: w.offset_s,
                tokens: vocab.render(&w.tokens),
                score: w.score,
                error: w.error.as_deref(),
            };
            windows.push_str(&serde_json::to_string(&record).map_err(runtime)?);
            windows.push('\n');
            if let Some(e) = &w.error {
                failed += 1;
                eprintln!("{} window {}: {e}", rec.id, w.index);
            }
            if let Some(att) = &w.attention {
                write(
                    &dir.join("attention").join(format!("{}_w{:03}.csv", rec.id, w.index)),
                    &attention_csv(att),
                )?;
            }
        }
        segments.extend(res.segments);
    }
    std::fs::create_dir_all(&dir).map_err(runtime)?;
    write_annotations(&dir.join("segments.jsonl"), &segments).map_err(runtime)?;
    write(&dir.join("windows.jsonl"), &windows)?;
    eprintln!(
        "decoded {} recordings ({failed} failed windows) into {}",
        recordings.len(),
        dir.display()
    );
    Ok(segments)
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, reference: &Path, hypothesis: &Path) -> Result<Option<f64>, CliError> {
    let r = read_annotations(reference).map_err(runtime)?;
    let h = read_annotations(hypothesis).map_err(runtime)?;
    let per = score_segments(&r, &h, cfg.normalize);
    let all = write_reports(&out.join("eval"), &per).map_err(runtime)?;
    match all.cpwer {
        Some(c) => println!("cpWER {:.2}% over {} recordings", 100.0 * c, per.len()),
        None => println!("cpWER undefined: empty reference"),
    }
    Ok(all.cpwer)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(cli.common.config.as_deref(), &cli.common.overrides())?;
    let out = cli.common.out.clone();
    std::fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    echo_config(&cfg, &out)?;
    let default_corpus = out.join("corpus");
    match cli.command {
        Command::Gen => cmd_gen(&cfg, &out).map(|_| ()),
        Command::Train { corpus, resume } => {
            cmd_train(&cfg, &out, corpus.as_deref().unwrap_or(&default_corpus), resume.as_deref())
        }
        Command::Decode {
            corpus,
            checkpoint,
            split,
        } => {
            let ck = checkpoint.unwrap_or_else(|| out.join("train").join("model"));
            cmd_decode(&cfg, &out, corpus.as_deref().unwrap_or(&default_corpus), &ck, &split).map(|_| ())
        }
        Command::Eval { reference, hypothesis } => {
            let r = reference.unwrap_or_else(|| default_corpus.join("test").join("annotations.jsonl"));
            let h = hypothesis.unwrap_or_else(|| out.join("decode").join("segments.jsonl"));
            cmd_eval(&cfg, &out, &r, &h).map(|_| ())
        }
        Command::Pipeline => {
            cmd_gen(&cfg, &out)?;
            cmd_train(&cfg, &out, &default_corpus, None)?;
            cmd_decode(&cfg, &out, &default_corpus, &out.join("train").join("model"), "test")?;
            cmd_eval(
                &cfg,
                &out,
                &default_corpus.join("test").join("annotations.jsonl"),
                &out.join("decode").join("segments.jsonl"),
            )
            .map(|_| ())
        }
    }
}

/// Parse arguments, run, and map the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
