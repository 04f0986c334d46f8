//! Two-stage fine-tuning: first only the speaker-conditioning parameters
//! are trained, then everything, with the base weights at a much lower
//! learning rate.

mod data;
mod optim;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::{
    apply_permutation, check_example, example_segments, examples_from_recording, examples_from_recordings,
    speaker_order_augment,
    TrainingExample,
};
pub use optim::{AdamW, AdamWConfig};

use crate::decode::{greedy_decode, window_segments, DecodeError, EncodedWindow};
use crate::eval::{aggregate, cpwer, TranscriptSet};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointError, ModelError, SpeakerAttributedModel};
use crate::stno::{DiarizationSegment, StnoError};
use crate::tensor::{read_dump, write_dump, ParamGroup, Tape, TensorError, Var};
use crate::vocab::{Token, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("bad training data: {0}")]
    Data(String),
    #[error("target rejected: {0}")]
    InvalidTarget(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stno(#[from] StnoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("loss diverged at step {step}; last good parameters in {}", checkpoint.as_ref().map_or("(not saved)".to_string(), |p| p.display().to_string()))]
    Diverged { step: usize, checkpoint: Option<PathBuf> },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub warmup_steps: usize,
    pub stage2_lr_new: f64,
    pub stage2_lr_base: f64,
    /// Examples per optimizer step (gradients are accumulated).
    pub effective_batch: usize,
    pub max_steps: usize,
    /// Loss weight of speaker-timestamp target tokens.
    pub spk_ts_loss_weight: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Random speaker-slot permutation of every sampled example.
    pub augment: bool,
    /// Keep the diarization transforms frozen at identity (unconditioned
    /// baseline).
    pub freeze_fddt: bool,
    /// Train only the base weights, leaving every speaker-conditioning
    /// parameter at its initial value (single-speaker pre-training).
    pub freeze_new: bool,
    /// Validation cadence in steps; 0 validates only after the last step.
    pub val_every: usize,
    pub val_max_examples: usize,
    /// Checkpoint cadence in steps; 0 saves only the final state.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 1000,
            stage1_lr: 2e-4,
            warmup_steps: 500,
            stage2_lr_new: 2e-4,
            stage2_lr_base: 2e-6,
            effective_batch: 16,
            max_steps: 5000,
            spk_ts_loss_weight: 5.0,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            augment: true,
            freeze_fddt: false,
            freeze_new: false,
            val_every: 500,
            val_max_examples: 64,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        for (name, v) in [
            ("stage1_lr", self.stage1_lr),
            ("stage2_lr_new", self.stage2_lr_new),
            ("stage2_lr_base", self.stage2_lr_base),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.stage1_steps > self.max_steps {
            return fail("stage1_steps must not exceed max_steps");
        }
        if self.max_steps == 0 || self.effective_batch == 0 {
            return fail("max_steps and effective_batch must be positive");
        }
        if !(self.spk_ts_loss_weight > 0.0) {
            return fail("spk_ts_loss_weight must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("optimizer constants out of range");
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("weight_decay and grad_clip must be non-negative");
        }
        Ok(())
    }
}

/// Learning rates in effect at a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrPoint {
    pub stage: u8,
    pub lr_new: f64,
    /// Zero while the base weights are frozen.
    pub lr_base: f64,
}

/// Schedule at 1-based step `step`: linear warm-up of the new parameters
/// during stage 1, constant rates in stage 2.
pub fn schedule(cfg: &TrainConfig, step: usize) -> LrPoint {
    if step <= cfg.stage1_steps {
        let ramp = if cfg.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / cfg.warmup_steps as f64).min(1.0)
        };
        LrPoint {
            stage: 1,
            lr_new: cfg.stage1_lr * ramp,
            lr_base: 0.0,
        }
    } else {
        LrPoint {
            stage: 2,
            lr_new: cfg.stage2_lr_new,
            lr_base: cfg.stage2_lr_base,
        }
    }
}

pub struct LossOutput {
    pub loss: Var,
    pub value: f64,
    /// Unweighted cross-entropy of every decoder position.
    pub token_losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub targets: Vec<usize>,
}

/// Decoder input `prompt ++ target` and next-token targets ending in EOS.
pub fn teacher_forcing(vocab: &Vocabulary, target: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = vocab.prompt();
    input.extend_from_slice(target);
    let mut next: Vec<usize> = input[1..].to_vec();
    next.push(vocab.eos());
    (input, next)
}

/// Teacher-forced weighted cross-entropy of one example over the joint
/// distribution. Prompt positions other than the last carry no loss.
pub fn compute_loss(
    model: &SpeakerAttributedModel<f32>,
    tape: &Tape<f32>,
    example: &TrainingExample,
    spk_ts_loss_weight: f64,
) -> Result<LossOutput, TrainError> {
    let vocab = model.vocabulary();
    check_example(example, &vocab)?;
    if let Some(&id) = example.target.tokens().iter().find(|&&id| {
        matches!(vocab.token(id), Ok(Token::SpeakerTime(st)) if st.speaker >= example.masks.len())
    }) {
        return Err(TrainError::InvalidTarget(format!(
            "{}: token {} names a speaker without a mask",
            example.recording_id,
            vocab.render_token(id)
        )));
    }
    let (input, targets) = teacher_forcing(&vocab, example.target.tokens());
    let prompt = vocab.prompt().len();
    let weights: Vec<f64> = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if i + 1 < prompt {
                0.0
            } else if vocab.is_speaker_time(t) {
                spk_ts_loss_weight
            } else {
                1.0
            }
        })
        .collect();
    let (_, dec) = model.forward(tape, &example.features, &example.masks, &input)?;
    let wf: Vec<f32> = weights.iter().map(|&w| w as f32).collect();
    let loss = tape.softmax_cross_entropy(dec.logits, &targets, &wf)?;
    let value = tape.value(loss).data()[0] as f64;
    let logits = tape.value(dec.logits);
    let token_losses = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row: Vec<f64> = logits.row(i).iter().map(|&x| x as f64).collect();
            crate::tensor::log_sum_exp(&row) - row[t]
        })
        .collect();
    Ok(LossOutput {
        loss,
        value,
        token_losses,
        weights,
        targets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub stage: u8,
    pub lr_new: f64,
    pub lr_base: f64,
    pub loss: f64,
    pub val_cpwer: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,stage,lr_new,lr_base,loss,val_cpwer";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::new();
    writeln!(s, "{METRICS_HEADER}").unwrap();
    for r in rows {
        let val = r.val_cpwer.map_or(String::new(), |v| format!("{v:.6}"));
        writeln!(s, "{},{},{:.6e},{:.6e},{:.6},{}", r.step, r.stage, r.lr_new, r.lr_base, r.loss, val).unwrap();
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>, TrainError> {
    let bad = |l: &str| TrainError::Data(format!("bad metrics line {l:?}"));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            Ok(MetricsRow {
                step: f[0].parse().map_err(|_| bad(l))?,
                stage: f[1].parse().map_err(|_| bad(l))?,
                lr_new: f[2].parse().map_err(|_| bad(l))?,
                lr_base: f[3].parse().map_err(|_| bad(l))?,
                loss: f[4].parse().map_err(|_| bad(l))?,
                val_cpwer: if f[5].is_empty() {
                    None
                } else {
                    Some(f[5].parse().map_err(|_| bad(l))?)
                },
            })
        })
        .collect()
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Greedy-decode cpWER over examples, each window scored on its own.
pub fn validation_cpwer(
    model: &SpeakerAttributedModel<f32>,
    examples: &[TrainingExample],
) -> Result<Option<f64>, TrainError> {
    let vocab = model.vocabulary();
    let mut reports = Vec::with_capacity(examples.len());
    for ex in examples {
        let enc = EncodedWindow::new(model, &ex.features, &ex.masks)?;
        let tokens = greedy_decode(model, &enc, true)?;
        let hyp = window_segments(&vocab, &ex.recording_id, &ex.speakers, 0.0, &tokens).map_err(DecodeError::from)?;
        let reference = example_segments(ex, &vocab);
        let r: Vec<&DiarizationSegment> = reference.iter().collect();
        let h: Vec<&DiarizationSegment> = hyp.iter().collect();
        reports.push(cpwer(&TranscriptSet::from_segments(&r, false), &TranscriptSet::from_segments(&h, false)));
    }
    Ok(aggregate(&reports).cpwer)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainerState {
    step: usize,
    config: TrainConfig,
}

pub struct Trainer {
    pub model: SpeakerAttributedModel<f32>,
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: usize,
    pub metrics: Vec<MetricsRow>,
    optimizer: AdamW,
}

/// Where a run writes its files.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Print a progress line every this many steps (0 = silent).
    pub log_every: usize,
}

impl Trainer {
    pub fn new(model: SpeakerAttributedModel<f32>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let optimizer = AdamW::new(
            &model.params,
            AdamWConfig {
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.adam_eps,
                weight_decay: config.weight_decay,
            },
        );
        Ok(Trainer {
            model,
            config,
            step: 0,
            metrics: Vec::new(),
            optimizer,
        })
    }

    /// Whether parameter `name` of `group` may change at the given stage.
    fn trainable(&self, name: &str, group: ParamGroup, lr: &LrPoint) -> f64 {
        if self.config.freeze_fddt && name.starts_with("fddt.") {
            return 0.0;
        }
        match group {
            ParamGroup::New if self.config.freeze_new => 0.0,
            ParamGroup::New => lr.lr_new,
            ParamGroup::Base => lr.lr_base,
        }
    }

    /// The examples sampled for 1-based step `step`, after augmentation.
    /// Depends only on the seed and the step, so resumed runs see the same
    /// data.
    pub fn batch_for_step(&self, data: &[TrainingExample], step: usize) -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, step as u64));
        let vocab = self.model.vocabulary();
        let n = data.len();
        let b = self.config.effective_batch;
        let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, n, b.min(n)).into_vec();
        while idx.len() < b {
            idx.push(rand::Rng::gen_range(&mut rng, 0..n));
        }
        idx.into_iter()
            .map(|i| {
                if self.config.augment {
                    speaker_order_augment(&data[i], &vocab, &mut rng)
                } else {
                    data[i].clone()
                }
            })
            .collect()
    }

    /// One optimizer step on a freshly sampled batch. Returns the mean
    /// loss of the batch.
    pub fn train_step(&mut self, data: &[TrainingExample]) -> Result<MetricsRow, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Data("no training examples".into()));
        }
        let step = self.step + 1;
        let lr = schedule(&self.config, step);
        let batch = self.batch_for_step(data, step);
        self.model.params.zero_grads();
        let mut total = 0.0;
        for ex in &batch {
            let tape = Tape::new();
            let out = compute_loss(&self.model, &tape, ex, self.config.spk_ts_loss_weight)?;
            total += out.value;
            let grads = tape.backward(out.loss);
            grads.accumulate_into(&mut self.model.params);
        }
        let loss = total / batch.len() as f64;
        let finite_grads = self
            .model
            .params
            .iter()
            .all(|(_, p)| p.value.grad.as_ref().map_or(true, |g| g.iter().all(|x| x.is_finite())));
        if !loss.is_finite() || !finite_grads {
            return Err(TrainError::Diverged { step, checkpoint: None });
        }
        let rates: Vec<f64> = self
            .model
            .params
            .iter()
            .map(|(_, p)| self.trainable(&p.name, p.group, &lr))
            .collect();
        self.optimizer.step(
            &mut self.model.params,
            &rates,
            1.0 / batch.len() as f64,
            self.config.grad_clip,
        );
        self.step = step;
        Ok(MetricsRow {
            step,
            stage: lr.stage,
            lr_new: lr.lr_new,
            lr_base: lr.lr_base,
            loss,
            val_cpwer: None,
        })
    }

    /// Train until `max_steps`, validating and checkpointing on the
    /// configured cadence. On divergence the last good parameters are
    /// saved under `checkpoints/last_good` when an output directory is set.
    pub fn run(
        &mut self,
        train: &[TrainingExample],
        dev: &[TrainingExample],
        opts: &RunOptions,
    ) -> Result<(), TrainError> {
        let val_set = &dev[..dev.len().min(self.config.val_max_examples)];
        while self.step < self.config.max_steps {
            let mut row = match self.train_step(train) {
                Ok(r) => r,
                Err(TrainError::Diverged { step, .. }) => {
                    let checkpoint = match &opts.out_dir {
                        Some(dir) => {
                            let p = dir.join("checkpoints").join("last_good");
                            self.save(&p)?;
                            self.write_metrics(dir)?;
                            Some(p)
                        }
                        None => None,
                    };
                    return Err(TrainError::Diverged { step, checkpoint });
                }
                Err(e) => return Err(e),
            };
            let last = self.step == self.config.max_steps;
            let val_due = self.config.val_every > 0 && self.step % self.config.val_every == 0;
            if !val_set.is_empty() && (val_due || last) {
                row.val_cpwer = validation_cpwer(&self.model, val_set)?;
            }
            if opts.log_every > 0 && (self.step % opts.log_every == 0 || row.val_cpwer.is_some()) {
                eprintln!(
                    "step {:>5} stage {} loss {:.4}{}",
                    row.step,
                    row.stage,
                    row.loss,
                    row.val_cpwer.map_or(String::new(), |v| format!(" val_cpwer {v:.4}"))
                );
            }
            self.metrics.push(row);
            if let Some(dir) = &opts.out_dir {
                let ck_due = self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0;
                if ck_due || last {
                    self.save(&dir.join("checkpoints").join(format!("step_{:06}", self.step)))?;
                    self.write_metrics(dir)?;
                }
            }
        }
        if let Some(dir) = &opts.out_dir {
            save_checkpoint(&self.model, &dir.join("model"))?;
            self.write_metrics(dir)?;
        }
        Ok(())
    }

    pub fn write_metrics(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let p = dir.join("metrics.csv");
        std::fs::write(&p, metrics_csv(&self.metrics)).map_err(|e| io_err(&p, e))
    }

    /// Model, optimizer moments, step counter and metrics so far.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        save_checkpoint(&self.model, dir)?;
        let state = TrainerState {
            step: self.step,
            config: self.config.clone(),
        };
        let p = dir.join("trainer.json");
        std::fs::write(&p, serde_json::to_string_pretty(&state).unwrap()).map_err(|e| io_err(&p, e))?;
        let tensors = self.optimizer.tensors(&self.model.params);
        let refs: Vec<(&str, &crate::tensor::Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_dump(&dir.join("optimizer.bin"), &dir.join("optimizer.manifest"), &refs)?;
        let p = dir.join("metrics.csv");
        std::fs::write(&p, metrics_csv(&self.metrics)).map_err(|e| io_err(&p, e))?;
        Ok(())
    }

    /// Continue from a checkpoint written by [`Trainer::save`].
    pub fn resume(dir: &Path) -> Result<Self, TrainError> {
        let model = load_checkpoint::<f32>(dir)?;
        let p = dir.join("trainer.json");
        let text = std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        let state: TrainerState = serde_json::from_str(&text).map_err(|e| io_err(&p, e))?;
        let mut t = Trainer::new(model, state.config)?;
        t.step = state.step;
        let entries = read_dump::<f32>(&dir.join("optimizer.bin"), &dir.join("optimizer.manifest"))?;
        t.optimizer.restore(&t.model.params, entries)?;
        let p = dir.join("metrics.csv");
        let text = std::fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        t.metrics = parse_metrics_csv(&text)?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests;
