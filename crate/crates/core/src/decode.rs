//! Beam search over the joint vocabulary and windowed long-form decoding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CrossMemory, ModelConfig, ModelError, SpeakerAttributedModel};
use crate::sot::{deserialize, ParseError, SerializedTranscript, StreamState};
use crate::stno::{speaker_order, stno_for_all_speakers, DiarizationSegment, StnoError, StnoMask};
use crate::tensor::{log_sum_exp, Scalar, Tape, Tensor};
use crate::vocab::{Special, Token, Vocabulary};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stno(#[from] StnoError),
    #[error("decoded stream is malformed: {0}")]
    Malformed(#[from] ParseError),
    #[error("every hypothesis is blocked at step {step}: {constraint}")]
    AllHypothesesDead { step: usize, constraint: String },
    #[error("invalid beam config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Output tokens per window including EOS; `None` uses the model limit.
    pub max_tokens: Option<usize>,
    /// Scores are `log p / len^length_norm`.
    pub length_norm: f64,
    pub enforce_constraints: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 10,
            max_tokens: None,
            length_norm: 0.6,
            enforce_constraints: true,
        }
    }
}

impl BeamConfig {
    pub fn greedy() -> Self {
        BeamConfig {
            beam_size: 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::Config("beam_size must be at least 1".into()));
        }
        if self.max_tokens == Some(0) {
            return Err(DecodeError::Config("max_tokens must be at least 1".into()));
        }
        if !self.length_norm.is_finite() || self.length_norm < 0.0 {
            return Err(DecodeError::Config("length_norm must be a non-negative number".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Output tokens after the prompt, EOS excluded.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: StreamState,
    pub finished: bool,
}

impl Hypothesis {
    /// Length-normalized score; EOS counts as a token when finished.
    pub fn score(&self, length_norm: f64) -> f64 {
        let len = self.tokens.len() + usize::from(self.finished);
        self.log_prob / (len.max(1) as f64).powf(length_norm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub transcript: SerializedTranscript,
    pub log_prob: f64,
    pub score: f64,
    /// False when the token budget ran out before EOS.
    pub finished: bool,
}

/// Encoder output prepared once per window; every decoder step reuses the
/// cross-attention keys and values.
pub struct EncodedWindow<F: Scalar> {
    kv: Vec<(Tensor<F>, Tensor<F>)>,
    pub num_speakers: usize,
}

impl<F: Scalar> EncodedWindow<F> {
    pub fn new(model: &SpeakerAttributedModel<F>, features: &Tensor<F>, masks: &[StnoMask]) -> Result<Self, DecodeError> {
        let tape = Tape::inference();
        let enc = model.encode(&tape, features, masks)?;
        let mem = model.cross_memory(&tape, enc.memory)?;
        let kv = mem
            .iter()
            .map(|(k, v)| (tape.value(*k).clone(), tape.value(*v).clone()))
            .collect();
        Ok(EncodedWindow {
            kv,
            num_speakers: masks.len(),
        })
    }

    /// Joint log-probabilities of the next token after `prompt ++ body`.
    pub fn next_log_probs(&self, model: &SpeakerAttributedModel<F>, body: &[usize]) -> Result<Vec<f64>, DecodeError> {
        let tape = Tape::inference();
        let mem: CrossMemory = self
            .kv
            .iter()
            .map(|(k, v)| (tape.constant(k.clone()), tape.constant(v.clone())))
            .collect();
        let mut input = model.vocabulary().prompt();
        input.extend_from_slice(body);
        let logits = model.decode_step(&tape, &input, &mem)?;
        let logits: Vec<f64> = logits.iter().map(|x| x.to_f64().unwrap()).collect();
        let lse = log_sum_exp(&logits);
        Ok(logits.into_iter().map(|x| x - lse).collect())
    }
}

fn budget(model_max: usize, prompt: usize, cfg: &BeamConfig) -> usize {
    // The decoder input is prompt + body; the last prediction happens with
    // max_tokens inputs.
    let limit = model_max + 1 - prompt;
    cfg.max_tokens.map_or(limit, |m| m.min(limit))
}

/// Whether `token` may follow a hypothesis in `state` with `remaining`
/// output tokens left (EOS included). Always closes a segment and ends
/// with EOS in time.
fn allowed(token: Token, state: &StreamState, remaining: usize, active: usize) -> bool {
    match token {
        Token::Special(Special::Eos) => !state.in_segment() && remaining >= 1,
        Token::Special(_) => false,
        Token::Word(_) => state.in_segment() && remaining >= 3,
        Token::SpeakerTime(st) => {
            let need = if state.in_segment() { 2 } else { 3 };
            st.speaker < active && remaining >= need && state.allows(token)
        }
    }
}

/// Name the constraint that blocks every continuation of `state`.
fn blocking_constraint(state: &StreamState, remaining: usize, active: usize) -> String {
    if remaining == 0 {
        "token budget exhausted before end of transcript".to_string()
    } else if let Some((spk, t)) = state.open_segment() {
        format!("segment structure: speaker {spk} segment opened at grid step {t} cannot close within the remaining {remaining} tokens")
    } else if active == 0 {
        "no active speakers".to_string()
    } else {
        "per-speaker monotonicity and onset order leave no admissible token".to_string()
    }
}

/// Beam search for one window.
pub fn beam_decode<F: Scalar>(
    model: &SpeakerAttributedModel<F>,
    window: &EncodedWindow<F>,
    cfg: &BeamConfig,
) -> Result<DecodeResult, DecodeError> {
    cfg.validate()?;
    let vocab = model.vocabulary();
    let eos = vocab.eos();
    let max_body = budget(model.config.max_tokens, vocab.prompt().len(), cfg);
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: StreamState::new(vocab.num_speakers()),
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_body {
        let remaining = max_body - step;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        let mut dead_reason = None;
        for (hi, h) in alive.iter().enumerate() {
            let lp = window.next_log_probs(model, &h.tokens)?;
            let mut opts: Vec<(f64, usize)> = lp
                .iter()
                .enumerate()
                .filter(|(id, _)| {
                    !cfg.enforce_constraints
                        || allowed(vocab.token(*id).unwrap(), &h.state, remaining, window.num_speakers)
                })
                .map(|(id, &l)| (l, id))
                .collect();
            if opts.is_empty() {
                dead_reason = Some(blocking_constraint(&h.state, remaining, window.num_speakers));
                continue;
            }
            opts.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            opts.truncate(cfg.beam_size);
            candidates.extend(opts.into_iter().map(|(l, id)| (h.log_prob + l, hi, id)));
        }
        if candidates.is_empty() {
            if finished.is_empty() {
                return Err(DecodeError::AllHypothesesDead {
                    step,
                    constraint: dead_reason.unwrap_or_else(|| "no candidates".into()),
                });
            }
            break;
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(cfg.beam_size);
        for (lp, hi, id) in candidates {
            if next.len() >= cfg.beam_size {
                break;
            }
            let parent = &alive[hi];
            if id == eos {
                if finished.len() < cfg.beam_size {
                    finished.push(Hypothesis {
                        tokens: parent.tokens.clone(),
                        log_prob: lp,
                        state: parent.state.clone(),
                        finished: true,
                    });
                }
                continue;
            }
            let mut h = Hypothesis {
                tokens: parent.tokens.clone(),
                log_prob: lp,
                state: parent.state.clone(),
                finished: false,
            };
            h.tokens.push(id);
            if let Ok(t) = vocab.token(id) {
                h.state.push(t);
            }
            next.push(h);
        }
        alive = next;
        if finished.len() >= cfg.beam_size || alive.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { &alive } else { &finished };
    let best = pool
        .iter()
        .max_by(|a, b| a.score(cfg.length_norm).total_cmp(&b.score(cfg.length_norm)))
        .expect("non-empty pool");
    Ok(DecodeResult {
        transcript: SerializedTranscript(best.tokens.clone()),
        log_prob: best.log_prob,
        score: best.score(cfg.length_norm),
        finished: best.finished,
    })
}

/// Plain argmax decoding with the same constraint masks; used as a
/// reference for `beam_size = 1`.
pub fn greedy_decode<F: Scalar>(
    model: &SpeakerAttributedModel<F>,
    window: &EncodedWindow<F>,
    enforce_constraints: bool,
) -> Result<Vec<usize>, DecodeError> {
    let vocab = model.vocabulary();
    let max_body = budget(model.config.max_tokens, vocab.prompt().len(), &BeamConfig::greedy());
    let mut tokens = Vec::new();
    let mut state = StreamState::new(vocab.num_speakers());
    for step in 0..max_body {
        let lp = window.next_log_probs(model, &tokens)?;
        let mut best: Option<(f64, usize)> = None;
        for (id, &l) in lp.iter().enumerate() {
            let ok = !enforce_constraints
                || allowed(vocab.token(id).unwrap(), &state, max_body - step, window.num_speakers);
            if ok && best.map_or(true, |(b, _)| l > b) {
                best = Some((l, id));
            }
        }
        let Some((_, id)) = best else {
            return Err(DecodeError::AllHypothesesDead {
                step,
                constraint: blocking_constraint(&state, max_body - step, window.num_speakers),
            });
        };
        if id == vocab.eos() {
            break;
        }
        tokens.push(id);
        state.push(vocab.token(id).unwrap());
    }
    Ok(tokens)
}

/// Result of one long-form window.
#[derive(Clone, Debug)]
pub struct WindowOutcome<F> {
    pub index: usize,
    pub offset_s: f64,
    pub tokens: Vec<usize>,
    pub score: Option<f64>,
    pub error: Option<String>,
    /// Last-layer cross-attention over `prompt ++ tokens`, if requested.
    pub attention: Option<Tensor<F>>,
}

#[derive(Clone, Debug)]
pub struct LongformOutput<F> {
    /// Segments with absolute times and recording-level speaker labels.
    pub segments: Vec<DiarizationSegment>,
    pub windows: Vec<WindowOutcome<F>>,
    pub speaker_order: Vec<String>,
}

/// Rows `[start, start + rows)` of `x`, zero-padded past the end.
pub fn slice_rows<F: Scalar>(x: &Tensor<F>, start: usize, rows: usize) -> Tensor<F> {
    let cols = x.cols();
    let mut out = Tensor::zeros(rows, cols);
    let avail = x.rows().saturating_sub(start).min(rows);
    out.data_mut()[..avail * cols].copy_from_slice(&x.data()[start * cols..(start + avail) * cols]);
    out
}

/// Masks and features of window `k` of a recording.
pub fn window_inputs<F: Scalar>(
    config: &ModelConfig,
    features: &Tensor<F>,
    diarization: &[DiarizationSegment],
    order: &[String],
    k: usize,
) -> Result<(Tensor<F>, Vec<StnoMask>), StnoError> {
    let rows = config.input_frames();
    let x = slice_rows(features, k * rows, rows);
    let w0 = k as f64 * config.window_s;
    let masks = stno_for_all_speakers(
        diarization,
        order,
        config.num_speakers,
        (w0, w0 + config.window_s),
        config.max_frames,
        config.frame_duration_s(),
    )?;
    Ok((x, masks))
}

pub fn num_windows(input_rows: usize, input_frames_per_window: usize) -> usize {
    input_rows.div_ceil(input_frames_per_window).max(1)
}

/// Tokens of one window converted to absolute-time segments.
pub fn window_segments(
    vocab: &Vocabulary,
    recording_id: &str,
    order: &[String],
    offset_s: f64,
    tokens: &[usize],
) -> Result<Vec<DiarizationSegment>, ParseError> {
    let segs = deserialize(&SerializedTranscript(tokens.to_vec()), vocab)?;
    Ok(segs
        .into_iter()
        .map(|s| {
            let label = order
                .get(s.speaker_index)
                .cloned()
                .unwrap_or_else(|| format!("unknown{}", s.speaker_index));
            let text: Vec<&str> = s.words.iter().filter_map(|&w| vocab.word(w)).collect();
            DiarizationSegment::new(recording_id, &label, s.start_s + offset_s, s.end_s + offset_s, &text.join(" "))
        })
        .collect())
}

/// Decode a recording in consecutive windows. Speaker indices follow the
/// recording-level speaker order in every window; a window that fails is
/// reported in its outcome and contributes no segments.
pub fn longform_decode<F: Scalar>(
    model: &SpeakerAttributedModel<F>,
    recording_id: &str,
    features: &Tensor<F>,
    diarization: &[DiarizationSegment],
    cfg: &BeamConfig,
    dump_attention: bool,
) -> Result<LongformOutput<F>, DecodeError> {
    cfg.validate()?;
    let vocab = model.vocabulary();
    let diar: Vec<DiarizationSegment> = diarization
        .iter()
        .filter(|s| s.recording_id == recording_id)
        .cloned()
        .collect();
    let order = speaker_order(&diar);
    if order.len() > model.config.num_speakers {
        return Err(StnoError::Capacity {
            count: order.len(),
            max: model.config.num_speakers,
        }
        .into());
    }
    let n = num_windows(features.rows(), model.config.input_frames());
    let mut out = LongformOutput {
        segments: Vec::new(),
        windows: Vec::new(),
        speaker_order: order.clone(),
    };
    for k in 0..n {
        let offset_s = k as f64 * model.config.window_s;
        let mut outcome = WindowOutcome {
            index: k,
            offset_s,
            tokens: Vec::new(),
            score: None,
            error: None,
            attention: None,
        };
        if order.is_empty() {
            // Nobody speaks in this recording: nothing to decode.
            out.windows.push(outcome);
            continue;
        }
        let run = || -> Result<(DecodeResult, Vec<DiarizationSegment>, Option<Tensor<F>>), DecodeError> {
            let (x, masks) = window_inputs(&model.config, features, &diar, &order, k)?;
            let enc = EncodedWindow::new(model, &x, &masks)?;
            let res = beam_decode(model, &enc, cfg)?;
            let segs = window_segments(&vocab, recording_id, &order, offset_s, res.transcript.tokens())?;
            let att = if dump_attention {
                let mut toks = vocab.prompt();
                toks.extend_from_slice(res.transcript.tokens());
                toks.truncate(model.config.max_tokens);
                Some(model.dump_cross_attention(&x, &masks, &toks)?)
            } else {
                None
            };
            Ok((res, segs, att))
        };
        match run() {
            Ok((res, segs, att)) => {
                outcome.tokens = res.transcript.0;
                outcome.score = Some(res.score);
                outcome.attention = att;
                out.segments.extend(segs);
            }
            Err(e) => outcome.error = Some(e.to_string()),
        }
        out.windows.push(outcome);
    }
    Ok(out)
}

/// Attention matrix as CSV, one row per decoder position.
pub fn attention_csv<F: Scalar>(att: &Tensor<F>) -> String {
    let mut s = String::new();
    for r in 0..att.rows() {
        let row: Vec<String> = att.row(r).iter().map(|v| format!("{:.6}", v.to_f64().unwrap())).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}
