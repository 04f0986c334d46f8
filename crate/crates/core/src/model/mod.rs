//! Diarization-conditioned encoder-decoder with speaker-attributed output.
//!
//! Per speaker `u` the encoder runs once with that speaker's STNO mask,
//! producing a speaker channel `Ĥ_u`. A per-speaker affine map gives
//! `H̄_u = Ĥ_u·W_u + b_u`, the channels are aggregated (concatenated along
//! time by default) and a shared decoder attends over the result. The
//! output head is factored: word logits, timestamp logits and speaker
//! logits, with speaker-timestamp logits formed as the outer sum of the
//! last two.
//!
//! All speaker-conditioning parameters start as identity maps (FDDT and
//! speaker affines) or zero (speaker logits), so an untrained model with a
//! single speaker computes exactly what the plain encoder-decoder does.

mod checkpoint;
mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use config::{Aggregation, ConfigError, ModelConfig};

use crate::stno::StnoMask;
use crate::tensor::{ParamGroup, ParamId, ParamStore, Scalar, Tape, Tensor, TensorError, Var};
use crate::vocab::{Token, Vocabulary, NUM_SPECIALS};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Shape(String),
    #[error("token id {id} at position {position} is not valid here")]
    BadToken { position: usize, id: usize },
    #[error("speaker index {index} out of range for {max} speakers")]
    SpeakerIndex { index: usize, max: usize },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
}

#[derive(Clone, Copy, Debug)]
struct EncBlock {
    ln1: Norm,
    attn: Attn,
    ln2: Norm,
    ff1: Affine,
    ff2: Affine,
}

#[derive(Clone, Copy, Debug)]
struct DecBlock {
    ln1: Norm,
    self_attn: Attn,
    ln2: Norm,
    cross: Attn,
    ln3: Norm,
    ff1: Affine,
    ff2: Affine,
}

#[derive(Clone, Debug)]
struct Layout {
    conv: Affine,
    enc: Vec<EncBlock>,
    enc_ln: Norm,
    /// `[layer][class]`, classes in S, T, N, O order.
    fddt: Vec<[Affine; 4]>,
    spk_affine: Vec<Affine>,
    agg_alpha: Option<ParamId>,
    tok_emb: ParamId,
    ts_emb: ParamId,
    pos_emb: ParamId,
    ts_affine: Vec<Affine>,
    dec: Vec<DecBlock>,
    dec_ln: Norm,
    head_lex: Affine,
    head_time: Affine,
    head_spk: Affine,
}

/// Encoder results for one window.
pub struct EncoderOutput {
    /// `Ĥ_u`, one `[T × d_m]` matrix per speaker.
    pub channels: Vec<Var>,
    /// `H̄_u` after the speaker affine.
    pub conditioned: Vec<Var>,
    /// Aggregated decoder memory.
    pub memory: Var,
}

pub struct DecoderOutput {
    /// `[N × output_size]` flat logits in vocabulary id order.
    pub logits: Var,
    /// Last decoder layer's cross-attention node.
    pub cross_attention: Var,
    pub lex: Var,
    pub time: Var,
    pub speaker: Var,
}

/// Cross-attention keys and values of every decoder layer.
pub type CrossMemory = Vec<(Var, Var)>;

#[derive(Clone, Debug)]
pub struct SpeakerAttributedModel<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    layout: Layout,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<F: Scalar>(&mut self, rows: usize, cols: usize, std: f64) -> Tensor<F> {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols)
            .map(|_| F::from_f64_lossy(dist.sample(&mut self.rng)))
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }
}

fn sinusoids<F: Scalar>(len: usize, dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut t = Tensor::zeros(len, dim);
    for p in 0..len {
        for i in 0..half {
            let rate = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let a = p as f64 * rate;
            t.data_mut()[p * dim + i] = F::from_f64_lossy(a.sin());
            t.data_mut()[p * dim + half + i] = F::from_f64_lossy(a.cos());
        }
    }
    t
}

impl<F: Scalar> SpeakerAttributedModel<F> {
    /// Fresh model: random base weights, identity conditioning.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut p = ParamStore::new();
        let d = config.model_dim;
        let layers = (config.encoder_layers + config.decoder_layers) as f64;
        let resid = 1.0 / (2.0 * layers).sqrt();

        let linear = |p: &mut ParamStore<F>, init: &mut Init, name: &str, din: usize, dout: usize, std: f64, group| {
            let w = p.add(format!("{name}.w"), init.normal(din, dout, std), group, true);
            let b = p.add(format!("{name}.b"), Tensor::zeros(1, dout), group, false);
            Affine { w, b }
        };
        let norm = |p: &mut ParamStore<F>, name: &str| Norm {
            g: p.add(format!("{name}.g"), Tensor::full(1, d, F::one()), ParamGroup::Base, false),
            b: p.add(format!("{name}.b"), Tensor::zeros(1, d), ParamGroup::Base, false),
        };
        let identity = |p: &mut ParamStore<F>, name: &str| Affine {
            w: p.add(format!("{name}.w"), Tensor::identity(d), ParamGroup::New, true),
            b: p.add(format!("{name}.b"), Tensor::zeros(1, d), ParamGroup::New, false),
        };
        let std_d = 1.0 / (d as f64).sqrt();
        let std_ff = 1.0 / (config.ffn_dim as f64).sqrt();
        let base = ParamGroup::Base;

        let conv_in = config.conv_width * config.feature_dim;
        let conv = linear(&mut p, &mut init, "enc.conv", conv_in, d, 1.0 / (conv_in as f64).sqrt(), base);

        let attn = |p: &mut ParamStore<F>, init: &mut Init, name: &str| Attn {
            q: linear(p, init, &format!("{name}.q"), d, d, std_d, base),
            k: linear(p, init, &format!("{name}.k"), d, d, std_d, base),
            v: linear(p, init, &format!("{name}.v"), d, d, std_d, base),
            o: linear(p, init, &format!("{name}.o"), d, d, std_d * resid, base),
        };
        let mut enc = Vec::new();
        for l in 0..config.encoder_layers {
            let n = format!("enc.l{l}");
            enc.push(EncBlock {
                ln1: norm(&mut p, &format!("{n}.ln1")),
                attn: attn(&mut p, &mut init, &format!("{n}.attn")),
                ln2: norm(&mut p, &format!("{n}.ln2")),
                ff1: linear(&mut p, &mut init, &format!("{n}.ff1"), d, config.ffn_dim, std_d, base),
                ff2: linear(&mut p, &mut init, &format!("{n}.ff2"), config.ffn_dim, d, std_ff * resid, base),
            });
        }
        let enc_ln = norm(&mut p, "enc.ln_post");

        let tok_emb = p.add(
            "dec.tok_emb",
            init.normal(config.num_words + NUM_SPECIALS, d, 1.0),
            base,
            false,
        );
        let ts_emb = p.add("dec.ts_emb", init.normal(config.num_timestamps, d, 1.0), base, false);
        let pos_emb = p.add("dec.pos_emb", init.normal(config.max_tokens, d, 0.1), base, false);
        let mut dec = Vec::new();
        for l in 0..config.decoder_layers {
            let n = format!("dec.l{l}");
            dec.push(DecBlock {
                ln1: norm(&mut p, &format!("{n}.ln1")),
                self_attn: attn(&mut p, &mut init, &format!("{n}.self")),
                ln2: norm(&mut p, &format!("{n}.ln2")),
                cross: attn(&mut p, &mut init, &format!("{n}.cross")),
                ln3: norm(&mut p, &format!("{n}.ln3")),
                ff1: linear(&mut p, &mut init, &format!("{n}.ff1"), d, config.ffn_dim, std_d, base),
                ff2: linear(&mut p, &mut init, &format!("{n}.ff2"), config.ffn_dim, d, std_ff * resid, base),
            });
        }
        let dec_ln = norm(&mut p, "dec.ln_post");

        // Speaker-conditioning additions.
        let new = ParamGroup::New;
        let fddt = (0..config.encoder_layers)
            .map(|l| ["s", "t", "n", "o"].map(|c| identity(&mut p, &format!("fddt.l{l}.{c}"))))
            .collect();
        let spk_affine = (0..config.num_speakers)
            .map(|u| identity(&mut p, &format!("spk_affine.u{u}")))
            .collect();
        let ts_affine = (0..config.num_speakers)
            .map(|u| identity(&mut p, &format!("dec.ts_affine.u{u}")))
            .collect();
        let agg_alpha = (config.aggregation == Aggregation::WeightedSum)
            .then(|| p.add("agg.alpha", Tensor::zeros(1, config.num_speakers), new, false));
        let head_lex = linear(&mut p, &mut init, "head.lex", d, config.num_words + NUM_SPECIALS, std_d, new);
        let head_time = linear(&mut p, &mut init, "head.time", d, config.num_timestamps, std_d, new);
        let head_spk = Affine {
            w: p.add("head.spk.w", Tensor::zeros(d, config.num_speakers), new, true),
            b: p.add("head.spk.b", Tensor::zeros(1, config.num_speakers), new, false),
        };

        Ok(SpeakerAttributedModel {
            config,
            params: p,
            layout: Layout {
                conv,
                enc,
                enc_ln,
                fddt,
                spk_affine,
                agg_alpha,
                tok_emb,
                ts_emb,
                pos_emb,
                ts_affine,
                dec,
                dec_ln,
                head_lex,
                head_time,
                head_spk,
            },
        })
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<G: Scalar>(&self) -> SpeakerAttributedModel<G> {
        SpeakerAttributedModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        self.config.vocabulary()
    }

    /// Names of all parameters in the conditioning (`New`) group.
    pub fn new_parameter_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::New)
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    fn p(&self, tape: &Tape<F>, id: ParamId) -> Var {
        tape.param(&self.params, id)
    }

    fn affine(&self, tape: &Tape<F>, x: Var, a: Affine) -> Result<Var> {
        Ok(tape.linear(x, self.p(tape, a.w), self.p(tape, a.b))?)
    }

    fn norm(&self, tape: &Tape<F>, x: Var, n: Norm) -> Result<Var> {
        Ok(tape.layer_norm(x, self.p(tape, n.g), self.p(tape, n.b), F::from_f64_lossy(LN_EPS))?)
    }

    fn self_attention(&self, tape: &Tape<F>, x: Var, a: &Attn, causal: bool) -> Result<Var> {
        let q = self.affine(tape, x, a.q)?;
        let k = self.affine(tape, x, a.k)?;
        let v = self.affine(tape, x, a.v)?;
        let h = tape.attention(q, k, v, self.config.heads, causal)?;
        self.affine(tape, h, a.o)
    }

    fn feed_forward(&self, tape: &Tape<F>, x: Var, ff1: Affine, ff2: Affine) -> Result<Var> {
        let h = self.affine(tape, x, ff1)?;
        let h = tape.gelu(h);
        self.affine(tape, h, ff2)
    }

    fn encoder_block(&self, tape: &Tape<F>, h: Var, b: &EncBlock) -> Result<Var> {
        let a = self.norm(tape, h, b.ln1)?;
        let a = self.self_attention(tape, a, &b.attn, false)?;
        let h = tape.add(h, a)?;
        let f = self.norm(tape, h, b.ln2)?;
        let f = self.feed_forward(tape, f, b.ff1, b.ff2)?;
        Ok(tape.add(h, f)?)
    }

    /// Strided convolution, GELU and sinusoidal positions: `[2T × d_f]` to `[T × d_m]`.
    pub fn subsample(&self, tape: &Tape<F>, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.config.feature_dim {
            return Err(ModelError::Shape(format!(
                "features have shape {shape:?}, expected [frames × {}]",
                self.config.feature_dim
            )));
        }
        let conv = tape.conv1d_stride2(x, self.p(tape, self.layout.conv.w), self.config.conv_width)?;
        let conv = tape.add_bias(conv, self.p(tape, self.layout.conv.b))?;
        let h = tape.gelu(conv);
        let pos = tape.constant(sinusoids(shape[0] / 2, self.config.model_dim));
        Ok(tape.add(h, pos)?)
    }

    /// Frame-level diarization-dependent transform before encoder layer
    /// `layer`: `Σ_c (h_t·W_c + b_c)·p_c(t)` over the four STNO classes.
    pub fn fddt_apply(&self, tape: &Tape<F>, h: Var, mask: &StnoMask, layer: usize) -> Result<Var> {
        let frames = tape.shape(h)[0];
        if mask.frames() != frames {
            return Err(ModelError::Shape(format!(
                "mask has {} frames but the encoder layer input has {frames}",
                mask.frames()
            )));
        }
        let mut acc: Option<Var> = None;
        for (c, aff) in self.layout.fddt[layer].iter().enumerate() {
            let weights: Vec<F> = mask.probs.iter().map(|r| F::from_f64_lossy(r[c])).collect();
            if weights.iter().all(|w| *w == F::zero()) {
                continue;
            }
            let y = self.affine(tape, h, *aff)?;
            let y = tape.row_scale(y, &weights)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        // An all-zero mask contributes nothing; keep the shape.
        match acc {
            Some(a) => Ok(a),
            None => Ok(tape.row_scale(h, &vec![F::zero(); frames])?),
        }
    }

    /// Encoder layers with FDDT conditioning over an already subsampled input.
    pub fn encode_subsampled(&self, tape: &Tape<F>, sub: Var, mask: &StnoMask) -> Result<Var> {
        let mut h = sub;
        for (l, block) in self.layout.enc.iter().enumerate() {
            h = self.fddt_apply(tape, h, mask, l)?;
            h = self.encoder_block(tape, h, block)?;
        }
        self.norm(tape, h, self.layout.enc_ln)
    }

    /// `Ĥ_u`: the full encoder run on the mixture with speaker `u`'s mask.
    pub fn encode_speaker_channel(&self, tape: &Tape<F>, x: Var, mask: &StnoMask) -> Result<Var> {
        let sub = self.subsample(tape, x)?;
        self.encode_subsampled(tape, sub, mask)
    }

    /// `H̄_u = Ĥ_u·W_u + b_u`.
    pub fn speaker_affine(&self, tape: &Tape<F>, h: Var, speaker: usize) -> Result<Var> {
        let aff = self
            .layout
            .spk_affine
            .get(speaker)
            .ok_or(ModelError::SpeakerIndex {
                index: speaker,
                max: self.config.num_speakers,
            })?;
        self.affine(tape, h, *aff)
    }

    /// Merge speaker channels (list position = speaker index).
    pub fn aggregate(&self, tape: &Tape<F>, channels: &[Var], masks: &[StnoMask]) -> Result<Var> {
        let n = channels.len();
        if n == 0 {
            return Err(ModelError::Shape("aggregate: no speaker channels".into()));
        }
        let shape = tape.shape(channels[0]);
        if channels.iter().any(|c| tape.shape(*c) != shape) {
            return Err(ModelError::Shape("aggregate: channels differ in shape".into()));
        }
        let sum = |parts: Vec<Var>| -> Result<Var> {
            let mut acc = parts[0];
            for p in &parts[1..] {
                acc = tape.add(acc, *p)?;
            }
            Ok(acc)
        };
        match self.config.aggregation {
            Aggregation::Concatenation => Ok(tape.concat_rows(channels)?),
            Aggregation::Average => {
                let s = sum(channels.to_vec())?;
                Ok(tape.scale(s, F::one() / F::from_usize(n).unwrap()))
            }
            Aggregation::WeightedSum => {
                let alpha = self.layout.agg_alpha.expect("weighted_sum model has alpha");
                if n > self.config.num_speakers {
                    return Err(ModelError::SpeakerIndex {
                        index: n - 1,
                        max: self.config.num_speakers,
                    });
                }
                let a = tape.slice_cols(self.p(tape, alpha), 0, n)?;
                let w = tape.softmax(a)?;
                let mut parts = Vec::with_capacity(n);
                for (u, c) in channels.iter().enumerate() {
                    let s = tape.slice_cols(w, u, 1)?;
                    parts.push(tape.scalar_mul(*c, s)?);
                }
                sum(parts)
            }
            Aggregation::MaskedAverage => {
                if masks.len() != n {
                    return Err(ModelError::Shape(format!("{} masks for {n} channels", masks.len())));
                }
                let frames = shape[0];
                if masks.iter().any(|m| m.frames() != frames) {
                    return Err(ModelError::Shape("mask frame count differs from channels".into()));
                }
                let mut weights = vec![vec![F::zero(); frames]; n];
                for t in 0..frames {
                    let total: f64 = masks.iter().map(|m| m.target_activity(t)).sum();
                    for u in 0..n {
                        let w = if total > 0.0 {
                            masks[u].target_activity(t) / total
                        } else {
                            1.0 / n as f64
                        };
                        weights[u][t] = F::from_f64_lossy(w);
                    }
                }
                let parts = channels
                    .iter()
                    .zip(&weights)
                    .map(|(c, w)| tape.row_scale(*c, w))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                sum(parts)
            }
        }
    }

    /// Encode one window: per-speaker channels, speaker affines, aggregation.
    pub fn encode(&self, tape: &Tape<F>, features: &Tensor<F>, masks: &[StnoMask]) -> Result<EncoderOutput> {
        if masks.is_empty() {
            return Err(ModelError::Shape("encode: at least one speaker mask is required".into()));
        }
        if masks.len() > self.config.num_speakers {
            return Err(ModelError::SpeakerIndex {
                index: masks.len() - 1,
                max: self.config.num_speakers,
            });
        }
        for (i, m) in masks.iter().enumerate() {
            if m.speaker_index != i {
                return Err(ModelError::Shape(format!(
                    "mask at position {i} has speaker_index {}",
                    m.speaker_index
                )));
            }
        }
        let (rows, _) = features.dims2("encode")?;
        if rows % 2 != 0 || rows / 2 != masks[0].frames() {
            return Err(ModelError::Shape(format!(
                "{rows} input frames do not subsample to the {} mask frames",
                masks[0].frames()
            )));
        }
        let x = tape.constant(features.clone());
        let sub = self.subsample(tape, x)?;
        let mut channels = Vec::with_capacity(masks.len());
        let mut conditioned = Vec::with_capacity(masks.len());
        for (u, m) in masks.iter().enumerate() {
            let h = self.encode_subsampled(tape, sub, m)?;
            channels.push(h);
            conditioned.push(self.speaker_affine(tape, h, u)?);
        }
        let memory = self.aggregate(tape, &conditioned, masks)?;
        Ok(EncoderOutput {
            channels,
            conditioned,
            memory,
        })
    }

    /// Per-layer cross-attention keys and values for a decoder memory.
    pub fn cross_memory(&self, tape: &Tape<F>, memory: Var) -> Result<CrossMemory> {
        self.layout
            .dec
            .iter()
            .map(|b| Ok((self.affine(tape, memory, b.cross.k)?, self.affine(tape, memory, b.cross.v)?)))
            .collect()
    }

    /// Embed decoder input tokens. Speaker-timestamp tokens take the shared
    /// timestamp embedding followed by their speaker's affine map.
    pub fn embed_tokens(&self, tape: &Tape<F>, tokens: &[usize], speaker_affine: bool) -> Result<Var> {
        let c = &self.config;
        let vocab_words = c.num_words;
        let st_count = c.num_speakers * c.num_timestamps;
        if tokens.is_empty() {
            return Err(ModelError::Shape("no decoder tokens".into()));
        }
        if tokens.len() > c.max_tokens {
            return Err(ModelError::Shape(format!(
                "{} decoder tokens exceed max_tokens {}",
                tokens.len(),
                c.max_tokens
            )));
        }
        let mut std_rows = Vec::new();
        let mut by_speaker: Vec<Vec<usize>> = vec![Vec::new(); c.num_speakers];
        let mut plan = Vec::with_capacity(tokens.len());
        for (position, &id) in tokens.iter().enumerate() {
            if id < vocab_words {
                plan.push((None, std_rows.len()));
                std_rows.push(id);
            } else if id < vocab_words + st_count {
                let k = id - vocab_words;
                let (u, w) = (k / c.num_timestamps, k % c.num_timestamps);
                plan.push((Some(u), by_speaker[u].len()));
                by_speaker[u].push(w);
            } else if id < vocab_words + st_count + NUM_SPECIALS {
                plan.push((None, std_rows.len()));
                std_rows.push(id - st_count);
            } else {
                return Err(ModelError::BadToken { position, id });
            }
        }
        let std_var = if std_rows.is_empty() {
            None
        } else {
            Some(tape.embedding(self.p(tape, self.layout.tok_emb), &std_rows)?)
        };
        let mut spk_vars = vec![None; c.num_speakers];
        for (u, times) in by_speaker.iter().enumerate() {
            if times.is_empty() {
                continue;
            }
            let e = tape.embedding(self.p(tape, self.layout.ts_emb), times)?;
            spk_vars[u] = Some(if speaker_affine {
                self.affine(tape, e, self.layout.ts_affine[u])?
            } else {
                e
            });
        }
        let sources: Vec<(Var, usize)> = plan
            .into_iter()
            .map(|(spk, row)| match spk {
                None => (std_var.unwrap(), row),
                Some(u) => (spk_vars[u].unwrap(), row),
            })
            .collect();
        let emb = tape.assemble_rows(&sources)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.embedding(self.p(tape, self.layout.pos_emb), &positions)?;
        Ok(tape.add(emb, pos)?)
    }

    fn decoder_stack(&self, tape: &Tape<F>, mut h: Var, memory: &CrossMemory) -> Result<(Var, Var)> {
        if memory.len() != self.layout.dec.len() {
            return Err(ModelError::Shape("cross memory does not match decoder depth".into()));
        }
        let mut last_cross = None;
        for (b, (k, v)) in self.layout.dec.iter().zip(memory) {
            let a = self.norm(tape, h, b.ln1)?;
            let a = self.self_attention(tape, a, &b.self_attn, true)?;
            h = tape.add(h, a)?;
            let x = self.norm(tape, h, b.ln2)?;
            let q = self.affine(tape, x, b.cross.q)?;
            let att = tape.attention(q, *k, *v, self.config.heads, false)?;
            last_cross = Some(att);
            let x = self.affine(tape, att, b.cross.o)?;
            h = tape.add(h, x)?;
            let f = self.norm(tape, h, b.ln3)?;
            let f = self.feed_forward(tape, f, b.ff1, b.ff2)?;
            h = tape.add(h, f)?;
        }
        Ok((self.norm(tape, h, self.layout.dec_ln)?, last_cross.unwrap()))
    }

    /// Decoder over `tokens` (prompt included) attending to `memory`.
    /// Logits are `[o_lex(words) ‖ o_spk ⊕ o_time ‖ o_lex(specials)]` in
    /// vocabulary id order.
    pub fn decode(&self, tape: &Tape<F>, tokens: &[usize], memory: &CrossMemory) -> Result<DecoderOutput> {
        let x = self.embed_tokens(tape, tokens, true)?;
        let (h, cross_attention) = self.decoder_stack(tape, x, memory)?;
        let lex = self.affine(tape, h, self.layout.head_lex)?;
        let time = self.affine(tape, h, self.layout.head_time)?;
        let speaker = self.affine(tape, h, self.layout.head_spk)?;
        let st = tape.outer_sum(speaker, time)?;
        let v = self.config.num_words;
        let words = tape.slice_cols(lex, 0, v)?;
        let specials = tape.slice_cols(lex, v, NUM_SPECIALS)?;
        let logits = tape.concat_cols(&[words, st, specials])?;
        Ok(DecoderOutput {
            logits,
            cross_attention,
            lex,
            time,
            speaker,
        })
    }

    /// Full teacher-forced forward pass.
    pub fn forward(
        &self,
        tape: &Tape<F>,
        features: &Tensor<F>,
        masks: &[StnoMask],
        tokens: &[usize],
    ) -> Result<(EncoderOutput, DecoderOutput)> {
        let enc = self.encode(tape, features, masks)?;
        let mem = self.cross_memory(tape, enc.memory)?;
        let dec = self.decode(tape, tokens, &mem)?;
        Ok((enc, dec))
    }

    /// Flat logits for the next token after `prefix`.
    pub fn decode_step(&self, tape: &Tape<F>, prefix: &[usize], memory: &CrossMemory) -> Result<Vec<F>> {
        let out = self.decode(tape, prefix, memory)?;
        let v = tape.value(out.logits);
        Ok(v.row(v.rows() - 1).to_vec())
    }

    /// Last decoder layer's head-averaged cross-attention, `[tokens × memory frames]`.
    pub fn dump_cross_attention(
        &self,
        features: &Tensor<F>,
        masks: &[StnoMask],
        tokens: &[usize],
    ) -> Result<Tensor<F>> {
        let tape = Tape::inference();
        let (_, dec) = self.forward(&tape, features, masks, tokens)?;
        Ok(tape.attention_probs(dec.cross_attention).expect("attention node"))
    }

    /// The unconditioned encoder-decoder sharing this model's base weights:
    /// one encoder pass without FDDT or speaker affine, timestamp tokens
    /// embedded without speaker affine, and a `[words ‖ timestamps ‖
    /// specials]` head.
    pub fn baseline_forward(&self, tape: &Tape<F>, features: &Tensor<F>, tokens: &[usize]) -> Result<Var> {
        let x = tape.constant(features.clone());
        let mut h = self.subsample(tape, x)?;
        for block in &self.layout.enc {
            h = self.encoder_block(tape, h, block)?;
        }
        let memory = self.norm(tape, h, self.layout.enc_ln)?;
        let mem = self.cross_memory(tape, memory)?;
        let x = self.embed_tokens(tape, tokens, false)?;
        let (h, _) = self.decoder_stack(tape, x, &mem)?;
        let lex = self.affine(tape, h, self.layout.head_lex)?;
        let time = self.affine(tape, h, self.layout.head_time)?;
        let v = self.config.num_words;
        let words = tape.slice_cols(lex, 0, v)?;
        let specials = tape.slice_cols(lex, v, NUM_SPECIALS)?;
        Ok(tape.concat_cols(&[words, time, specials])?)
    }

    /// Whether `id` is a valid decoder input token for this model.
    pub fn token(&self, id: usize) -> Option<Token> {
        self.vocabulary().token(id).ok()
    }
}
