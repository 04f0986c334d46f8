//! Checks shared by the integration tests and the acceptance runner. Each
//! returns a one-line summary on success and a description of the first
//! failure otherwise.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mtasr::decode::{beam_decode, BeamConfig, EncodedWindow};
use mtasr::eval::{cpwer, TranscriptSet};
use mtasr::model::{Aggregation, ModelConfig, SpeakerAttributedModel};
use mtasr::sot::{deserialize, serialize, validate_stream, AttributedSegment};
use mtasr::stno::StnoMask;
use mtasr::tensor::{Tape, Tensor, Var};
use mtasr::vocab::Vocabulary;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error with magnitudes below `1e-3` compared on that scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

const FD_STEP: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Finite differences on tape primitives

type Build = dyn Fn(&Tape<f64>, &[Var]) -> Var;

/// Compare tape gradients of `sum(build(inputs) ⊙ r)` with central
/// differences for every input element. Returns the largest relative error.
pub fn fd_primitive(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let mut r = rng(seed);
    let probe = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&tape, &vars);
        let s = tape.value(out);
        random_tensor(&mut r, s.rows(), s.cols())
    };
    let loss = |xs: &[Tensor<f64>], tape: &Tape<f64>| -> (Vec<Var>, Var) {
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(tape, &vars);
        let w = tape.constant(probe.clone());
        let prod = tape.mul(out, w).unwrap();
        (vars, tape.sum_all(prod))
    };
    let tape = Tape::new();
    let (vars, l) = loss(inputs, &tape);
    let grads = tape.backward(l);
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let eval = |delta: f64| {
                let mut xs = inputs.to_vec();
                xs[i].data_mut()[j] += delta;
                let t = Tape::new();
                let (_, l) = loss(&xs, &t);
                let v = t.value(l).data()[0];
                v
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

fn softmax_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.gen_range(0.05..1.0)).collect()
}

/// Every differentiable primitive on `instances` random shapes each.
pub fn gradient_primitives(instances: usize) -> Check {
    let mut report = BTreeMap::new();
    for inst in 0..instances as u64 {
        let mut r = rng(1000 + inst);
        let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let mut cases: Vec<(&str, Vec<Tensor<f64>>, Box<Build>)> = Vec::new();
        let a = random_tensor(&mut r, m, k);
        let b = random_tensor(&mut r, k, n);
        let c = random_tensor(&mut r, m, k);
        let bias = random_tensor(&mut r, 1, k);
        cases.push(("matmul", vec![a.clone(), b.clone()], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())));
        cases.push(("add", vec![a.clone(), c.clone()], Box::new(|t, v| t.add(v[0], v[1]).unwrap())));
        cases.push(("mul", vec![a.clone(), c.clone()], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())));
        let s = r.gen_range(-2.0..2.0);
        cases.push(("scale", vec![a.clone()], Box::new(move |t, v| t.scale(v[0], s))));
        cases.push(("add_bias", vec![a.clone(), bias.clone()], Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap())));
        let lb = random_tensor(&mut r, 1, n);
        cases.push((
            "linear",
            vec![a.clone(), b.clone(), lb],
            Box::new(|t, v| t.linear(v[0], v[1], v[2]).unwrap()),
        ));
        cases.push(("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]).unwrap())));
        cases.push(("gelu", vec![a.scale_copy(3.0)], Box::new(|t, v| t.gelu(v[0]))));
        let kk = k + 1;
        let ln_x = random_tensor(&mut r, m, kk);
        let (g, be) = (random_tensor(&mut r, 1, kk), random_tensor(&mut r, 1, kk));
        cases.push((
            "layer_norm",
            vec![ln_x, g, be],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ));
        cases.push(("softmax", vec![a.scale_copy(2.0)], Box::new(|t, v| t.softmax(v[0]).unwrap())));
        let table = random_tensor(&mut r, 5, k);
        let ids: Vec<usize> = (0..m + 1).map(|_| r.gen_range(0..5)).collect();
        cases.push(("embedding", vec![table], Box::new(move |t, v| t.embedding(v[0], &ids).unwrap())));
        let picks: Vec<(usize, usize)> = (0..m + 2).map(|_| (r.gen_range(0..2), r.gen_range(0..m))).collect();
        cases.push((
            "assemble_rows",
            vec![a.clone(), c.clone()],
            Box::new(move |t, v| {
                let src: Vec<(Var, usize)> = picks.iter().map(|&(s, row)| (v[s], row)).collect();
                t.assemble_rows(&src).unwrap()
            }),
        ));
        let d = random_tensor(&mut r, m + 1, k);
        cases.push((
            "concat_rows",
            vec![a.clone(), d],
            Box::new(|t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
        ));
        let e = random_tensor(&mut r, m, n);
        cases.push((
            "concat_cols",
            vec![a.clone(), e.clone()],
            Box::new(|t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
        ));
        let (st, len) = {
            let st = r.gen_range(0..k);
            (st, r.gen_range(1..=k - st))
        };
        cases.push(("slice_cols", vec![a.clone()], Box::new(move |t, v| t.slice_cols(v[0], st, len).unwrap())));
        let width = [1usize, 3, 5][r.gen_range(0..3)];
        let frames = r.gen_range(1..5);
        let cx = random_tensor(&mut r, 2 * frames, k);
        let kernel = random_tensor(&mut r, width * k, n);
        cases.push((
            "conv1d_stride2",
            vec![cx, kernel],
            Box::new(move |t, v| t.conv1d_stride2(v[0], v[1], width).unwrap()),
        ));
        let heads = r.gen_range(1..3);
        let dh = heads * r.gen_range(1..3);
        let (nq, nk) = (r.gen_range(1..5), r.gen_range(1..5));
        let q = random_tensor(&mut r, nq, dh);
        let kt = random_tensor(&mut r, nk, dh);
        let vt = random_tensor(&mut r, nk, dh);
        cases.push((
            "attention",
            vec![q.clone(), kt, vt],
            Box::new(move |t, v| t.attention(v[0], v[1], v[2], heads, false).unwrap()),
        ));
        let kc = random_tensor(&mut r, nq, dh);
        let vc = random_tensor(&mut r, nq, dh);
        cases.push((
            "attention_causal",
            vec![q, kc, vc],
            Box::new(move |t, v| t.attention(v[0], v[1], v[2], heads, true).unwrap()),
        ));
        let sa = random_tensor(&mut r, m, 3);
        cases.push((
            "outer_sum",
            vec![sa, e],
            Box::new(|t, v| t.outer_sum(v[0], v[1]).unwrap()),
        ));
        let w: Vec<f64> = (0..m).map(|_| r.gen_range(0.0..1.0)).collect();
        cases.push(("row_scale", vec![a.clone()], Box::new(move |t, v| t.row_scale(v[0], &w).unwrap())));
        let s11 = random_tensor(&mut r, 1, 1);
        cases.push(("scalar_mul", vec![a.clone(), s11], Box::new(|t, v| t.scalar_mul(v[0], v[1]).unwrap())));
        cases.push(("sum_all", vec![a.clone()], Box::new(|t, v| t.sum_all(v[0]))));
        let classes = k + 2;
        let logits = Tensor::matrix(m, classes, softmax_rows(&mut r, m, classes)).unwrap().scale_copy(3.0);
        let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..classes)).collect();
        let weights: Vec<f64> = (0..m).map(|i| if i == 0 { 5.0 } else { r.gen_range(0.0..2.0) }).collect();
        cases.push((
            "softmax_cross_entropy",
            vec![logits],
            Box::new(move |t, v| t.softmax_cross_entropy(v[0], &targets, &weights).unwrap()),
        ));
        for (name, inputs, build) in cases {
            let e = fd_primitive(&inputs, build.as_ref(), 77 + inst);
            let slot = report.entry(name).or_insert((0usize, 0.0f64));
            slot.0 += 1;
            slot.1 = slot.1.max(e);
        }
    }
    let worst = report.iter().map(|(_, (_, e))| *e).fold(0.0, f64::max);
    let failing: Vec<String> = report
        .iter()
        .filter(|(_, (_, e))| *e >= 1e-4)
        .map(|(n, (_, e))| format!("{n} ({e:.2e})"))
        .collect();
    if failing.is_empty() {
        Ok(format!("{} primitives x {instances} instances, max rel err {worst:.2e}", report.len()))
    } else {
        Err(format!("gradient mismatch: {}", failing.join(", ")))
    }
}

trait ScaleCopy {
    fn scale_copy(&self, s: f64) -> Self;
}

impl ScaleCopy for Tensor<f64> {
    fn scale_copy(&self, s: f64) -> Self {
        let mut t = self.clone();
        t.data_mut().iter_mut().for_each(|x| *x *= s);
        t
    }
}

// ---------------------------------------------------------------------------
// Finite differences through the whole model

pub fn tiny_config(aggregation: Aggregation) -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        model_dim: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_dim: 12,
        num_words: 5,
        num_speakers: 3,
        num_timestamps: 6,
        window_s: 1.0,
        aggregation,
        max_frames: 5,
        max_tokens: 14,
        conv_width: 3,
    }
}

pub fn soft_mask(r: &mut ChaCha8Rng, speaker: usize, frames: usize) -> StnoMask {
    let probs = (0..frames)
        .map(|_| {
            let mut p = [0.0; 4];
            p.iter_mut().for_each(|x| *x = r.gen_range(0.05..1.0));
            let s: f64 = p.iter().sum();
            p.map(|x| x / s)
        })
        .collect();
    StnoMask {
        speaker_index: speaker,
        probs,
        frame_duration_s: 0.2,
    }
}

struct ModelCase {
    model: SpeakerAttributedModel<f64>,
    features: Tensor<f64>,
    masks: Vec<StnoMask>,
    tokens: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<f64>,
}

impl ModelCase {
    fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let agg = Aggregation::ALL[seed as usize % Aggregation::ALL.len()];
        let mut model = SpeakerAttributedModel::<f64>::new(tiny_config(agg), seed).unwrap();
        // Move the new parameters off identity so their gradients are generic.
        for (_, p) in model.params.iter_mut() {
            if p.group == mtasr::tensor::ParamGroup::New {
                p.value.data_mut().iter_mut().for_each(|x| *x += r.gen_range(-0.3..0.3));
            }
        }
        let speakers = r.gen_range(1..=3);
        let features = random_tensor(&mut r, 10, 4);
        let masks = (0..speakers).map(|u| soft_mask(&mut r, u, 5)).collect();
        let v = model.vocabulary();
        let mut tokens = v.prompt();
        for _ in 0..5 {
            tokens.push(if r.gen_bool(0.5) {
                v.speaker_time_id(r.gen_range(0..speakers), r.gen_range(0..6))
            } else {
                r.gen_range(0..5)
            });
        }
        let mut targets = tokens[1..].to_vec();
        targets.push(v.eos());
        let weights = targets.iter().map(|&t| if v.is_speaker_time(t) { 5.0 } else { 1.0 }).collect();
        ModelCase {
            model,
            features,
            masks,
            tokens,
            targets,
            weights,
        }
    }

    fn loss(&self, tape: &Tape<f64>) -> Var {
        let (_, dec) = self.model.forward(tape, &self.features, &self.masks, &self.tokens).unwrap();
        tape.softmax_cross_entropy(dec.logits, &self.targets, &self.weights).unwrap()
    }
}

pub const NEW_GROUPS: [(&str, &str); 5] = [
    ("fddt.w", "fddt."),
    ("speaker affine", "spk_affine."),
    ("timestamp-speaker affine", "dec.ts_affine."),
    ("factored head", "head."),
    ("aggregation weights", "agg."),
];

/// Finite-difference check of every new parameter group through the full
/// model, `instances` random models (aggregations rotate).
pub fn gradient_param_groups(instances: usize, coords_per_tensor: usize) -> Check {
    let mut worst: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for inst in 0..instances as u64 {
        let mut case = ModelCase::new(500 + inst);
        let tape = Tape::new();
        let l = case.loss(&tape);
        let grads = tape.backward(l);
        let mut analytic: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (id, g) in grads.params() {
            analytic.insert(id, g.to_vec());
        }
        let mut r = rng(inst);
        let ids: Vec<(usize, String)> = case.model.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let Some(&(group, _)) = NEW_GROUPS.iter().find(|(_, pre)| name.starts_with(pre)) else {
                continue;
            };
            let group = if group == "fddt.w" {
                if name.ends_with(".b") {
                    "fddt.b"
                } else {
                    "fddt.w"
                }
            } else {
                group
            };
            let n = case.model.params.value(id).len();
            let zeros = vec![0.0; n];
            let a = analytic.get(&id).unwrap_or(&zeros).clone();
            for _ in 0..coords_per_tensor.min(n) {
                let j = r.gen_range(0..n);
                let mut eval = |delta: f64| {
                    case.model.params.get_mut(id).value.data_mut()[j] += delta;
                    let t = Tape::new();
                    let l = case.loss(&t);
                    let v = t.value(l).data()[0];
                    case.model.params.get_mut(id).value.data_mut()[j] -= delta;
                    v
                };
                let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
                let e = rel_err(a[j], numeric);
                let slot = worst.entry(group).or_insert((0, 0.0));
                slot.1 = slot.1.max(e);
            }
            worst.get_mut(group).unwrap().0 += 1;
        }
    }
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, (_, e))| *e >= 1e-4)
        .map(|(g, (_, e))| format!("{g} ({e:.2e})"))
        .collect();
    let max = worst.values().map(|(_, e)| *e).fold(0.0, f64::max);
    if failing.is_empty() {
        Ok(format!(
            "groups [{}] over {instances} models, max rel err {max:.2e}",
            worst.keys().copied().collect::<Vec<_>>().join(", ")
        ))
    } else {
        Err(format!("gradient mismatch: {}", failing.join(", ")))
    }
}

// ---------------------------------------------------------------------------
// Identity-init equivalence

/// Single-speaker forward of a freshly initialized model against the
/// unconditioned path, mapped onto the same logits.
pub fn identity_init_equivalence(inputs: usize) -> Check {
    let mut worst: f64 = 0.0;
    for i in 0..inputs as u64 {
        let mut r = rng(9000 + i);
        let agg = Aggregation::ALL[i as usize % Aggregation::ALL.len()];
        let m = SpeakerAttributedModel::<f64>::new(tiny_config(agg), i).unwrap();
        let v = m.vocabulary();
        let x = random_tensor(&mut r, 10, 4);
        let mask = soft_mask(&mut r, 0, 5);
        let mut tokens = v.prompt();
        for _ in 0..r.gen_range(0..8) {
            tokens.push(if r.gen_bool(0.5) {
                v.speaker_time_id(0, r.gen_range(0..6))
            } else {
                r.gen_range(0..5)
            });
        }
        let tape = Tape::new();
        let (_, sa) = m.forward(&tape, &x, &[mask], &tokens).unwrap();
        let base = m.baseline_forward(&tape, &x, &tokens).unwrap();
        let (sa, base) = (tape.value(sa.logits), tape.value(base));
        let (nw, nt) = (v.num_words(), v.num_timestamps());
        let sp = m.config.output_size() - 4;
        for n in 0..tokens.len() {
            let (s, b) = (sa.row(n), base.row(n));
            let mut pairs: Vec<(f64, f64)> = (0..nw).map(|k| (s[k], b[k])).collect();
            pairs.extend((0..nt).map(|w| (s[v.speaker_time_id(0, w)], b[nw + w])));
            pairs.extend((0..4).map(|k| (s[sp + k], b[nw + nt + k])));
            for (x, y) in pairs {
                worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1e-12));
            }
        }
    }
    if worst <= 1e-6 {
        Ok(format!("{inputs} inputs, max rel diff {worst:.2e}"))
    } else {
        Err(format!("conditioned model differs from baseline: rel diff {worst:.2e}"))
    }
}

// ---------------------------------------------------------------------------
// cpWER against brute force

pub fn levenshtein(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Minimum total edit distance over all speaker mappings, unmatched
/// streams paired with empty ones.
pub fn brute_force_errors(reference: &[Vec<String>], hypothesis: &[Vec<String>]) -> usize {
    let n = reference.len().max(hypothesis.len());
    let empty = Vec::new();
    let get = |v: &[Vec<String>], i: usize| -> Vec<String> { v.get(i).unwrap_or(&empty).clone() };
    permutations(n)
        .into_iter()
        .map(|p| (0..n).map(|i| levenshtein(&get(reference, i), &get(hypothesis, p[i]))).sum())
        .min()
        .unwrap()
}

fn random_streams(r: &mut ChaCha8Rng, max_speakers: usize, min_speakers: usize) -> Vec<Vec<String>> {
    let n = r.gen_range(min_speakers..=max_speakers);
    (0..n)
        .map(|_| {
            let len = r.gen_range(0..=30);
            (0..len).map(|_| format!("w{}", r.gen_range(0..20))).collect()
        })
        .collect()
}

fn to_set(streams: &[Vec<String>], labels: &[String]) -> TranscriptSet {
    let joined: Vec<String> = streams.iter().map(|s| s.join(" ")).collect();
    TranscriptSet::from_text(labels.iter().map(String::as_str).zip(joined.iter().map(String::as_str)))
}

pub fn cpwer_oracle(instances: usize) -> Check {
    for i in 0..instances as u64 {
        let mut r = rng(31_000 + i);
        let reference = random_streams(&mut r, 5, 1);
        let mut hypothesis = random_streams(&mut r, 5, 0);
        // Half the cases are noisy copies, so low-error assignments matter.
        if r.gen_bool(0.5) {
            hypothesis = reference.clone();
            hypothesis.shuffle(&mut r);
            for s in &mut hypothesis {
                if !s.is_empty() && r.gen_bool(0.5) {
                    let k = r.gen_range(0..s.len());
                    s[k] = format!("w{}", r.gen_range(0..20));
                }
            }
        }
        let rl: Vec<String> = (0..reference.len()).map(|k| format!("r{k}")).collect();
        let hl: Vec<String> = (0..hypothesis.len()).map(|k| format!("h{k}")).collect();
        let ref_words: usize = reference.iter().map(Vec::len).sum();
        let rep = cpwer(&to_set(&reference, &rl), &to_set(&hypothesis, &hl));
        let brute = brute_force_errors(&reference, &hypothesis);
        if rep.errors() != brute {
            return Err(format!("instance {i}: Hungarian {} vs brute force {brute}", rep.errors()));
        }
        if ref_words > 0 {
            let want = brute as f64 / ref_words as f64;
            if rep.cpwer != Some(want) {
                return Err(format!("instance {i}: cpWER {:?} vs {want}", rep.cpwer));
            }
        }
        let same = cpwer(&to_set(&reference, &rl), &to_set(&reference, &rl));
        if same.errors() != 0 {
            return Err(format!("instance {i}: cpwer(x, x) has {} errors", same.errors()));
        }
        let mut shuffled = hl.clone();
        shuffled.shuffle(&mut r);
        let renamed: Vec<String> = shuffled.iter().map(|l| format!("x{l}")).collect();
        let permuted = cpwer(&to_set(&reference, &rl), &to_set(&hypothesis, &renamed));
        let mut rperm = rl.clone();
        rperm.shuffle(&mut r);
        let ref_permuted = cpwer(&to_set(&reference, &rperm), &to_set(&hypothesis, &hl));
        if permuted.errors() != brute || ref_permuted.errors() != brute {
            return Err(format!("instance {i}: not invariant to speaker labels"));
        }
    }
    Ok(format!("{instances} instances match brute force; identity and relabeling hold"))
}

// ---------------------------------------------------------------------------
// Serialization and constrained decoding

/// Random valid segment set on the time grid, listed in serialization
/// order.
pub fn random_segments(r: &mut ChaCha8Rng, vocab: &Vocabulary) -> Vec<AttributedSegment> {
    let speakers = r.gen_range(1..=vocab.num_speakers());
    let w = vocab.num_timestamps();
    let mut segs = Vec::new();
    for u in 0..speakers {
        let mut t = r.gen_range(0..w);
        while t < w && r.gen_bool(0.7) {
            let end = r.gen_range(t..w);
            let words = (0..r.gen_range(0..4)).map(|_| r.gen_range(0..vocab.num_words())).collect();
            segs.push((t, u, end, words));
            t = end + r.gen_range(0..3);
        }
    }
    segs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    segs.into_iter()
        .map(|(a, u, b, words)| AttributedSegment {
            speaker_index: u,
            start_s: vocab.time_of(a),
            end_s: vocab.time_of(b),
            words,
        })
        .collect()
}

pub fn serializer_round_trip(instances: usize) -> Check {
    let vocab = Vocabulary::synthetic(12, 4, 31, 6.0).unwrap();
    for i in 0..instances as u64 {
        let mut r = rng(70_000 + i);
        let segs = random_segments(&mut r, &vocab);
        let s = serialize(&segs, &vocab).map_err(|e| format!("instance {i}: {e}"))?;
        let v = validate_stream(&s, &vocab);
        if !v.is_empty() {
            return Err(format!("instance {i}: serialized stream violates {:?}", v[0]));
        }
        let back = deserialize(&s, &vocab).map_err(|e| format!("instance {i}: {e:?}"))?;
        if back != segs {
            return Err(format!("instance {i}: round trip changed the segments"));
        }
    }
    Ok(format!("{instances} segment sets round-trip exactly"))
}

/// Constrained beam search on randomly initialized models with randomized
/// output heads; every output must validate.
pub fn constrained_outputs_valid(windows: usize) -> Check {
    let mut total = 0;
    for i in 0..windows as u64 {
        let mut r = rng(80_000 + i);
        let agg = Aggregation::ALL[i as usize % Aggregation::ALL.len()];
        let mut m = SpeakerAttributedModel::<f64>::new(tiny_config(agg), i).unwrap();
        for (_, p) in m.params.iter_mut() {
            if p.name.starts_with("head.") {
                p.value.data_mut().iter_mut().for_each(|x| *x += r.gen_range(-2.0..2.0));
            }
        }
        let speakers = r.gen_range(1..=3);
        let x = random_tensor(&mut r, 10, 4);
        let masks: Vec<StnoMask> = (0..speakers).map(|u| soft_mask(&mut r, u, 5)).collect();
        let w = EncodedWindow::new(&m, &x, &masks).map_err(|e| e.to_string())?;
        for beam in [1, 3] {
            let res = beam_decode(
                &m,
                &w,
                &BeamConfig {
                    beam_size: beam,
                    ..BeamConfig::default()
                },
            )
            .map_err(|e| format!("window {i}: {e}"))?;
            total += 1;
            let v = validate_stream(&res.transcript, &m.vocabulary());
            if !v.is_empty() {
                return Err(format!("window {i} beam {beam}: {:?}", v[0]));
            }
        }
    }
    Ok(format!("{total}/{total} constrained outputs valid"))
}
