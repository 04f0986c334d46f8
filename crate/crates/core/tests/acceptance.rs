//! Acceptance runner: every criterion at its stated tolerance, one
//! PASS/FAIL line each. Trained models are shared between the criteria
//! that need them. Exits nonzero when any criterion fails.
//!
//! `ACCEPTANCE_ONLY=5,7` restricts the run to the listed criteria.

mod common;

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use mtasr::cli::{main_with_args, pretrain, RunConfig};
use mtasr::corpus::{generate, OverlapMode};
use mtasr::decode::{beam_decode, greedy_decode, EncodedWindow};
use mtasr::model::{Aggregation, SpeakerAttributedModel};
use mtasr::sot::{deserialize, validate_stream, AttributedSegment, SerializedTranscript};
use mtasr::train::{apply_permutation, examples_from_recordings, validation_cpwer, RunOptions, Trainer, TrainingExample};

use common::Check;

type Model = SpeakerAttributedModel<f32>;

/// Fully overlapped two-speaker mixtures, one word per segment.
fn overlap_setting() -> RunConfig {
    RunConfig {
        train_recordings: 4000,
        test_recordings: 128,
        log_every: 0,
        checkpoint_every: 0,
        val_every: 0,
        ..RunConfig::default()
    }
}

/// Sparse meetings of four to six speakers in 4 s windows, one word per
/// segment, half of the turns overlapping the previous one.
fn meeting_setting() -> RunConfig {
    RunConfig {
        overlap_mode: OverlapMode::MeetingSparse,
        speakers_min: 4,
        speakers_max: 6,
        overlap_prob: 0.5,
        window_s: 4.0,
        num_timestamps: 21,
        train_recordings: 24000,
        test_recordings: 256,
        max_steps: 12000,
        ..overlap_setting()
    }
}

/// Pre-trained bases keyed by everything that shapes them.
#[derive(Default)]
struct Bases(HashMap<String, Model>);

impl Bases {
    fn get(&mut self, cfg: &RunConfig) -> Model {
        // Fine-tuning choices do not reach the base.
        let pre = RunConfig {
            aggregation: Aggregation::Concatenation,
            spk_ts_loss_weight: 5.0,
            freeze_fddt: false,
            ..cfg.clone()
        };
        let key = format!("{:?}|{:?}|{:?}", pre.pretrain_corpus_spec(), pre.pretrain_config(), pre.model_config());
        let m = self
            .0
            .entry(key)
            .or_insert_with(|| pretrain(&pre, None).expect("pre-training"));
        // One channel makes every aggregation the identity; weighted_sum
        // adds its own scalars at their initial values.
        transplant(m, Model::new(cfg.model_config(), cfg.seed).unwrap())
    }
}

/// Copy every parameter `from` has into `to`.
fn transplant(from: &Model, mut to: Model) -> Model {
    for (_, p) in from.params.iter() {
        if let Some(dst) = to.params.by_name_mut(&p.name) {
            dst.value = p.value.clone();
        }
    }
    to
}

struct Data {
    train: Vec<TrainingExample>,
    test: Vec<TrainingExample>,
}

fn data(cfg: &RunConfig) -> Data {
    let corpus = generate(&cfg.corpus_spec()).expect("corpus");
    let m = cfg.model_config();
    Data {
        train: examples_from_recordings(&m, &corpus.train).unwrap(),
        test: examples_from_recordings(&m, &corpus.test).unwrap(),
    }
}

fn fine_tune(cfg: &RunConfig, bases: &mut Bases, data: &Data) -> Model {
    let mut t = Trainer::new(bases.get(cfg), cfg.train_config()).unwrap();
    t.run(&data.train, &[], &RunOptions::default()).expect("training");
    t.model
}

fn test_cpwer(model: &Model, data: &Data) -> f64 {
    validation_cpwer(model, &data.test).unwrap().expect("non-empty test set")
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

/// Models shared by criteria 4, 7, 8 and 9.
struct Shared {
    data: Data,
    sa: Model,
    baseline: Model,
}

fn shared(bases: &mut Bases) -> Shared {
    let cfg = RunConfig {
        max_steps: 5000,
        ..overlap_setting()
    };
    let data = data(&cfg);
    let sa = fine_tune(&cfg, bases, &data);
    let baseline = fine_tune(
        &RunConfig {
            freeze_fddt: true,
            ..cfg.clone()
        },
        bases,
        &data,
    );
    Shared { data, sa, baseline }
}

fn criterion_4(shared: &Shared) -> Check {
    let a = common::serializer_round_trip(1000)?;
    let b = common::constrained_outputs_valid(50)?;
    let vocab = shared.sa.vocabulary();
    let beam = RunConfig::default().beam_config();
    for ex in &shared.data.test {
        let enc = EncodedWindow::new(&shared.sa, &ex.features, &ex.masks).map_err(|e| e.to_string())?;
        let out = beam_decode(&shared.sa, &enc, &beam).map_err(|e| e.to_string())?;
        if let Some(v) = validate_stream(&out.transcript, &vocab).first() {
            return Err(format!("{} trained-model beam output violates {v:?}", ex.recording_id));
        }
    }
    Ok(format!(
        "{a}; {b}; {} trained-model beam outputs valid",
        shared.data.test.len()
    ))
}

fn criterion_5(bases: &mut Bases) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3 {
        let base = RunConfig {
            seed,
            ..meeting_setting()
        };
        let data = data(&base);
        let mut c = Vec::new();
        for agg in [Aggregation::Concatenation, Aggregation::MaskedAverage, Aggregation::Average] {
            let cfg = RunConfig {
                aggregation: agg,
                ..base.clone()
            };
            c.push(test_cpwer(&fine_tune(&cfg, bases, &data), &data));
        }
        ok &= c[0] < c[1] && c[1] <= c[2];
        lines.push(format!(
            "seed {seed}: concatenation {} masked_average {} average {}",
            pct(c[0]),
            pct(c[1]),
            pct(c[2])
        ));
    }
    let s = lines.join("; ");
    if ok {
        Ok(s)
    } else {
        Err(format!("ordering violated: {s}"))
    }
}

fn criterion_6(bases: &mut Bases) -> Check {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let base = RunConfig {
            seed,
            max_steps: 2000,
            ..overlap_setting()
        };
        let data = data(&base);
        let c: Vec<f64> = [5.0, 1.0]
            .iter()
            .map(|&w| {
                let cfg = RunConfig {
                    spk_ts_loss_weight: w,
                    ..base.clone()
                };
                test_cpwer(&fine_tune(&cfg, bases, &data), &data)
            })
            .collect();
        wins += usize::from(c[0] <= c[1]);
        lines.push(format!("seed {seed}: weight 5 {} weight 1 {}", pct(c[0]), pct(c[1])));
    }
    let s = format!("{wins}/3 seeds with weight 5 <= weight 1 ({})", lines.join("; "));
    if wins >= 2 {
        Ok(s)
    } else {
        Err(s)
    }
}

fn criterion_7(shared: &Shared) -> Check {
    let sa = test_cpwer(&shared.sa, &shared.data);
    let base = test_cpwer(&shared.baseline, &shared.data);
    let s = format!("speaker-attributed {} frozen-FDDT baseline {} after 5000 steps", pct(sa), pct(base));
    if sa < 0.15 && base >= 2.0 * sa {
        Ok(s)
    } else {
        Err(s)
    }
}

fn greedy_segments(model: &Model, ex: &TrainingExample) -> Result<Vec<AttributedSegment>, String> {
    let enc = EncodedWindow::new(model, &ex.features, &ex.masks).map_err(|e| e.to_string())?;
    let tokens = greedy_decode(model, &enc, true).map_err(|e| e.to_string())?;
    deserialize(&SerializedTranscript(tokens), &model.vocabulary()).map_err(|e| e.to_string())
}

/// Same onset and words: the speaker tag is the only free part.
fn same_content(a: &AttributedSegment, b: &AttributedSegment) -> bool {
    (a.start_s - b.start_s).abs() < 1e-9 && (a.end_s - b.end_s).abs() < 1e-9 && a.words == b.words
}

fn criterion_8(shared: &Shared) -> Check {
    let vocab = shared.sa.vocabulary();
    let (mut scored, mut followed) = (0usize, 0usize);
    for ex in &shared.data.test {
        let perm: Vec<usize> = (0..ex.masks.len()).rev().collect();
        let swapped = apply_permutation(ex, &perm, &vocab);
        let reference = deserialize(&ex.target, &vocab).map_err(|e| e.to_string())?;
        let before = greedy_segments(&shared.sa, ex)?;
        let after = greedy_segments(&shared.sa, &swapped)?;
        for r in &reference {
            let (Some(b), Some(a)) = (
                before.iter().find(|s| same_content(s, r)),
                after.iter().find(|s| same_content(s, r)),
            ) else {
                continue;
            };
            scored += 1;
            followed += usize::from(a.speaker_index == perm[b.speaker_index]);
        }
    }
    if scored == 0 {
        return Err("no segment transcribed correctly in both orders".into());
    }
    let rate = followed as f64 / scored as f64;
    let s = format!("tags follow the swap on {followed}/{scored} segments ({})", pct(rate));
    if rate >= 0.9 {
        Ok(s)
    } else {
        Err(s)
    }
}

fn criterion_9(shared: &Shared) -> Check {
    let model = &shared.sa;
    let vocab = model.vocabulary();
    let prompt = vocab.prompt();
    let (mut words, mut focused) = (0usize, 0usize);
    let mut worst_row = 0.0f64;
    for ex in &shared.data.test {
        let mut tokens = prompt.clone();
        tokens.extend_from_slice(ex.target.tokens());
        let att = model
            .dump_cross_attention(&ex.features, &ex.masks, &tokens)
            .map_err(|e| e.to_string())?;
        for i in 0..att.rows() {
            let sum: f64 = att.row(i).iter().map(|&v| f64::from(v)).sum();
            worst_row = worst_row.max((sum - 1.0).abs());
        }
        let block = att.cols() / ex.masks.len();
        let mut pos = prompt.len();
        for seg in deserialize(&ex.target, &vocab).map_err(|e| e.to_string())? {
            pos += 1;
            for _ in &seg.words {
                // Row pos - 1 is the query that emits the token at pos.
                let row = att.row(pos - 1);
                let own: f64 = row[seg.speaker_index * block..(seg.speaker_index + 1) * block]
                    .iter()
                    .map(|&v| f64::from(v))
                    .sum();
                words += 1;
                focused += usize::from(own > 0.5);
                pos += 1;
            }
            pos += 1;
        }
    }
    let rate = focused as f64 / words as f64;
    let s = format!(
        "{focused}/{words} words ({}) put >0.5 on their speaker's block; max |row sum - 1| {worst_row:.1e}",
        pct(rate)
    );
    if rate > 0.5 && worst_row <= 1e-6 {
        Ok(s)
    } else {
        Err(s)
    }
}

fn metrics_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") && !p.starts_with(dir.join("corpus")) {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_10() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(
        &cfg,
        "train_recordings = 64\ndev_recordings = 8\ntest_recordings = 8\n\
         pretrain_steps = 20\nstage1_steps = 10\nwarmup_steps = 5\nmax_steps = 40\n\
         val_every = 20\ncheckpoint_every = 20\nlog_every = 0\nbeam_size = 2\n",
    )
    .map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("run{k}"));
        let args = ["mtasr", "pipeline", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()];
        let code = main_with_args(args);
        if code != 0 {
            return Err(format!("pipeline run {k} exited with {code}"));
        }
        runs.push(metrics_files(&out));
    }
    if runs[0].is_empty() {
        return Err("pipeline wrote no metrics".into());
    }
    let names: Vec<_> = runs[0].iter().map(|(n, _)| n.as_str()).collect();
    if runs[0] != runs[1] {
        return Err(format!("metrics differ between runs among {names:?}"));
    }
    Ok(format!("{} metrics CSVs byte-identical: {}", names.len(), names.join(", ")))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let mut bases = Bases::default();
    let mut shared_models: Option<Shared> = None;
    let mut results: Vec<(usize, &str, Check, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Check| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &r {
            Ok(s) => ("PASS", s),
            Err(s) => ("FAIL", s),
        };
        println!("criterion {n:>2} {tag} {name} ({secs:.0} s): {detail}");
        results.push((n, name, r, secs));
    };

    run(1, "gradient suite", &mut || {
        let a = common::gradient_primitives(20)?;
        let b = common::gradient_param_groups(20, 6)?;
        Ok(format!("{a}; {b}"))
    });
    run(2, "identity-init equivalence", &mut || common::identity_init_equivalence(50));
    run(3, "cpWER oracle equivalence", &mut || common::cpwer_oracle(500));
    let needs_shared = [4, 7, 8, 9].iter().any(|&n| wanted(n));
    if needs_shared {
        let t = Instant::now();
        shared_models = Some(shared(&mut bases));
        println!("trained shared two-speaker models in {:.0} s", t.elapsed().as_secs_f64());
    }
    let sh = shared_models.as_ref();
    run(4, "serializer round trip and constraints", &mut || criterion_4(sh.unwrap()));
    run(5, "aggregation ordering", &mut || criterion_5(&mut bases));
    run(6, "speaker-timestamp loss weight", &mut || criterion_6(&mut bases));
    run(7, "overlap advantage", &mut || criterion_7(sh.unwrap()));
    run(8, "speaker-order swap following", &mut || criterion_8(sh.unwrap()));
    run(9, "cross-attention structure", &mut || criterion_9(sh.unwrap()));
    run(10, "pipeline determinism", &mut criterion_10);

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
