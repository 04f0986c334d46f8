use super::*;
use crate::corpus::{generate, CorpusSpec};
use crate::model::{Aggregation, ModelConfig};

fn toy_spec() -> CorpusSpec {
    CorpusSpec {
        train_recordings: 6,
        dev_recordings: 2,
        test_recordings: 0,
        speakers_min: 2,
        speakers_max: 2,
        max_speakers: 3,
        vocab_size: 8,
        window_s: 4.0,
        frame_s: 0.2,
        feature_dim: 6,
        words_min: 2,
        words_max: 3,
        word_frames_min: 2,
        word_frames_max: 3,
        ..CorpusSpec::default()
    }
}

fn toy_config(spec: &CorpusSpec) -> ModelConfig {
    ModelConfig {
        feature_dim: spec.feature_dim,
        model_dim: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_dim: 16,
        num_words: spec.vocab_size,
        num_speakers: spec.max_speakers,
        num_timestamps: 21,
        window_s: spec.window_s,
        aggregation: Aggregation::Concatenation,
        max_frames: spec.frames_per_window(),
        max_tokens: 48,
        conv_width: 3,
    }
}

fn toy_data() -> (ModelConfig, Vec<TrainingExample>, Vec<TrainingExample>) {
    let spec = toy_spec();
    let corpus = generate(&spec).unwrap();
    let cfg = toy_config(&spec);
    let train = examples_from_recordings(&cfg, &corpus.train).unwrap();
    let dev = examples_from_recordings(&cfg, &corpus.dev).unwrap();
    (cfg, train, dev)
}

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        stage1_steps: 3,
        warmup_steps: 2,
        stage1_lr: 1e-2,
        stage2_lr_new: 1e-2,
        stage2_lr_base: 1e-3,
        effective_batch: 2,
        max_steps: 6,
        val_every: 0,
        val_max_examples: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn examples_match_recordings() {
    let (cfg, train, _) = toy_data();
    let vocab = cfg.vocabulary();
    assert_eq!(train.len(), 6);
    for ex in &train {
        check_example(ex, &vocab).unwrap();
        assert_eq!(ex.masks.len(), 2);
        assert_eq!(ex.features.rows(), cfg.input_frames());
    }
}

#[test]
fn identity_permutation_is_noop() {
    let (cfg, train, _) = toy_data();
    let vocab = cfg.vocabulary();
    for ex in &train {
        assert_eq!(&apply_permutation(ex, &[0, 1], &vocab), ex);
    }
}

#[test]
fn swap_relabels_masks_and_tokens() {
    let (cfg, train, _) = toy_data();
    let vocab = cfg.vocabulary();
    let ex = &train[0];
    let sw = apply_permutation(ex, &[1, 0], &vocab);
    assert_eq!(sw.masks[0].probs, ex.masks[1].probs);
    assert_eq!(sw.masks[1].probs, ex.masks[0].probs);
    assert_eq!(sw.masks[0].speaker_index, 0);
    assert_eq!(sw.speakers, vec![ex.speakers[1].clone(), ex.speakers[0].clone()]);
    check_example(&sw, &vocab).unwrap();
    // Same words attributed to the same speaker labels.
    let key = |e: &TrainingExample| {
        let mut s: Vec<(String, String)> = example_segments(e, &vocab)
            .into_iter()
            .map(|s| (s.speaker_id, format!("{:.2} {}", s.start_s, s.text)))
            .collect();
        s.sort();
        s
    };
    assert_eq!(key(&sw), key(ex));
    assert_eq!(sw.permutation, vec![1, 0]);
    assert_eq!(&apply_permutation(&sw, &[1, 0], &vocab), &{
        let mut e = ex.clone();
        e.permutation = vec![0, 1];
        e
    });
}

#[test]
fn augmentation_permutes_within_active_speakers() {
    let (cfg, train, _) = toy_data();
    let vocab = cfg.vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..40 {
        let a = speaker_order_augment(&train[1], &vocab, &mut rng);
        check_example(&a, &vocab).unwrap();
        seen.insert(a.permutation.clone());
    }
    assert_eq!(seen.len(), 2);
}

#[test]
fn unit_weight_equals_plain_cross_entropy() {
    let (cfg, train, _) = toy_data();
    let model = SpeakerAttributedModel::<f32>::new(cfg, 1).unwrap();
    let tape = Tape::new();
    let out = compute_loss(&model, &tape, &train[0], 1.0).unwrap();
    let active: Vec<f64> = out
        .token_losses
        .iter()
        .zip(&out.weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(l, _)| *l)
        .collect();
    let mean = active.iter().sum::<f64>() / active.len() as f64;
    assert!((out.value - mean).abs() < 1e-4, "{} vs {mean}", out.value);
    // Only the last prompt position and beyond are scored.
    let p = model.vocabulary().prompt().len();
    assert!(out.weights[..p - 1].iter().all(|&w| w == 0.0));
}

#[test]
fn weighted_loss_is_weighted_mean() {
    let (cfg, train, _) = toy_data();
    let model = SpeakerAttributedModel::<f32>::new(cfg, 2).unwrap();
    let vocab = model.vocabulary();
    let tape = Tape::new();
    let out = compute_loss(&model, &tape, &train[0], 5.0).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &t) in out.targets.iter().enumerate() {
        let w = if out.weights[i] == 0.0 {
            0.0
        } else if vocab.is_speaker_time(t) {
            5.0
        } else {
            1.0
        };
        assert_eq!(w, out.weights[i]);
        num += w * out.token_losses[i];
        den += w;
    }
    assert!((out.value - num / den).abs() < 1e-4);
}

#[test]
fn equal_word_and_timestamp_loss_gives_combined_formula() {
    // With every word token at loss lw and every speaker-timestamp token at
    // lt, weight 5 gives (n_w lw + 5 n_t lt)/(n_w + 5 n_t); with one of each
    // that is (lw + 5 lt)/6.
    let (lw, lt) = (0.7_f64, 2.3_f64);
    let v = (lw + 5.0 * lt) / 6.0;
    let weights = [1.0, 5.0];
    let losses = [lw, lt];
    let got = weights.iter().zip(&losses).map(|(w, l)| w * l).sum::<f64>() / 6.0;
    assert!((got - v).abs() < 1e-12);
}

#[test]
fn loss_weight_does_not_matter_without_timestamp_targets() {
    let (cfg, train, _) = toy_data();
    let model = SpeakerAttributedModel::<f32>::new(cfg, 3).unwrap();
    let mut ex = train[0].clone();
    ex.target = crate::sot::SerializedTranscript(Vec::new());
    let a = compute_loss(&model, &Tape::new(), &ex, 1.0).unwrap().value;
    let b = compute_loss(&model, &Tape::new(), &ex, 5.0).unwrap().value;
    assert_eq!(a, b);
}

#[test]
fn loss_rejects_speaker_without_mask() {
    let (cfg, train, _) = toy_data();
    let model = SpeakerAttributedModel::<f32>::new(cfg, 3).unwrap();
    let mut ex = train[0].clone();
    ex.masks.truncate(1);
    assert!(matches!(
        compute_loss(&model, &Tape::new(), &ex, 5.0),
        Err(TrainError::InvalidTarget(_))
    ));
}

#[test]
fn warmup_and_stage_switch() {
    let c = TrainConfig::default();
    assert_eq!(schedule(&c, 1).lr_new, 2e-4 / 500.0);
    assert_eq!(schedule(&c, 250).lr_new, 2e-4 * 0.5);
    assert_eq!(schedule(&c, 500).lr_new, 2e-4);
    assert_eq!(schedule(&c, 1000).stage, 1);
    assert_eq!(schedule(&c, 1000).lr_base, 0.0);
    let s2 = schedule(&c, 1001);
    assert_eq!((s2.stage, s2.lr_new, s2.lr_base), (2, 2e-4, 2e-6));
}

#[test]
fn stage_one_leaves_base_weights_untouched() {
    let (cfg, train, _) = toy_data();
    let model = SpeakerAttributedModel::<f32>::new(cfg, 4).unwrap();
    let before = model.params.clone();
    let mut t = Trainer::new(model, toy_train_config()).unwrap();
    for _ in 0..3 {
        t.train_step(&train).unwrap();
    }
    let mut new_changed = false;
    for ((_, a), (_, b)) in before.iter().zip(t.model.params.iter()) {
        match a.group {
            ParamGroup::Base => assert_eq!(a.value.data(), b.value.data(), "{} moved in stage 1", a.name),
            ParamGroup::New => new_changed |= a.value.data() != b.value.data(),
        }
    }
    assert!(new_changed);
    t.train_step(&train).unwrap();
    let moved = before
        .iter()
        .zip(t.model.params.iter())
        .any(|((_, a), (_, b))| a.group == ParamGroup::Base && a.value.data() != b.value.data());
    assert!(moved, "stage 2 must update base weights");
}

#[test]
fn frozen_fddt_stays_identity() {
    let (cfg, train, _) = toy_data();
    let model = SpeakerAttributedModel::<f32>::new(cfg, 4).unwrap();
    let before = model.params.clone();
    let mut t = Trainer::new(
        model,
        TrainConfig {
            freeze_fddt: true,
            ..toy_train_config()
        },
    )
    .unwrap();
    for _ in 0..5 {
        t.train_step(&train).unwrap();
    }
    for ((_, a), (_, b)) in before.iter().zip(t.model.params.iter()) {
        if a.name.starts_with("fddt.") {
            assert_eq!(a.value.data(), b.value.data());
        }
    }
}

#[test]
fn training_is_deterministic() {
    let (cfg, train, _) = toy_data();
    let run = || {
        let mut t = Trainer::new(SpeakerAttributedModel::<f32>::new(cfg.clone(), 5).unwrap(), toy_train_config()).unwrap();
        t.run(&train, &[], &RunOptions::default()).unwrap();
        (t.model.params, t.metrics)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(ma, mb);
    for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
        assert_eq!(x.value.data(), y.value.data());
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (cfg, train, dev) = toy_data();
    let tc = TrainConfig {
        checkpoint_every: 2,
        val_every: 3,
        ..toy_train_config()
    };
    let full_dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(SpeakerAttributedModel::<f32>::new(cfg.clone(), 6).unwrap(), tc.clone()).unwrap();
    full.run(
        &train,
        &dev,
        &RunOptions {
            out_dir: Some(full_dir.path().to_path_buf()),
            log_every: 0,
        },
    )
    .unwrap();
    assert!(full_dir.path().join("checkpoints/step_000004/trainer.json").exists());
    assert!(full_dir.path().join("model/params.bin").exists());

    let mut resumed = Trainer::resume(&full_dir.path().join("checkpoints/step_000004")).unwrap();
    assert_eq!(resumed.step, 4);
    resumed.run(&train, &dev, &RunOptions::default()).unwrap();
    for ((_, x), (_, y)) in full.model.params.iter().zip(resumed.model.params.iter()) {
        assert_eq!(x.value.data(), y.value.data(), "{}", x.name);
    }
    assert_eq!(metrics_csv(&full.metrics), metrics_csv(&resumed.metrics));
    let csv = std::fs::read_to_string(full_dir.path().join("metrics.csv")).unwrap();
    assert!(csv.starts_with(METRICS_HEADER));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn diverged_run_keeps_last_good_parameters() {
    let (cfg, train, _) = toy_data();
    let mut model = SpeakerAttributedModel::<f32>::new(cfg, 7).unwrap();
    model.params.by_name_mut("head.lex.w").unwrap().value.data_mut()[0] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(model, toy_train_config()).unwrap();
    let err = t
        .run(
            &train,
            &[],
            &RunOptions {
                out_dir: Some(dir.path().to_path_buf()),
                log_every: 0,
            },
        )
        .unwrap_err();
    match err {
        TrainError::Diverged { step, checkpoint } => {
            assert_eq!(step, 1);
            assert!(checkpoint.unwrap().join("params.bin").exists());
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn invalid_config_is_rejected() {
    let bad = TrainConfig {
        stage1_steps: 10,
        max_steps: 5,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
}

#[test]
fn metrics_round_trip() {
    let rows = vec![
        MetricsRow {
            step: 1,
            stage: 1,
            lr_new: 1e-4,
            lr_base: 0.0,
            loss: 3.25,
            val_cpwer: None,
        },
        MetricsRow {
            step: 2,
            stage: 2,
            lr_new: 2e-4,
            lr_base: 2e-6,
            loss: 1.5,
            val_cpwer: Some(0.25),
        },
    ];
    assert_eq!(parse_metrics_csv(&metrics_csv(&rows)).unwrap(), rows);
}
