//! Long-form decoding of a three-window recording with oracle diarization.
//!
//! ```text
//! cargo run --release --example decode_longform -- [checkpoint_dir]
//! ```
//! Uses the model written by `train_toy` by default; falls back to an
//! untrained model (garbage transcripts, same mechanics) if none exists.

use std::path::PathBuf;

use mtasr::cli::RunConfig;
use mtasr::corpus::{generate, CorpusSpec};
use mtasr::decode::{longform_decode, BeamConfig};
use mtasr::eval::{cpwer, TranscriptSet};
use mtasr::model::{load_checkpoint, SpeakerAttributedModel};

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/toy-run/model".into()));
    let cfg = RunConfig::default();
    let model = match load_checkpoint::<f32>(&dir) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("no trained model ({e}); decoding with random weights");
            SpeakerAttributedModel::new(cfg.model_config(), 0).unwrap()
        }
    };
    let spec = CorpusSpec {
        train_recordings: 0,
        dev_recordings: 0,
        test_recordings: 1,
        windows_per_recording: 3,
        seed: 42,
        ..cfg.corpus_spec()
    };
    let rec = &generate(&spec).unwrap().test[0];
    let beam = BeamConfig {
        beam_size: 4,
        ..BeamConfig::default()
    };
    let out = longform_decode(&model, &rec.id, &rec.features, &rec.segments, &beam, false).unwrap();
    for w in &out.windows {
        println!(
            "window {} @ {:.1}s: {}",
            w.index,
            w.offset_s,
            model.vocabulary().render(&w.tokens)
        );
    }
    for s in &out.segments {
        println!("{:>12} [{:5.2}, {:5.2}] {}", s.speaker_id, s.start_s, s.end_s, s.text);
    }
    let r: Vec<_> = rec.segments.iter().collect();
    let h: Vec<_> = out.segments.iter().collect();
    let rep = cpwer(&TranscriptSet::from_segments(&r, true), &TranscriptSet::from_segments(&h, true));
    println!("cpWER {:.1}%", 100.0 * rep.cpwer.unwrap_or(0.0));
}
