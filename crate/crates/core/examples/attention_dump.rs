//! Last-layer cross-attention of a teacher-forced transcript: how much of
//! each word's attention falls on its own speaker's encoder block.
//!
//! ```text
//! cargo run --release --example attention_dump -- [checkpoint_dir]
//! ```

use std::path::PathBuf;

use mtasr::cli::RunConfig;
use mtasr::corpus::generate;
use mtasr::model::{load_checkpoint, SpeakerAttributedModel};
use mtasr::sot::deserialize;
use mtasr::train::examples_from_recordings;

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/toy-run/model".into()));
    let cfg = RunConfig {
        train_recordings: 0,
        dev_recordings: 0,
        test_recordings: 4,
        ..RunConfig::default()
    };
    let model = load_checkpoint::<f32>(&dir).unwrap_or_else(|e| {
        eprintln!("no trained model ({e}); using random weights");
        SpeakerAttributedModel::new(cfg.model_config(), 0).unwrap()
    });
    let vocab = model.vocabulary();
    let corpus = generate(&cfg.corpus_spec()).unwrap();
    let examples = examples_from_recordings(&model.config, &corpus.test).unwrap();
    for ex in &examples {
        let mut tokens = vocab.prompt();
        tokens.extend_from_slice(ex.target.tokens());
        let att = model.dump_cross_attention(&ex.features, &ex.masks, &tokens).unwrap();
        println!("{}: {} positions x {} keys", ex.recording_id, att.rows(), att.cols());
        let block = att.cols() / ex.masks.len();
        // Row i of the attention produces token i + 1.
        let mut pos = vocab.prompt().len();
        for seg in deserialize(&ex.target, &vocab).unwrap() {
            pos += 1;
            for &w in &seg.words {
                let row = att.row(pos - 1);
                let own: f32 = row[seg.speaker_index * block..(seg.speaker_index + 1) * block].iter().sum();
                println!("  {:>4} spk{} own-block mass {:.2}", vocab.word(w).unwrap(), seg.speaker_index, own);
                pos += 1;
            }
            pos += 1;
        }
    }
}
