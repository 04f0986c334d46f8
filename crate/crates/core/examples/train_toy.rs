//! Pre-train on single-speaker data, then fine-tune the speaker-conditioned
//! model on fully overlapped two-speaker mixtures.
//!
//! ```text
//! cargo run --release --example train_toy -- [out_dir] [steps]
//! ```
//! The trained model lands in `<out_dir>/model` (default `target/toy-run`).

use std::path::PathBuf;

use mtasr::cli::{pretrain, RunConfig};
use mtasr::corpus::generate;
use mtasr::train::{examples_from_recordings, validation_cpwer, RunOptions, Trainer};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/toy-run".into()));
    let steps: usize = args.next().map_or(1500, |s| s.parse().expect("steps"));
    let cfg = RunConfig {
        train_recordings: 4000,
        pretrain_steps: 800,
        stage1_steps: 200.min(steps),
        max_steps: steps,
        val_every: 500,
        log_every: 100,
        ..RunConfig::default()
    };
    cfg.validate().expect("valid config");

    let corpus = generate(&cfg.corpus_spec()).unwrap();
    let mcfg = cfg.model_config();
    let train = examples_from_recordings(&mcfg, &corpus.train).unwrap();
    let dev = examples_from_recordings(&mcfg, &corpus.dev).unwrap();
    let test = examples_from_recordings(&mcfg, &corpus.test).unwrap();

    eprintln!("single-speaker pre-training, {} steps", cfg.pretrain_steps);
    let base = pretrain(&cfg, None).unwrap();
    println!("before fine-tuning: test cpWER {:.3}", validation_cpwer(&base, &test).unwrap().unwrap());

    let mut trainer = Trainer::new(base, cfg.train_config()).unwrap();
    let opts = RunOptions {
        out_dir: Some(out.clone()),
        log_every: cfg.log_every,
    };
    trainer.run(&train, &dev, &opts).unwrap();
    println!(
        "after {} steps: test cpWER {:.3}; model in {}",
        trainer.step,
        validation_cpwer(&trainer.model, &test).unwrap().unwrap(),
        out.join("model").display()
    );
}
