use std::path::Path;

use mtasr::cli::main_with_args;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("mtasr").chain(args.iter().copied()))
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gen_writes_corpus_and_echoes_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train_recordings = 4\ndev_recordings = 2\ntest_recordings = 2\n");
    let out = tmp.path().join("out");
    assert_eq!(run(&["gen", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()]), 0);
    assert!(out.join("corpus/test/annotations.jsonl").exists());
    let echoed = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 3"), "{echoed}");
}

#[test]
fn config_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    let unknown = write_config(tmp.path(), "no_such_key = 1\n");
    assert_eq!(run(&["gen", "--config", &unknown, "--out", out]), 2);
    assert_eq!(run(&["gen", "--config", "/nonexistent/run.toml", "--out", out]), 2);
    assert_eq!(run(&["gen", "--aggregation", "median", "--out", out]), 2);
    assert_eq!(run(&["gen", "--beam", "0", "--out", out]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train_recordings = 2\ndev_recordings = 1\ntest_recordings = 1\n");
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(run(&["gen", "--config", &cfg, "--out", out]), 0);
    let ck = tmp.path().join("nothing-here");
    assert_eq!(
        run(&["decode", "--config", &cfg, "--out", out, "--checkpoint", ck.to_str().unwrap()]),
        1
    );
}

#[test]
fn decode_dumps_attention_when_asked() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "train_recordings = 16\ndev_recordings = 2\ntest_recordings = 2\npretrain_steps = 4\n\
         stage1_steps = 2\nwarmup_steps = 1\nmax_steps = 6\nval_every = 0\ncheckpoint_every = 0\n",
    );
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();
    assert_eq!(run(&["gen", "--config", &cfg, "--out", out_s]), 0);
    assert_eq!(run(&["train", "--config", &cfg, "--out", out_s, "--spk-ts-weight", "1"]), 0);
    assert_eq!(
        run(&["decode", "--config", &cfg, "--out", out_s, "--beam", "2", "--dump-attention"]),
        0
    );
    let dumps = std::fs::read_dir(out.join("decode/attention")).unwrap().count();
    assert_eq!(dumps, 2);
    assert_eq!(run(&["eval", "--config", &cfg, "--out", out_s]), 0);
    assert!(out.join("eval/report.csv").exists());
}
