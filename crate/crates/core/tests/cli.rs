use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 1\n[generator]\ntrain_samples = 48\ntest_samples = 24\n[warmup]\nsteps = 60\n[grpo]\nmax_steps = 3\nbatch_prompts = 4\n[rcs]\nstage1_max_steps = 2\neval_every = 1\nvalidation_size = 8\nstage2_steps = 2\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intent-rl"))
        .arg("--config")
        .arg(dir.join("run.toml"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

#[test]
fn help_and_usage_errors() {
    let help = Command::new(env!("CARGO_BIN_EXE_intent-rl"))
        .arg("--help")
        .output()
        .unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("train-rcs"));
    let bad = Command::new(env!("CARGO_BIN_EXE_intent-rl"))
        .arg("--bogus")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn invalid_config_exits_1() {
    let dir = setup("[grpo]\ngroup_size = 1\n");
    let out = run(dir.path(), &["gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("group_size"));

    let dir = setup("[grpo]\nlearning_rte = 0.1\n");
    assert_eq!(run(dir.path(), &["gen-data"]).status.code(), Some(1));
}

#[test]
fn missing_inputs_exit_1() {
    let dir = setup(SMALL);
    let out = run(dir.path(), &["train-grpo"]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run(dir.path(), &["gen-data"]).status.success());
    let out = run(dir.path(), &["eval", "--checkpoint", "nope.json"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(dir.path(), &["train-sft", "--exclude", "spaceship"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("spaceship"));
}

#[test]
fn unwritable_output_exits_2() {
    let dir = setup(SMALL);
    std::fs::write(dir.path().join("out"), "not a directory").unwrap();
    let out = run(dir.path(), &["gen-data"]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_writes_expected_artifacts() {
    let dir = setup(SMALL);
    for args in [
        &["gen-data"][..],
        &["train-grpo"],
        &["collect-rewards"],
        &["select-curriculum"],
        &["eval", "--split", "unseen"],
        &["report"],
    ] {
        let out = run(dir.path(), args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = dir.path().join("out");
    for f in [
        "data/corpus.jsonl",
        "data/vocab.json",
        "checkpoints/grpo.json",
        "logs/grpo_metrics.csv",
        "logs/collected_rewards.jsonl",
        "curriculum/manifest.json",
        "curriculum/scores.csv",
        "reports/eval_unseen.csv",
        "reports/lengths.csv",
        "artifacts.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let artifacts: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("artifacts.json")).unwrap())
            .unwrap();
    assert!(artifacts.get("curriculum/manifest.json").is_some());
}

#[test]
fn shipped_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let cfg = intent_rl::config::RunConfig::load(&path).unwrap();
    let expected = intent_rl::config::RunConfig {
        out: "runs/toy".into(),
        ..Default::default()
    };
    assert_eq!(cfg, expected);
}
