use std::path::Path;
use std::process::{Command, Output};

fn lanemeta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanemeta"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "ppo.horizon=32",
    "--set",
    "ppo.minibatch=32",
    "--set",
    "network.hidden=8",
    "--set",
    "meta.log_every=1",
    "--set",
    "meta.log_episodes=1",
    "--eval-episodes",
    "2",
];

fn run_in(out: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend(["--out", out.to_str().unwrap()]);
    all.extend(TINY);
    lanemeta(&all)
}

fn manifest(out: &Path) -> toml::Value {
    toml::from_str(&std::fs::read_to_string(out.join("run-manifest.toml")).unwrap()).unwrap()
}

#[test]
fn help_lists_subcommands() {
    let o = lanemeta(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["train-meta", "train-pretrained", "adapt", "eval", "report"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn unknown_subcommand_is_rejected() {
    let o = lanemeta(&["fly"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("fly"));
}

#[test]
fn unknown_override_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["train-meta", "--steps", "0", "--set", "ppo.horizonn=4"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("horizonn"), "{}", stderr(&o));
}

#[test]
fn malformed_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["train-meta", "--set", "no-equals-sign"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let o = run_in(dir.path(), &["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope.ckpt"));
}

#[test]
fn config_layers_defaults_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "master_seed = 5\n[ppo]\nhorizon = 48\ngamma = 0.9\n").unwrap();
    let out = dir.path().join("out");
    let o = run_in(
        &out,
        &[
            "train-meta",
            "--steps",
            "0",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "ppo.gamma=0.95",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&out);
    let run = &m["run"];
    // file beats default
    assert_eq!(run["master_seed"].as_integer(), Some(5));
    // flag beats file: TINY sets horizon after the file is read
    assert_eq!(run["ppo"]["horizon"].as_integer(), Some(32));
    assert_eq!(run["ppo"]["gamma"].as_float(), Some(0.95));
    // untouched default
    assert_eq!(run["ppo"]["clip"].as_float(), Some(0.2));
    assert_eq!(m["command"].as_str(), Some("train-meta"));
}

#[test]
fn scenario_overrides_reach_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(
        dir.path(),
        &["train-meta", "--steps", "0", "--set", "scenario.reward.d_near=12.5"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        manifest(dir.path())["scenario"]["reward"]["d_near"].as_float(),
        Some(12.5)
    );
}

#[test]
fn train_eval_adapt_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(run_in(d, &["train-meta", "--steps", "1"]).status.success());
    let ckpt = d.join("meta.ckpt");
    assert!(ckpt.exists() && d.join("meta-train.csv").exists());

    let o = run_in(d, &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--trace"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("eval.csv").exists() && d.join("trace.csv").exists());

    let o = run_in(
        d,
        &[
            "adapt",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--steps",
            "2",
            "--set",
            "eval.eval_every=1",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(d.join("adapt-metrics.csv")).unwrap();
    // header plus steps 0, 1, 2
    assert_eq!(metrics.lines().count(), 4);
    assert!(d.join("adapted.ckpt").exists());

    let artifacts = manifest(d)["artifacts"].as_table().unwrap().clone();
    assert!(artifacts.contains_key("adapted.ckpt"));
    assert!(!artifacts.contains_key("run-manifest.toml"));
}

#[test]
fn same_seed_same_checkpoint() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        assert!(run_in(d, &["train-pretrained", "--steps", "2", "--seed", "9"])
            .status
            .success());
    }
    let read = |d: &Path| std::fs::read(d.join("pretrained.ckpt")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let c = tempfile::tempdir().unwrap();
    assert!(run_in(c.path(), &["train-pretrained", "--steps", "2", "--seed", "10"])
        .status
        .success());
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn worker_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run_in(a.path(), &["train-meta", "--steps", "2", "--workers", "1"])
        .status
        .success());
    assert!(run_in(b.path(), &["train-meta", "--steps", "2", "--workers", "3"])
        .status
        .success());
    for f in ["meta.ckpt", "meta-train.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lanemeta"))
        .current_dir(&root)
        .args(["train-meta", "--config", "configs/desk.toml", "--steps", "0", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(dir.path());
    assert_eq!(m["run"]["ppo"]["horizon"].as_integer(), Some(256));
    assert_eq!(m["scenario"]["road"]["lane_width"].as_float(), Some(3.75));
}
