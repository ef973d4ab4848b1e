use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_comptraj");

// Noise-free corpus: every motif trajectory stays inside its box.
const QUIET: &str = r#"
seed = 5
[synth]
clutter_density = 0.0
position_noise = 0.0
descriptor_noise = 0.0
[corpus]
per_class = 3
negatives = 1
[codebook]
k = 8
samples = 500
[hierarchy]
min_support = 2
"#;

fn run(work: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--work")
        .arg(work)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("COMPTRAJ_CONFIG_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(dir.path(), &["evaluate", "--mode", "nope"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_have_their_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    let o = run(dir.path(), &["--config", missing.to_str().unwrap(), "config"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(run(dir.path(), &["--set", "train.bogus=1", "config"]).status.code(), Some(3));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[codebook]\nk = 0\n").unwrap();
    assert_eq!(run(dir.path(), &["--config", bad.to_str().unwrap(), "config"]).status.code(), Some(3));
}

#[test]
fn missing_artifacts_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&dir.path().join("empty"), &["codebook"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.json"));
}

#[test]
fn printed_config_round_trips_and_env_dir_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(run(dir.path(), &["--seed", "11", "--set", "train.rounds=2", "config"]));
    let text = stdout(&o);
    let cfg = comptraj::config::Config::from_toml(&text).unwrap();
    assert_eq!((cfg.seed, cfg.train.rounds), (11, 2));

    std::fs::write(dir.path().join("comptraj.toml"), "seed = 42\n").unwrap();
    let o = Command::new(BIN)
        .args(["config"])
        .env("COMPTRAJ_CONFIG_DIR", dir.path())
        .output()
        .unwrap();
    assert!(stdout(&o).contains("seed = 42"));
}

#[test]
fn localization_on_clean_scenes_is_one_and_hashes_are_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("quiet.toml");
    std::fs::write(&cfg, QUIET).unwrap();
    let work = dir.path().join("work");
    let c = cfg.to_str().unwrap();
    for stage in ["synth", "codebook", "learn-hierarchy", "detect-elements"] {
        ok(run(&work, &["--config", c, stage]));
    }
    let o = ok(run(&work, &["--config", c, "evaluate", "--mode", "localization", "--theta", "0.5"]));
    assert_eq!(stdout(&o).trim(), "1.0");

    // A different seed changes every fingerprint downstream of the corpus.
    let o = run(&work, &["--config", c, "--seed", "6", "detect-elements"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash"));
    ok(run(&work, &["--config", c, "--seed", "6", "--force", "evaluate", "--mode", "localization", "--theta", "0.5"]));

    // Downstream-only changes leave upstream artifacts valid.
    ok(run(&work, &["--config", c, "--set", "train.rounds=1", "evaluate", "--mode", "localization", "--theta", "0.5"]));

    let o = ok(run(&work, &["--config", c, "featmap", "--video", "wave-000"]));
    let out = stdout(&o);
    let dumps: Vec<&str> = out.lines().collect();
    assert_eq!(dumps.len(), 4);
    assert!(dumps.iter().all(|p| Path::new(p).is_file()));
    assert_eq!(run(&work, &["--config", c, "featmap", "--video", "nope"]).status.code(), Some(3));
}
