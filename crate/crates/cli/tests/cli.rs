use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use posenorm_cli::{run, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};
use serde_json::Value;

const TINY: &str = r#"
seed = 0
dims = [32, 16]

[data.synth]
n_identities = 4
n_train_identities = 2
images_per_identity = 4
n_cameras = 2

[canonical]
k = 2

[arch]
base_channels = 2
n_res_blocks = 1
discriminator_layers = 2

[gan]
batch_size = 2
steps = 3

[backbone]
base_channels = 2
feature_dim = 8

[reid]
batch_size = 4
epochs = 1

[eval]
fusion_poses = 2
"#;

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, out: &Path, args: &[&str]) -> i32 {
        let mut argv: Vec<String> = vec!["posenorm".into(), "-q".into()];
        argv.extend(["--config".into(), self.config.display().to_string()]);
        argv.extend(["--out".into(), out.display().to_string()]);
        argv.extend(args.iter().map(|s| s.to_string()));
        run(argv)
    }
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stage_statuses(out: &Path) -> Vec<(String, String)> {
    read(&out.join("manifest.json"))["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| {
            (
                e["stage"].as_str().unwrap().to_string(),
                e["status"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(["posenorm", "--no-such-flag", "synth-data"]), EXIT_VALIDATION);
    assert_eq!(run(["posenorm", "frobnicate"]), EXIT_VALIDATION);
    assert_eq!(run(["posenorm", "--help"]), EXIT_OK);
    assert_eq!(
        run(["posenorm", "eval", "--poses", "2", "--no-backbone-b"]),
        EXIT_VALIDATION
    );
    // no run directory anywhere
    assert_eq!(run(["posenorm", "synth-data"]), EXIT_VALIDATION);
}

#[test]
fn invalid_config_is_a_validation_error() {
    let f = Fixture::new();
    let bad = f.out("bad.toml");
    fs::write(&bad, "seed = 0\nunknown_key = 3\n").unwrap();
    let out = f.out("run");
    let code = run([
        "posenorm",
        "-q",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "synth-data",
    ]);
    assert_eq!(code, EXIT_VALIDATION);
    fs::write(&bad, "seed = 0\n[gan]\nseed = 4\n").unwrap();
    let code = run([
        "posenorm",
        "-q",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "synth-data",
    ]);
    assert_eq!(code, EXIT_VALIDATION);
}

#[test]
fn seeded_synth_data_is_byte_identical() {
    let f = Fixture::new();
    let (a, b) = (f.out("a"), f.out("b"));
    assert_eq!(f.run(&a, &["--seed", "7", "synth-data"]), EXIT_OK);
    assert_eq!(f.run(&b, &["--seed", "7", "synth-data"]), EXIT_OK);
    assert_eq!(files(&a.join("data")), files(&b.join("data")));
    // same config in a different directory hashes the same
    let (la, lb) = (read(&a.join("config.lock.json")), read(&b.join("config.lock.json")));
    assert_eq!(la["config_hash"], lb["config_hash"]);
    assert_eq!(read(&a.join("config.lock.json"))["config"]["seed"], 7);
}

#[test]
fn missing_checkpoint_names_the_file() {
    let f = Fixture::new();
    let out = f.out("run");
    assert_eq!(f.run(&out, &["synth-data"]), EXIT_OK);
    assert_eq!(f.run(&out, &["cluster-poses"]), EXIT_OK);
    let output = Command::new(env!("CARGO_BIN_EXE_posenorm"))
        .args([
            "-q",
            "--config",
            f.config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "gen-normalized",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(EXIT_VALIDATION));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("gan.ckpt"), "{stderr}");
}

#[test]
fn held_lock_refuses_a_second_writer() {
    let f = Fixture::new();
    let out = f.out("run");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("run.lock"), "held").unwrap();
    assert_eq!(f.run(&out, &["synth-data"]), EXIT_VALIDATION);
    fs::remove_file(out.join("run.lock")).unwrap();
    assert_eq!(f.run(&out, &["synth-data"]), EXIT_OK);
    assert!(!out.join("run.lock").exists());
}

#[test]
fn changed_config_needs_force() {
    let f = Fixture::new();
    let out = f.out("run");
    assert_eq!(f.run(&out, &["synth-data"]), EXIT_OK);
    assert_eq!(f.run(&out, &["--seed", "3", "synth-data"]), EXIT_VALIDATION);
    assert_eq!(f.run(&out, &["--seed", "3", "--force", "synth-data"]), EXIT_OK);
    assert_eq!(read(&out.join("config.lock.json"))["config"]["seed"], 3);
}

#[test]
fn full_run_skips_completed_stages_and_validates_against_schemas() {
    let f = Fixture::new();
    let out = f.out("run");
    assert_eq!(f.run(&out, &["run-all"]), EXIT_OK);
    let first = stage_statuses(&out);
    let names: Vec<&str> = first.iter().map(|(s, _)| s.as_str()).collect();
    assert_eq!(
        names,
        [
            "synth-data",
            "cluster-poses",
            "train-gan",
            "gen-normalized",
            "train-reid",
            "eval",
            "report"
        ]
    );
    assert!(first.iter().all(|(_, st)| st == "completed"));
    for p in [
        "report.md",
        "checkpoints/gan.ckpt",
        "checkpoints/backbone_a.ckpt",
        "checkpoints/backbone_b.ckpt",
        "losses/gan.csv",
    ] {
        assert!(out.join(p).exists(), "{p}");
    }
    let eval = fs::read(out.join("metrics/eval.json")).unwrap();

    // second run: everything is up to date
    assert_eq!(f.run(&out, &["run-all"]), EXIT_OK);
    let second = &stage_statuses(&out)[first.len()..];
    assert!(second.iter().all(|(_, st)| st == "skipped"), "{second:?}");
    assert_eq!(fs::read(out.join("metrics/eval.json")).unwrap(), eval);

    // forcing reruns and reproduces the same metrics
    assert_eq!(f.run(&out, &["--force", "eval"]), EXIT_OK);
    assert_eq!(stage_statuses(&out).last().unwrap().1, "completed");
    assert_eq!(fs::read(out.join("metrics/eval.json")).unwrap(), eval);

    // a different fusion mode is a different evaluation, not a skip
    assert_eq!(f.run(&out, &["eval", "--no-backbone-b"]), EXIT_OK);
    assert_eq!(stage_statuses(&out).last().unwrap().1, "completed");
    let last = read(&out.join("manifest.json"))["entries"]
        .as_array()
        .unwrap()
        .last()
        .unwrap()
        .clone();
    assert_eq!(last["metrics"]["mode"], "backbone_a");

    let schemas = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas");
    for (schema, doc) in [
        ("config_lock", "config.lock.json"),
        ("manifest", "manifest.json"),
        ("split", "data/split.json"),
        ("identities", "data/identities.json"),
        ("canonical", "canonical_poses/canonical.json"),
        ("reid", "metrics/reid.json"),
        ("eval", "metrics/eval.json"),
        ("ablations", "metrics/ablations.json"),
    ] {
        let s = read(&schemas.join(format!("{schema}.schema.json")));
        let validator = jsonschema::validator_for(&s).unwrap();
        let instance = read(&out.join(doc));
        let errors: Vec<String> = validator.iter_errors(&instance).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{doc}: {errors:?}");
    }
}

#[test]
fn transfer_eval_reads_models_without_training() {
    let f = Fixture::new();
    let src = f.out("src");
    assert_eq!(f.run(&src, &["run-all"]), EXIT_OK);
    let before = files(&src.join("checkpoints"));
    let target = f.out("target");
    assert_eq!(f.run(&target, &["--seed", "1", "synth-data"]), EXIT_OK);
    let models = src.to_str().unwrap();
    assert_eq!(
        f.run(&target, &["--seed", "1", "eval", "--models-from", models]),
        EXIT_OK
    );
    assert_eq!(files(&src.join("checkpoints")), before);
    assert!(!target.join("checkpoints").exists());
    assert!(target.join("metrics/eval.json").exists());
    // a directory without models is a validation error, not a crash
    let empty = f.out("empty");
    fs::create_dir_all(&empty).unwrap();
    let code = f.run(
        &target,
        &["--seed", "1", "eval", "--models-from", empty.to_str().unwrap()],
    );
    assert_eq!(code, EXIT_VALIDATION);
    assert_ne!(code, EXIT_RUNTIME);
}
