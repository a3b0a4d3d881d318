use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nsens_core::harness::{self, strip_wall_clock};

const CONFIG: &str = r#"
seed = 17
output_directory = "runs"
sample_size = 8
repetitions = 2

[dataset]
kind = "blobs"
classes = 3
per_class = 30
dim = 4
spread = 0.5

[search_space]
number_of_blocks = [1, 3]
number_of_channels_in_the_first_convolution = [2, 6]
number_of_channels_in_residual_blocks = [4, 8]
dropout_probability_in_residual_blocks = [0.05, 0.3]

[novelty_search]
iterations = 2
final_ensemble_size = 2
population_size = 4
diversity_metric = "cos-dist"
number_of_neighbours_k = 2
size_n_a_of_archive_sample = 2
size_of_tournament_for_selection = 2
mode = "surrogate"

[training]
epochs = 3
batch_size = 16
learning_rate = 0.05

[forest]
trees = 10
min_leaf = 2
"#;

fn nsens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsens"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(["--config", "exp.toml"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nsens(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(dir: &Path) -> String {
    fs::write(dir.join("exp.toml"), CONFIG).unwrap();
    ok(dir, &["sample"]);
    ok(dir, &["train-surrogate"]);
    ok(dir, &["search"]);
    ok(dir, &["evaluate"])
}

fn json(path: &Path) -> serde_json::Value {
    let mut v = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    strip_wall_clock(&mut v);
    v
}

#[test]
fn full_pipeline_writes_artifacts_and_repeats_exactly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let printed = pipeline(a.path());
    assert!(printed.starts_with("test accuracy"), "{printed}");
    pipeline(b.path());

    let runs = |d: &tempfile::TempDir| d.path().join("runs");
    for file in [harness::DISTANCES_FILE, harness::ITERATIONS_FILE] {
        let text = fs::read_to_string(runs(&a).join(file)).unwrap();
        assert!(text.starts_with("# config_hash="), "{file}");
        assert_eq!(text, fs::read_to_string(runs(&b).join(file)).unwrap(), "{file}");
    }
    for file in [harness::REPORT_FILE, harness::EVALUATION_FILE, harness::FIDELITY_FILE] {
        assert_eq!(json(&runs(&a).join(file)), json(&runs(&b).join(file)), "{file}");
    }
    let members = fs::read_dir(runs(&a).join(harness::ENSEMBLE_DIR))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "nsmp"))
        .count();
    assert_eq!(members, 2);
}

#[test]
fn seed_flag_changes_the_sample() {
    let a = tempfile::tempdir().unwrap();
    fs::write(a.path().join("exp.toml"), CONFIG).unwrap();
    ok(a.path(), &["--out", "one", "sample"]);
    ok(a.path(), &["--out", "two", "--seed", "18", "sample"]);
    let read = |d: &str| fs::read_to_string(a.path().join(d).join(harness::DISTANCES_FILE)).unwrap();
    assert_ne!(read("one"), read("two"));
}

#[test]
fn exact_mode_search_needs_no_surrogate() {
    let a = tempfile::tempdir().unwrap();
    fs::write(a.path().join("exp.toml"), CONFIG).unwrap();
    let printed = ok(a.path(), &["search", "--mode", "exact", "--metric", "prop2"]);
    assert!(printed.starts_with("exact mode, prop2"), "{printed}");
}

#[test]
fn bad_inputs_fail_cleanly() {
    let a = tempfile::tempdir().unwrap();
    fs::write(a.path().join("exp.toml"), CONFIG).unwrap();
    let missing_model = nsens(a.path(), &["search"]);
    assert!(!missing_model.status.success());

    fs::write(a.path().join("exp.toml"), CONFIG.replace("final_ensemble_size = 2", "final_ensemble_size = 9")).unwrap();
    let invalid = nsens(a.path(), &["sample"]);
    assert!(!invalid.status.success());
    assert!(!String::from_utf8_lossy(&invalid.stderr).is_empty());
}
