use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use micropatch::archzoo::{ArchKind, Model, ModelSpec};

fn micropatch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_micropatch"))
        .args(["--config", "run.cfg"])
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), config).unwrap();
    dir
}

const TINY: &str = "\
synthetic.classes = 2
synthetic.per_class = 12
archs = CNN
flag_limits = 20
seeds = 1, 2
augment = false
epochs = 1
batch_size = 8
timing_warmup = 1
timing_runs = 3
output_dir = out
";

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join("out").join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_then_analyse_end_to_end() {
    let dir = setup(TINY);
    let p = dir.path();
    ok(&micropatch(p, &["train"]));
    for seed in [1, 2] {
        assert!(p.join(format!("out/models/CNN_fl20_s{seed}.ckpt")).exists());
    }
    ok(&micropatch(p, &["eval"]));
    assert_eq!(read(p, "metrics.csv").lines().count(), 3);

    ok(&micropatch(p, &["robustness"]));
    let rob = read(p, "robustness.csv");
    assert_eq!(rob.lines().next().unwrap(), "model,scheme,sigma,accuracy,macro_f1,delta_accuracy,delta_macro_f1");
    // Two models, each with a clean row plus five sigmas under two schemes.
    assert_eq!(rob.lines().count() - 1, 2 * (1 + 2 * 5));
    assert!(read(p, "robustness_bars.svg").starts_with("<svg"));
    assert!(read(p, "robustness_slopes.json").contains("macro_f1"));

    ok(&micropatch(p, &["timing"]));
    let timing = read(p, "timing.csv");
    let row: Vec<&str> = timing.lines().nth(1).unwrap().split(',').collect();
    let params = Model::<f32>::build(ModelSpec::new(ArchKind::Cnn, 2, 0)).unwrap().param_count();
    assert_eq!(row[0], "CNN");
    assert_eq!(row[4].parse::<usize>().unwrap(), params);
    assert!(row[5].parse::<usize>().unwrap() > 4 * params);

    ok(&micropatch(p, &["report"]));
    let report = read(p, "report.md");
    assert!(report.contains("robustness") || report.contains("Blur robustness"));
    for cmd in ["train", "eval", "robustness", "timing", "report"] {
        let m: serde_json::Value = serde_json::from_str(&read(p, &format!("manifests/{cmd}.json"))).unwrap();
        assert!(m["finished_unix"].as_f64().unwrap() >= m["started_unix"].as_f64().unwrap(), "{cmd}");
    }
}

#[test]
fn single_cell_scaling_has_one_row() {
    let dir = setup(TINY);
    ok(&micropatch(dir.path(), &["--seed", "3", "scaling"]));
    let csv = read(dir.path(), "scaling.csv");
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("CNN,20,3,"));
    assert!(read(dir.path(), "scaling.svg").contains("<svg"));
}

#[test]
fn prepare_is_deterministic() {
    let dir = setup(TINY);
    let hashes = |d: &Path| {
        ok(&micropatch(d, &["prepare"]));
        let m: serde_json::Value = serde_json::from_str(&read(d, "manifests/prepare.json")).unwrap();
        m["dataset_hashes"].clone()
    };
    let a = hashes(dir.path());
    assert!(a["fl20/train"].is_string());
    assert_eq!(a, hashes(dir.path()));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = setup("archs = CNN\nbogus_key = 1\n");
    let o = micropatch(dir.path(), &["show-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus_key"));
    let dir = setup("archs = NotANet\n");
    assert_eq!(micropatch(dir.path(), &["show-config"]).status.code(), Some(2));
}

#[test]
fn sampling_that_drops_every_class_exits_with_three() {
    let dir = setup("synthetic.classes = 2\nsynthetic.per_class = 3\nflag_limits = 4096\noutput_dir = out\n");
    let o = micropatch(dir.path(), &["prepare"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("4096"));
}

#[test]
fn missing_checkpoint_names_the_cell() {
    let dir = setup(TINY);
    let o = micropatch(dir.path(), &["robustness"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("CNN_fl20_s1"));
}

#[test]
fn show_config_prints_json() {
    let dir = setup(TINY);
    let o = micropatch(dir.path(), &["show-config"]);
    ok(&o);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["flag_limits"], serde_json::json!([20]));
}
