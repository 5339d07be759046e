use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use hiproto_cli::run;

fn hiproto(args: &[&str]) -> i32 {
    let mut all = vec!["hiproto"];
    all.extend_from_slice(args);
    run(all)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_SYNTH: &str = r#"{
  "seed": 3,
  "train": 4,
  "test": 2,
  "image_size": 64,
  "variants": ["clean"],
  "scene": {
    "min_objects": 1,
    "max_objects": 2,
    "sizes": [{"min": 8, "max": 24, "weight": 1.0}]
  }
}"#;

const TINY_TRAIN: &str = r#"{
  "epochs": 2,
  "batch_size": 2,
  "dim": 4,
  "stem": 4,
  "widths": [4, 4, 4, 4],
  "reg_width": 4,
  "taus": [2, 4, 4]
}"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("synth.json"), TINY_SYNTH).unwrap();
        fs::write(dir.path().join("train.json"), TINY_TRAIN).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn synth(&self) -> PathBuf {
        let out = self.path("data");
        assert_eq!(hiproto(&["synth", "--config", s(&self.path("synth.json")), "--out", s(&out)]), 0);
        out.join("clean")
    }

    fn train(&self, data: &Path, name: &str) -> PathBuf {
        let out = self.path(name);
        let code = hiproto(&["train", "--config", s(&self.path("train.json")), "--data", s(data), "--out", s(&out)]);
        assert_eq!(code, 0);
        out
    }
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(hiproto(&["--help"]), 0);
    assert_eq!(hiproto(&["--version"]), 0);
    assert_eq!(hiproto(&["train", "--help"]), 0);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(hiproto(&[]), 1);
    assert_eq!(hiproto(&["frobnicate"]), 1);
    assert_eq!(hiproto(&["synth", "--no-such-flag"]), 1);
    assert_eq!(hiproto(&["train"]), 1);
    assert_eq!(hiproto(&["train", "--data", "/nonexistent/data", "--out", "/tmp/x"]), 1);
    assert_eq!(hiproto(&["eval", "--checkpoint", "/nonexistent.json"]), 1);
    let f = Fixture::new();
    fs::write(f.path("bad.json"), r#"{"epochs": 1, "learning_rate": 3}"#).unwrap();
    assert_eq!(hiproto(&["train", "--config", s(&f.path("bad.json"))]), 1);
    fs::write(f.path("broken.json"), "{").unwrap();
    assert_eq!(hiproto(&["synth", "--config", s(&f.path("broken.json"))]), 1);
    assert_eq!(hiproto(&["synth", "--config", s(&f.path("missing.json"))]), 1);
}

#[test]
fn synth_refuses_a_used_directory_without_force() {
    let f = Fixture::new();
    f.synth();
    let (cfg, out) = (f.path("synth.json"), f.path("data"));
    let again = ["synth", "--config", s(&cfg), "--out", s(&out)];
    assert_eq!(hiproto(&again), 1);
    let mut forced = again.to_vec();
    forced.push("--force");
    assert_eq!(hiproto(&forced), 0);
}

#[test]
fn synth_is_deterministic() {
    let f = Fixture::new();
    f.synth();
    let other = f.path("other");
    assert_eq!(hiproto(&["synth", "--config", s(&f.path("synth.json")), "--out", s(&other)]), 0);
    let a = fs::read_to_string(f.path("data/digests.json")).unwrap();
    let b = fs::read_to_string(other.join("digests.json")).unwrap();
    assert_eq!(a, b);
    assert!(f.path("data/synth_config.json").is_file());
}

#[test]
fn validation_failures_exit_2() {
    let f = Fixture::new();
    let data = f.synth();
    assert_eq!(
        hiproto(&["train", "--config", s(&f.path("train.json")), "--data", s(&data), "--out", s(&f.path("r")), "--split", "val"]),
        2
    );
    fs::write(f.path("junk.json"), "{\"format\": \"nope\"}").unwrap();
    assert_eq!(hiproto(&["eval", "--checkpoint", s(&f.path("junk.json")), "--data", s(&data)]), 2);
    fs::write(data.join("annotations.jsonl"), "{\"image\": \"000000\", \"class\": 0}\n").unwrap();
    assert_eq!(hiproto(&["train", "--config", s(&f.path("train.json")), "--data", s(&data), "--out", s(&f.path("r2"))]), 2);
}

#[test]
fn train_eval_visualize_round() {
    let f = Fixture::new();
    let data = f.synth();
    let run = f.train(&data, "run");
    for name in ["model.json", "model.bin", "train_log.jsonl", "train_config.json"] {
        assert!(run.join(name).is_file(), "{name}");
    }
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let eval_out = f.path("eval");
    let ckpt = run.join("model.json");
    assert_eq!(hiproto(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&eval_out)]), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_out.join("metrics.json")).unwrap()).unwrap();
    assert!(report["map50"].as_f64().is_some());
    assert_eq!(fs::read_to_string(eval_out.join("metrics.csv")).unwrap().lines().count(), 2);

    let image = data.join("images/000004.ppm");
    let vis = f.path("vis");
    let args = ["visualize", "--checkpoint", s(&ckpt), "--image", s(&image), "--class", "1", "--out", s(&vis)];
    assert_eq!(hiproto(&args), 0);
    let mut names: Vec<String> = fs::read_dir(&vis).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(
        names,
        [
            "class1_boxes.json",
            "class1_combined.pgm",
            "class1_level1.pgm",
            "class1_level2.pgm",
            "class1_level3.pgm",
            "class1_overlay.ppm",
            "visualize_config.json"
        ]
    );
    let named = ["visualize", "--checkpoint", s(&ckpt), "--image", s(&image), "--class", "disc", "--data", s(&data), "--out", s(&vis), "--force"];
    assert_eq!(hiproto(&named), 0);
    let unknown = ["visualize", "--checkpoint", s(&ckpt), "--image", s(&image), "--class", "hexagon", "--data", s(&data), "--out", s(&vis), "--force"];
    assert_eq!(hiproto(&unknown), 2);
    let out_of_range = ["visualize", "--checkpoint", s(&ckpt), "--image", s(&image), "--class", "7", "--out", s(&vis), "--force"];
    assert_eq!(hiproto(&out_of_range), 2);
}

#[test]
fn training_is_bit_reproducible() {
    let f = Fixture::new();
    let data = f.synth();
    let a = f.train(&data, "a");
    let b = f.train(&data, "b");
    for name in ["model.json", "model.bin", "train_log.jsonl", "checkpoints/epoch_001.bin"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn resume_continues_the_schedule() {
    let f = Fixture::new();
    let data = f.synth();
    let full = f.train(&data, "full");
    let resumed = f.path("resumed");
    let first = full.join("checkpoints/epoch_001.json");
    let cfg = s(&f.path("train.json")).to_string();
    assert_eq!(hiproto(&["train", "--config", &cfg, "--data", s(&data), "--out", s(&resumed), "--resume", s(&first)]), 0);
    assert_eq!(fs::read(full.join("model.bin")).unwrap(), fs::read(resumed.join("model.bin")).unwrap());
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_hiproto");
    assert_eq!(Command::new(bin).arg("--help").status().unwrap().code(), Some(0));
    assert_eq!(Command::new(bin).arg("bogus").status().unwrap().code(), Some(1));
    let f = Fixture::new();
    fs::write(f.path("x.json"), "not a checkpoint").unwrap();
    let data = f.synth();
    let st = Command::new(bin)
        .args(["eval", "--checkpoint", s(&f.path("x.json")), "--data", s(&data)])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn fog_writes_a_degraded_image() {
    let f = Fixture::new();
    let data = f.synth();
    let out = f.path("fogged");
    let img = data.join("images/000000.ppm");
    assert_eq!(hiproto(&["fog", "--input", s(&img), "--out", s(&out), "--beta", "0.2"]), 0);
    assert!(out.join("000000_fog.ppm").is_file());
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("fog_config.json")).unwrap()).unwrap();
    assert_eq!(cfg["beta"], 0.2);
    assert_eq!(hiproto(&["fog", "--input", s(&data), "--out", s(&f.path("fogset"))]), 0);
    assert!(f.path("fogset/manifest.json").is_file());
}

#[test]
fn committed_configs_load() {
    use hiproto_cli::config::{load, EvalRun, SynthRun, TrainRun};
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let synth: SynthRun = load(Some(&root.join("toy_synth.json"))).unwrap();
    synth.dataset_spec().scene.validate(None).unwrap();
    let train: TrainRun = load(Some(&root.join("toy_train.json"))).unwrap();
    train.train_config().validate().unwrap();
    train.model_config(synth.image_size, synth.scene.shapes.len()).validate().unwrap();
    let _: EvalRun = load(Some(&root.join("toy_eval.json"))).unwrap();
}
