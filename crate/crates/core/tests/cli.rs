use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use slfc::eval::{segmentation_accuracy, RobustnessCurve};
use slfc::model::ModelParams;
use slfc::simenv::{generate_dataset, read_jsonl, HybridTaskSpec};

const SMALL: &str = r#"{
  "n_demos": 8,
  "model": {"num_skills": 3, "encoder_hidden": [8], "decoder_hidden": [8], "switcher_hidden": [8]},
  "train": {"epochs": 3, "batch_size": 32, "learning_rate": 0.001},
  "eval": {"episodes": 4, "noise_scales": [0.0, 0.5, 1.0],
           "frechet_levels": [{"kind": "obs", "scale": 0.0}, {"kind": "process", "scale": 0.1}]},
  "sweep": {"seeds": [0]}
}"#;

fn slfc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slfc"))
        .args(args)
        .env_remove("SLFC_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = slfc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.json"), SMALL).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("run.json")
    }

    fn gen(&self, name: &str) -> PathBuf {
        let out = self.path(name);
        ok(&["gen", "--config", s(&self.config()), "--out", s(&out)]);
        out
    }

    fn train(&self, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(name);
        let config = self.config();
        let mut args = vec!["train", "--config", s(&config), "--data", s(data), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_writes_one_line_per_demo() {
    let ws = Workspace::new();
    let out = ws.path("one.jsonl");
    let stdout = ok(&["gen", "--n-demos", "1", "--out", s(&out)]);
    assert!(stdout.starts_with("demos 1 "), "{stdout}");
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 1);
}

#[test]
fn gen_is_deterministic_and_round_trips() {
    let ws = Workspace::new();
    let a = ws.gen("a.jsonl");
    let b = ws.gen("b.jsonl");
    assert_eq!(read(&a), read(&b));
    let want = generate_dataset(&HybridTaskSpec::smoke(), 8, 0).unwrap();
    assert_eq!(read_jsonl(&a).unwrap(), want);
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let ws = Workspace::new();
    let run = |env: Option<&str>, flag: Option<&str>, name: &str| {
        let out = ws.path(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_slfc"));
        cmd.args(["gen", "--config", s(&ws.config()), "--out", s(&out)]);
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        cmd.env_remove("SLFC_SEED");
        if let Some(e) = env {
            cmd.env("SLFC_SEED", e);
        }
        assert!(cmd.output().unwrap().status.success());
        read_jsonl(&out).unwrap()
    };
    let spec = HybridTaskSpec::smoke();
    assert_eq!(run(Some("5"), None, "e.jsonl"), generate_dataset(&spec, 8, 5).unwrap());
    assert_eq!(run(Some("5"), Some("6"), "f.jsonl"), generate_dataset(&spec, 8, 6).unwrap());
    assert_eq!(run(None, None, "d.jsonl"), generate_dataset(&spec, 8, 0).unwrap());
}

#[test]
fn training_is_deterministic() {
    let ws = Workspace::new();
    let data = ws.gen("d.jsonl");
    let a = ws.train(&data, "a.json", &[]);
    let b = ws.train(&data, "b.json", &[]);
    assert_eq!(read(&a), read(&b));
    let log = std::fs::read_to_string(ws.path("a.json.trainlog.csv")).unwrap();
    assert_eq!(log, std::fs::read_to_string(ws.path("b.json.trainlog.csv")).unwrap());
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("epoch,recon_obs,recon_act,kl_z,kl_switch,total\n"));
}

#[test]
fn zero_epochs_saves_initial_params() {
    let ws = Workspace::new();
    let data = ws.gen("d.jsonl");
    let ck = ws.train(&data, "m.json", &["--epochs", "0"]);
    let p = ModelParams::load(&ck).unwrap();
    let cfg = p.config.clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    assert_eq!(p, ModelParams::init(&cfg, &mut rng).unwrap());
}

#[test]
fn variant_flag_selects_ablation() {
    let ws = Workspace::new();
    let data = ws.gen("d.jsonl");
    for (v, fb, sw) in [("mdn", false, false), ("mdn_fb", true, false), ("mdn_fb_sw", true, true)] {
        let ck = ws.train(&data, &format!("{v}.json"), &["--variant", v, "--epochs", "1"]);
        let p = ModelParams::load(&ck).unwrap();
        assert_eq!((p.config.feedback_structure, p.config.switch_kl), (fb, sw));
        assert_eq!(p.free_mean_head.is_some(), !fb);
    }
    assert_eq!(slfc(&["train", "--data", s(&data), "--out", "x", "--variant", "nope"]).status.code(), Some(2));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ws = Workspace::new();
    let data = ws.gen("d.jsonl");
    let full = ws.train(&data, "full.json", &["--epochs", "4"]);
    let half = ws.train(&data, "half.json", &["--epochs", "2"]);
    let rest = ws.train(&data, "rest.json", &["--epochs", "4", "--resume", s(&half)]);
    assert_eq!(read(&full), read(&rest));
    let log = std::fs::read_to_string(ws.path("rest.json.trainlog.csv")).unwrap();
    assert!(log.lines().nth(1).unwrap().starts_with("3,"));
}

#[test]
fn baselines_train_and_evaluate() {
    let ws = Workspace::new();
    let data = ws.gen("d.jsonl");
    for policy in ["bc", "mdn"] {
        let ck = ws.train(&data, &format!("{policy}.json"), &["--policy", policy, "--epochs", "1"]);
        let dir = ws.path(&format!("{policy}-eval"));
        ok(&["eval", "--config", s(&ws.config()), "--ckpt", s(&ck), "--data", s(&data), "--out-dir", s(&dir)]);
        assert!(dir.join("curve.csv").exists() && dir.join("summary.csv").exists());
        let out = slfc(&["segment", "--ckpt", s(&ck), "--data", s(&data), "--out", s(&ws.path("x.jsonl"))]);
        assert_eq!(out.status.code(), Some(2));
    }
}

fn parse_csv(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn eval_outputs_are_deterministic_and_consistent() {
    let ws = Workspace::new();
    let data = ws.gen("d.jsonl");
    let ck = ws.train(&data, "m.json", &[]);
    let run = |name: &str| {
        let dir = ws.path(name);
        ok(&["eval", "--config", s(&ws.config()), "--ckpt", s(&ck), "--data", s(&data), "--out-dir", s(&dir)]);
        dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["curve.csv", "skills.csv", "stability.csv", "frechet.csv", "summary.csv"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let curve = parse_csv(&std::fs::read_to_string(a.join("curve.csv")).unwrap());
    let scales: Vec<f64> = curve.iter().map(|r| r[0].parse().unwrap()).collect();
    let rates: Vec<f64> = curve.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(scales, vec![0.0, 0.5, 1.0]);
    let summary = parse_csv(&std::fs::read_to_string(a.join("summary.csv")).unwrap());
    let auc: f64 = summary.iter().find(|r| r[0] == "auc").unwrap()[1].parse().unwrap();
    let again = RobustnessCurve::new(scales, rates).unwrap().auc;
    assert!((auc - again).abs() < 1e-8, "{auc} vs {again}");
    let frechet = parse_csv(&std::fs::read_to_string(a.join("frechet.csv")).unwrap());
    assert_eq!(frechet.len(), 2);
    assert_eq!(frechet[1][1], "process");
}

#[test]
fn default_eval_scales() {
    assert_eq!(slfc::eval::DEFAULT_NOISE_SCALES, [0.0, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 3.0]);
    assert_eq!(slfc::cli::RunConfig::default().eval.noise_scales, slfc::eval::DEFAULT_NOISE_SCALES.to_vec());
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let ws = Workspace::new();
    let data = ws.gen("d.jsonl");
    let ck = ws.train(&data, "m.json", &["--epochs", "0"]);
    let dir = ws.path("e");
    let out = slfc(&["eval", "--ckpt", s(&ck), "--data", s(&data), "--out-dir", s(&dir), "--episodes", "0"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(ws.path("bad.json"), r#"{"train": {"epoch": 1}}"#).unwrap();
    let out = slfc(&["gen", "--config", s(&ws.path("bad.json")), "--out", s(&ws.path("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));

    let out = slfc(&["train", "--data", s(&ws.path("missing.jsonl")), "--out", s(&ws.path("m2.json"))]);
    assert_eq!(out.status.code(), Some(4));

    // The writing task has 8-dimensional observations.
    let out = slfc(&["eval", "--ckpt", s(&ck), "--data", s(&data), "--out-dir", s(&dir)]);
    assert!(out.status.success());
    std::fs::write(ws.path("w.json"), r#"{"task": "writing"}"#).unwrap();
    let out = slfc(&["eval", "--config", s(&ws.path("w.json")), "--ckpt", s(&ck), "--data", s(&data), "--out-dir", s(&dir)]);
    assert_eq!(out.status.code(), Some(2));

    let out = slfc(&["gen", "--out", s(&ws.path("nodir/x/y.jsonl"))]);
    assert_eq!(out.status.code(), Some(4));
    let out = slfc(&["--threads", "0", "gen", "--out", s(&ws.path("t.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_blowup_exits_with_three() {
    let ws = Workspace::new();
    let data = ws.gen("d.jsonl");
    let out = slfc(&[
        "train",
        "--config",
        s(&ws.config()),
        "--data",
        s(&data),
        "--out",
        s(&ws.path("m.json")),
        "--learning-rate",
        "1e300",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn segment_reports_matched_accuracy() {
    let ws = Workspace::new();
    let data = ws.gen("d.jsonl");
    let ck = ws.train(&data, "m.json", &[]);
    let out = ws.path("seg.jsonl");
    let stdout = ok(&["segment", "--ckpt", s(&ck), "--data", s(&data), "--out", s(&out)]);
    let printed: f64 = stdout.trim().strip_prefix("segmentation_accuracy ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&printed));

    let demos = read_jsonl(&data).unwrap();
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), demos.len());
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (l, d) in lines.iter().zip(&demos) {
        assert_eq!(l["task_id"], d.task_id);
        let skills: Vec<usize> = serde_json::from_value(l["skills"].clone()).unwrap();
        assert_eq!(skills.len(), d.len());
        pred.extend(skills);
        truth.extend(d.skills.clone().unwrap());
    }
    let offline = segmentation_accuracy(&pred, &truth, 3, 3).unwrap();
    assert!((offline - printed).abs() < 1e-8);
}

#[test]
fn single_skill_model_labels_everything_one() {
    let ws = Workspace::new();
    let data = ws.gen("d.jsonl");
    std::fs::write(
        ws.path("one.json"),
        r#"{"n_demos": 8, "model": {"num_skills": 1, "encoder_hidden": [4], "decoder_hidden": [4], "switcher_hidden": [4]},
            "train": {"epochs": 1}}"#,
    )
    .unwrap();
    let ck = ws.path("c1.json");
    ok(&["train", "--config", s(&ws.path("one.json")), "--data", s(&data), "--out", s(&ck)]);
    let out = ws.path("seg.jsonl");
    ok(&["segment", "--ckpt", s(&ck), "--data", s(&data), "--out", s(&out)]);
    for l in std::fs::read_to_string(&out).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["skills"].as_array().unwrap().iter().all(|s| s == 1));
    }
}

#[test]
fn sweep_writes_tables() {
    let ws = Workspace::new();
    let data = ws.gen("d.jsonl");
    let dir = ws.path("sweep");
    let stdout = ok(&["sweep", "--config", s(&ws.config()), "--data", s(&data), "--out-dir", s(&dir), "--epochs", "1"]);
    assert_eq!(stdout.lines().count(), 3);
    let rows = parse_csv(&std::fs::read_to_string(dir.join("sweep.csv")).unwrap());
    assert_eq!(rows.len(), 3);
    let frechet = parse_csv(&std::fs::read_to_string(dir.join("frechet.csv")).unwrap());
    assert_eq!(frechet.len(), 6);
}
