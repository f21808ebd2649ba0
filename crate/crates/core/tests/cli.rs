mod common;

use std::path::Path;
use std::process::{Command, Output};

use scopeformer::config::{RunConfig, SynthSpec};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scopeformer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn scopeformer")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no `{key}=` in:\n{text}"))
}

fn write_toy_config(dir: &Path, steps: u64) -> std::path::PathBuf {
    let mut cfg: RunConfig = common::run_config(common::toy_model(2, None, 4, 16, 0), &dir.join("run"), steps, 1e-2, 4);
    cfg.data.synth = Some(SynthSpec {
        count: 8,
        size: 16,
        seed: 0,
        out_dir: dir.join("train"),
    });
    cfg.data.val_synth = Some(SynthSpec {
        count: 4,
        size: 16,
        seed: 1,
        out_dir: dir.join("val"),
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json_pretty()).unwrap();
    path
}

#[test]
fn exit_codes() {
    let ok = bin(&["gradcheck", "--op", "softmax"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("softmax"));

    let unknown = bin(&["gradcheck", "--op", "no_such_op"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(stderr(&unknown).contains("no_such_op"));

    assert_eq!(bin(&["gradcheck", "--bogus"]).status.code(), Some(1));
    assert_eq!(bin(&[]).status.code(), Some(1));

    let help = bin(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("gradcheck"));

    let missing = bin(&["train", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("/nonexistent/cfg.json"));
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"model": {"image_size": 32, "surprise": 1}}"#).unwrap();
    let o = bin(&["train", "--config", path.to_str().unwrap(), "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("surprise"), "{}", stderr(&o));
}

#[test]
fn synth_twice_gives_same_digest() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = bin(&["synth", "--out", out.to_str().unwrap(), "--count", "6", "--size", "16", "--seed", "4"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        field(&stdout(&o), "digest").to_string()
    };
    assert_eq!(run("a"), run("b"));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("a/manifest.jsonl")).unwrap().lines().count(),
        6
    );
}

#[test]
fn dry_run_prints_paper_scale_plan() {
    let cfg = common::workspace_root().join("configs/paper_scale.json");
    let o = bin(&["train", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("fused: 7x7x2048"), "{text}");
    assert!(text.contains("tokens: 50x1456"), "{text}");
    assert_eq!(field(&text, "digest").len(), 16);
}

#[test]
fn train_inspect_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_config(dir.path(), 2);
    let cfg_s = cfg.to_str().unwrap();

    let train = bin(&["train", "--config", cfg_s]);
    assert_eq!(train.status.code(), Some(0), "{}", stderr(&train));
    let text = stdout(&train);
    assert!(field(&text, "step").starts_with("2 train_loss="), "{text}");
    let ckpt = field(&text, "checkpoint").to_string();
    let val_loss = field(&text, "loss").to_string();

    let inspect = bin(&["inspect", "--ckpt", &ckpt]);
    assert_eq!(inspect.status.code(), Some(0));
    let listing = stdout(&inspect);
    assert!(listing.contains("meta/step [1]"));
    assert!(listing.contains("param/head.w [16, 6]"));
    assert!(listing.contains("opt/t [1]"));

    let val_manifest = dir.path().join("val/manifest.jsonl");
    let eval = bin(&["eval", "--config", cfg_s, "--ckpt", &ckpt, "--data", val_manifest.to_str().unwrap()]);
    assert_eq!(eval.status.code(), Some(0), "{}", stderr(&eval));
    assert_eq!(field(&stdout(&eval), "loss"), val_loss);

    // A different model config refuses the checkpoint unless forced.
    let mut other = RunConfig::load(&cfg).unwrap();
    other.model.seed = 99;
    let other_path = dir.path().join("other.json");
    std::fs::write(&other_path, other.to_json_pretty()).unwrap();
    let other_s = other_path.to_str().unwrap();
    let refused = bin(&["eval", "--config", other_s, "--ckpt", &ckpt, "--data", val_manifest.to_str().unwrap()]);
    assert_eq!(refused.status.code(), Some(3));
    assert!(stderr(&refused).contains("digest"), "{}", stderr(&refused));
    let forced = bin(&["eval", "--config", other_s, "--ckpt", &ckpt, "--data", val_manifest.to_str().unwrap(), "--force"]);
    assert_eq!(forced.status.code(), Some(0), "{}", stderr(&forced));
}

#[test]
fn bad_thread_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_scopeformer"))
        .args(["gradcheck", "--op", "add"])
        .env("SCOPEFORMER_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_validate() {
    for name in ["paper_scale.json", "toy.json"] {
        let path = common::workspace_root().join("configs").join(name);
        let cfg = RunConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.validate().unwrap();
        let canon = cfg.clone().canonical().unwrap();
        let again = RunConfig::from_json(&canon.to_json_pretty()).unwrap().canonical().unwrap();
        assert_eq!(canon, again, "{name}");
        assert_eq!(canon.model.digest(), again.model.digest());
    }
}
