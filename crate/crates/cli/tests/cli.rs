use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layoutmask")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
seed = 5
corpus = "train.jsonl"
steps = 4
batch_size = 4

[model]
layers = 1
hidden = 16
heads = 2
ffn_inner = 32
max_text_len = 24
image_height = 32
image_width = 32
text_vocab = 120
"#;

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gen-corpus", "--out", "train.jsonl", "--count", "8", "--seed", "3", "--balanced"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn pretrain_then_finetune_then_evaluate() {
    let dir = workspace();
    let d = dir.path();
    let o = run(d, &["pretrain", "--config", "tiny.toml", "--out-dir", "pt", "--objectives", "mlm,mim"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["final.ckpt", "loss.tsv", "vocab.json", "run.json"] {
        assert!(d.join("pt").join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(d.join("pt/loss.tsv")).unwrap();
    let rows: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4);
    // WPA disabled: its loss column reads zero.
    assert!(rows.iter().all(|r| r.split('\t').nth(3) == Some("0")));

    let o = run(
        d,
        &["finetune", "--config", "tiny.toml", "--init", "pt/final.ckpt", "--out-dir", "ft", "--task", "doc-class", "--eval-corpus", "train.jsonl"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("accuracy\t"));
    assert!(d.join("ft/predictions.jsonl").exists());

    let from_ckpt = run(d, &["evaluate", "--checkpoint", "ft/final.ckpt", "--corpus", "train.jsonl"]);
    assert_eq!(code(&from_ckpt), 0);
    let from_dump = run(d, &["evaluate", "--predictions", "ft/predictions.jsonl", "--gold", "train.jsonl", "--task", "doc-class"]);
    assert_eq!(code(&from_dump), 0);
    assert_eq!(stdout(&from_ckpt), stdout(&from_dump));
}

#[test]
fn same_seed_same_log_and_flags_override_file() {
    let dir = workspace();
    let d = dir.path();
    for out in ["a", "b"] {
        assert_eq!(code(&run(d, &["pretrain", "--config", "tiny.toml", "--out-dir", out])), 0);
    }
    let a = std::fs::read_to_string(d.join("a/loss.tsv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(d.join("b/loss.tsv")).unwrap());
    assert_eq!(code(&run(d, &["pretrain", "--config", "tiny.toml", "--out-dir", "c", "--seed", "6", "--steps", "2"])), 0);
    let c = std::fs::read_to_string(d.join("c/loss.tsv")).unwrap();
    assert_eq!(c.lines().filter(|l| !l.starts_with('#')).count(), 2);
    assert_ne!(a.lines().nth(1), c.lines().nth(1));
}

#[test]
fn inspect_plan_is_deterministic_json() {
    let dir = workspace();
    let args = ["inspect-plan", "--config", "tiny.toml", "--index", "1"];
    let a = run(dir.path(), &args);
    assert_eq!(code(&a), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert!(v["masked_patches"].is_array() && v["wpa_labels"].is_object());
    assert_eq!(stdout(&a), stdout(&run(dir.path(), &args)));
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = workspace();
    let d = dir.path();
    // Config: no seed, bad flag, bad preset, unknown model field.
    assert_eq!(code(&run(d, &["pretrain", "--corpus", "train.jsonl", "--out-dir", "x"])), 1);
    assert_eq!(code(&run(d, &["pretrain", "--nope"])), 1);
    assert_eq!(code(&run(d, &["pretrain", "--config", "tiny.toml", "--out-dir", "x", "--preset", "huge"])), 1);
    std::fs::write(d.join("bad.toml"), "seed = 1\n[model]\nlayerz = 2\n").unwrap();
    assert_eq!(code(&run(d, &["pretrain", "--config", "bad.toml", "--corpus", "train.jsonl", "--out-dir", "x"])), 1);
    assert_eq!(code(&run(d, &["pretrain", "--config", "tiny.toml", "--out-dir", "x", "--warmup", "1.5"])), 1);
    // Data: missing corpus, corrupt record, index out of range.
    assert_eq!(code(&run(d, &["pretrain", "--config", "tiny.toml", "--out-dir", "x", "--corpus", "missing.jsonl"])), 2);
    std::fs::write(d.join("broken.jsonl"), "{not json\n").unwrap();
    assert_eq!(code(&run(d, &["inspect-plan", "--config", "tiny.toml", "--corpus", "broken.jsonl"])), 2);
    assert_eq!(code(&run(d, &["inspect-plan", "--config", "tiny.toml", "--index", "99"])), 2);
    // Numeric: a tolerance no check can meet.
    assert_eq!(code(&run(d, &["gradcheck", "--tolerance", "1e-30"])), 3);
    // Help and version are not errors.
    assert_eq!(code(&run(d, &["--help"])), 0);
    assert_eq!(code(&run(d, &["--version"])), 0);
}

#[test]
fn gradcheck_passes_at_default_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("attention"));
}
