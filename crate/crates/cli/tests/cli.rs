use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "\
fusion = aff
base_channels = 4
epochs = 2
batch_size = 8
lr = 0.05
image_size = 8
train_count = 40
val_count = 20
";

fn aff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aff")).args(args).output().expect("run aff")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.conf");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.to_str().unwrap().to_string()
}

fn train(dir: &Path, cfg: &str, name: &str, extra: &[&str]) -> (Output, std::path::PathBuf) {
    let out = dir.join(name);
    let mut args = vec!["train", "--config", cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (aff(&args), out)
}

#[test]
fn training_is_deterministic_and_eval_matches_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "augment = true\n");
    let (a, out_a) = train(dir.path(), &cfg, "a", &[]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let (b, out_b) = train(dir.path(), &cfg, "b", &[]);
    assert_eq!(code(&b), 0);
    let log_a = fs::read_to_string(out_a.join("metrics.jsonl")).unwrap();
    assert_eq!(log_a, fs::read_to_string(out_b.join("metrics.jsonl")).unwrap());

    let records: Vec<Value> = log_a.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    assert!(records[0]["train_loss"].is_null());
    assert!(records.iter().all(|r| r.get("wall_time").is_none()));
    let printed: Value = serde_json::from_str(stdout(&a).lines().last().unwrap()).unwrap();
    assert!(printed["wall_time"].is_number());

    // Eval picks up run.cfg from beside the checkpoint.
    let ckpt = out_a.join("checkpoint.fsds");
    let e = aff(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&e), 0, "{}", stderr(&e));
    let metric: Value = serde_json::from_str(stdout(&e).trim()).unwrap();
    assert_eq!(metric["val_accuracy"], records[2]["val_accuracy"]);

    let (c, out_c) = train(dir.path(), &cfg, "c", &["--seed", "2"]);
    assert_eq!(code(&c), 0);
    assert_ne!(log_a, fs::read_to_string(out_c.join("metrics.jsonl")).unwrap());
}

#[test]
fn config_errors_exit_two_with_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = aff(&["train", "--set", "batch_size=1", "--dry-run"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    let o = aff(&["train", "--set", "mixup=0.2", "--dry-run"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mixup"));

    let cfg = write_config(dir.path(), "fusion = sum\n");
    let o = aff(&["train", "--config", &cfg, "--dry-run"]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("line 9") && err.contains("fusion"), "{err}");

    let o = aff(&["train", "--set", "scenario=long_skip", "--dry-run"]);
    assert_eq!(code(&o), 2, "long skip needs the segmentation task");

    let o = aff(&["train", "--bogus"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn dry_run_prints_the_inventory_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = aff(&["train", "--set", "fusion=iaff", "--dry-run", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("stage3.block1"), "{text}");
    assert!(text.contains("total parameters"));
    assert!(!out.exists());
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "lr = 1e300\n");
    let (o, _) = train(dir.path(), &cfg, "nan", &[]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("divergence"), "{}", stderr(&o));
}

#[test]
fn inspect_reports_attention_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epochs = 0\nattention_init = zero\n");
    let (o, run) = train(dir.path(), &cfg, "z", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let maps = dir.path().join("maps");
    let o = aff(&[
        "inspect",
        "--checkpoint",
        run.join("checkpoint.fsds").to_str().unwrap(),
        "--count",
        "3",
        "--out",
        maps.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&fs::read_to_string(maps.join("weights.json")).unwrap()).unwrap();
    let sites = summary["sites"].as_array().unwrap();
    assert_eq!(sites.len(), 3);
    for s in sites {
        assert_eq!(s["mean"], 0.5);
        assert_eq!(s["min"], 0.5);
        assert_eq!(s["max"], 0.5);
    }
    assert!(maps.join("weights.fsds").exists());

    let cfg = write_config(dir.path(), "epochs = 0\nfusion = add\n");
    let (o, run) = train(dir.path(), &cfg, "plain", &[]);
    assert_eq!(code(&o), 0);
    let o = aff(&["inspect", "--checkpoint", run.join("checkpoint.fsds").to_str().unwrap(), "--out", maps.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("add"));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let o = aff(&["gradcheck", "fusion"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).lines().filter(|l| l.starts_with("fusion")).count() >= 11);

    let o = aff(&["gradcheck", "ops", "--inject-fault", "sigmoid"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sigmoid"), "{}", stderr(&o));

    assert_eq!(code(&aff(&["gradcheck", "ops", "--precision", "f32"])), 2);
    assert_eq!(code(&aff(&["gradcheck", "nothing"])), 2);
}

#[test]
fn report_compares_against_the_add_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let o = aff(&["report", "--set", "fusion=iaff", "--set", "b=2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("attention overhead"));
    let r: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(r["configured"]["fusion"], "iaff");
    assert_eq!(r["baseline"]["fusion"], "add");
    assert!(r["configured"]["attention_params"].as_u64().unwrap() > 0);
    assert_eq!(r["block_overhead"].as_array().unwrap().len(), 4);
}
