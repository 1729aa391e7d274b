mod common;

use std::fs;

use common::{perfusion, run_pipeline, snapshot, step, tiny_config};

fn write_base(dir: &std::path::Path) -> std::path::PathBuf {
    let base = dir.join("base.json");
    fs::write(&base, serde_json::to_string(&tiny_config()).unwrap()).unwrap();
    base
}

#[test]
fn every_command_produces_its_artifacts() {
    let root = tempfile::tempdir().unwrap();
    run_pipeline(root.path());
    let snap = snapshot(root.path());
    for f in [
        "data/train.jsonl",
        "data/valid.jsonl",
        "data/test.jsonl",
        "data/pretrain.jsonl",
        "data/world.json",
        "backbone/backbone.ckpt",
        "rm/rm.ckpt",
        "rm_inline/backbone.ckpt",
        "rm_inline/rm.ckpt",
        "eval_rm/eval_rm.csv",
        "pf/diffusion.ckpt",
        "pf/train_loss.csv",
        "samples_pf/samples.jsonl",
        "eval_gen/eval_gen.csv",
        "eval_gen/win_rates.csv",
        "sweep_prm/summary.csv",
        "sweep_prm/seed-8/results.csv",
        "sweep_pf/summary.csv",
    ] {
        assert!(snap.contains_key(std::path::Path::new(f)), "missing {f}");
    }
    for d in ["data", "rm", "eval_rm", "pf", "eval_gen", "sweep_pf", "sweep_pf/seed-7"] {
        let dir = std::path::Path::new(d);
        assert!(
            snap.contains_key(&dir.join("config.json")) && snap.contains_key(&dir.join("manifest.json")),
            "{d}"
        );
    }

    let eval = String::from_utf8(snap[std::path::Path::new("eval_rm/eval_rm.csv")].clone()).unwrap();
    let lines: Vec<&str> = eval.lines().collect();
    assert_eq!(lines[0], "run_id,split,variant,map,gauc,n_groups,n_skipped");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.contains(",duplicated,")));

    let prm = String::from_utf8(snap[std::path::Path::new("sweep_prm/summary.csv")].clone()).unwrap();
    for v in ["backbone", "duplicated", "shared", "vision_only", "text_only"] {
        assert_eq!(prm.lines().filter(|l| l.split(',').nth(1) == Some(v)).count(), 2, "{v}");
    }
    let pf = String::from_utf8(snap[std::path::Path::new("sweep_pf/summary.csv")].clone()).unwrap();
    assert_eq!(pf.lines().count(), 1 + 2 * 4);

    let ckpt = fs::read(root.path().join("pf/diffusion.ckpt")).unwrap();
    let header = String::from_utf8_lossy(&ckpt[..ckpt.len().min(4096)]).to_string();
    assert!(header.contains("diffusion/branch/"));
    let plain = fs::read(root.path().join("pairwise/diffusion.ckpt")).unwrap();
    assert!(!String::from_utf8_lossy(&plain[..plain.len().min(4096)]).contains("diffusion/branch/"));
}

#[test]
fn eval_rm_appends_rows() {
    let root = tempfile::tempdir().unwrap();
    let base = write_base(root.path());
    let data = step(&base, root.path(), "data", &["gen-data"], &[]);
    let dd = format!("data_dir={}", data.display());
    let bb = step(
        &base,
        root.path(),
        "bb",
        &["pretrain-backbone"],
        std::slice::from_ref(&dd),
    );
    let set = [dd, format!("backbone_ckpt={}", bb.join("backbone.ckpt").display())];
    step(&base, root.path(), "eval", &["eval-rm"], &set);
    step(&base, root.path(), "eval", &["eval-rm"], &set);
    let text = fs::read_to_string(root.path().join("eval/eval_rm.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 3);
    assert!(text.lines().skip(1).all(|l| l.contains(",backbone,")));
}

fn exit_code(args: &[&str]) -> (Option<i32>, String) {
    let o = perfusion(args);
    (o.status.code(), String::from_utf8_lossy(&o.stderr).into_owned())
}

#[test]
fn configuration_errors_exit_with_2() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("o");
    let out = out.to_str().unwrap();
    let (code, err) = exit_code(&["gen-data", "--out", out, "--set", "positives=5"]);
    assert_eq!(code, Some(2));
    assert!(err.contains("K=5") && err.contains("N=5"), "{err}");
    assert_eq!(
        exit_code(&["gen-data", "--out", out, "--set", "no_such_key=1"]).0,
        Some(2)
    );
    assert_eq!(
        exit_code(&["gen-data", "--out", out, "--set", "wiring=sideways"]).0,
        Some(2)
    );
    let (code, err) = exit_code(&[
        "train-diffusion",
        "--out",
        out,
        "--set",
        "mode=group_dpo",
        "--set",
        "data_dir=.",
    ]);
    assert_eq!(code, Some(2));
    assert!(err.contains("reference_ckpt"), "{err}");
}

#[test]
fn missing_artifacts_exit_with_3() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("o");
    let gone = root.path().join("nowhere.ckpt");
    let (code, err) = exit_code(&[
        "sample",
        "--out",
        out.to_str().unwrap(),
        "--set",
        &format!("diffusion_ckpt={}", gone.display()),
        "--set",
        &format!("data_dir={}", root.path().display()),
    ]);
    assert_eq!(code, Some(3));
    assert!(err.contains("nowhere.ckpt"), "{err}");
    let missing_config = root.path().join("missing.json");
    assert_eq!(
        exit_code(&["gen-data", "--config", missing_config.to_str().unwrap()]).0,
        Some(3)
    );
    let (code, _) = exit_code(&[
        "eval-rm",
        "--out",
        out.to_str().unwrap(),
        "--set",
        &format!("rm_ckpt={}", gone.display()),
    ]);
    assert_eq!(code, Some(3));
}

#[test]
fn seed_flag_overrides_the_config_file() {
    let root = tempfile::tempdir().unwrap();
    let base = write_base(root.path());
    let out = root.path().join("d");
    let o = perfusion(&[
        "gen-data",
        "--config",
        base.to_str().unwrap(),
        "--seed",
        "123",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 123);
    assert_eq!(cfg["n_users"], 8);
}
