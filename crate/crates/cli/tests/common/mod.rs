//! Runs the binary end to end on a tiny configuration.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn tiny_config() -> serde_json::Value {
    serde_json::json!({
        "seed": 7,
        "n_users": 8,
        "cardinalities": [3, 4],
        "item_dim": 6,
        "cond_dim": 3,
        "style_dim": 3,
        "n_prompts": 5,
        "n_records": 64,
        "n_pretrain_records": 24,
        "min_records_per_user": 2,
        "embed_dim": 2,
        "cross_layers": 1,
        "rm_width": 8,
        "rm_layers": 1,
        "rm_heads": 2,
        "rm_ffn_hidden": 8,
        "rm_out_dim": 4,
        "rm_item_tokens": 3,
        "rm_cond_bins": 4,
        "pretrain_epochs": 1,
        "rm_epochs": 1,
        "diffusion_steps": 10,
        "time_dim": 4,
        "emb_dim": 8,
        "unet_widths": [8, 8, 8],
        "unet_mid": 8,
        "sft_steps": 6,
        "branch_sft_steps": 4,
        "sft_batch_size": 4,
        "dpo_steps": 4,
        "dpo_batch_size": 4,
        "beta": 5.0,
        "n_eval_pairs": 5
    })
}

pub fn perfusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perfusion"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs a command that must succeed, with `--config base`, `--out root/out`
/// and the given `key=value` overrides.
pub fn step(base: &Path, root: &Path, out: &str, command: &[&str], sets: &[String]) -> PathBuf {
    let dir = root.join(out);
    let mut args: Vec<String> = command.iter().map(|s| s.to_string()).collect();
    args.extend([
        "--config".into(),
        base.display().to_string(),
        "--out".into(),
        dir.display().to_string(),
    ]);
    for s in sets {
        args.extend(["--set".into(), s.clone()]);
    }
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = perfusion(&argv);
    assert!(
        o.status.success(),
        "{command:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    dir
}

/// Every command once, each feeding the next, under `root`.
pub fn run_pipeline(root: &Path) {
    let base = root.join("base.json");
    fs::write(&base, serde_json::to_string_pretty(&tiny_config()).unwrap()).unwrap();
    let p = |d: &Path, f: &str| d.join(f).display().to_string();
    let data = step(&base, root, "data", &["gen-data"], &[]);
    let dd = format!("data_dir={}", data.display());
    let backbone = step(
        &base,
        root,
        "backbone",
        &["pretrain-backbone"],
        std::slice::from_ref(&dd),
    );
    let rm = step(
        &base,
        root,
        "rm",
        &["train-rm"],
        &[dd.clone(), format!("backbone_ckpt={}", p(&backbone, "backbone.ckpt"))],
    );
    step(
        &base,
        root,
        "rm_inline",
        &["train-rm", "--pretrain-backbone"],
        &[dd.clone(), "wiring=shared".into()],
    );
    let rm_ckpt = format!("rm_ckpt={}", p(&rm, "rm.ckpt"));
    step(&base, root, "eval_rm", &["eval-rm"], &[dd.clone(), rm_ckpt.clone()]);
    let sft = step(&base, root, "sft", &["train-diffusion"], std::slice::from_ref(&dd));
    let branch = step(
        &base,
        root,
        "branch",
        &["train-diffusion"],
        &[
            dd.clone(),
            "personalization=true".into(),
            format!("init_ckpt={}", p(&sft, "diffusion.ckpt")),
        ],
    );
    let pf = step(
        &base,
        root,
        "pf",
        &["train-diffusion"],
        &[
            dd.clone(),
            "mode=group_dpo".into(),
            "personalization=true".into(),
            format!("reference_ckpt={}", p(&branch, "diffusion.ckpt")),
        ],
    );
    step(
        &base,
        root,
        "pairwise",
        &["train-diffusion"],
        &[
            dd.clone(),
            "mode=pairwise_dpo".into(),
            format!("reference_ckpt={}", p(&sft, "diffusion.ckpt")),
        ],
    );
    let mut variants = Vec::new();
    for (name, dir) in [("sft", &sft), ("pf", &pf)] {
        let s = step(
            &base,
            root,
            &format!("samples_{name}"),
            &["sample"],
            &[dd.clone(), format!("diffusion_ckpt={}", p(dir, "diffusion.ckpt"))],
        );
        variants.push(format!("{name}={}", p(&s, "samples.jsonl")));
    }
    step(
        &base,
        root,
        "eval_gen",
        &["eval-gen"],
        &[
            dd.clone(),
            rm_ckpt,
            format!("eval_variants={}", serde_json::to_string(&variants).unwrap()),
        ],
    );
    step(
        &base,
        root,
        "sweep_prm",
        &["sweep", "prm-ablation", "--seeds", "2"],
        &[],
    );
    step(
        &base,
        root,
        "sweep_pf",
        &["sweep", "pf-ablation", "--seeds", "2", "--jobs", "2"],
        &[],
    );
}

/// Every file under `root`, by relative path. Manifest timings are blanked.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let mut bytes = fs::read(&path).unwrap();
            if path.file_name().is_some_and(|n| n == "manifest.json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v["duration_secs"] = serde_json::Value::Null;
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
        }
    }
    out
}
