mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;

fn molrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molrl"))
        .args(args)
        .env("MOLRL_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = molrl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).unwrap_or_else(|e| {
        panic!(
            "stderr is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
}

impl Workspace {
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        ok(&[
            "synth",
            "--out",
            data.to_str().unwrap(),
            "--n",
            &n.to_string(),
            "--seed",
            "5",
        ]);
        Self {
            _dir: dir,
            root,
            data,
        }
    }

    /// Writes a tiny config writing under `out`, returning its path.
    fn config(&self, name: &str, out: &str, extra: &str) -> String {
        let path = self.root.join(name);
        fs::write(
            &path,
            toy_config(
                &self.data,
                &self.root.join(out),
                3,
                &format!("{TINY}\n{extra}"),
            ),
        )
        .unwrap();
        path.to_str().unwrap().to_string()
    }
}

/// Every file under `dir`, relative path and contents, sorted.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

/// Output trees differ only in the absolute output path recorded in the
/// resolved config, so those are compared with the path masked out.
fn masked(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let needle = dir.display().to_string();
    tree(dir)
        .into_iter()
        .map(|(name, bytes)| match String::from_utf8(bytes.clone()) {
            Ok(text) if name.ends_with(".toml") => {
                (name, text.replace(&needle, "<out>").into_bytes())
            }
            _ => (name, bytes),
        })
        .collect()
}

fn pipeline(cfg: &str) {
    ok(&["prepare", "--config", cfg]);
    ok(&["pretrain", "--config", cfg]);
    ok(&["finetune", "--config", cfg]);
    ok(&["sample", "--config", cfg]);
}

#[test]
fn full_pipeline_reruns_are_byte_identical() {
    let ws = Workspace::new(40);
    let a = ws.config("a.toml", "run_a", "");
    let b = ws.config("b.toml", "run_b", "");
    pipeline(&a);
    pipeline(&b);
    let (ta, tb) = (
        masked(&ws.root.join("run_a")),
        masked(&ws.root.join("run_b")),
    );
    let names: Vec<_> = ta.iter().map(|(n, _)| n.as_str()).collect();
    for want in [
        "pretrain/checkpoint.bin",
        "finetune/checkpoint.bin",
        "finetune/episodes.csv",
        "finetune/rewards.csv",
        "samples/properties.csv",
    ] {
        assert!(names.contains(&want), "missing {want} in {names:?}");
    }
    assert!(names
        .iter()
        .any(|n| n.starts_with("samples/mol_") && n.ends_with(".xyz")));
    assert_eq!(ta.len(), tb.len());
    for ((na, ba), (nb, bb)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between reruns");
    }

    let row = ok(&[
        "evaluate",
        "--config",
        &a,
        "--samples",
        ws.root.join("run_a/samples").to_str().unwrap(),
    ]);
    assert!(!row.trim().is_empty());
}

#[test]
fn one_sample_is_reproducible() {
    let ws = Workspace::new(30);
    let cfg = ws.config("c.toml", "run", "");
    let cfg = cfg.as_str();
    ok(&["prepare", "--config", cfg]);
    ok(&["pretrain", "--config", cfg]);
    let ckpt = ws.root.join("run/pretrain/checkpoint.bin");
    let draw = || {
        ok(&[
            "sample",
            "--config",
            cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--n",
            "1",
        ]);
        tree(&ws.root.join("run/samples"))
    };
    let first = draw();
    assert_eq!(first.iter().filter(|(n, _)| n.ends_with(".xyz")).count(), 1);
    assert_eq!(first, draw());
}

#[test]
fn interrupted_finetuning_resumes_exactly() {
    let ws = Workspace::new(30);
    let full = ws.config("full.toml", "full", "");
    let split = ws.config("split.toml", "split", "");
    ok(&["prepare", "--config", &full]);
    ok(&["pretrain", "--config", &full]);
    let ckpt = ws.root.join("full/pretrain/checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();
    ok(&["finetune", "--config", &full, "--checkpoint", ckpt]);
    ok(&[
        "finetune",
        "--config",
        &split,
        "--checkpoint",
        ckpt,
        "--until",
        "1",
    ]);
    let partial = fs::read_to_string(ws.root.join("split/finetune/episodes.csv")).unwrap();
    assert_eq!(partial.lines().count(), 2);
    ok(&["finetune", "--config", &split, "--resume"]);
    for f in [
        "checkpoint.bin",
        "rl_state.json",
        "episodes.csv",
        "rewards.csv",
    ] {
        let a = fs::read(ws.root.join("full/finetune").join(f)).unwrap();
        let b = fs::read(ws.root.join("split/finetune").join(f)).unwrap();
        assert!(a == b, "{f} differs after resume");
    }
}

#[test]
fn failures_are_reported_as_json() {
    let ws = Workspace::new(10);
    let cfg = ws.config("e.toml", "run", "");
    let empty = ws.root.join("empty");
    fs::create_dir(&empty).unwrap();
    let v = stderr_json(&molrl(&[
        "evaluate",
        "--config",
        &cfg,
        "--samples",
        empty.to_str().unwrap(),
    ]));
    assert!(v["error"].is_string() && v["message"].is_string());

    let v = stderr_json(&molrl(&[
        "prepare",
        "--config",
        &cfg,
        "--set",
        "model.hiddne=3",
    ]));
    assert!(v["message"].as_str().unwrap().contains("hiddne"), "{v}");

    let v = stderr_json(&molrl(&["prepare"]));
    assert_eq!(v["error"], "usage");

    let xyz = fs::read_dir(&ws.data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "xyz"))
        .unwrap();
    let text = fs::read_to_string(&xyz).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let first = lines[2].split_whitespace().next().unwrap().to_string();
    lines[2] = lines[2].replacen(&first, "Xx", 1);
    fs::write(&xyz, lines.join("\n") + "\n").unwrap();
    let v = stderr_json(&molrl(&["prepare", "--config", &cfg]));
    let name = xyz.file_name().unwrap().to_str().unwrap();
    assert!(v["message"].as_str().unwrap().contains(name), "{v}");
}

#[test]
fn ablation_plan_with_one_run_gives_one_row() {
    let ws = Workspace::new(30);
    let cfg = ws.config("abl.toml", "run", "");
    let plan = ws.root.join("plan.toml");
    fs::write(&plan, "[[runs]]\nlabel = \"full\"\n\n[runs.reward]\nbonus_enabled = true\ndiversity_enabled = true\n").unwrap();
    ok(&[
        "ablate",
        "--config",
        &cfg,
        "--plan",
        plan.to_str().unwrap(),
        "--seeds",
        "4",
    ]);
    let runs = fs::read_to_string(ws.root.join("run/ablation/runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 2, "{runs}");
    assert!(runs.lines().nth(1).unwrap().starts_with("full,4,"));
}
