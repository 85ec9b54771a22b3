use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moa-tts"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn moa-tts")
}

fn ok(args: &[&str], cwd: &Path) -> Value {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with('{')).collect();
    assert_eq!(lines.len(), 1, "expected one JSON error line, got {stderr}");
    serde_json::from_str(lines[0]).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_corpus(cwd: &Path, name: &str, seed: &str) {
    ok(
        &["gen-data", "--seed", seed, "--speakers-per-group", "3", "--utts-per-speaker", "3", "--out", name],
        cwd,
    );
}

#[test]
fn gen_data_twice_gives_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let a = ok(&["gen-data", "--seed", "7", "--utts-per-speaker", "2"], tmp.path());
    let b = ok(&["gen-data", "--seed", "7", "--utts-per-speaker", "2"], tmp.path());
    assert_ne!(a["run_dir"], b["run_dir"]);
    let read = |v: &Value| std::fs::read(tmp.path().join(v["run_dir"].as_str().unwrap()).join("manifest.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(a["manifest_sha256"], b["manifest_sha256"]);
    let dir = a["run_dir"].as_str().unwrap();
    assert!(dir.starts_with("runs/") && dir.ends_with("-seed7"), "{dir}");
    let c = ok(&["gen-data", "--seed", "8", "--utts-per-speaker", "2"], tmp.path());
    assert_ne!(a["manifest_sha256"], c["manifest_sha256"]);
}

#[test]
fn count_params_reports_mixture_overhead() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("s_moa.toml");
    let out = run(&["count-params", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.starts_with("# provenance: "));
    let moa: usize = table
        .lines()
        .find(|l| l.starts_with("moa_added"))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!(moa > 0);
    let v = ok(&["count-params", "--config", cfg.to_str().unwrap(), "--json"], tmp.path());
    assert_eq!(v["moa_added"].as_u64().unwrap() as usize, moa);
    assert_eq!(
        v["total"].as_u64().unwrap(),
        v["backbone"].as_u64().unwrap() + v["moa_added"].as_u64().unwrap()
    );
    let base = ok(&["count-params", "--config", config("s.toml").to_str().unwrap(), "--json"], tmp.path());
    assert_eq!(base["moa_added"], 0);
    assert_eq!(base["backbone"], v["backbone"]);
}

#[test]
fn usage_and_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--bogus"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "usage");
    let out = run(&["frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["count-params", "--config", "missing.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "input");

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nenc_layers = 1\ndec_layers = 1\nd_model = 15\nd_filter = 8\npred_filter = 8\n").unwrap();
    let out = run(&["count-params", "--config", bad.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "config");

    small_corpus(tmp.path(), "corpus", "1");
    let out = run(&["gen-data", "--seed", "1", "--out", "corpus"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "exists");
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    small_corpus(cwd, "corpus", "3");
    let before = snapshot(&cwd.join("corpus"));
    let smoke = config("smoke.toml");
    let smoke = smoke.to_str().unwrap();

    let t = ok(&["train", "--config", smoke, "--corpus", "corpus", "--seed", "5", "--out", "tr"], cwd);
    let (a, b) = (t["summary"]["insertion_check"][0].as_f64().unwrap(), t["summary"]["insertion_check"][1].as_f64().unwrap());
    assert_eq!(a, b);
    for f in ["backbone.ckpt", "moa.ckpt", "metrics.csv", "config.toml", "run.json", "summary.json"] {
        assert!(cwd.join("tr").join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(cwd.join("tr/metrics.csv")).unwrap();
    assert!(metrics.starts_with("# provenance: ") && metrics.contains("\"seed\":5"));
    let used = std::fs::read_to_string(cwd.join("tr/config.toml")).unwrap();
    assert!(used.contains("seed = 5"));

    let s = ok(&["synth", "--checkpoint", "tr/moa.ckpt", "--corpus", "corpus", "--out", "sy"], cwd);
    assert_eq!(s["cache_hits"], 0);
    let n = s["synthesized"].as_u64().unwrap();
    let s2 = ok(
        &["synth", "--checkpoint", "tr/moa.ckpt", "--corpus", "corpus", "--cache", "sy/embeddings.cache", "--out", "sy2"],
        cwd,
    );
    assert_eq!(s2["cache_hits"].as_u64().unwrap(), n);
    assert_eq!(snapshot(&cwd.join("sy/mels")).len(), n as usize);
    for (p, bytes) in snapshot(&cwd.join("sy/mels")) {
        let other = cwd.join("sy2/mels").join(p.file_name().unwrap());
        let a = moa_tts::eval::MelRecord::decode(&bytes).unwrap();
        let b = moa_tts::eval::MelRecord::read(&other).unwrap();
        assert_eq!(a, b, "cached embedding changed {p:?}");
    }

    let e = ok(&["eval", "--pred", "sy", "--ref", "sy", "--out", "ev_same"], cwd);
    for k in ["mcd_mean_over_speakers", "f0_rmse_mean_over_speakers", "dur_rmse_mean_over_speakers"] {
        assert_eq!(e["summary"][k].as_f64().unwrap(), 0.0, "{k}");
    }
    let e = ok(&["eval", "--pred", "sy", "--ref", "corpus", "--out", "ev"], cwd);
    assert!(e["summary"]["mcd_mean_over_speakers"].as_f64().unwrap() > 0.0);
    assert!(std::fs::read_to_string(cwd.join("ev/speakers.csv")).unwrap().starts_with("# provenance: "));

    let g = ok(&["analyze-gates", "--traces", "sy/gates.csv", "--corpus", "corpus", "--out", "ag"], cwd);
    assert!(g["sites"]["decoder.0"].is_object());
    let out = run(&["analyze-gates", "--traces", "sy/gates.csv", "--corpus", "corpus", "--site", "nowhere", "--out", "ag2"], cwd);
    assert_eq!(out.status.code(), Some(1));

    let bn = ok(
        &["bench", "--checkpoint", "tr/moa.ckpt", "tr/backbone.ckpt", "--corpus", "corpus", "--utterances", "2", "--repeats", "2", "--out", "bn"],
        cwd,
    );
    let r = bn["results"].as_array().unwrap();
    assert!(r[0]["moa_adapter_macs"].as_u64().unwrap() > 0);
    assert_eq!(r[1]["moa_adapter_macs"], 0);
    assert!(r[0]["rtf"]["rtf_median"].as_f64().unwrap() > 0.0);

    let resumed = ok(
        &["train", "--config", smoke, "--corpus", "corpus", "--seed", "5", "--resume", "tr/backbone.ckpt", "--out", "tr_resume"],
        cwd,
    );
    assert_eq!(resumed["summary"]["steps"], t["summary"]["steps"]);
    let s_cfg = config("s.toml");
    let out = run(
        &["train", "--config", s_cfg.to_str().unwrap(), "--corpus", "corpus", "--resume", "tr/moa.ckpt", "--out", "tr_bad"],
        cwd,
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "load");

    for dir in ["tr", "sy", "ev", "ag", "bn"] {
        let run_json: Value = serde_json::from_slice(&std::fs::read(cwd.join(dir).join("run.json")).unwrap()).unwrap();
        assert!(run_json["provenance"]["seed"].is_u64(), "{dir}");
        assert!(run_json["provenance"]["config"].is_object(), "{dir}");
    }
    assert_eq!(snapshot(&cwd.join("corpus")), before, "inputs were modified");
}
