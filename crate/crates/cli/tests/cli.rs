use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streampref"))
        .current_dir(dir)
        .args(["--log-level", "warn"])
        .args(args)
        .output()
        .expect("spawn streampref")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(path: &Path) -> Value {
    let mut name = path.file_name().unwrap().to_os_string();
    name.push(".manifest.json");
    let text = fs::read_to_string(path.with_file_name(name)).expect("manifest written");
    serde_json::from_str(&text).unwrap()
}

/// Output digests keyed by file name, so runs in different directories compare.
fn digests_by_name(m: &Value) -> BTreeMap<String, String> {
    m["outputs"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(k, v)| {
            let name = PathBuf::from(k).file_name().unwrap().to_string_lossy().into_owned();
            (name, v.as_str().unwrap().to_string())
        })
        .collect()
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn simlab_gen_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(d.path(), &["--seed", "7", "simlab-gen", "--out-dir", "sim", "--users", "12"]);
    }
    let ma = manifest(&a.path().join("sim/histories.jsonl"));
    let mb = manifest(&b.path().join("sim/histories.jsonl"));
    assert_eq!(digests_by_name(&ma).len(), 5);
    assert_eq!(digests_by_name(&ma), digests_by_name(&mb));
    assert_eq!(ma["config_digest"], mb["config_digest"]);
    assert_eq!(ma["seed"], 7);

    ok(a.path(), &["--seed", "8", "simlab-gen", "--out-dir", "other", "--users", "12"]);
    let mc = manifest(&a.path().join("other/histories.jsonl"));
    assert_ne!(digests_by_name(&ma)["histories.jsonl"], digests_by_name(&mc)["histories.jsonl"]);
}

#[test]
fn missing_flag_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["rollout", "--instances", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert!(err.contains("--gamma"), "{err}");

    let out = run(d.path(), &["prune", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_failure_exits_one() {
    let d = tempfile::tempdir().unwrap();
    let out = run(
        d.path(),
        &["prune", "--scores", "missing.jsonl", "--histories", "missing.jsonl", "--out", "o.jsonl"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("i/o error"));
    assert!(!d.path().join("o.jsonl").exists());
}

#[test]
fn outputs_never_overwrite_inputs() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["simlab-gen", "--out-dir", "sim", "--users", "3"]);
    let before = fs::read(d.path().join("sim/histories.jsonl")).unwrap();
    let out = run(
        d.path(),
        &["build-transfer", "positive-only", "--histories", "sim/histories.jsonl", "--out", "sim/histories.jsonl"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fs::read(d.path().join("sim/histories.jsonl")).unwrap(), before);
}

#[test]
fn endpoint_config_files_are_accepted() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["--seed", "1", "simlab-gen", "--out-dir", "sim", "--users", "6"]);
    fs::write(
        d.path().join("gen.toml"),
        "base_url = \"mock:hash?seed=4\"\nmodel_id = \"scripted\"\nrole = \"generator\"\n\n[limits]\nmax_in_flight = 2\n",
    )
    .unwrap();
    ok(
        d.path(),
        &["stream-infer", "--histories", "sim/heldout.jsonl", "--chunks", "3", "--generator", "gen.toml", "--state-dir", "st"],
    );
    let m = manifest(&d.path().join("st/states.jsonl"));
    assert!(m["inputs"].as_object().unwrap().contains_key("gen.toml"));
    assert_eq!(lines(&d.path().join("st/states.jsonl")), 6);

    fs::write(d.path().join("bad.toml"), "base_url = \"mock:hash\"\n").unwrap();
    let out = run(
        d.path(),
        &["stream-infer", "--histories", "sim/heldout.jsonl", "--chunks", "3", "--generator", "bad.toml", "--state-dir", "st2"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn end_to_end_chain() {
    let start = Instant::now();
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["--seed", "11", "simlab-gen", "--out-dir", "sim", "--users", "40"]);
    ok(p, &["--seed", "12", "simlab-gen", "--out-dir", "simb", "--users", "20", "--id-prefix", "alt"]);
    let sim = "mock:simlab?truth=sim/truth.jsonl&histories=sim/histories.jsonl";

    // synthesis
    let stats = ok(
        p,
        &[
            "--seed", "11", "synthesize-sft",
            "--histories", "sim/histories.jsonl",
            "--scores", "sim/scores.jsonl",
            "--generator", &format!("{sim}&quality=1"),
            "--judge", &format!("{sim}&kappa=8"),
            "--out", "sft.jsonl",
        ],
    );
    let stats: Value = serde_json::from_str(stats.trim()).unwrap();
    assert!(stats["records"].as_u64().unwrap() > 0);
    assert_eq!(stats["records"].as_u64().unwrap() as usize, lines(&p.join("sft.jsonl")));

    // curriculum and RL
    ok(
        p,
        &["prune", "--scores", "sim/scores.jsonl", "--histories", "sim/histories.jsonl", "--default-row", "amazon", "--out", "rl.jsonl"],
    );
    let n_inst = lines(&p.join("rl.jsonl"));
    assert!(n_inst > 0);
    ok(
        p,
        &[
            "--seed", "11", "rollout",
            "--instances", "rl.jsonl",
            "--histories", "sim/histories.jsonl",
            "--policy", &format!("{sim}&quality=0.7&seed=2"),
            "--judge", sim,
            "-G", "4", "--gamma", "0.5",
            "--out", "batch.jsonl",
        ],
    );
    assert_eq!(lines(&p.join("batch.jsonl")), n_inst * 8);
    let same: Vec<String> = fs::read_to_string(p.join("batch.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["old_logprobs"].to_string())
        .collect();
    fs::write(p.join("new.jsonl"), same.join("\n") + "\n").unwrap();
    let loss: f64 = ok(p, &["loss-check", "--batch", "batch.jsonl", "--new-logprobs", "new.jsonl", "--eps", "0.2"])
        .trim()
        .parse()
        .unwrap();
    assert!(loss.abs() < 1e-9, "{loss}");

    // streaming inference and evaluation
    ok(
        p,
        &["stream-infer", "--histories", "sim/heldout.jsonl", "--chunks", "2", "--generator", &format!("{sim}&quality=1"), "--state-dir", "st"],
    );
    let table = ok(
        p,
        &["--seed", "11", "evaluate", "--summaries", "st/states.jsonl", "--instances", "sim/instances.jsonl", "--downstream", sim, "--out", "report.json"],
    );
    assert!(table.contains("accuracy"));
    let report: Value = serde_json::from_str(&fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 40);
    assert!(report["accuracy"].as_f64().unwrap() >= 0.9, "{report}");
    ok(
        p,
        &["evaluate", "--summaries", "st/states.jsonl", "--instances", "sim/instances.jsonl", "--replies", "report.json.replies.jsonl", "--out", "rescored.json"],
    );
    assert_eq!(fs::read(p.join("report.json")).unwrap(), fs::read(p.join("rescored.json")).unwrap());

    // transfer benchmarks
    ok(
        p,
        &[
            "build-transfer", "cross-domain",
            "--histories-a", "sim/histories.jsonl",
            "--histories-b", "simb/histories.jsonl",
            "--embedder", "mock:hash?dim=16",
            "--top-k", "15",
            "--out", "xd.jsonl",
            "--out-histories", "xd_hist.jsonl",
        ],
    );
    assert_eq!(lines(&p.join("xd.jsonl")), 30);
    assert_eq!(lines(&p.join("xd_hist.jsonl")), 60);
    ok(
        p,
        &["--seed", "11", "build-transfer", "multi-interest", "--histories", "sim/histories.jsonl", "--intensity", "0.3", "--out", "mi.jsonl", "--out-instances", "mi_inst.jsonl"],
    );
    assert_eq!(lines(&p.join("mi.jsonl.provenance.jsonl")), 40);
    ok(p, &["build-transfer", "positive-only", "--histories", "sim/heldout.jsonl", "--out", "po.jsonl"]);
    assert!(!fs::read_to_string(p.join("po.jsonl")).unwrap().contains("rejected"));

    for out in ["sft.jsonl", "rl.jsonl", "batch.jsonl", "batch.jsonl.loss.json", "st/states.jsonl", "report.json", "xd.jsonl", "mi.jsonl", "po.jsonl"] {
        let m = manifest(&p.join(out));
        assert!(!m["outputs"].as_object().unwrap().is_empty(), "{out}");
    }
    // the RL manifest pins the histories it read
    let m = manifest(&p.join("batch.jsonl"));
    let sim_m = manifest(&p.join("sim/histories.jsonl"));
    assert_eq!(m["inputs"]["sim/histories.jsonl"], sim_m["outputs"]["sim/histories.jsonl"]);
    assert!(start.elapsed() < Duration::from_secs(60), "{:?}", start.elapsed());
}

#[test]
fn reruns_reproduce_output_digests() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["--seed", "5", "simlab-gen", "--out-dir", "sim", "--users", "10"]);
    let sim = "mock:simlab?truth=sim/truth.jsonl&histories=sim/histories.jsonl";
    let mut digests = Vec::new();
    for out in ["a.jsonl", "b.jsonl"] {
        ok(
            p,
            &["prune", "--scores", "sim/scores.jsonl", "--histories", "sim/histories.jsonl", "--default-row", "identity", "--out", "rl.jsonl"],
        );
        ok(
            p,
            &["--seed", "5", "rollout", "--instances", "rl.jsonl", "--histories", "sim/histories.jsonl", "--policy", sim, "--judge", sim, "-G", "3", "--gamma", "0.9", "--jobs", "3", "--out", out],
        );
        let m = manifest(&p.join(out));
        digests.push((m["inputs"].clone(), m["config_digest"].clone(), m["outputs"][out].clone()));
    }
    assert_eq!(digests[0], digests[1]);
}
