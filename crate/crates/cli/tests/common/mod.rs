#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

pub fn attnprobe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnprobe"))
        .args(args)
        .current_dir(dir)
        .env_remove("ATTNPROBE_LOG")
        .output()
        .expect("binary runs")
}

/// Runs a command and returns its stdout, panicking with stderr on failure.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = attnprobe(dir, args);
    assert!(
        out.status.success(),
        "attnprobe {} failed ({:?}):\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const MODEL: [&str; 7] =
    ["--model-config", "pt/model.cfg", "--weights", "pt/model.wgt", "--inject-battery", "--seed", "2"];

/// Every subcommand once, each consuming earlier outputs.
pub fn scenario(extra: &[&str]) -> Vec<Vec<String>> {
    let mut steps: Vec<Vec<&str>> = vec![
        vec!["synth-battery", "--frames", "20", "--per-category", "4", "--seed", "1", "--out-dir", "bat"],
        vec!["categorize", "--attention", "bat/battery.att", "--truth", "bat/truth.csv", "--out", "bat/cat.csv"],
        vec![
            "synth-data", "--utterances", "10", "--min-frames", "20", "--max-frames", "30", "--noise", "1.0",
            "--seed", "2", "--out-dir", "data",
        ],
        vec!["probe-train", "--manifest", "data/manifest.toml", "--inject-battery", "--steps", "400", "--seed", "2", "--out-dir", "pt"],
        [&["probe-eval", "--manifest", "pt/test.toml", "--probe", "pt/probe.wgt"][..], &MODEL, &["--out", "pe.csv", "--confusion", "conf.csv"]].concat(),
        [&["forward", "--manifest", "data/manifest.toml"][..], &MODEL, &["--out-dir", "fw"]].concat(),
        vec!["score", "--manifest", "fw/manifest.toml", "--sample", "5", "--seed", "7", "--out", "s.csv"],
        vec!["prm", "--manifest", "fw/manifest.toml", "--layer", "0", "--pgm", "--out", "prm.csv"],
        vec!["report", "--scores", "s.csv", "--out-dir", "rep"],
        [&["ablate", "--manifest", "pt/test.toml", "--probe", "pt/probe.wgt"][..], &MODEL, &["--category", "diagonal", "--out", "curve.csv"]].concat(),
    ];
    for s in &mut steps {
        s.extend_from_slice(extra);
    }
    steps.into_iter().map(|s| s.into_iter().map(String::from).collect()).collect()
}

/// Every file under `dir` keyed by relative path; run records lose their wall time.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            let mut bytes = std::fs::read(&path).unwrap();
            if rel.ends_with("run.json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_seconds");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(rel, bytes);
        }
    }
    out
}

/// Runs the scenario in a fresh copy of `dir` and snapshots the result.
pub fn run_scenario(dir: &Path, extra: &[&str]) -> BTreeMap<String, Vec<u8>> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).unwrap();
    }
    std::fs::create_dir_all(dir).unwrap();
    for step in scenario(extra) {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        ok(dir, &args);
    }
    snapshot(dir)
}
