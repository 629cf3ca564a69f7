#![allow(dead_code)]

use std::path::Path;
use std::process::Command;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn arnn(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_arnn"))
        .args(args)
        .output()
        .expect("spawn arnn");
    Run {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8(out.stdout).expect("utf8 stdout"),
        stderr: String::from_utf8(out.stderr).expect("utf8 stderr"),
    }
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf8 path")
}

/// Value printed after `key` on its own line, e.g. `accuracy  0.8`.
pub fn printed(stdout: &str, key: &str) -> Option<String> {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|rest| rest.trim().to_string()))
}

pub fn synth_small(dir: &Path, count: usize, seed: u64) {
    let run = arnn(&[
        "synth",
        "--out",
        p(dir),
        "--channels",
        "4",
        "--length",
        "64",
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
    ]);
    assert_eq!(run.code, 0, "{}", run.stderr);
}

/// `(label, pred)` rows of a predictions CSV.
pub fn read_predictions(path: &Path) -> Vec<(String, u8, f64, u8)> {
    let text = std::fs::read_to_string(path).expect("predictions file");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("path,label,prob,pred"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect()
}
