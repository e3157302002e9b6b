#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use demorphlab::RunConfig;
use demorphlab_core::model::Mode;
use serde_json::Value;

/// Writes a toy config into `dir` with corpus and run directories beside it.
pub fn write_config(dir: &Path, name: &str, mode: Mode, seed: u64, edit: impl FnOnce(&mut RunConfig)) -> PathBuf {
    let mut cfg = RunConfig::toy(mode, "corpus", "run", seed);
    edit(&mut cfg);
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

pub fn run(args: &[&str], deterministic: bool) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_demorphlab"));
    cmd.args(args).env("RUST_LOG", "error");
    if deterministic {
        cmd.env("DEMORPHLAB_DETERMINISTIC", "1");
    }
    cmd.output().unwrap()
}

/// Runs a subcommand that must succeed and returns its JSON summary.
pub fn ok(args: &[&str]) -> Value {
    let out = run(args, true);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Runs a subcommand that must fail; returns the exit code and error JSON.
pub fn fails(args: &[&str]) -> (i32, Value) {
    let out = run(args, true);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().unwrap_or_default();
    (out.status.code().unwrap(), serde_json::from_str(last).unwrap_or(Value::Null))
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
