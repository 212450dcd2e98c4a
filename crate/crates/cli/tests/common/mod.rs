//! Helpers for driving the `metaite` binary from tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_metaite");

/// Small Twins configuration that finishes every command in well under a
/// second.
pub const SMALL_CONFIG: &str = r#"
seed = 3
methods = ["meta_ite", "ols_lr2", "oracle"]

[data]
imbalance = { fractions = [1.0, 0.5] }

[data.dataset]
source = "twins_binary"
n_pairs = 400

[meta]
max_iters = 10
extractor_widths = [8]
head_widths = [8, 8]

[sweep]
fractions = [1.0, 0.5]
methods = ["meta_ite", "ols_lr2"]
grid_values = [0.0, 1.0]
"#;

/// Runs the binary with `METAITE_*` variables cleared.
pub fn run(args: &[&str]) -> Output {
    let mut cmd = Command::new(BIN);
    for (k, _) in std::env::vars() {
        if k.starts_with("METAITE_") {
            cmd.env_remove(k);
        }
    }
    cmd.args(args).output().expect("spawn metaite")
}

pub fn run_in(config: &Path, out: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend(["--config", config.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    run(&all)
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Every file under `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// The manifest with its timestamps removed.
pub fn manifest_sans_time(root: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(root.join("manifest.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("started_unix_ms");
    obj.remove("finished_unix_ms");
    v
}

/// Every command sequence used by the determinism checks.
pub const COMMANDS: &[&[&str]] = &[
    &["gen-data"],
    &["train"],
    &["estimate"],
    &["evaluate"],
    &["sweep"],
    &["sweep", "--mode", "ablation"],
];

/// Runs each command in two fresh output directories and returns the first
/// difference found, if any.
pub fn determinism_mismatch(config_text: &str) -> Option<String> {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), config_text);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for args in COMMANDS {
        for out in [&a, &b] {
            let o = run_in(&cfg, out, args);
            if !o.status.success() {
                return Some(format!("{args:?} failed: {}", String::from_utf8_lossy(&o.stderr)));
            }
        }
        if manifest_sans_time(&a) != manifest_sans_time(&b) {
            return Some(format!("{args:?}: manifests differ"));
        }
        let (ta, tb) = (tree(&a), tree(&b));
        if ta.keys().ne(tb.keys()) {
            return Some(format!("{args:?}: different file sets"));
        }
        for (name, bytes) in &ta {
            if name != "manifest.json" && tb[name] != *bytes {
                return Some(format!("{args:?}: {name} differs"));
            }
        }
    }
    None
}
