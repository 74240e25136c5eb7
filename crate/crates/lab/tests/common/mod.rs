#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = r#"
seed = 3

[data]
preset = "cardiac"
pathological = 6
normal = 3
test_pathological = 2

[engine]
method = "lefusion_j"

[engine.train]
steps = 20
epochs = 2

[diffmask.train]
steps = 20
epochs = 2

[evaluation]
seeds = [0]
diversity_inputs = 2
diversity_samples = 2
shift_generations = 2

[evaluation.segmenter]
epochs = 2
"#;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_lesion-synth"))
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

pub fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

/// Runs a command that must succeed and returns the printed path.
pub fn ok(config: &Path, out: &Path, args: &[&str]) -> PathBuf {
    let o = run(config, out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
}

/// Runs a command that must fail and returns the parsed stderr JSON.
pub fn err(config: &Path, out: &Path, args: &[&str]) -> serde_json::Value {
    let o = run(config, out, args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| {
        panic!("stderr is not JSON: {}", String::from_utf8_lossy(&o.stderr))
    })
}
