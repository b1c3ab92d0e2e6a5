#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use histosynth::SceneConfig;
use walkdir::WalkDir;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_histosynth"));
    c.env_remove("HISTOSYNTH_OUT").env_remove("HISTOSYNTH_JOBS");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "histosynth {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Square scene of `side` pixels at the default pixel size.
pub fn small_config(side: u32) -> SceneConfig {
    let d = SceneConfig::default();
    SceneConfig {
        image_width: side,
        image_height: side,
        world_extent: d.pixel_size() * f64::from(side),
        ..d
    }
}

pub fn write_config(dir: &Path, config: &SceneConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, config.to_json()).unwrap();
    p
}

/// Every file under `root` keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            (rel, std::fs::read(e.path()).unwrap())
        })
        .collect()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
