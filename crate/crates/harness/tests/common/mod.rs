#![allow(dead_code)]

use std::path::{Path, PathBuf};

use slt_harness::ExperimentConfig;

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// An example config with overrides applied.
pub fn example(name: &str, overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(&config_path(name), &overrides).unwrap()
}

/// A ring search small enough for unit-speed tests.
pub fn tiny(overrides: &[&str]) -> ExperimentConfig {
    let mut all = vec![
        "steps=30",
        "generator.hidden=[32, 32]",
        "generator.channel_multiplier=1.0",
        "eval.samples=128",
        "eval.every=10",
        "hash_check_every=5",
        "sample_count=64",
    ];
    all.extend_from_slice(overrides);
    example("ring_find_slt.toml", &all)
}
