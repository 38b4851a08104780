//! Shared fixtures and helpers for the CLI and acceptance tests.
#![allow(dead_code)]

#[path = "../../../core/tests/common/mod.rs"]
pub mod gen;
pub mod fixtures;
pub mod mutate;

use std::path::PathBuf;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixture_dir().join(name)
}

/// Runs the CLI in-process with no layout environment override.
pub fn cli(args: &[&str]) -> detrap_cli::Outcome {
    let mut full = vec!["detrap"];
    full.extend_from_slice(args);
    detrap_cli::run(full, None)
}
