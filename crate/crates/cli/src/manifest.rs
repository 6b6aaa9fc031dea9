//! Output files and the run manifest.
//!
//! The manifest lists every other file with its SHA-256. Its `wall_time_s`
//! line is the only content that differs between identical runs.

use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use volterra_neutral::report::KeyValues;
use volterra_neutral::Tolerance;

pub const MANIFEST: &str = "manifest.txt";

pub struct RunInfo<'a> {
    pub subcommand: &'a str,
    pub seed: u64,
    pub threads: usize,
    pub tolerance_scale: f64,
    pub tolerance: Tolerance,
    pub pass: bool,
    pub wall_time_s: f64,
    pub config_text: &'a str,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn manifest_text(files: &[(String, Vec<u8>)], run: &RunInfo) -> String {
    let mut kv = KeyValues::new();
    kv.push("tool", "vnsim")
        .push("version", env!("CARGO_PKG_VERSION"))
        .push("subcommand", run.subcommand)
        .push("seed", run.seed)
        .push("threads", run.threads)
        .num("tolerance_scale", run.tolerance_scale)
        .num("tolerance_abs", run.tolerance.abs)
        .num("tolerance_rel", run.tolerance.rel)
        .push("pass", run.pass)
        .push("config_sha256", sha256_hex(run.config_text.as_bytes()))
        .num("wall_time_s", run.wall_time_s);
    for (name, bytes) in files {
        kv.push(format!("file.{name}"), sha256_hex(bytes));
    }
    let mut text = kv.to_string();
    text.push_str("[config]\n");
    text.push_str(run.config_text);
    if !run.config_text.ends_with('\n') {
        text.push('\n');
    }
    text
}

pub fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)], run: &RunInfo) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        fs::write(dir.join(name), bytes)?;
    }
    fs::write(dir.join(MANIFEST), manifest_text(files, run))
}
