use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::args::Global;

pub const LAYOUT: [&str; 5] = ["data", "ckpt", "metrics", "sweeps", "manifests"];

pub fn prepare(out: &Path) -> anyhow::Result<()> {
    for d in LAYOUT {
        let p = out.join(d);
        std::fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

#[derive(Serialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub bytes: u64,
    /// SHA-256 over `blob <len>\0<content>`, git's object framing.
    pub blob_sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub seed: u64,
    pub threads: usize,
    pub config: &'a C,
    pub inputs: Vec<InputRecord>,
    /// SHA-256 over the concatenated input blob hashes, in input order.
    pub inputs_hash: String,
    /// Relative to `--out`.
    pub outputs: Vec<PathBuf>,
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn input_record(path: &Path) -> anyhow::Result<InputRecord> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(InputRecord { path: path.to_path_buf(), bytes: bytes.len() as u64, blob_sha256: blob_hash(&bytes) })
}

/// Writes `manifests/<command>-<name>.json` and returns its path.
pub fn write<C: Serialize>(
    g: &Global,
    command: &str,
    name: &str,
    config: &C,
    inputs: &[&Path],
    outputs: Vec<PathBuf>,
) -> anyhow::Result<PathBuf> {
    let inputs: Vec<InputRecord> = inputs.iter().map(|p| input_record(p)).collect::<anyhow::Result<_>>()?;
    let mut h = Sha256::new();
    for i in &inputs {
        h.update(i.blob_sha256.as_bytes());
    }
    let m = RunManifest {
        command,
        seed: g.seed,
        threads: g.threads,
        config,
        inputs,
        inputs_hash: hex(&h.finalize()),
        outputs: outputs.iter().map(|p| p.strip_prefix(&g.out).unwrap_or(p).to_path_buf()).collect(),
    };
    let path = g.out.join("manifests").join(format!("{command}-{name}.json"));
    let text = serde_json::to_string_pretty(&m)?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
