//! Reproducibility records written next to every primary output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha1::{Digest, Sha1};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git blob id: SHA-1 over `"blob <len>\0"` followed by the content.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

/// Blob id for a file; for a directory, a tree-style id over the sorted
/// `name hash` lines of its entries.
pub fn content_hash(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| CliError::io(path, e))?;
    if meta.is_file() {
        return Ok(blob_hash(&fs::read(path).map_err(|e| CliError::io(path, e))?));
    }
    let mut entries: Vec<(String, PathBuf)> = fs::read_dir(path)
        .map_err(|e| CliError::io(path, e))?
        .map(|e| e.map(|e| (e.file_name().to_string_lossy().into_owned(), e.path())))
        .collect::<std::io::Result<_>>()
        .map_err(|e| CliError::io(path, e))?;
    entries.sort();
    let mut listing = String::new();
    for (name, p) in entries {
        listing.push_str(&format!("{name} {}\n", content_hash(&p)?));
    }
    let mut h = Sha1::new();
    h.update(format!("tree {}\0", listing.len()).as_bytes());
    h.update(listing.as_bytes());
    Ok(hex(&h.finalize()))
}

#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub config: &'a RunConfig,
    pub seeds: BTreeMap<&'static str, u64>,
    /// Input name to content hash.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub fn seeds(cfg: &RunConfig) -> BTreeMap<&'static str, u64> {
    BTreeMap::from([
        ("synth", cfg.synth.seed),
        ("split", cfg.dataset.split_seed),
        ("label_dropout", cfg.dataset.dropout_seed),
        ("teacher_init", cfg.teacher.init_seed),
        ("teacher_train", cfg.teacher.train.seed),
        ("student_init", cfg.student.init_seed),
        ("student_train", cfg.student.train.seed),
        ("policy", cfg.student.policy_seed),
    ])
}

/// Writes `<output>.run.json`. Inputs are named by file name so the record
/// does not depend on where the run happened.
pub fn write_record(command: &str, cfg: &RunConfig, inputs: &[&Path], outputs: &[&Path]) -> Result<PathBuf> {
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
    let mut hashes = BTreeMap::new();
    for p in inputs {
        hashes.insert(name(p), content_hash(p)?);
    }
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        seeds: seeds(cfg),
        inputs: hashes,
        outputs: outputs.iter().map(|p| name(p)).collect(),
    };
    let primary = outputs.first().ok_or_else(|| CliError::Runtime("run record without outputs".into()))?;
    let mut path = primary.as_os_str().to_owned();
    path.push(".run.json");
    let path = PathBuf::from(path);
    let text = serde_json::to_string_pretty(&record).expect("record serializes");
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin`
        assert_eq!(blob_hash(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
        assert_eq!(blob_hash(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }
}
