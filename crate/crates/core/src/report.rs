//! Report envelopes: provenance (tool version, configuration, input
//! digests) plus a command-specific body, serialized deterministically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::ingest::IngestError;

pub const TOOL_NAME: &str = "mace";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputDigest {
    /// Path exactly as given on the command line.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance<C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: C,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report<C: Serialize, B: Serialize> {
    pub provenance: Provenance<C>,
    pub result: B,
}

impl<C: Serialize, B: Serialize> Report<C, B> {
    /// Pretty JSON with a trailing newline. Maps serialize in key order and
    /// nothing time-dependent is recorded, so identical runs give identical
    /// bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), IngestError> {
    let rd = fs::read_dir(dir).map_err(|e| IngestError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for entry in rd {
        let path = entry
            .map_err(|e| IngestError::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 of a file, or of a directory tree (relative paths and contents
/// of every file, in sorted path order).
pub fn digest_path(path: &Path) -> Result<String, IngestError> {
    let read = |p: &Path| {
        fs::read(p).map_err(|e| IngestError::Io {
            path: p.to_path_buf(),
            source: e,
        })
    };
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        files_under(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            let rel: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
            h.update(rel.join("/").as_bytes());
            h.update([0u8]);
            let bytes = read(&f)?;
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    } else {
        h.update(read(path)?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn digest_inputs<'a, I>(paths: I) -> Result<Vec<InputDigest>, IngestError>
where
    I: IntoIterator<Item = &'a Path>,
{
    paths
        .into_iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                sha256: digest_path(p)?,
            })
        })
        .collect()
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, IngestError> {
    fs::create_dir_all(dir).map_err(|e| IngestError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| IngestError::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

/// Fixed-precision number for CSV cells.
pub fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        v.to_string()
    }
}
