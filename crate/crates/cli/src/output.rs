//! Metric files and the run manifest. Every file is written to a temporary
//! sibling and renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use oraclebench_core::experiments::CellStatus;

use crate::CliError;

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let io = |e: std::io::Error| CliError::runtime("output", format!("{}: {e}", path.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// Comma-separated, LF line ends, header from the row type's field names.
/// Floats use the shortest representation that reads back exactly.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::runtime("output", e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::runtime("output", e.to_string()))
}

pub fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::runtime("output", e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub kind: String,
    pub config_path: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub seed_offset: u64,
    pub jobs: usize,
    pub rng_scheme: &'static str,
    pub format_version: u32,
    pub cells: Vec<CellStatus>,
    pub files: Vec<String>,
    pub wall_time_s: f64,
}

/// Collects output files in the order they are written.
pub struct OutDir {
    pub root: PathBuf,
    pub files: Vec<String>,
}

impl OutDir {
    pub fn new(root: PathBuf) -> Self {
        Self {
            root,
            files: Vec::new(),
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        atomic_write(&self.root.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }
}
