use std::fs;
use std::path::{Path, PathBuf};

use bscm_core::panel::format_float;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliResult;
use crate::manifest::FileDigest;

pub const OUT_DIR_ENV: &str = "BSCM_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "bscm-out";

/// `--out`, then `$BSCM_OUT_DIR`, then `./bscm-out`.
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Result files of one run. Anything written is deleted again unless the run
/// is committed, and a directory created for the run is removed with it.
pub struct OutputDir {
    root: PathBuf,
    /// Directories this run created, deepest first.
    created: Vec<PathBuf>,
    written: Vec<FileDigest>,
    committed: bool,
}

impl OutputDir {
    pub fn create(root: PathBuf) -> CliResult<Self> {
        let created: Vec<PathBuf> = root.ancestors().take_while(|p| !p.as_os_str().is_empty() && !p.exists()).map(Path::to_path_buf).collect();
        fs::create_dir_all(&root)?;
        Ok(Self { root, created, written: Vec::new(), committed: false })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes)?;
        self.written.retain(|d| d.path != name);
        self.written.push(FileDigest { path: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    pub fn write_csv<I>(&mut self, name: &str, header: &[String], rows: I) -> CliResult<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| crate::error::CliError::internal(e.to_string()))?;
        self.write_bytes(name, &bytes)
    }

    /// Digests of everything written so far, in write order.
    pub fn digests(&self) -> Vec<FileDigest> {
        self.written.clone()
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for d in &self.written {
            let _ = fs::remove_file(self.root.join(&d.path));
        }
        for dir in &self.created {
            let _ = fs::remove_dir(dir);
        }
    }
}

pub fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

pub fn num(v: f64) -> String {
    format_float(v)
}
