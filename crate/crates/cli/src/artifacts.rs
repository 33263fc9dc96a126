use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;
use crate::spec::SCHEMA_VERSION;

/// Identity stamped into every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec_hash: String,
    pub seed: u64,
}

impl Provenance {
    /// Comment line heading every CSV.
    pub fn csv_header(&self) -> String {
        format!("# schema_version={SCHEMA_VERSION} spec_hash={} seed={}\n", self.spec_hash, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub spec_hash: String,
    pub seed: u64,
    pub status: String,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn get(&self, path: &str) -> Option<&ManifestEntry> {
        self.files.iter().find(|f| f.path == path)
    }
}

pub const MANIFEST: &str = "manifest.json";
pub const FAILED: &str = "FAILED";
/// Wall-clock timings; kept out of the manifest so hashes stay reproducible.
pub const TIMING: &str = "timing.json";

/// Output directory that records a hash for everything written through it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    provenance: Provenance,
    entries: Vec<ManifestEntry>,
}

impl OutputDir {
    /// Checks that `root` is absent or a directory without creating it.
    pub fn check(root: &Path) -> Result<(), CliError> {
        if root.exists() && !root.is_dir() {
            return Err(CliError::config(format!("output path {} is not a directory", root.display())));
        }
        let existing = root.ancestors().skip(1).find(|p| p.as_os_str().is_empty() || p.exists());
        if let Some(p) = existing.filter(|p| !p.as_os_str().is_empty() && !p.is_dir()) {
            return Err(CliError::config(format!("output parent {} is not a directory", p.display())));
        }
        Ok(())
    }

    pub fn create(root: &Path, provenance: Provenance) -> Result<Self, CliError> {
        Self::check(root)?;
        fs::create_dir_all(root).map_err(|e| CliError::config(format!("{}: {e}", root.display())))?;
        for stale in [MANIFEST, FAILED, TIMING] {
            let _ = fs::remove_file(root.join(stale));
        }
        Ok(Self { root: root.to_path_buf(), provenance, entries: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> std::io::Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes)?;
        self.entries.retain(|e| e.path != rel);
        self.entries.push(ManifestEntry {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Writes `{schema_version, spec_hash, seed, kind, data}`.
    pub fn write_json<T: Serialize>(&mut self, rel: &str, kind: &str, data: &T) -> std::io::Result<()> {
        let doc = json!({
            "schema_version": SCHEMA_VERSION,
            "spec_hash": self.provenance.spec_hash,
            "seed": self.provenance.seed,
            "kind": kind,
            "data": data,
        });
        let mut text = serde_json::to_string_pretty(&doc).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    /// Writes CSV `body` behind the provenance comment line.
    pub fn write_csv(&mut self, rel: &str, body: &str) -> std::io::Result<()> {
        let text = self.provenance.csv_header() + body;
        self.write_bytes(rel, text.as_bytes())
    }

    /// Writes a file that is not listed in the manifest.
    pub fn write_unlisted(&self, rel: &str, bytes: &[u8]) -> std::io::Result<()> {
        fs::write(self.path(rel), bytes)
    }

    pub fn read_to_string(&self, rel: &str) -> std::io::Result<String> {
        fs::read_to_string(self.path(rel))
    }

    /// Writes the manifest (sorted by path) and, on failure, the FAILED marker.
    pub fn finish(mut self, failure: Option<&CliError>) -> std::io::Result<Manifest> {
        if let Some(err) = failure {
            let marker = json!({ "stage": err.stage.to_string(), "message": err.message });
            fs::write(self.path(FAILED), format!("{marker}\n"))?;
        }
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            spec_hash: self.provenance.spec_hash.clone(),
            seed: self.provenance.seed,
            status: if failure.is_some() { "failed".into() } else { "ok".into() },
            files: self.entries,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        text.push('\n');
        fs::write(self.root.join(MANIFEST), text)?;
        Ok(manifest)
    }
}

/// The `data` member of a JSON artifact.
pub fn read_artifact<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let mut doc: Value = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let data = doc.get_mut("data").map(Value::take).unwrap_or(Value::Null);
    serde_json::from_value(data).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Lines of a CSV artifact with comment lines and the header removed.
pub fn csv_rows(text: &str) -> Vec<Vec<&str>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect()
}
