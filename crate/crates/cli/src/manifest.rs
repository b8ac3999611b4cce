//! Run manifest, atomic artifact writes and the `report` summary.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub role: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config_hash: String,
    pub toolkit_version: String,
    pub wall_clock_seconds: f64,
    pub seeds: Vec<SeedEntry>,
    pub artifacts: Vec<Artifact>,
    pub checks: Vec<Check>,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Writes files into a run directory through a temporary sibling and a
/// rename, recording the hash of every finished artifact.
pub struct ArtifactDir {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl ArtifactDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(ArtifactDir {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    /// Streams `name` through `fill` and records it as an artifact.
    pub fn write<F>(&mut self, name: &str, fill: F) -> anyhow::Result<()>
    where
        F: FnOnce(&mut dyn Write) -> anyhow::Result<()>,
    {
        let bytes = write_atomic(&self.root.join(name), fill)?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: hash_file(&self.root.join(name))?,
            bytes,
        });
        Ok(())
    }

    pub fn into_artifacts(self) -> Vec<Artifact> {
        self.artifacts
    }
}

/// Writes `path` via `path.tmp` and a rename; returns the size written.
pub fn write_atomic<F>(path: &Path, fill: F) -> anyhow::Result<u64>
where
    F: FnOnce(&mut dyn Write) -> anyhow::Result<()>,
{
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let file = File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?;
    let mut out = BufWriter::new(file);
    let result = fill(&mut out).and_then(|()| {
        let file = out.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        Ok(file.metadata()?.len())
    });
    match result {
        Ok(len) => {
            fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))?;
            Ok(len)
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e.context(format!("while writing {}", path.display())))
        }
    }
}

pub fn hash_file(path: &Path) -> anyhow::Result<String> {
    let mut file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

/// Human-readable summary of a run. Contains no timing, so equal runs give
/// equal bytes.
pub fn summary_text(manifest: &RunManifest) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment: {}", manifest.experiment);
    let _ = writeln!(s, "config: {}", manifest.config_hash);
    let _ = writeln!(s, "herdsim: {}", manifest.toolkit_version);
    for seed in &manifest.seeds {
        let _ = writeln!(s, "seed {}: {}", seed.role, seed.seed);
    }
    for c in &manifest.checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "check {}: {verdict} ({})", c.name, c.detail);
    }
    for a in &manifest.artifacts {
        let _ = writeln!(s, "artifact {} ({} bytes)", a.path, a.bytes);
    }
    let _ = writeln!(s, "result: {}", if manifest.passed() { "PASS" } else { "FAIL" });
    s
}

/// Outcome of `report`: the text plus whether everything was present and passed.
pub struct Report {
    pub text: String,
    pub complete: bool,
    pub passed: bool,
}

/// Re-reads a run from its manifest, checking that every artifact is still
/// present and unchanged.
pub fn report(manifest_path: &Path) -> anyhow::Result<Report> {
    let manifest = RunManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut text = String::new();
    let _ = writeln!(text, "experiment: {}", manifest.experiment);
    let _ = writeln!(text, "config: {}", manifest.config_hash);
    for c in &manifest.checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(text, "{verdict} {}: {}", c.name, c.detail);
    }
    let mut complete = true;
    for a in &manifest.artifacts {
        let path = dir.join(&a.path);
        if !path.is_file() {
            complete = false;
            let _ = writeln!(text, "MISSING {}", a.path);
            continue;
        }
        match hash_file(&path) {
            Ok(h) if h == a.sha256 => {
                let _ = writeln!(text, "ok {}", a.path);
            }
            Ok(_) => {
                complete = false;
                let _ = writeln!(text, "MODIFIED {} (hash differs from the manifest)", a.path);
            }
            Err(e) => {
                complete = false;
                let _ = writeln!(text, "UNREADABLE {}: {e}", a.path);
            }
        }
    }
    let passed = manifest.passed();
    let verdict = match (passed, complete) {
        (true, true) => "PASS",
        (false, _) => "FAIL",
        (true, false) => "INCOMPLETE",
    };
    let _ = writeln!(text, "result: {verdict}");
    Ok(Report { text, complete, passed })
}
