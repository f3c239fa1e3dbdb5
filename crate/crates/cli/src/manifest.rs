//! Run manifests: the resolved configuration, the command that ran, and
//! content hashes of every artifact in the directory. A manifest is a valid
//! config file (its provenance lines carry a reserved `manifest.` prefix),
//! so re-running a command with `--config <dir>/manifest.txt` reproduces the
//! run exactly.

use qt_core::{Error, Result, TrainConfig};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// One per artifact directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// Seconds since the Unix epoch at creation time.
    pub created_unix: u64,
    pub config: TrainConfig,
    /// `(file name, sha256 hex)` pairs, sorted by file name.
    pub hashes: Vec<(String, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    Ok(sha256_hex(&bytes))
}

/// Strips `manifest.*` provenance lines, leaving plain config text. Lets a
/// manifest double as a `--config` file.
pub fn config_lines(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        if !line.trim_start().starts_with("manifest.") {
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

impl RunManifest {
    pub fn new(command: &str, config: TrainConfig) -> RunManifest {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest { command: command.to_string(), created_unix, config, hashes: Vec::new() }
    }

    /// Hashes `dir/name` and records it under its file name.
    pub fn add_file(&mut self, dir: &Path, name: &str) -> Result<()> {
        let hex = sha256_file(&dir.join(name))?;
        self.hashes.retain(|(n, _)| n != name);
        self.hashes.push((name.to_string(), hex));
        self.hashes.sort();
        Ok(())
    }

    pub fn hash_of(&self, name: &str) -> Option<&str> {
        self.hashes.iter().find(|(n, _)| n == name).map(|(_, h)| h.as_str())
    }

    /// Provenance lines first, then the full config snapshot.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "manifest.command={}", self.command);
        let _ = writeln!(s, "manifest.created_unix={}", self.created_unix);
        for (name, hex) in &self.hashes {
            let _ = writeln!(s, "manifest.sha256.{name}={hex}");
        }
        s.push_str(&self.config.to_kv());
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text())
            .map_err(|source| Error::File { path, source })
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::File { path: path.to_path_buf(), source })?;
        RunManifest::from_text(&text)
    }

    /// Config lines go through the same strict parser as a config file, so
    /// stale or misspelled keys fail loudly instead of drifting.
    pub fn from_text(text: &str) -> Result<RunManifest> {
        let mut command = None;
        let mut created_unix = 0u64;
        let mut hashes = Vec::new();
        for line in text.lines() {
            let Some(rest) = line.trim_start().strip_prefix("manifest.") else {
                continue;
            };
            let (key, value) = rest
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line '{line}' has no '='")))?;
            match key.trim() {
                "command" => command = Some(value.trim().to_string()),
                "created_unix" => {
                    created_unix = value.trim().parse().map_err(|_| {
                        Error::Config(format!("bad manifest timestamp '{value}'"))
                    })?
                }
                other => {
                    let name = other.strip_prefix("sha256.").ok_or_else(|| {
                        Error::Config(format!("unknown manifest key '{other}'"))
                    })?;
                    hashes.push((name.to_string(), value.trim().to_string()));
                }
            }
        }
        let command = command
            .ok_or_else(|| Error::Config("manifest is missing manifest.command".into()))?;
        let config = TrainConfig::from_kv_text(&config_lines(text))?;
        hashes.sort();
        Ok(RunManifest { command, created_unix, config, hashes })
    }
}
