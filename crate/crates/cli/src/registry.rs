//! Registry file and its health outcome log.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use speedlab_core::coordinator::{HealthEvent, Registry};

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct RegistryFile {
    path: PathBuf,
}

impl RegistryFile {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Outcome log kept next to the registry file.
    pub fn outcome_log(&self) -> PathBuf {
        let mut name = self.path.file_name().unwrap_or_default().to_os_string();
        name.push(".outcomes.jsonl");
        self.path.with_file_name(name)
    }

    /// A missing file is an empty registry.
    pub fn load(&self) -> Result<Registry> {
        match fs::read_to_string(&self.path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", self.path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Registry::default()),
            Err(e) => Err(CliError::file(&self.path, e)),
        }
    }

    /// Writes via a temporary file so readers never see half a registry.
    pub fn save(&self, registry: &Registry) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
        }
        let text = serde_json::to_string_pretty(registry).expect("registry serializes");
        let tmp = self.path.with_extension("tmp");
        fs::write(&tmp, text + "\n").map_err(|e| CliError::file(&tmp, e))?;
        fs::rename(&tmp, &self.path).map_err(|e| CliError::file(&self.path, e))
    }

    pub fn log_outcome(&self, event: &HealthEvent) -> Result<()> {
        let path = self.outcome_log();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::file(&path, e))?;
        let line = serde_json::to_string(event).expect("event serializes");
        writeln!(f, "{line}").map_err(|e| CliError::file(&path, e))
    }

    pub fn read_outcomes(&self) -> Result<Vec<HealthEvent>> {
        let path = self.outcome_log();
        let file = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(CliError::file(&path, e)),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CliError::file(&path, e))?;
            match serde_json::from_str(&line) {
                Ok(ev) => out.push(ev),
                Err(e) => warn!("{}: skipping line {}: {e}", path.display(), i + 1),
            }
        }
        Ok(out)
    }
}
