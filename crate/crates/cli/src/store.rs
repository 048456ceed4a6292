//! Append-only newline-delimited result store.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{CliError, Result};
use crate::record::{MeasurementResult, RecordError};

#[derive(Debug, Clone)]
pub struct Store {
    path: PathBuf,
}

/// A line that could not be read back.
#[derive(Debug)]
pub struct SkippedLine {
    pub line_no: usize,
    pub error: RecordError,
}

#[derive(Debug, Default)]
pub struct StoreContents {
    pub records: Vec<MeasurementResult>,
    pub skipped: Vec<SkippedLine>,
}

impl Store {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record as a single line. The file lock keeps concurrent
    /// writers from interleaving.
    pub fn append(&self, record: &MeasurementResult) -> Result<()> {
        let line = record.to_line()?;
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| CliError::file(&self.path, e))?;
        file.lock().map_err(|e| CliError::file(&self.path, e))?;
        // A torn previous write leaves no newline; start on a fresh line.
        let needs_newline = file.metadata()?.len() > 0 && !ends_with_newline(&self.path)?;
        let mut buf = Vec::with_capacity(line.len() + 2);
        if needs_newline {
            buf.push(b'\n');
        }
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        file.write_all(&buf).map_err(|e| CliError::file(&self.path, e))?;
        file.sync_data().map_err(|e| CliError::file(&self.path, e))?;
        Ok(())
    }

    /// Reads every record. Unreadable lines, such as a partially written
    /// final line, are skipped with a warning. A missing file is an empty
    /// store.
    pub fn read(&self) -> Result<StoreContents> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(StoreContents::default()),
            Err(e) => return Err(CliError::file(&self.path, e)),
        };
        let mut out = StoreContents::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| CliError::file(&self.path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match MeasurementResult::from_line(&line) {
                Ok(r) => out.records.push(r),
                Err(error) => {
                    warn!("{}: skipping line {}: {error}", self.path.display(), i + 1);
                    out.skipped.push(SkippedLine { line_no: i + 1, error });
                }
            }
        }
        Ok(out)
    }
}

fn ends_with_newline(path: &Path) -> Result<bool> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = File::open(path).map_err(|e| CliError::file(path, e))?;
    f.seek(SeekFrom::End(-1))?;
    let mut last = [0u8; 1];
    f.read_exact(&mut last)?;
    Ok(last[0] == b'\n')
}
