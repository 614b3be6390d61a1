//! Impression log: one JSON object per line, fields in declaration order.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::simulation::Impression;

/// Append-only impression log writer.
pub struct ImpressionWriter {
    out: BufWriter<File>,
    last_id: Option<u64>,
}

impl ImpressionWriter {
    /// Create (truncate) the log at `path`.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
            last_id: None,
        })
    }

    /// Open an existing log for appending.
    pub fn append_to(path: impl AsRef<Path>) -> Result<Self> {
        let last_id = read_impressions(path.as_ref())?.last().map(|i| i.impression_id);
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
            last_id,
        })
    }

    pub fn append(&mut self, imp: &Impression) -> Result<()> {
        if self.last_id.is_some_and(|last| imp.impression_id <= last) {
            return Err(Error::Validation(format!(
                "impression_id {} does not follow {}",
                imp.impression_id,
                self.last_id.unwrap_or_default()
            )));
        }
        serde_json::to_writer(&mut self.out, imp)?;
        self.out.write_all(b"\n")?;
        self.last_id = Some(imp.impression_id);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_impressions(log: &[Impression], path: impl AsRef<Path>) -> Result<()> {
    let mut w = ImpressionWriter::create(path)?;
    for imp in log {
        w.append(imp)?;
    }
    w.flush()
}

/// Read a log, checking that every line parses, labels are binary and
/// impression ids strictly increase.
pub fn read_impressions(path: impl AsRef<Path>) -> Result<Vec<Impression>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<Impression> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let imp: Impression = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if imp.label > 1 {
            return Err(Error::Validation(format!("line {lineno}: label {} is not binary", imp.label)));
        }
        if let Some(prev) = out.last() {
            if imp.impression_id <= prev.impression_id {
                return Err(Error::Validation(format!(
                    "line {lineno}: impression_id {} does not follow {}",
                    imp.impression_id, prev.impression_id
                )));
            }
        }
        out.push(imp);
    }
    Ok(out)
}
