//! Append-only JSONL event log with torn-tail recovery.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use acute_core::run::EventRecord;

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
}

/// Result of reading a log back.
#[derive(Debug)]
pub struct Recovered {
    pub records: Vec<EventRecord>,
    /// Bytes dropped from an incomplete final line.
    pub truncated_bytes: u64,
}

impl EventLog {
    /// Creates a new, empty log. Fails if the file exists.
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .create_new(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(EventLog {
            path: path.to_owned(),
            file,
        })
    }

    /// Reads an existing log, cutting off a torn final line, and reopens it
    /// for appending.
    pub fn open(path: &Path) -> Result<(Self, Recovered)> {
        let recovered = recover(path)?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok((
            EventLog {
                path: path.to_owned(),
                file,
            },
            recovered,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes a batch of records and syncs them to disk.
    pub fn append(&mut self, records: &[EventRecord]) -> Result<()> {
        if records.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).map_err(|e| Error::Runtime(e.to_string()))?;
            buf.push(b'\n');
        }
        self.file
            .write_all(&buf)
            .and_then(|_| self.file.sync_data())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses a log file without modifying it. A final line that is
/// unterminated or does not parse is treated as a torn write and skipped; a
/// bad line anywhere else is an error.
pub fn read(path: &Path) -> Result<Recovered> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;

    let mut records = Vec::new();
    let mut good_end = 0usize;
    let mut pos = 0usize;
    let mut line_no = 0usize;
    while pos < bytes.len() {
        line_no += 1;
        let (line, next, terminated) = match bytes[pos..].iter().position(|&b| b == b'\n') {
            Some(i) => (&bytes[pos..pos + i], pos + i + 1, true),
            None => (&bytes[pos..], bytes.len(), false),
        };
        let is_last = next >= bytes.len();
        if line.iter().all(u8::is_ascii_whitespace) {
            if terminated {
                good_end = next;
            }
            pos = next;
            continue;
        }
        match serde_json::from_slice::<EventRecord>(line) {
            Ok(r) if terminated => {
                records.push(r);
                good_end = next;
            }
            Ok(_) | Err(_) if is_last => break,
            Err(e) => {
                return Err(Error::Data(format!(
                    "{}:{line_no}: corrupt event record: {e}",
                    path.display()
                )))
            }
            Ok(_) => unreachable!("unterminated line is always last"),
        }
        pos = next;
    }

    Ok(Recovered {
        records,
        truncated_bytes: (bytes.len() - good_end) as u64,
    })
}

/// Like [`read`], but also cuts a torn final line off the file.
pub fn recover(path: &Path) -> Result<Recovered> {
    let recovered = read(path)?;
    if recovered.truncated_bytes > 0 {
        log::warn!(
            "{}: dropping {} bytes of incomplete final record",
            path.display(),
            recovered.truncated_bytes
        );
        let len = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
        OpenOptions::new()
            .write(true)
            .open(path)
            .and_then(|f| {
                f.set_len(len - recovered.truncated_bytes)?;
                f.sync_all()
            })
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(recovered)
}
