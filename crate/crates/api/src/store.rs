//! Append-only JSON-lines log of service requests.
//!
//! Every state change appends a full snapshot of the record; replay keeps
//! the last line per id. A final line that does not parse is a write
//! interrupted mid-record: it is dropped with a warning and cut from the
//! file so later appends start on a clean line.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use chrono::Utc;
use thiserror::Error;

use crate::requests::{RequestKind, RequestPayload, RequestStatus, ServiceRequest};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("request {0} not found")]
    NotFound(u64),
    #[error("request {0} is already closed")]
    AlreadyClosed(u64),
    #[error("{path}: line {line} is not a valid request record: {reason}")]
    Corrupt { path: String, line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Rebuilt state of a log.
#[derive(Debug, Default)]
pub struct Replay {
    pub records: BTreeMap<u64, ServiceRequest>,
    /// Byte length of the valid prefix.
    pub valid_len: u64,
    pub warnings: Vec<String>,
}

/// Replays log bytes; only the final line may be damaged.
pub fn replay(bytes: &[u8], path: &str) -> Result<Replay> {
    let mut out = Replay::default();
    let mut offset = 0usize;
    let mut lines = bytes.split_inclusive(|b| *b == b'\n').enumerate().peekable();
    while let Some((i, raw)) = lines.next() {
        let is_last = lines.peek().is_none();
        let text = std::str::from_utf8(raw).map(str::trim);
        let parsed = match text {
            Ok("") => {
                offset += raw.len();
                continue;
            }
            Ok(t) => serde_json::from_str::<ServiceRequest>(t).map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        };
        match parsed {
            Ok(record) => {
                out.records.insert(record.id, record);
                offset += raw.len();
            }
            Err(reason) if is_last => {
                out.warnings.push(format!(
                    "{path}: ignoring truncated final line {} ({reason})",
                    i + 1
                ));
            }
            Err(reason) => {
                return Err(StoreError::Corrupt {
                    path: path.to_string(),
                    line: i + 1,
                    reason,
                })
            }
        }
    }
    out.valid_len = offset as u64;
    Ok(out)
}

pub struct RequestStore {
    path: PathBuf,
    file: File,
    len: u64,
    records: BTreeMap<u64, ServiceRequest>,
    next_id: u64,
}

impl RequestStore {
    /// Opens or creates the log and rebuilds state. Returns replay warnings.
    pub fn open(path: &Path) -> Result<(Self, Vec<String>)> {
        let io_err = |source| StoreError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err)?;
        let state = replay(&bytes, &path.display().to_string())?;
        let mut valid_len = state.valid_len;
        if valid_len < bytes.len() as u64 {
            file.set_len(valid_len).map_err(io_err)?;
        }
        // A final record written without its newline still counts; terminate it.
        if valid_len > 0 && bytes[valid_len as usize - 1] != b'\n' {
            file.write_all(b"\n").and_then(|_| file.sync_data()).map_err(io_err)?;
            valid_len += 1;
        }
        let next_id = state.records.keys().next_back().map_or(1, |id| id + 1);
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
                len: valid_len,
                records: state.records,
                next_id,
            },
            state.warnings,
        ))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one snapshot; on failure the file is cut back so no partial
    /// line survives.
    fn append(&mut self, record: &ServiceRequest) -> Result<()> {
        let mut line = serde_json::to_vec(record).expect("plain data serializes");
        line.push(b'\n');
        let written = self.file.write_all(&line).and_then(|_| self.file.sync_data());
        if let Err(source) = written {
            let _ = self.file.set_len(self.len);
            return Err(StoreError::Io {
                path: self.path.display().to_string(),
                source,
            });
        }
        self.len += line.len() as u64;
        Ok(())
    }

    pub fn create(&mut self, payload: RequestPayload) -> Result<ServiceRequest> {
        let record = ServiceRequest {
            id: self.next_id,
            payload,
            status: RequestStatus::Open,
            created_at: Utc::now(),
        };
        self.append(&record)?;
        self.next_id += 1;
        self.records.insert(record.id, record.clone());
        Ok(record)
    }

    pub fn close(&mut self, id: u64) -> Result<ServiceRequest> {
        let current = self.records.get(&id).ok_or(StoreError::NotFound(id))?;
        if current.status == RequestStatus::Closed {
            return Err(StoreError::AlreadyClosed(id));
        }
        let closed = ServiceRequest {
            status: RequestStatus::Closed,
            ..current.clone()
        };
        self.append(&closed)?;
        self.records.insert(id, closed.clone());
        Ok(closed)
    }

    pub fn get(&self, id: u64) -> Option<&ServiceRequest> {
        self.records.get(&id)
    }

    /// All records in id order, optionally restricted to one kind.
    pub fn list(&self, kind: Option<RequestKind>) -> Vec<&ServiceRequest> {
        self.records
            .values()
            .filter(|r| kind.map_or(true, |k| r.payload.kind() == k))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
