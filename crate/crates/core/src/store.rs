//! Append-only run log.
//!
//! Every completed run becomes one JSON line in `runs.log` inside the data
//! directory. The log alone is enough to rebuild the store; report files
//! referenced by a record live next to it.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::emulator::BoardType;
use crate::scan::{TestKind, Verdict};

pub const RUN_LOG: &str = "runs.log";
pub const QUARANTINE: &str = "runs.log.quarantine";
pub const DATA_DIR_ENV: &str = "FEB_SCAN_DATA";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
    #[error("run log line {line} is corrupt: {message}")]
    Corrupt { line: usize, message: String },
    #[error("a run for board `{board_id}` started at {started} is already recorded")]
    Duplicate { board_id: String, started: DateTime<Utc> },
    #[error("run id {0} already exists")]
    DuplicateId(Uuid),
    #[error("invalid record: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub verdict: Verdict,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: Uuid,
    pub board_id: String,
    pub board_type: BoardType,
    pub test: TestKind,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    /// Report and transcript file names, relative to the data directory.
    pub files: Vec<String>,
    pub summary: RunSummary,
}

impl RunRecord {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.board_id.is_empty() {
            return Err(StoreError::Invalid("empty board_id".into()));
        }
        if self.board_id.contains(['\n', '\r']) {
            return Err(StoreError::Invalid("board_id contains a line break".into()));
        }
        if self.finished < self.started {
            return Err(StoreError::Invalid("finished before started".into()));
        }
        Ok(())
    }
}

/// Data directory from `FEB_SCAN_DATA`, or `./feb-data` when unset.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("feb-data"))
}

pub struct Store {
    dir: PathBuf,
    log: File,
    records: Vec<RunRecord>,
    by_board: BTreeMap<String, Vec<usize>>,
    ids: HashSet<Uuid>,
    keys: HashSet<(String, DateTime<Utc>)>,
    quarantined: usize,
}

impl Store {
    /// Opens (creating if needed) the store in `dir`. A torn final line left
    /// by a crash is moved to the quarantine file and cut from the log.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let path = dir.join(RUN_LOG);
        let log = OpenOptions::new().read(true).append(true).create(true).open(&path)?;

        let raw = fs::read(&path)?;
        let mut records = Vec::new();
        let mut good_len = 0usize;
        let mut quarantined = 0;
        let mut offset = 0usize;
        let mut line_no = 0;
        while offset < raw.len() {
            line_no += 1;
            let end = raw[offset..].iter().position(|&b| b == b'\n').map(|p| offset + p);
            let line = &raw[offset..end.unwrap_or(raw.len())];
            let parsed = std::str::from_utf8(line)
                .map_err(|e| e.to_string())
                .and_then(|l| serde_json::from_str::<RunRecord>(l).map_err(|e| e.to_string()));
            match (parsed, end) {
                (Ok(rec), Some(end)) => {
                    records.push(rec);
                    offset = end + 1;
                    good_len = offset;
                }
                (result, end) => {
                    let is_last = end.is_none_or(|e| raw[e + 1..].iter().all(u8::is_ascii_whitespace));
                    if !is_last {
                        let message = result.err().unwrap_or_else(|| "unterminated".into());
                        return Err(StoreError::Corrupt { line: line_no, message });
                    }
                    warn!("quarantining torn run-log record at line {line_no}");
                    let mut q = OpenOptions::new().append(true).create(true).open(dir.join(QUARANTINE))?;
                    q.write_all(&raw[offset..])?;
                    if raw.last() != Some(&b'\n') {
                        q.write_all(b"\n")?;
                    }
                    q.sync_all()?;
                    log.set_len(good_len as u64)?;
                    log.sync_all()?;
                    quarantined = 1;
                    break;
                }
            }
        }

        let mut store = Self {
            dir,
            log,
            records: Vec::new(),
            by_board: BTreeMap::new(),
            ids: HashSet::new(),
            keys: HashSet::new(),
            quarantined,
        };
        for rec in records {
            store.index(rec);
        }
        Ok(store)
    }

    /// Opens the store named by `FEB_SCAN_DATA`, or `./feb-data`.
    pub fn open_default() -> Result<Self, StoreError> {
        Self::open(default_data_dir())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Number of torn records moved aside when the store was opened.
    pub fn quarantined(&self) -> usize {
        self.quarantined
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn index(&mut self, rec: RunRecord) {
        self.ids.insert(rec.run_id);
        self.keys.insert((rec.board_id.clone(), rec.started));
        self.by_board.entry(rec.board_id.clone()).or_default().push(self.records.len());
        self.records.push(rec);
    }

    /// Appends `record` and syncs it to disk before returning its id.
    pub fn append(&mut self, record: RunRecord) -> Result<Uuid, StoreError> {
        record.validate()?;
        if self.ids.contains(&record.run_id) {
            return Err(StoreError::DuplicateId(record.run_id));
        }
        if self.keys.contains(&(record.board_id.clone(), record.started)) {
            return Err(StoreError::Duplicate {
                board_id: record.board_id,
                started: record.started,
            });
        }
        let mut line = serde_json::to_vec(&record).map_err(|e| StoreError::Invalid(e.to_string()))?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()?;
        let id = record.run_id;
        self.index(record);
        Ok(id)
    }

    /// Runs of one board ordered by start time.
    pub fn query(&self, board_id: &str) -> Vec<RunRecord> {
        let mut out: Vec<RunRecord> = self
            .by_board
            .get(board_id)
            .map(|idx| idx.iter().map(|&i| self.records[i].clone()).collect())
            .unwrap_or_default();
        out.sort_by_key(|r| r.started);
        out
    }

    pub fn get(&self, run_id: Uuid) -> Option<&RunRecord> {
        self.records.iter().rev().find(|r| r.run_id == run_id)
    }

    pub fn boards(&self) -> impl Iterator<Item = &str> {
        self.by_board.keys().map(String::as_str)
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }
}
