//! Per-run report files: `<board>_<test>_<timestamp>.json` plus the raw
//! frame transcript as `<board>_<test>_<timestamp>.hex`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::emulator::BoardDescriptor;
use crate::link::Transcript;
use crate::scan::{Classification, ScanParams, TestKind, TestReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub run_id: Uuid,
    pub board_id: String,
    pub board: BoardDescriptor,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub params: ScanParams,
    pub classification: Classification,
    #[serde(flatten)]
    pub report: TestReport,
}

impl ReportFile {
    pub fn test(&self) -> TestKind {
        self.report.kind()
    }
}

/// Keeps board ids usable as file-name components.
fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

pub fn report_stem(board_id: &str, test: TestKind, started: DateTime<Utc>) -> String {
    format!(
        "{}_{}_{}",
        file_safe(board_id),
        test.name(),
        started.format("%Y%m%dT%H%M%S%.3fZ")
    )
}

/// Writes the report and its transcript into `dir`; returns both file names.
pub fn write_report(dir: &Path, report: &ReportFile, transcript: &Transcript) -> io::Result<[String; 2]> {
    fs::create_dir_all(dir)?;
    let stem = report_stem(&report.board_id, report.test(), report.started);
    let json_name = format!("{stem}.json");
    let hex_name = format!("{stem}.hex");
    let json = serde_json::to_vec_pretty(report).map_err(io::Error::other)?;
    write_synced(&dir.join(&json_name), &json)?;
    write_synced(&dir.join(&hex_name), transcript.to_hex_text().as_bytes())?;
    Ok([json_name, hex_name])
}

fn write_synced(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}

pub fn read_report(path: impl AsRef<Path>) -> io::Result<ReportFile> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub fn read_transcript(path: impl AsRef<Path>) -> io::Result<Transcript> {
    let text = fs::read_to_string(path)?;
    Transcript::parse_hex_text(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Path of a report file name recorded in the run log.
pub fn resolve(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
