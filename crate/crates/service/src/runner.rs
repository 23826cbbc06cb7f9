//! One recorded run: execute a test, write its report files and build the
//! run-log record.

use std::io;
use std::path::Path;

use chrono::Utc;
use feb_core::archive::{self, ReportFile, SCHEMA_VERSION};
use feb_core::scan::{ClassifyLimits, ScanError, Scanner, TestKind};
use feb_core::store::{RunRecord, RunSummary};
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error("writing report files: {0}")]
    Io(#[from] io::Error),
}

pub struct Completed {
    pub report: ReportFile,
    pub record: RunRecord,
}

/// Runs `kind` with transcript capture on, then writes the report and
/// transcript into `data_dir`. The caller appends the record to the log.
pub fn execute(
    scanner: &mut Scanner,
    kind: TestKind,
    board_id: &str,
    run_id: Uuid,
    data_dir: &Path,
) -> Result<Completed, RunError> {
    let was_recording = scanner.link().is_recording();
    scanner.take_transcript();
    scanner.link().set_recording(true);
    let started = Utc::now();
    let outcome = scanner.run_test(kind);
    let finished = Utc::now();
    scanner.link().set_recording(was_recording);
    let transcript = scanner.take_transcript();
    let report = outcome?;

    let params = scanner.params().clone();
    let classification = report.classification(&ClassifyLimits::from_params(&params));
    let file = ReportFile {
        schema_version: SCHEMA_VERSION,
        run_id,
        board_id: board_id.to_string(),
        board: scanner.board(),
        started,
        finished,
        params,
        classification,
        report,
    };
    let files = archive::write_report(data_dir, &file, &transcript)?;
    let record = RunRecord {
        run_id,
        board_id: board_id.to_string(),
        board_type: file.board.board_type,
        test: kind,
        started,
        finished,
        files: files.to_vec(),
        summary: RunSummary {
            verdict: file.classification.verdict,
            reasons: file.classification.reasons.iter().map(|r| r.to_string()).collect(),
        },
    };
    Ok(Completed { report: file, record })
}
