//! The five production tests, run against anything speaking the wire
//! protocol: baseline, threshold-DAC and pulser-DAC calibration, gain and
//! dead-channel detection.
//!
//! A [`Scanner`] owns the link to one board. Every test writes the
//! configurations it needs and restores the operating configuration
//! afterwards, on success and on error.

mod baseline;
mod classify;
mod dac;
mod dead;
mod gain;
mod report;

use std::collections::BTreeSet;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use classify::{
    classify_board, classify_present, Classification, ClassifyLimits, Reason, SuiteReports, Verdict,
};
pub use baseline::{sample_stats, OUTLIER_STDS, THRESHOLD_MARGIN_MV};
pub use report::*;

use crate::config::{self, VmmConfig, CHANNELS_PER_VMM};
use crate::crc::crc32;
use crate::device::HitRecord;
use crate::emulator::{BoardDescriptor, BoardType};
use crate::exec::Exec;
use crate::fit::FitError;
use crate::link::{Link, LinkError, Transcript};
use crate::wire::{Frame, Message};

#[derive(Debug, Error)]
pub enum ScanError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("no response to {request} after retries")]
    Timeout { request: &'static str },
    #[error("board rejected {request} with error code {code:#06x}")]
    Board { request: &'static str, code: u16 },
    #[error("a scan is already in progress on {0}")]
    Busy(String),
    #[error("invalid scan parameters: {0}")]
    InvalidParams(String),
    #[error("every channel errored")]
    AllChannelsErrored,
    #[error("fit failed: {0}")]
    Fit(#[from] FitError),
    #[error("unexpected board response: {0}")]
    UnexpectedBoard(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanParams {
    pub baseline_samples: u16,
    pub dac_sweep: Vec<u16>,
    pub samples_per_point: u16,
    pub gain_charges_fc: Vec<f64>,
    pub gain_pulses: u32,
    pub gain_tolerance: f64,
    pub dead_pulses: u32,
    pub dead_ratio: f64,
    pub noisy_ratio: f64,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self {
            baseline_samples: 100,
            dac_sweep: (0..=1023).step_by(64).collect(),
            samples_per_point: 16,
            gain_charges_fc: vec![10.0, 20.0, 40.0, 80.0],
            gain_pulses: 32,
            gain_tolerance: 0.10,
            dead_pulses: 1000,
            dead_ratio: 0.5,
            noisy_ratio: 2.0,
            timeout_ms: 500,
            retries: 3,
        }
    }
}

impl ScanParams {
    pub fn validate(&self) -> Result<(), ScanError> {
        let bad = |m: &str| Err(ScanError::InvalidParams(m.to_string()));
        if self.baseline_samples < 2 {
            return bad("baseline_samples must be at least 2");
        }
        if self.dac_sweep.len() < 2 || self.dac_sweep.windows(2).any(|w| w[0] >= w[1]) {
            return bad("dac_sweep must hold at least 2 strictly increasing codes");
        }
        if self.dac_sweep.iter().any(|&c| c > 1023) {
            return bad("dac_sweep codes must be at most 1023");
        }
        if self.samples_per_point == 0 {
            return bad("samples_per_point must be positive");
        }
        if self.gain_charges_fc.len() < 2 || self.gain_charges_fc.iter().any(|&q| !(q > 0.0)) {
            return bad("gain_charges_fc needs at least 2 positive charges");
        }
        if self.gain_pulses == 0 || self.dead_pulses == 0 {
            return bad("pulse counts must be positive");
        }
        if !(self.dead_ratio > 0.0 && self.dead_ratio < 1.0) {
            return bad("dead_ratio must lie in (0, 1)");
        }
        if !(self.gain_tolerance > 0.0) || !(self.noisy_ratio > 1.0) {
            return bad("gain_tolerance must be positive and noisy_ratio above 1");
        }
        Ok(())
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

/// Operating configuration the board returns to between tests.
pub fn default_operating_config() -> VmmConfig {
    let mut cfg = VmmConfig::default();
    cfg.global.gain_sel = 2;
    cfg.global.peak_time_sel = 1;
    cfg.global.threshold_dac = 250;
    cfg.global.monitor_enable = true;
    cfg.global.acq_enable = true;
    cfg
}

static ACTIVE_SCANS: Mutex<BTreeSet<String>> = Mutex::new(BTreeSet::new());

/// Held for the duration of one scan on one endpoint.
#[derive(Debug)]
pub struct EndpointLock(String);

impl EndpointLock {
    pub fn acquire(endpoint: &str) -> Result<Self, ScanError> {
        let mut active = ACTIVE_SCANS.lock().expect("scan registry");
        if !active.insert(endpoint.to_string()) {
            return Err(ScanError::Busy(endpoint.to_string()));
        }
        Ok(Self(endpoint.to_string()))
    }
}

impl Drop for EndpointLock {
    fn drop(&mut self) {
        ACTIVE_SCANS.lock().expect("scan registry").remove(&self.0);
    }
}

/// Per-channel hit counts and pdo sums, indexed by board channel.
#[derive(Debug, Clone)]
pub(crate) struct HitTally {
    pub counts: Vec<u64>,
    pub pdo_sum: Vec<u64>,
}

impl HitTally {
    fn new() -> Self {
        let n = 8 * CHANNELS_PER_VMM;
        Self {
            counts: vec![0; n],
            pdo_sum: vec![0; n],
        }
    }

    fn record(&mut self, hits: &[HitRecord]) {
        for h in hits {
            let i = h.vmm as usize * CHANNELS_PER_VMM + h.channel as usize;
            self.counts[i] += 1;
            self.pdo_sum[i] += h.pdo as u64;
        }
    }

    fn clear(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.pdo_sum.iter_mut().for_each(|c| *c = 0);
    }
}

/// Largest number of hits left in flight between barriers.
const HIT_BUDGET: u64 = 16_000;

pub struct Scanner {
    link: Link,
    params: ScanParams,
    board: BoardDescriptor,
    base: Vec<VmmConfig>,
    current: Vec<Option<VmmConfig>>,
    running: Option<bool>,
    seq: u32,
    tally: HitTally,
    exec: Exec,
}

impl Scanner {
    /// Queries the board type and writes `operating` to every VMM.
    pub fn connect(link: Link, params: ScanParams, operating: VmmConfig) -> Result<Self, ScanError> {
        params.validate()?;
        config::encode(&operating).map_err(|e| ScanError::InvalidParams(e.to_string()))?;
        let mut s = Self {
            link,
            params,
            board: BoardDescriptor::from(BoardType::Pfeb),
            base: Vec::new(),
            current: Vec::new(),
            running: None,
            seq: 0,
            tally: HitTally::new(),
            exec: Exec::default(),
        };
        let (board_type, _) = s.status()?;
        s.board = BoardDescriptor::from(board_type);
        s.base = vec![operating; s.board.n_vmm];
        s.current = vec![None; s.board.n_vmm];
        s.restore()?;
        Ok(s)
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn board(&self) -> BoardDescriptor {
        self.board
    }

    pub fn params(&self) -> &ScanParams {
        &self.params
    }

    pub fn set_params(&mut self, params: ScanParams) -> Result<(), ScanError> {
        params.validate()?;
        self.params = params;
        Ok(())
    }

    pub fn operating_configs(&self) -> &[VmmConfig] {
        &self.base
    }

    /// Replaces the operating configuration of one VMM and writes it.
    pub fn set_operating_config(&mut self, vmm: usize, cfg: VmmConfig) -> Result<(), ScanError> {
        if vmm >= self.board.n_vmm {
            return Err(ScanError::InvalidParams(format!("vmm {vmm} out of range")));
        }
        config::encode(&cfg).map_err(|e| ScanError::InvalidParams(e.to_string()))?;
        self.base[vmm] = cfg.clone();
        self.write_config(vmm, &cfg)
    }

    pub fn transcript(&self) -> Transcript {
        self.link.transcript()
    }

    pub fn take_transcript(&self) -> Transcript {
        self.link.take_transcript()
    }

    pub fn into_link(self) -> Link {
        self.link
    }

    pub fn link(&self) -> &Link {
        &self.link
    }

    /// Starts or stops acquisition outside of a scan.
    pub fn set_acquisition(&mut self, on: bool) -> Result<(), ScanError> {
        // the board may have been driven by someone else meanwhile
        self.running = None;
        self.set_run(on)
    }

    /// Programs the signal board outside of a scan.
    pub fn configure_signal_board(&mut self, mode: u8, amplitude_counts: u16, seed: u32) -> Result<(), ScanError> {
        self.set_signal_board(mode, amplitude_counts, seed)
    }

    /// Fires pulses outside of a scan and waits until the resulting hits
    /// have arrived. `hits_per_pulse` only sizes the chunks.
    pub fn trigger(&mut self, count: u32, period_us: u32, hits_per_pulse: u64) -> Result<(), ScanError> {
        self.fire(count, period_us, hits_per_pulse)
    }

    /// Queries board type and run state.
    pub fn board_status(&mut self) -> Result<(BoardType, bool), ScanError> {
        self.status()
    }

    fn next_seq(&mut self) -> u32 {
        self.seq = self.seq.wrapping_add(1);
        self.seq
    }

    /// Sends `message` and waits for a reply accepted by `want`. HIT_DATA
    /// arriving meanwhile goes to the tally. ERROR frames referencing this
    /// request (or `watch`) abort it. Idempotent requests are retried.
    fn request<T>(
        &mut self,
        message: Message,
        idempotent: bool,
        watch: Option<u32>,
        mut want: impl FnMut(&Message) -> Option<T>,
    ) -> Result<T, ScanError> {
        let name = message.name();
        let attempts = if idempotent { 1 + self.params.retries } else { 1 };
        let timeout = self.params.timeout();
        for _ in 0..attempts {
            let seq = self.next_seq();
            self.link.send(&Frame::new(seq, message.clone()))?;
            let mut deadline = Instant::now() + timeout;
            loop {
                let now = Instant::now();
                if now >= deadline {
                    break;
                }
                let Some(frame) = self.link.recv(deadline - now)? else {
                    break;
                };
                // any traffic shows the board is alive
                deadline = Instant::now() + timeout;
                match &frame.message {
                    Message::HitData(hits) => self.tally.record(hits),
                    Message::Error { code, seq_ref } if *seq_ref == seq || Some(*seq_ref) == watch => {
                        return Err(ScanError::Board { request: name, code: *code });
                    }
                    other => {
                        if let Some(t) = want(other) {
                            return Ok(t);
                        }
                    }
                }
            }
        }
        Err(ScanError::Timeout { request: name })
    }

    fn status(&mut self) -> Result<(BoardType, bool), ScanError> {
        self.request(Message::StatusReq, true, None, |m| match m {
            Message::StatusResp { board_type, run_state, .. } => Some((*board_type, *run_state)),
            _ => None,
        })
        .and_then(|(bt, rs)| {
            let bt = BoardType::from_wire_code(bt)
                .ok_or_else(|| ScanError::UnexpectedBoard(format!("board type code {bt}")))?;
            Ok((bt, rs != 0))
        })
    }

    fn write_config(&mut self, vmm: usize, cfg: &VmmConfig) -> Result<(), ScanError> {
        if self.current[vmm].as_ref() == Some(cfg) {
            return Ok(());
        }
        let bitstream = Box::new(config::encode(cfg).map_err(|e| ScanError::InvalidParams(e.to_string()))?);
        let crc = crc32(&bitstream[..]);
        let v = vmm as u8;
        // a failed write leaves the board state unknown
        self.current[vmm] = None;
        self.request(Message::ConfigWrite { vmm: v, bitstream }, true, None, |m| match m {
            Message::ConfigAck { vmm, crc: c } if *vmm == v && *c == crc => Some(()),
            _ => None,
        })?;
        self.current[vmm] = Some(cfg.clone());
        Ok(())
    }

    fn sample_xadc(&mut self, vmm: usize, n: u16) -> Result<Vec<u16>, ScanError> {
        let v = vmm as u8;
        self.request(Message::XadcReq { vmm: v, n_samples: n }, true, None, |m| match m {
            Message::XadcResp { vmm, codes } if *vmm == v && codes.len() == n as usize => Some(codes.clone()),
            _ => None,
        })
    }

    fn set_run(&mut self, on: bool) -> Result<(), ScanError> {
        if self.running == Some(on) {
            return Ok(());
        }
        self.running = None;
        let msg = if on { Message::RunStart } else { Message::RunStop };
        let want = on as u8;
        self.request(msg, true, None, |m| match m {
            Message::StatusResp { run_state, .. } if *run_state == want => Some(()),
            _ => None,
        })?;
        self.running = Some(on);
        Ok(())
    }

    fn set_signal_board(&mut self, mode: u8, amplitude_counts: u16, seed: u32) -> Result<(), ScanError> {
        self.request(
            Message::SigboardSet { mode, amplitude_counts, seed },
            true,
            None,
            |m| matches!(m, Message::StatusResp { .. }).then_some(()),
        )
    }

    /// Fires `count` pulse cycles in chunks small enough that at most
    /// [`HIT_BUDGET`] hits are in flight, waiting on a status barrier after
    /// each chunk so every hit of the chunk has been tallied.
    fn fire(&mut self, count: u32, period_us: u32, hits_per_pulse: u64) -> Result<(), ScanError> {
        let chunk = (HIT_BUDGET / hits_per_pulse.max(1)).clamp(1, u32::MAX as u64) as u32;
        let mut left = count;
        while left > 0 {
            let n = left.min(chunk);
            let trigger = self.next_seq();
            self.link.send(&Frame::new(
                trigger,
                Message::PulseTrigger { count: n, period_us },
            ))?;
            self.request(Message::StatusReq, false, Some(trigger), |m| {
                matches!(m, Message::StatusResp { .. }).then_some(())
            })?;
            left -= n;
        }
        Ok(())
    }

    /// Writes back the operating configuration, stops acquisition and
    /// silences the signal board.
    pub fn restore(&mut self) -> Result<(), ScanError> {
        self.set_signal_board(2, 0, 0)?;
        self.set_run(false)?;
        for v in 0..self.board.n_vmm {
            let cfg = self.base[v].clone();
            self.write_config(v, &cfg)?;
        }
        Ok(())
    }

    /// Runs `body` under the endpoint lock and always restores afterwards.
    fn scan<T>(&mut self, body: impl FnOnce(&mut Self) -> Result<T, ScanError>) -> Result<T, ScanError> {
        let _lock = EndpointLock::acquire(self.link.name())?;
        let result = body(self);
        let restored = self.restore();
        let value = result?;
        restored?;
        Ok(value)
    }

    /// Runs all five tests in dependency order and classifies the board.
    pub fn run_all(&mut self) -> Result<SuiteReport, ScanError> {
        let mut baseline = self.run_baseline_scan()?;
        let threshold = self.run_dac_calibration(DacTarget::Threshold)?;
        baseline.suggest_thresholds(&threshold);
        let pulser = self.run_dac_calibration(DacTarget::Pulser)?;
        let gain = self.run_gain_test(&baseline, &pulser)?;
        let dead = self.run_dead_channel_test(&baseline, &threshold)?;
        let reports = SuiteReports {
            baseline: Some(baseline),
            threshold: Some(threshold),
            pulser: Some(pulser),
            gain: Some(gain),
            dead: Some(dead),
        };
        let classification = classify_board(&reports, &ClassifyLimits::from_params(&self.params));
        Ok(SuiteReport {
            board: self.board,
            reports,
            classification,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub board: BoardDescriptor,
    pub reports: SuiteReports,
    pub classification: Classification,
}

/// One of the five tests, or the whole suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    Baseline,
    Threshold,
    Pulser,
    Gain,
    Dead,
    All,
}

impl TestKind {
    pub const ALL: [TestKind; 6] = [
        TestKind::Baseline,
        TestKind::Threshold,
        TestKind::Pulser,
        TestKind::Gain,
        TestKind::Dead,
        TestKind::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestKind::Baseline => "baseline",
            TestKind::Threshold => "threshold",
            TestKind::Pulser => "pulser",
            TestKind::Gain => "gain",
            TestKind::Dead => "dead",
            TestKind::All => "all",
        }
    }
}

impl std::str::FromStr for TestKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TestKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown test `{s}` (expected baseline, threshold, pulser, gain, dead or all)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "test", content = "report", rename_all = "lowercase")]
pub enum TestReport {
    Baseline(BaselineReport),
    Threshold(DacCalibrationReport),
    Pulser(DacCalibrationReport),
    Gain(GainReport),
    Dead(DeadChannelReport),
    All(SuiteReport),
}

impl TestReport {
    pub fn kind(&self) -> TestKind {
        match self {
            TestReport::Baseline(_) => TestKind::Baseline,
            TestReport::Threshold(_) => TestKind::Threshold,
            TestReport::Pulser(_) => TestKind::Pulser,
            TestReport::Gain(_) => TestKind::Gain,
            TestReport::Dead(_) => TestKind::Dead,
            TestReport::All(_) => TestKind::All,
        }
    }

    /// Suite verdict for `All`; a verdict over the single report otherwise.
    pub fn classification(&self, limits: &ClassifyLimits) -> Classification {
        let mut r = SuiteReports::default();
        match self {
            TestReport::All(s) => return s.classification.clone(),
            TestReport::Baseline(b) => r.baseline = Some(b.clone()),
            TestReport::Threshold(t) => r.threshold = Some(t.clone()),
            TestReport::Pulser(p) => r.pulser = Some(p.clone()),
            TestReport::Gain(g) => r.gain = Some(g.clone()),
            TestReport::Dead(d) => r.dead = Some(d.clone()),
        }
        classify_present(&r, limits)
    }
}

impl Scanner {
    /// Runs one test, running whatever prerequisite tests it needs first.
    pub fn run_test(&mut self, kind: TestKind) -> Result<TestReport, ScanError> {
        Ok(match kind {
            TestKind::Baseline => TestReport::Baseline(self.run_baseline_scan()?),
            TestKind::Threshold => TestReport::Threshold(self.run_dac_calibration(DacTarget::Threshold)?),
            TestKind::Pulser => TestReport::Pulser(self.run_dac_calibration(DacTarget::Pulser)?),
            TestKind::Gain => {
                let baseline = self.run_baseline_scan()?;
                let pulser = self.run_dac_calibration(DacTarget::Pulser)?;
                TestReport::Gain(self.run_gain_test(&baseline, &pulser)?)
            }
            TestKind::Dead => {
                let baseline = self.run_baseline_scan()?;
                let threshold = self.run_dac_calibration(DacTarget::Threshold)?;
                TestReport::Dead(self.run_dead_channel_test(&baseline, &threshold)?)
            }
            TestKind::All => TestReport::All(self.run_all()?),
        })
    }
}
