//! Live hit statistics for the operator view.
//!
//! The link's acquisition thread is the only writer: it folds each HIT_DATA
//! batch into per-channel counters and per-channel pdo histograms. Readers
//! take snapshots. [`DeltaTracker`] turns successive snapshots into the
//! deltas pushed on the event stream, so the deltas received since a reset
//! always sum to the next snapshot.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use feb_core::config::CHANNELS_PER_VMM;
use feb_core::device::HitRecord;
use feb_core::emulator::BoardDescriptor;
use feb_core::link::HitTap;
use feb_core::scan::BoardChannel;
use serde::{Deserialize, Serialize};

pub const HIST_BINS: usize = 64;
pub const PDO_PER_BIN: usize = 1024 / HIST_BINS;
const MAX_CHANNELS: usize = 8 * CHANNELS_PER_VMM;
const RATE_WINDOW: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Stopped,
    Running,
}

/// Snapshot served by `/status`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveStats {
    pub board: Option<BoardDescriptor>,
    /// Bumped by every counter reset.
    pub epoch: u64,
    pub run_state: RunState,
    pub selected: BoardChannel,
    /// `counts[vmm][channel]`.
    pub counts: Vec<Vec<u64>>,
    /// pdo histogram of the selected channel, 16 codes per bin.
    pub histogram: Vec<u64>,
    pub total_hits: u64,
    pub rate_hz: f64,
}

/// One event on `/live`. After a reset (`reset == true`) the counters
/// restart from zero and this delta carries their full values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveDelta {
    pub epoch: u64,
    pub reset: bool,
    pub run_state: RunState,
    pub selected: BoardChannel,
    pub counts: Vec<Vec<u64>>,
    pub histogram: Vec<u64>,
    pub total_hits: u64,
    pub rate_hz: f64,
}

struct State {
    board: Option<BoardDescriptor>,
    epoch: u64,
    running: bool,
    counts: Vec<u64>,
    hist: Vec<[u64; HIST_BINS]>,
    total: u64,
    window_start: Instant,
    window_hits: u64,
    rate_hz: f64,
}

impl State {
    fn n_vmm(&self) -> usize {
        self.board.map_or(0, |b| b.n_vmm)
    }

    fn current_rate(&self, now: Instant) -> f64 {
        let open = now.duration_since(self.window_start);
        if open > 2 * RATE_WINDOW {
            // nothing closed the window for a while, so the rate has fallen
            self.window_hits as f64 / open.as_secs_f64()
        } else {
            self.rate_hz
        }
    }
}

pub struct Aggregator {
    state: Mutex<State>,
}

impl Default for Aggregator {
    fn default() -> Self {
        Self::new()
    }
}

impl Aggregator {
    pub fn new() -> Self {
        Self {
            state: Mutex::new(State {
                board: None,
                epoch: 0,
                running: false,
                counts: vec![0; MAX_CHANNELS],
                hist: vec![[0; HIST_BINS]; MAX_CHANNELS],
                total: 0,
                window_start: Instant::now(),
                window_hits: 0,
                rate_hz: 0.0,
            }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("live stats lock")
    }

    /// Hit tap for [`feb_core::link::LinkOptions`].
    pub fn tap(self: &Arc<Self>) -> HitTap {
        let me = self.clone();
        Arc::new(move |hits: &[HitRecord]| me.record(hits))
    }

    pub fn set_board(&self, board: BoardDescriptor) {
        self.lock().board = Some(board);
    }

    pub fn set_running(&self, on: bool) {
        self.lock().running = on;
    }

    pub fn record(&self, hits: &[HitRecord]) {
        let mut s = self.lock();
        for h in hits {
            let i = h.vmm as usize * CHANNELS_PER_VMM + h.channel as usize;
            if i >= MAX_CHANNELS {
                continue;
            }
            s.counts[i] += 1;
            s.hist[i][(h.pdo as usize / PDO_PER_BIN).min(HIST_BINS - 1)] += 1;
        }
        s.total += hits.len() as u64;
        s.window_hits += hits.len() as u64;
        let now = Instant::now();
        let open = now.duration_since(s.window_start);
        if open >= RATE_WINDOW {
            s.rate_hz = s.window_hits as f64 / open.as_secs_f64();
            s.window_start = now;
            s.window_hits = 0;
        }
    }

    /// Zeroes every counter and starts a new epoch.
    pub fn reset(&self) {
        let mut s = self.lock();
        s.epoch += 1;
        s.counts.iter_mut().for_each(|c| *c = 0);
        s.hist.iter_mut().for_each(|h| *h = [0; HIST_BINS]);
        s.total = 0;
        s.window_start = Instant::now();
        s.window_hits = 0;
        s.rate_hz = 0.0;
    }

    pub fn snapshot(&self, selected: BoardChannel) -> LiveStats {
        let s = self.lock();
        let n_vmm = s.n_vmm();
        LiveStats {
            board: s.board,
            epoch: s.epoch,
            run_state: if s.running { RunState::Running } else { RunState::Stopped },
            selected,
            counts: (0..n_vmm)
                .map(|v| s.counts[v * CHANNELS_PER_VMM..(v + 1) * CHANNELS_PER_VMM].to_vec())
                .collect(),
            histogram: s
                .hist
                .get(selected.index())
                .map_or_else(|| vec![0; HIST_BINS], |h| h.to_vec()),
            total_hits: s.total,
            rate_hz: s.current_rate(Instant::now()),
        }
    }
}

/// Per-subscriber state of the event stream.
pub struct DeltaTracker {
    selected: BoardChannel,
    last: Option<LiveStats>,
}

impl DeltaTracker {
    pub fn new(selected: BoardChannel) -> Self {
        Self { selected, last: None }
    }

    pub fn next(&mut self, agg: &Aggregator) -> LiveDelta {
        let now = agg.snapshot(self.selected);
        let baseline = match &self.last {
            Some(prev) if prev.epoch == now.epoch && prev.counts.len() == now.counts.len() => Some(prev),
            _ => None,
        };
        let delta = match baseline {
            Some(prev) => LiveDelta {
                epoch: now.epoch,
                reset: false,
                run_state: now.run_state,
                selected: now.selected,
                counts: now
                    .counts
                    .iter()
                    .zip(&prev.counts)
                    .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                    .collect(),
                histogram: now.histogram.iter().zip(&prev.histogram).map(|(x, y)| x - y).collect(),
                total_hits: now.total_hits - prev.total_hits,
                rate_hz: now.rate_hz,
            },
            None => LiveDelta {
                epoch: now.epoch,
                reset: true,
                run_state: now.run_state,
                selected: now.selected,
                counts: now.counts.clone(),
                histogram: now.histogram.clone(),
                total_hits: now.total_hits,
                rate_hz: now.rate_hz,
            },
        };
        self.last = Some(now);
        delta
    }
}

/// Folds deltas back into counters; what a stream consumer does.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct DeltaSum {
    pub epoch: u64,
    pub counts: Vec<Vec<u64>>,
    pub histogram: Vec<u64>,
    pub total_hits: u64,
    pub events: usize,
}

impl DeltaSum {
    pub fn apply(&mut self, d: &LiveDelta) {
        self.events += 1;
        if d.reset {
            self.epoch = d.epoch;
            self.counts = d.counts.clone();
            self.histogram = d.histogram.clone();
            self.total_hits = d.total_hits;
            return;
        }
        for (acc, row) in self.counts.iter_mut().zip(&d.counts) {
            for (a, x) in acc.iter_mut().zip(row) {
                *a += x;
            }
        }
        for (a, x) in self.histogram.iter_mut().zip(&d.histogram) {
            *a += x;
        }
        self.total_hits += d.total_hits;
    }

    pub fn matches(&self, s: &LiveStats) -> bool {
        self.epoch == s.epoch && self.counts == s.counts && self.histogram == s.histogram && self.total_hits == s.total_hits
    }
}
