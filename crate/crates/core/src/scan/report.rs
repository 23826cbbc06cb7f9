use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::CHANNELS_PER_VMM;
use crate::emulator::BoardDescriptor;

/// A channel addressed by chip and chip-local index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BoardChannel {
    pub vmm: u8,
    pub channel: u8,
}

impl BoardChannel {
    pub fn new(vmm: usize, channel: usize) -> Self {
        Self {
            vmm: vmm as u8,
            channel: channel as u8,
        }
    }

    pub fn from_index(index: usize) -> Self {
        Self::new(index / CHANNELS_PER_VMM, index % CHANNELS_PER_VMM)
    }

    /// Board-wide channel number, `vmm * 64 + channel`.
    pub fn index(&self) -> usize {
        self.vmm as usize * CHANNELS_PER_VMM + self.channel as usize
    }
}

impl fmt::Display for BoardChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (vmm {} ch {})", self.index(), self.vmm, self.channel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelBaseline {
    pub vmm: u8,
    pub channel: u8,
    pub mean_mv: f64,
    pub std_mv: f64,
    pub samples: usize,
    pub outlier: bool,
    pub errored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmmBaseline {
    pub vmm: u8,
    pub median_mv: f64,
    /// max − min of the channel means.
    pub spread_mv: f64,
    pub median_std_mv: f64,
    pub max_mean_mv: f64,
    /// Smallest threshold code clearing the highest baseline by 10 mV,
    /// filled in once a threshold calibration is available.
    pub suggested_threshold_dac: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub board: BoardDescriptor,
    pub samples_per_channel: u16,
    pub channels: Vec<ChannelBaseline>,
    pub vmms: Vec<VmmBaseline>,
}

impl BaselineReport {
    pub fn channel(&self, ch: BoardChannel) -> &ChannelBaseline {
        &self.channels[ch.index()]
    }

    pub fn outliers(&self) -> Vec<BoardChannel> {
        self.channels
            .iter()
            .filter(|c| c.outlier)
            .map(|c| BoardChannel { vmm: c.vmm, channel: c.channel })
            .collect()
    }

    pub fn errored(&self) -> Vec<BoardChannel> {
        self.channels
            .iter()
            .filter(|c| c.errored)
            .map(|c| BoardChannel { vmm: c.vmm, channel: c.channel })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DacTarget {
    Threshold,
    Pulser,
}

impl DacTarget {
    pub fn name(self) -> &'static str {
        match self {
            DacTarget::Threshold => "threshold",
            DacTarget::Pulser => "pulser",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DacPoint {
    pub code: u16,
    pub mean_mv: f64,
    /// Any sample at XADC full scale; excluded from the fit.
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DacCalibration {
    pub vmm: u8,
    pub target: DacTarget,
    pub slope_mv_per_count: f64,
    pub intercept_mv: f64,
    pub max_residual_mv: f64,
    pub points: Vec<DacPoint>,
}

impl DacCalibration {
    pub fn mv_at(&self, code: u16) -> f64 {
        self.slope_mv_per_count * code as f64 + self.intercept_mv
    }

    /// Smallest code whose calibrated voltage reaches `mv`, clamped to 0–1023.
    pub fn code_for_mv(&self, mv: f64) -> u16 {
        let exact = (mv - self.intercept_mv) / self.slope_mv_per_count;
        let mut code = exact.ceil().clamp(0.0, 1023.0) as u16;
        // guard against rounding right at the boundary
        while code > 0 && self.mv_at(code - 1) >= mv {
            code -= 1;
        }
        while code < 1023 && self.mv_at(code) < mv {
            code += 1;
        }
        code
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DacCalibrationReport {
    pub target: DacTarget,
    pub vmms: Vec<DacCalibration>,
    pub errored_vmms: Vec<u8>,
}

impl DacCalibrationReport {
    pub fn for_vmm(&self, vmm: usize) -> Option<&DacCalibration> {
        self.vmms.iter().find(|c| c.vmm as usize == vmm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainPoint {
    pub pulser_dac: u16,
    pub charge_fc: f64,
    pub hits: u64,
    /// Mean peak amplitude above the channel baseline.
    pub amplitude_mv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelGain {
    pub vmm: u8,
    pub channel: u8,
    pub configured_gain_mv_per_fc: f64,
    pub measured_gain_mv_per_fc: Option<f64>,
    pub fit_max_residual_mv: Option<f64>,
    /// |measured − configured| / configured.
    pub deviation_ratio: Option<f64>,
    pub dead_in_gain_test: bool,
    pub pass: bool,
    pub points: Vec<GainPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub tolerance: f64,
    pub channels: Vec<ChannelGain>,
}

impl GainReport {
    pub fn channel(&self, ch: BoardChannel) -> &ChannelGain {
        &self.channels[ch.index()]
    }

    pub fn failing(&self) -> Vec<BoardChannel> {
        self.channels
            .iter()
            .filter(|c| !c.pass)
            .map(|c| BoardChannel { vmm: c.vmm, channel: c.channel })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelFlag {
    Ok,
    Dead,
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelHits {
    pub vmm: u8,
    pub channel: u8,
    pub hits: u64,
    pub expected: u64,
    pub flag: ChannelFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confirmation {
    pub vmm: u8,
    pub channel: u8,
    pub flag: ChannelFlag,
    /// Hits seen in the confirming probe: single-channel pulser probe for
    /// dead, stimulus-free run for noisy.
    pub probe_hits: u64,
    pub confirmed: bool,
    /// Whether the baseline scan also marked the channel an outlier.
    pub baseline_anomaly: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadChannelReport {
    pub pulses: u32,
    pub threshold_dacs: Vec<u16>,
    pub signal_amplitude_counts: u16,
    pub channels: Vec<ChannelHits>,
    pub confirmations: Vec<Confirmation>,
}

impl DeadChannelReport {
    pub fn flagged(&self) -> Vec<BoardChannel> {
        self.channels
            .iter()
            .filter(|c| c.flag != ChannelFlag::Ok)
            .map(|c| BoardChannel { vmm: c.vmm, channel: c.channel })
            .collect()
    }

    fn confirmed_with(&self, flag: ChannelFlag) -> Vec<BoardChannel> {
        self.confirmations
            .iter()
            .filter(|c| c.confirmed && c.flag == flag)
            .map(|c| BoardChannel { vmm: c.vmm, channel: c.channel })
            .collect()
    }

    pub fn confirmed_dead(&self) -> Vec<BoardChannel> {
        self.confirmed_with(ChannelFlag::Dead)
    }

    pub fn confirmed_noisy(&self) -> Vec<BoardChannel> {
        self.confirmed_with(ChannelFlag::Noisy)
    }

    /// Every flagged channel whose flag the probe confirmed.
    pub fn confirmed(&self) -> Vec<BoardChannel> {
        let mut all = self.confirmed_dead();
        all.extend(self.confirmed_noisy());
        all.sort();
        all
    }
}
