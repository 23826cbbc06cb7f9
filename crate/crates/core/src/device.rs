//! Behavioral model of one VMM3: 64 channels with baseline, noise, gain,
//! threshold discrimination, a 10-bit peak ADC, the internal pulser and the
//! analog monitor tap sampled by the XADC.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{VmmConfig, CHANNELS_PER_VMM, MUX_PULSER, MUX_REFERENCE, MUX_THRESHOLD};

pub const FULL_SCALE_MV: f64 = 1000.0;
pub const XADC_MAX: u16 = 4095;
pub const PDO_MAX: u16 = 1023;
pub const REFERENCE_MV: f64 = 500.0;
/// Unity-gain pulser monitor: 1 mV per injected fC.
pub const PULSER_MONITOR_MV_PER_FC: f64 = 1.0;

pub const FLAG_INTERNAL_PULSE: u16 = 0x0001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error("channel {0} out of range")]
    ChannelOutOfRange(usize),
    #[error("monitor output disabled")]
    MonitorDisabled,
    #[error("monitor mux {0} is reserved")]
    ReservedMux(u8),
    #[error("invalid truth value: {0}")]
    InvalidTruth(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fault {
    #[default]
    None,
    Dead,
    Stuck,
    LowGain { factor: f64 },
    HighPedestal { offset_mv: f64 },
}

impl Fault {
    fn gain_factor(&self) -> f64 {
        match *self {
            Fault::LowGain { factor } => factor,
            _ => 1.0,
        }
    }

    fn pedestal_offset_mv(&self) -> f64 {
        match *self {
            Fault::HighPedestal { offset_mv } => offset_mv,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelTruth {
    pub baseline_mv: f64,
    pub noise_sigma_mv: f64,
    pub fault: Fault,
}

impl ChannelTruth {
    pub fn validate(&self) -> Result<(), DeviceError> {
        if !(0.0..=FULL_SCALE_MV).contains(&self.baseline_mv) {
            return Err(DeviceError::InvalidTruth(format!(
                "baseline_mv {} outside [0, 1000]",
                self.baseline_mv
            )));
        }
        if !(self.noise_sigma_mv >= 0.0) {
            return Err(DeviceError::InvalidTruth(format!(
                "noise_sigma_mv {} is negative",
                self.noise_sigma_mv
            )));
        }
        if let Fault::LowGain { factor } = self.fault {
            if !(factor > 0.0 && factor < 1.0) {
                return Err(DeviceError::InvalidTruth(format!(
                    "low_gain factor {factor} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Quiescent level seen by the monitor and the peak detector.
    pub fn pedestal_mv(&self) -> f64 {
        self.baseline_mv + self.fault.pedestal_offset_mv()
    }
}

/// Emulator ground truth for one chip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmmTruth {
    pub channels: Vec<ChannelTruth>,
    pub threshold_slope_mv_per_count: f64,
    pub threshold_offset_mv: f64,
    pub pulser_fc_per_count: f64,
    pub trim_step_mv: f64,
}

pub const DEFAULT_BASELINE_MEAN_MV: f64 = 160.0;
pub const DEFAULT_BASELINE_SPREAD_MV: f64 = 3.0;
pub const DEFAULT_NOISE_SIGMA_MV: f64 = 2.0;
pub const DEFAULT_THRESHOLD_SLOPE: f64 = 0.98;
pub const DEFAULT_THRESHOLD_OFFSET_MV: f64 = 50.0;
pub const DEFAULT_PULSER_FC_PER_COUNT: f64 = 0.3;
pub const DEFAULT_TRIM_STEP_MV: f64 = 1.0;

impl VmmTruth {
    /// Every channel at the same baseline and noise, default transfers.
    pub fn uniform(baseline_mv: f64, noise_sigma_mv: f64) -> Self {
        let ch = ChannelTruth {
            baseline_mv,
            noise_sigma_mv,
            fault: Fault::None,
        };
        Self {
            channels: vec![ch; CHANNELS_PER_VMM],
            threshold_slope_mv_per_count: DEFAULT_THRESHOLD_SLOPE,
            threshold_offset_mv: DEFAULT_THRESHOLD_OFFSET_MV,
            pulser_fc_per_count: DEFAULT_PULSER_FC_PER_COUNT,
            trim_step_mv: DEFAULT_TRIM_STEP_MV,
        }
    }

    /// Default truth: baselines drawn once per channel from
    /// Normal(160 mV, 3 mV), per-sample noise 2 mV.
    pub fn nominal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let spread = Normal::new(DEFAULT_BASELINE_MEAN_MV, DEFAULT_BASELINE_SPREAD_MV)
            .expect("finite parameters");
        let mut truth = Self::uniform(DEFAULT_BASELINE_MEAN_MV, DEFAULT_NOISE_SIGMA_MV);
        for ch in &mut truth.channels {
            ch.baseline_mv = spread.sample(rng).clamp(0.0, FULL_SCALE_MV);
        }
        truth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HitRecord {
    pub vmm: u8,
    pub channel: u8,
    pub pdo: u16,
    pub bcid: u16,
    pub flags: u16,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stimulus {
    /// On-chip pulser; charge follows `pulser_dac` and requires the
    /// channel's test-pulse enable.
    Internal,
    /// Charge delivered on the detector input (signal board).
    External { charge_fc: f64 },
}

pub fn xadc_code(mv: f64) -> u16 {
    (mv / FULL_SCALE_MV * XADC_MAX as f64)
        .round()
        .clamp(0.0, XADC_MAX as f64) as u16
}

pub fn pdo_code(mv: f64) -> u16 {
    (mv / FULL_SCALE_MV * PDO_MAX as f64)
        .round()
        .clamp(0.0, PDO_MAX as f64) as u16
}

pub fn xadc_to_mv(code: u16) -> f64 {
    code as f64 / XADC_MAX as f64 * FULL_SCALE_MV
}

pub fn pdo_to_mv(code: u16) -> f64 {
    code as f64 / PDO_MAX as f64 * FULL_SCALE_MV
}

fn noise<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

#[derive(Debug, Clone)]
pub struct VmmModel {
    index: u8,
    truth: VmmTruth,
    config: VmmConfig,
}

impl VmmModel {
    pub fn new(index: u8, truth: VmmTruth) -> Self {
        Self {
            index,
            truth,
            config: VmmConfig::default(),
        }
    }

    pub fn index(&self) -> u8 {
        self.index
    }

    pub fn truth(&self) -> &VmmTruth {
        &self.truth
    }

    pub fn config(&self) -> &VmmConfig {
        &self.config
    }

    pub fn apply_config(&mut self, cfg: VmmConfig) {
        self.config = cfg;
    }

    pub fn set_fault(&mut self, channel: usize, fault: Fault) -> Result<(), DeviceError> {
        let ch = self
            .truth
            .channels
            .get_mut(channel)
            .ok_or(DeviceError::ChannelOutOfRange(channel))?;
        ch.fault = fault;
        Ok(())
    }

    /// Global threshold voltage before per-channel trim.
    pub fn threshold_mv(&self) -> f64 {
        self.truth.threshold_slope_mv_per_count * self.config.global.threshold_dac as f64
            + self.truth.threshold_offset_mv
    }

    pub fn effective_threshold_mv(&self, channel: usize) -> f64 {
        self.threshold_mv()
            - self.config.channels[channel].trim as f64 * self.truth.trim_step_mv
    }

    pub fn pulser_charge_fc(&self) -> f64 {
        self.truth.pulser_fc_per_count * self.config.global.pulser_dac as f64
    }

    /// Whether the channel can produce hits at all under the current config.
    fn live(&self, channel: usize) -> bool {
        self.config.global.acq_enable
            && !self.config.channels[channel].mask
            && self.truth.channels[channel].fault != Fault::Dead
    }

    pub fn inject_pulse<R: Rng + ?Sized>(
        &self,
        channel: usize,
        stimulus: Stimulus,
        bcid: u16,
        rng: &mut R,
    ) -> Result<Option<HitRecord>, DeviceError> {
        if channel >= CHANNELS_PER_VMM {
            return Err(DeviceError::ChannelOutOfRange(channel));
        }
        let (charge_fc, flags) = match stimulus {
            Stimulus::Internal => {
                if !self.config.channels[channel].test_pulse_enable {
                    return Ok(None);
                }
                (self.pulser_charge_fc(), FLAG_INTERNAL_PULSE)
            }
            Stimulus::External { charge_fc } => (charge_fc, 0),
        };
        let truth = &self.truth.channels[channel];
        // stuck channels fire on every tick; the emulator accounts for those
        if !self.live(channel) || truth.fault == Fault::Stuck {
            return Ok(None);
        }
        let v = truth.pedestal_mv()
            + self.config.global.gain_mv_per_fc() * charge_fc * truth.fault.gain_factor()
            + noise(rng, truth.noise_sigma_mv);
        if v <= self.effective_threshold_mv(channel) {
            return Ok(None);
        }
        Ok(Some(HitRecord {
            vmm: self.index,
            channel: channel as u8,
            pdo: pdo_code(v),
            bcid,
            flags,
        }))
    }

    /// Hit a stuck channel emits on one sampling tick, if any.
    pub fn stuck_hit<R: Rng + ?Sized>(
        &self,
        channel: usize,
        bcid: u16,
        rng: &mut R,
    ) -> Option<HitRecord> {
        let truth = &self.truth.channels[channel];
        if truth.fault != Fault::Stuck || !self.config.global.acq_enable || self.config.channels[channel].mask {
            return None;
        }
        let v = truth.pedestal_mv() + noise(rng, truth.noise_sigma_mv);
        Some(HitRecord {
            vmm: self.index,
            channel: channel as u8,
            pdo: pdo_code(v),
            bcid,
            flags: 0,
        })
    }

    pub fn stuck_channels(&self) -> impl Iterator<Item = usize> + '_ {
        self.truth
            .channels
            .iter()
            .enumerate()
            .filter(|(_, t)| t.fault == Fault::Stuck)
            .map(|(c, _)| c)
    }

    /// Monitored voltage in mV for the current mux selection.
    pub fn monitor_mv<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64, DeviceError> {
        let g = &self.config.global;
        if !g.monitor_enable {
            return Err(DeviceError::MonitorDisabled);
        }
        match g.monitor_mux {
            c @ 0..=63 => {
                let t = &self.truth.channels[c as usize];
                Ok(t.pedestal_mv() + noise(rng, t.noise_sigma_mv))
            }
            MUX_THRESHOLD => Ok(self.threshold_mv()),
            MUX_PULSER => Ok(self.pulser_charge_fc() * PULSER_MONITOR_MV_PER_FC),
            MUX_REFERENCE => Ok(REFERENCE_MV),
            m => Err(DeviceError::ReservedMux(m)),
        }
    }

    pub fn sample_monitor<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<u16, DeviceError> {
        self.monitor_mv(rng).map(xadc_code)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn quiet_model(baseline: f64) -> VmmModel {
        let mut m = VmmModel::new(0, VmmTruth::uniform(baseline, 0.0));
        let mut cfg = VmmConfig::default();
        cfg.global.acq_enable = true;
        cfg.global.monitor_enable = true;
        cfg.global.gain_sel = 2;
        m.apply_config(cfg);
        m
    }

    fn with_threshold(m: &mut VmmModel, dac: u16, trim: u8) {
        let mut cfg = m.config().clone();
        cfg.global.threshold_dac = dac;
        cfg.channels[0].trim = trim;
        m.apply_config(cfg);
    }

    #[test]
    fn effective_threshold_arithmetic() {
        let mut m = quiet_model(160.0);
        with_threshold(&mut m, 250, 0);
        assert!((m.effective_threshold_mv(0) - 295.0).abs() < 1e-9);
        with_threshold(&mut m, 250, 31);
        assert!((m.effective_threshold_mv(0) - 264.0).abs() < 1e-9);
        with_threshold(&mut m, 0, 0);
        assert!((m.effective_threshold_mv(0) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn pulse_above_and_below_threshold() {
        let mut m = quiet_model(160.0);
        // 0.98 * dac + 50 = 200 mV
        let mut cfg = m.config().clone();
        cfg.global.threshold_dac = 0;
        cfg.channels[0].trim = 0;
        m.apply_config(cfg);
        let mut m200 = m.clone();
        m200.truth.threshold_offset_mv = 200.0;
        let hit = m200
            .inject_pulse(0, Stimulus::External { charge_fc: 20.0 }, 3, &mut rng())
            .unwrap()
            .expect("hit");
        assert_eq!(hit.pdo, 225);
        assert_eq!(hit.bcid, 3);
        assert_eq!(hit.flags, 0);

        with_threshold(&mut m, 250, 0);
        assert_eq!(
            m.inject_pulse(0, Stimulus::External { charge_fc: 20.0 }, 0, &mut rng())
                .unwrap(),
            None
        );
    }

    #[test]
    fn faults_and_masks() {
        let mut m = quiet_model(160.0);
        m.truth.threshold_offset_mv = 180.0;
        let pulse = Stimulus::External { charge_fc: 20.0 };
        m.set_fault(5, Fault::Dead).unwrap();
        for q in [1.0, 100.0, 1e6] {
            assert_eq!(
                m.inject_pulse(5, Stimulus::External { charge_fc: q }, 0, &mut rng())
                    .unwrap(),
                None
            );
        }
        m.set_fault(5, Fault::None).unwrap();
        assert!(m.inject_pulse(5, pulse, 0, &mut rng()).unwrap().is_some());

        m.set_fault(6, Fault::LowGain { factor: 0.5 }).unwrap();
        let hit = m.inject_pulse(6, pulse, 0, &mut rng()).unwrap().unwrap();
        assert_eq!(hit.pdo, pdo_code(190.0));

        let mut cfg = m.config().clone();
        cfg.channels[7].mask = true;
        m.apply_config(cfg);
        assert_eq!(m.inject_pulse(7, pulse, 0, &mut rng()).unwrap(), None);
        assert_eq!(
            m.inject_pulse(64, pulse, 0, &mut rng()),
            Err(DeviceError::ChannelOutOfRange(64))
        );
        assert_eq!(
            m.set_fault(64, Fault::Dead),
            Err(DeviceError::ChannelOutOfRange(64))
        );
    }

    #[test]
    fn internal_pulse_needs_enable() {
        let mut m = quiet_model(160.0);
        let mut cfg = m.config().clone();
        cfg.global.pulser_dac = 100; // 30 fC -> 90 mV
        m.apply_config(cfg.clone());
        assert_eq!(m.inject_pulse(0, Stimulus::Internal, 0, &mut rng()).unwrap(), None);
        cfg.channels[0].test_pulse_enable = true;
        m.apply_config(cfg);
        let hit = m.inject_pulse(0, Stimulus::Internal, 0, &mut rng()).unwrap().unwrap();
        assert_eq!(hit.pdo, pdo_code(250.0));
        assert_eq!(hit.flags, FLAG_INTERNAL_PULSE);
    }

    #[test]
    fn monitor_codes() {
        let mut m = quiet_model(160.0);
        assert_eq!(m.sample_monitor(&mut rng()).unwrap(), 655);
        let mut cfg = m.config().clone();
        cfg.global.monitor_mux = MUX_REFERENCE;
        m.apply_config(cfg.clone());
        assert_eq!(m.sample_monitor(&mut rng()).unwrap(), 2048);
        cfg.global.monitor_mux = MUX_THRESHOLD;
        cfg.global.threshold_dac = 1023;
        m.apply_config(cfg.clone());
        assert_eq!(m.sample_monitor(&mut rng()).unwrap(), 4095);
        cfg.global.monitor_mux = MUX_PULSER;
        cfg.global.pulser_dac = 1000;
        m.apply_config(cfg.clone());
        assert_eq!(m.sample_monitor(&mut rng()).unwrap(), xadc_code(300.0));
        cfg.global.monitor_mux = 70;
        m.apply_config(cfg.clone());
        assert_eq!(m.sample_monitor(&mut rng()), Err(DeviceError::ReservedMux(70)));
        cfg.global.monitor_enable = false;
        m.apply_config(cfg);
        assert_eq!(m.sample_monitor(&mut rng()), Err(DeviceError::MonitorDisabled));
    }

    #[test]
    fn stuck_only_on_ticks() {
        let mut m = quiet_model(160.0);
        m.set_fault(2, Fault::Stuck).unwrap();
        assert_eq!(
            m.inject_pulse(2, Stimulus::External { charge_fc: 500.0 }, 0, &mut rng())
                .unwrap(),
            None
        );
        let hit = m.stuck_hit(2, 9, &mut rng()).unwrap();
        assert_eq!((hit.channel, hit.pdo, hit.bcid), (2, pdo_code(160.0), 9));
        assert!(m.stuck_hit(3, 9, &mut rng()).is_none());
        assert_eq!(m.stuck_channels().collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn truth_validation() {
        let mut t = ChannelTruth {
            baseline_mv: 160.0,
            noise_sigma_mv: 0.0,
            fault: Fault::LowGain { factor: 1.0 },
        };
        assert!(t.validate().is_err());
        t.fault = Fault::None;
        assert!(t.validate().is_ok());
        t.baseline_mv = 1200.0;
        assert!(t.validate().is_err());
    }
}
