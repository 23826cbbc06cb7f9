use crate::config::CHANNELS_PER_VMM;

use super::baseline::{OUTLIER_STDS, THRESHOLD_MARGIN_MV};
use super::{
    BaselineReport, BoardChannel, ChannelFlag, ChannelHits, Confirmation, DacCalibrationReport, DeadChannelReport,
    ScanError, Scanner,
};

/// Signal-board amplitude for the main pass: full scale.
pub const DEAD_TEST_AMPLITUDE: u16 = 1023;
const DEAD_TEST_PERIOD_US: u32 = 10;
const PROBE_PULSES: u32 = 32;
const PROBE_PULSER_DAC: u16 = 1023;
const QUIET_PULSES: u32 = 10;

impl Scanner {
    /// Pulses every channel through the signal board with thresholds above
    /// the measured baselines, flags channels far from the expected count,
    /// then re-checks each flag with an independent probe.
    pub fn run_dead_channel_test(
        &mut self,
        baseline: &BaselineReport,
        threshold: &DacCalibrationReport,
    ) -> Result<DeadChannelReport, ScanError> {
        let n_vmm = self.board.n_vmm;
        let n_channels = self.board.n_channels;
        let threshold_dacs: Vec<u16> = (0..n_vmm)
            .map(|v| {
                let cal = threshold.for_vmm(v).ok_or_else(|| {
                    ScanError::InvalidParams(format!("no threshold calibration for vmm {v}"))
                })?;
                let top = baseline.channels[v * CHANNELS_PER_VMM..(v + 1) * CHANNELS_PER_VMM]
                    .iter()
                    .filter(|c| !c.errored)
                    .map(|c| c.mean_mv + OUTLIER_STDS * c.std_mv)
                    .fold(f64::NEG_INFINITY, f64::max);
                let top = if top.is_finite() { top } else { baseline.vmms[v].median_mv };
                Ok(cal.code_for_mv(top + THRESHOLD_MARGIN_MV))
            })
            .collect::<Result<_, ScanError>>()?;

        let pulses = self.params.dead_pulses;
        let dead_ratio = self.params.dead_ratio;
        let noisy_ratio = self.params.noisy_ratio;

        self.scan(|s| {
            s.arm_quiet(&threshold_dacs)?;
            s.set_run(true)?;
            s.set_signal_board(2, DEAD_TEST_AMPLITUDE, 0)?;
            s.tally.clear();
            s.fire(pulses, DEAD_TEST_PERIOD_US, 2 * n_channels as u64)?;
            let expected = pulses as u64;
            let channels: Vec<ChannelHits> = (0..n_channels)
                .map(|i| {
                    let hits = s.tally.counts[i];
                    let flag = if (hits as f64) < dead_ratio * expected as f64 {
                        ChannelFlag::Dead
                    } else if hits as f64 > noisy_ratio * expected as f64 {
                        ChannelFlag::Noisy
                    } else {
                        ChannelFlag::Ok
                    };
                    let ch = BoardChannel::from_index(i);
                    ChannelHits {
                        vmm: ch.vmm,
                        channel: ch.channel,
                        hits,
                        expected,
                        flag,
                    }
                })
                .collect();
            s.set_signal_board(2, 0, 0)?;

            let mut confirmations = Vec::new();
            for c in channels.iter().filter(|c| c.flag == ChannelFlag::Dead) {
                let ch = BoardChannel { vmm: c.vmm, channel: c.channel };
                let probe_hits = s.probe_pulser(ch)?;
                confirmations.push(Confirmation {
                    vmm: c.vmm,
                    channel: c.channel,
                    flag: ChannelFlag::Dead,
                    probe_hits,
                    confirmed: (probe_hits as f64) < dead_ratio * PROBE_PULSES as f64,
                    baseline_anomaly: baseline.channel(ch).outlier,
                });
            }
            if channels.iter().any(|c| c.flag == ChannelFlag::Noisy) {
                s.arm_quiet(&threshold_dacs)?;
                s.tally.clear();
                s.fire(QUIET_PULSES, DEAD_TEST_PERIOD_US, 2 * n_channels as u64)?;
                for c in channels.iter().filter(|c| c.flag == ChannelFlag::Noisy) {
                    let ch = BoardChannel { vmm: c.vmm, channel: c.channel };
                    let probe_hits = s.tally.counts[ch.index()];
                    confirmations.push(Confirmation {
                        vmm: c.vmm,
                        channel: c.channel,
                        flag: ChannelFlag::Noisy,
                        probe_hits,
                        confirmed: probe_hits > 0,
                        baseline_anomaly: baseline.channel(ch).outlier,
                    });
                }
            }
            confirmations.sort_by_key(|c| (c.vmm, c.channel));
            Ok(DeadChannelReport {
                pulses,
                threshold_dacs: threshold_dacs.clone(),
                signal_amplitude_counts: DEAD_TEST_AMPLITUDE,
                channels,
                confirmations,
            })
        })
    }

    /// Operating configs with the given thresholds and every test pulse off.
    fn arm_quiet(&mut self, threshold_dacs: &[u16]) -> Result<(), ScanError> {
        for (v, &thr) in threshold_dacs.iter().enumerate() {
            let mut cfg = self.base[v].clone();
            cfg.global.threshold_dac = thr;
            cfg.channels.iter_mut().for_each(|c| c.test_pulse_enable = false);
            self.write_config(v, &cfg)?;
        }
        Ok(())
    }

    /// Fires the internal pulser at full charge into `target` alone, lowest
    /// threshold, and returns its hit count.
    fn probe_pulser(&mut self, target: BoardChannel) -> Result<u64, ScanError> {
        for v in 0..self.board.n_vmm {
            let mut cfg = self.base[v].clone();
            cfg.global.threshold_dac = 0;
            cfg.global.pulser_dac = PROBE_PULSER_DAC;
            for (c, ch) in cfg.channels.iter_mut().enumerate() {
                ch.test_pulse_enable = v == target.vmm as usize && c == target.channel as usize;
            }
            self.write_config(v, &cfg)?;
        }
        self.tally.clear();
        self.fire(PROBE_PULSES, 1, self.board.n_channels as u64)?;
        Ok(self.tally.counts[target.index()])
    }
}
