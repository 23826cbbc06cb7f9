use crate::config::CHANNELS_PER_VMM;
use crate::device::{PDO_MAX, FULL_SCALE_MV, PULSER_MONITOR_MV_PER_FC};
use crate::fit::linear_fit;

use super::{
    BaselineReport, ChannelGain, DacCalibration, DacCalibrationReport, GainPoint, GainReport, ScanError, Scanner,
};

/// Charges are scaled down so the largest pulse peaks below this level.
pub const GAIN_HEADROOM_MV: f64 = 900.0;

/// Pulser charge for a DAC code according to the pulser calibration.
fn charge_fc(cal: &DacCalibration, dac: u16) -> f64 {
    cal.mv_at(dac) / PULSER_MONITOR_MV_PER_FC
}

fn dac_for_charge(cal: &DacCalibration, q_fc: f64) -> u16 {
    ((q_fc * PULSER_MONITOR_MV_PER_FC - cal.intercept_mv) / cal.slope_mv_per_count)
        .round()
        .clamp(1.0, 1023.0) as u16
}

impl Scanner {
    /// Injects pulser charges into one channel index at a time (on every VMM
    /// at once) and fits mean peak amplitude against injected charge.
    pub fn run_gain_test(
        &mut self,
        baseline: &BaselineReport,
        pulser: &DacCalibrationReport,
    ) -> Result<GainReport, ScanError> {
        let n_vmm = self.board.n_vmm;
        let cals: Vec<DacCalibration> = (0..n_vmm)
            .map(|v| {
                pulser.for_vmm(v).cloned().ok_or_else(|| {
                    ScanError::InvalidParams(format!("no pulser calibration for vmm {v}"))
                })
            })
            .collect::<Result<_, _>>()?;
        let charges = self.params.gain_charges_fc.clone();
        let q_max = charges.iter().cloned().fold(0.0, f64::max);
        let dacs: Vec<Vec<u16>> = (0..n_vmm)
            .map(|v| {
                let gain = self.base[v].global.gain_mv_per_fc();
                let top = baseline.vmms[v].max_mean_mv;
                let room = GAIN_HEADROOM_MV - if top.is_finite() { top } else { 0.0 };
                let scale = (room / (gain * q_max)).clamp(0.01, 1.0);
                charges.iter().map(|q| dac_for_charge(&cals[v], q * scale)).collect()
            })
            .collect();

        // hits[v][c][k], pdo_sum[v][c][k]
        let k_n = charges.len();
        let mut hits = vec![vec![vec![0u64; k_n]; CHANNELS_PER_VMM]; n_vmm];
        let mut pdo_sum = hits.clone();
        self.scan(|s| {
            s.set_run(true)?;
            let pulses = s.params.gain_pulses;
            for c in 0..CHANNELS_PER_VMM {
                for k in 0..k_n {
                    for v in 0..n_vmm {
                        let mut cfg = s.base[v].clone();
                        cfg.global.threshold_dac = 0;
                        cfg.global.pulser_dac = dacs[v][k];
                        for (i, ch) in cfg.channels.iter_mut().enumerate() {
                            ch.test_pulse_enable = i == c;
                        }
                        s.write_config(v, &cfg)?;
                    }
                    s.tally.clear();
                    s.fire(pulses, 1, n_vmm as u64)?;
                    for v in 0..n_vmm {
                        let i = v * CHANNELS_PER_VMM + c;
                        hits[v][c][k] = s.tally.counts[i];
                        pdo_sum[v][c][k] = s.tally.pdo_sum[i];
                    }
                }
            }
            Ok(())
        })?;

        let tolerance = self.params.gain_tolerance;
        let base = self.base.clone();
        let channels = self.exec.map_range(0..n_vmm * CHANNELS_PER_VMM, |i| {
            let (v, c) = (i / CHANNELS_PER_VMM, i % CHANNELS_PER_VMM);
            let baseline_mv = baseline.channels[i].mean_mv;
            let configured = base[v].global.gain_mv_per_fc();
            let points: Vec<GainPoint> = (0..k_n)
                .map(|k| {
                    let n = hits[v][c][k];
                    let amplitude_mv = if n > 0 {
                        pdo_sum[v][c][k] as f64 / n as f64 / PDO_MAX as f64 * FULL_SCALE_MV - baseline_mv
                    } else {
                        0.0
                    };
                    GainPoint {
                        pulser_dac: dacs[v][k],
                        charge_fc: charge_fc(&cals[v], dacs[v][k]),
                        hits: n,
                        amplitude_mv,
                    }
                })
                .collect();
            let top = points.iter().enumerate().max_by(|a, b| a.1.charge_fc.total_cmp(&b.1.charge_fc));
            let dead = top.is_none_or(|(_, p)| p.hits == 0);
            let xy: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| p.hits > 0)
                .map(|p| (p.charge_fc, p.amplitude_mv))
                .collect();
            let fit = if dead { None } else { linear_fit(&xy).ok() };
            let measured = fit.as_ref().map(|f| f.slope);
            let deviation = measured.map(|m| (m - configured).abs() / configured);
            ChannelGain {
                vmm: v as u8,
                channel: c as u8,
                configured_gain_mv_per_fc: configured,
                measured_gain_mv_per_fc: measured,
                fit_max_residual_mv: fit.as_ref().map(|f| f.max_abs_residual()),
                deviation_ratio: deviation,
                dead_in_gain_test: dead,
                pass: !dead && deviation.is_some_and(|d| d <= tolerance),
                points,
            }
        });
        Ok(GainReport { tolerance, channels })
    }
}
