use crate::config::{MUX_PULSER, MUX_THRESHOLD};
use crate::device::XADC_MAX;
use crate::fit::linear_fit;

use super::baseline::sample_stats;
use super::{DacCalibration, DacCalibrationReport, DacPoint, DacTarget, ScanError, Scanner};

impl Scanner {
    /// Sweeps the threshold or pulser DAC through `dac_sweep`, reading the
    /// corresponding monitor output, and fits a line per VMM.
    pub fn run_dac_calibration(&mut self, target: DacTarget) -> Result<DacCalibrationReport, ScanError> {
        self.scan(|s| {
            s.set_run(false)?;
            let mut vmms = Vec::new();
            let mut errored_vmms = Vec::new();
            for v in 0..s.board.n_vmm {
                match s.calibrate_vmm(v, target) {
                    Ok(cal) => vmms.push(cal),
                    Err(e @ (ScanError::Timeout { .. } | ScanError::Board { .. })) => {
                        log::warn!("{} calibration vmm {v}: {e}", target.name());
                        errored_vmms.push(v as u8);
                    }
                    Err(e) => return Err(e),
                }
            }
            if vmms.is_empty() {
                return Err(ScanError::AllChannelsErrored);
            }
            Ok(DacCalibrationReport {
                target,
                vmms,
                errored_vmms,
            })
        })
    }

    fn calibrate_vmm(&mut self, v: usize, target: DacTarget) -> Result<DacCalibration, ScanError> {
        let sweep = self.params.dac_sweep.clone();
        let n = self.params.samples_per_point;
        let mut points = Vec::with_capacity(sweep.len());
        for &code in &sweep {
            let mut cfg = self.base[v].clone();
            cfg.global.monitor_enable = true;
            match target {
                DacTarget::Threshold => {
                    cfg.global.monitor_mux = MUX_THRESHOLD;
                    cfg.global.threshold_dac = code;
                }
                DacTarget::Pulser => {
                    cfg.global.monitor_mux = MUX_PULSER;
                    cfg.global.pulser_dac = code;
                }
            }
            self.write_config(v, &cfg)?;
            let codes = self.sample_xadc(v, n)?;
            let (mean_mv, _) = sample_stats(&codes);
            points.push(DacPoint {
                code,
                mean_mv,
                saturated: codes.contains(&XADC_MAX),
            });
        }
        let xy: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| !p.saturated)
            .map(|p| (p.code as f64, p.mean_mv))
            .collect();
        let fit = linear_fit(&xy)?;
        Ok(DacCalibration {
            vmm: v as u8,
            target,
            slope_mv_per_count: fit.slope,
            intercept_mv: fit.intercept,
            max_residual_mv: fit.max_abs_residual(),
            points,
        })
    }
}
