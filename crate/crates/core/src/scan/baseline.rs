use crate::config::CHANNELS_PER_VMM;
use crate::device::{FULL_SCALE_MV, XADC_MAX};

use super::{BaselineReport, ChannelBaseline, DacCalibrationReport, ScanError, Scanner, VmmBaseline};

/// Outlier when |mean − vmm median| exceeds this many median stds.
pub const OUTLIER_STDS: f64 = 5.0;
/// Suggested threshold clears the highest channel baseline by this much.
pub const THRESHOLD_MARGIN_MV: f64 = 10.0;

/// Mean and sample standard deviation (n − 1) of XADC codes, in mV.
///
/// Sums are taken over integer codes so a constant input yields exactly
/// its quantized voltage and a zero std.
pub fn sample_stats(codes: &[u16]) -> (f64, f64) {
    let n = codes.len() as f64;
    let sum: u64 = codes.iter().map(|&c| c as u64).sum();
    let mean_code = sum as f64 / n;
    let mean = mean_code / XADC_MAX as f64 * FULL_SCALE_MV;
    if codes.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = codes
        .iter()
        .map(|&c| {
            let d = c as f64 - mean_code;
            d * d
        })
        .sum();
    (mean, (ss / (n - 1.0)).sqrt() / XADC_MAX as f64 * FULL_SCALE_MV)
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        (values[m - 1] + values[m]) / 2.0
    }
}

impl BaselineReport {
    /// Fills each VMM's suggested threshold from the threshold calibration.
    pub fn suggest_thresholds(&mut self, threshold: &DacCalibrationReport) {
        for vb in &mut self.vmms {
            vb.suggested_threshold_dac = threshold
                .for_vmm(vb.vmm as usize)
                .filter(|_| vb.max_mean_mv.is_finite())
                .map(|cal| cal.code_for_mv(vb.max_mean_mv + THRESHOLD_MARGIN_MV));
        }
    }
}

impl Scanner {
    /// Samples every channel's baseline monitor `baseline_samples` times.
    pub fn run_baseline_scan(&mut self) -> Result<BaselineReport, ScanError> {
        self.scan(|s| {
            s.set_run(false)?;
            let n_vmm = s.board.n_vmm;
            let n = s.params.baseline_samples;
            let mut samples: Vec<Option<Vec<u16>>> = Vec::with_capacity(n_vmm * CHANNELS_PER_VMM);
            for v in 0..n_vmm {
                for c in 0..CHANNELS_PER_VMM {
                    let mut cfg = s.base[v].clone();
                    cfg.global.monitor_enable = true;
                    cfg.global.monitor_mux = c as u8;
                    let codes = s.write_config(v, &cfg).and_then(|_| s.sample_xadc(v, n));
                    match codes {
                        Ok(codes) => samples.push(Some(codes)),
                        Err(e @ (ScanError::Timeout { .. } | ScanError::Board { .. })) => {
                            log::warn!("baseline vmm {v} ch {c}: {e}");
                            samples.push(None);
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            if samples.iter().all(Option::is_none) {
                return Err(ScanError::AllChannelsErrored);
            }
            Ok(s.analyze_baseline(&samples))
        })
    }

    fn analyze_baseline(&self, samples: &[Option<Vec<u16>>]) -> BaselineReport {
        let stats = self.exec.map(samples, |s| s.as_deref().map(sample_stats));
        let mut channels: Vec<ChannelBaseline> = stats
            .iter()
            .enumerate()
            .map(|(i, st)| ChannelBaseline {
                vmm: (i / CHANNELS_PER_VMM) as u8,
                channel: (i % CHANNELS_PER_VMM) as u8,
                mean_mv: st.map_or(0.0, |s| s.0),
                std_mv: st.map_or(0.0, |s| s.1),
                samples: samples[i].as_ref().map_or(0, Vec::len),
                outlier: false,
                errored: st.is_none(),
            })
            .collect();
        let vmms = channels
            .chunks_mut(CHANNELS_PER_VMM)
            .enumerate()
            .map(|(v, chs)| {
                let ok: Vec<&ChannelBaseline> = chs.iter().filter(|c| !c.errored).collect();
                let mut means: Vec<f64> = ok.iter().map(|c| c.mean_mv).collect();
                let mut stds: Vec<f64> = ok.iter().map(|c| c.std_mv).collect();
                let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
                let median_mv = median(&mut means);
                let median_std_mv = median(&mut stds);
                for c in chs.iter_mut().filter(|c| !c.errored) {
                    c.outlier = (c.mean_mv - median_mv).abs() > OUTLIER_STDS * median_std_mv;
                }
                VmmBaseline {
                    vmm: v as u8,
                    median_mv,
                    spread_mv: if max.is_finite() { max - min } else { 0.0 },
                    median_std_mv,
                    max_mean_mv: max,
                    suggested_threshold_dac: None,
                }
            })
            .collect();
        BaselineReport {
            board: self.board,
            samples_per_channel: self.params.baseline_samples,
            channels,
            vmms,
        }
    }
}
