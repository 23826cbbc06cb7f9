use serde::{Deserialize, Serialize};

use super::{BaselineReport, BoardChannel, DacCalibrationReport, DeadChannelReport, GainReport, ScanParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifyLimits {
    pub max_baseline_spread_mv: f64,
    pub max_dac_residual_mv: f64,
    pub gain_tolerance: f64,
}

impl Default for ClassifyLimits {
    fn default() -> Self {
        Self {
            max_baseline_spread_mv: 20.0,
            max_dac_residual_mv: 2.0,
            gain_tolerance: 0.10,
        }
    }
}

impl ClassifyLimits {
    pub fn from_params(params: &ScanParams) -> Self {
        Self {
            gain_tolerance: params.gain_tolerance,
            ..Self::default()
        }
    }
}

/// The five reports of one suite run; any may be missing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReports {
    pub baseline: Option<BaselineReport>,
    pub threshold: Option<DacCalibrationReport>,
    pub pulser: Option<DacCalibrationReport>,
    pub gain: Option<GainReport>,
    pub dead: Option<DeadChannelReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Incomplete,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Incomplete => "incomplete",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reason {
    pub check: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<BoardChannel>,
}

impl Reason {
    fn new(check: &str, message: String, channels: Vec<BoardChannel>) -> Self {
        Self {
            check: check.to_string(),
            message,
            channels,
        }
    }
}

impl std::fmt::Display for Reason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.check, self.message)?;
        if !self.channels.is_empty() {
            let list: Vec<String> = self.channels.iter().map(|c| c.index().to_string()).collect();
            write!(f, " [channels {}]", list.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub verdict: Verdict,
    pub reasons: Vec<Reason>,
}

impl Classification {
    /// Every channel named by a failing reason, sorted and deduplicated.
    pub fn channels(&self) -> Vec<BoardChannel> {
        let mut all: Vec<BoardChannel> = self.reasons.iter().flat_map(|r| r.channels.iter().copied()).collect();
        all.sort();
        all.dedup();
        all
    }
}

fn check_dac(name: &str, report: &DacCalibrationReport, limits: &ClassifyLimits, reasons: &mut Vec<Reason>) {
    for cal in &report.vmms {
        if !(cal.max_residual_mv <= limits.max_dac_residual_mv) {
            reasons.push(Reason::new(
                name,
                format!(
                    "vmm {} fit residual {:.3} mV exceeds {} mV",
                    cal.vmm, cal.max_residual_mv, limits.max_dac_residual_mv
                ),
                vec![],
            ));
        }
    }
    for v in &report.errored_vmms {
        reasons.push(Reason::new(name, format!("vmm {v} did not respond"), vec![]));
    }
}

/// Pass/fail summary of a suite run. Missing reports make it incomplete.
pub fn classify_board(reports: &SuiteReports, limits: &ClassifyLimits) -> Classification {
    classify(reports, limits, true)
}

/// Like [`classify_board`] but judges only the reports that are present.
pub fn classify_present(reports: &SuiteReports, limits: &ClassifyLimits) -> Classification {
    classify(reports, limits, false)
}

fn classify(reports: &SuiteReports, limits: &ClassifyLimits, require_all: bool) -> Classification {
    let mut missing = Vec::new();
    let mut reasons = Vec::new();

    match &reports.baseline {
        None => missing.push("baseline"),
        Some(b) => {
            for vb in &b.vmms {
                if vb.spread_mv > limits.max_baseline_spread_mv {
                    let outliers = b.outliers().into_iter().filter(|c| c.vmm == vb.vmm).collect();
                    reasons.push(Reason::new(
                        "baseline",
                        format!(
                            "vmm {} baseline spread {:.2} mV exceeds {} mV",
                            vb.vmm, vb.spread_mv, limits.max_baseline_spread_mv
                        ),
                        outliers,
                    ));
                }
            }
            let errored = b.errored();
            if !errored.is_empty() {
                reasons.push(Reason::new("baseline", "channels did not respond".into(), errored));
            }
        }
    }
    match &reports.threshold {
        None => missing.push("threshold"),
        Some(r) => check_dac("threshold", r, limits, &mut reasons),
    }
    match &reports.pulser {
        None => missing.push("pulser"),
        Some(r) => check_dac("pulser", r, limits, &mut reasons),
    }
    match &reports.gain {
        None => missing.push("gain"),
        Some(g) => {
            let bad: Vec<BoardChannel> = g
                .channels
                .iter()
                .filter(|c| c.dead_in_gain_test || !c.deviation_ratio.is_some_and(|d| d <= limits.gain_tolerance))
                .map(|c| BoardChannel { vmm: c.vmm, channel: c.channel })
                .collect();
            if !bad.is_empty() {
                reasons.push(Reason::new(
                    "gain",
                    format!("gain deviation above {} or no hits", limits.gain_tolerance),
                    bad,
                ));
            }
        }
    }
    match &reports.dead {
        None => missing.push("dead"),
        Some(d) => {
            let dead = d.confirmed_dead();
            if !dead.is_empty() {
                reasons.push(Reason::new("dead", "confirmed dead channels".into(), dead));
            }
            let noisy = d.confirmed_noisy();
            if !noisy.is_empty() {
                reasons.push(Reason::new("noisy", "confirmed noisy channels".into(), noisy));
            }
        }
    }

    if !require_all {
        missing.clear();
    }
    let verdict = if !missing.is_empty() {
        for m in missing.iter().rev() {
            reasons.insert(0, Reason::new("incomplete", format!("missing {m} report"), vec![]));
        }
        Verdict::Incomplete
    } else if reasons.is_empty() {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Classification { verdict, reasons }
}
