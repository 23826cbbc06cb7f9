//! Emulator scenario files.
//!
//! ```text
//! seed = 42
//! board = sfeb
//! vmm.*.channel.*.noise_sigma_mv = 0
//! vmm.0.channel.5.fault = dead
//! vmm.2.channel.17.fault = low_gain:0.5
//! ```
//!
//! `*` selects every vmm or channel. Lines apply in file order, so later
//! lines override earlier ones.

use std::str::FromStr;

use thiserror::Error;

use crate::device::{Fault, VmmTruth};
use crate::emulator::BoardType;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("scenario addresses vmm {vmm} but the board has {n_vmm}")]
    VmmOutOfRange { vmm: usize, n_vmm: usize },
    #[error("invalid truth for vmm {vmm} channel {channel}: {message}")]
    InvalidTruth {
        vmm: usize,
        channel: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selector {
    All,
    One(usize),
}

impl Selector {
    fn matches(&self, i: usize) -> bool {
        match *self {
            Selector::All => true,
            Selector::One(j) => i == j,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelSetting {
    BaselineMv(f64),
    NoiseSigmaMv(f64),
    Fault(Fault),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelOverride {
    pub vmm: Selector,
    pub channel: Selector,
    pub setting: ChannelSetting,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Scenario {
    pub seed: Option<u64>,
    pub board: Option<BoardType>,
    pub overrides: Vec<ChannelOverride>,
}

impl FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let number = |a: Option<&str>| -> Result<f64, String> {
            a.ok_or_else(|| format!("fault `{kind}` needs a value"))?
                .parse::<f64>()
                .map_err(|e| format!("fault `{kind}`: {e}"))
        };
        match kind {
            "none" => Ok(Fault::None),
            "dead" => Ok(Fault::Dead),
            "stuck" => Ok(Fault::Stuck),
            "low_gain" => Ok(Fault::LowGain { factor: number(arg)? }),
            "high_pedestal" => Ok(Fault::HighPedestal { offset_mv: number(arg)? }),
            other => Err(format!("unknown fault `{other}`")),
        }
    }
}

impl std::fmt::Display for Fault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fault::None => write!(f, "none"),
            Fault::Dead => write!(f, "dead"),
            Fault::Stuck => write!(f, "stuck"),
            Fault::LowGain { factor } => write!(f, "low_gain:{factor}"),
            Fault::HighPedestal { offset_mv } => write!(f, "high_pedestal:{offset_mv}"),
        }
    }
}

fn selector(s: &str) -> Result<Selector, String> {
    if s == "*" {
        return Ok(Selector::All);
    }
    s.parse()
        .map(Selector::One)
        .map_err(|_| format!("bad index `{s}`"))
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut out = Scenario::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ScenarioError::Parse { line: n + 1, message };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err("expected `key = value`".into()))?;
            match key {
                "seed" => out.seed = Some(value.parse().map_err(|_| err(format!("bad seed `{value}`")))?),
                "board" => out.board = Some(value.parse().map_err(err)?),
                _ => out.overrides.push(Self::parse_override(key, value).map_err(err)?),
            }
        }
        Ok(out)
    }

    fn parse_override(key: &str, value: &str) -> Result<ChannelOverride, String> {
        let parts: Vec<&str> = key.split('.').collect();
        let [vmm_kw, vmm, channel_kw, channel, field] = parts[..] else {
            return Err(format!("unknown key `{key}`"));
        };
        if vmm_kw != "vmm" || channel_kw != "channel" {
            return Err(format!("unknown key `{key}`"));
        }
        let real = || value.parse::<f64>().map_err(|_| format!("`{value}` is not a number"));
        let setting = match field {
            "baseline_mv" => ChannelSetting::BaselineMv(real()?),
            "noise_sigma_mv" => ChannelSetting::NoiseSigmaMv(real()?),
            "fault" => ChannelSetting::Fault(value.parse()?),
            other => return Err(format!("unknown channel field `{other}`")),
        };
        Ok(ChannelOverride {
            vmm: selector(vmm)?,
            channel: selector(channel)?,
            setting,
        })
    }

    /// Applies the overrides to drawn truths, then validates the result.
    pub fn apply(&self, truths: &mut [VmmTruth]) -> Result<(), ScenarioError> {
        for o in &self.overrides {
            if let Selector::One(v) = o.vmm {
                if v >= truths.len() {
                    return Err(ScenarioError::VmmOutOfRange { vmm: v, n_vmm: truths.len() });
                }
            }
            if let Selector::One(c) = o.channel {
                if c >= 64 {
                    return Err(ScenarioError::InvalidTruth {
                        vmm: 0,
                        channel: c,
                        message: "channel index out of range".into(),
                    });
                }
            }
            for (v, truth) in truths.iter_mut().enumerate().filter(|(v, _)| o.vmm.matches(*v)) {
                for (c, ch) in truth.channels.iter_mut().enumerate().filter(|(c, _)| o.channel.matches(*c)) {
                    match o.setting {
                        ChannelSetting::BaselineMv(mv) => ch.baseline_mv = mv,
                        ChannelSetting::NoiseSigmaMv(s) => ch.noise_sigma_mv = s,
                        ChannelSetting::Fault(f) => ch.fault = f,
                    }
                    ch.validate().map_err(|e| ScenarioError::InvalidTruth {
                        vmm: v,
                        channel: c,
                        message: e.to_string(),
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Builder-style helpers for programmatic scenarios.
    pub fn with(mut self, vmm: Selector, channel: Selector, setting: ChannelSetting) -> Self {
        self.overrides.push(ChannelOverride { vmm, channel, setting });
        self
    }

    pub fn quiet(self) -> Self {
        self.with(Selector::All, Selector::All, ChannelSetting::NoiseSigmaMv(0.0))
    }

    pub fn fault(self, vmm: usize, channel: usize, fault: Fault) -> Self {
        self.with(Selector::One(vmm), Selector::One(channel), ChannelSetting::Fault(fault))
    }

    /// Scenario file text equivalent to this value.
    pub fn to_text(&self) -> String {
        let sel = |s: Selector| match s {
            Selector::All => "*".to_string(),
            Selector::One(i) => i.to_string(),
        };
        let mut out = String::new();
        if let Some(seed) = self.seed {
            out.push_str(&format!("seed = {seed}\n"));
        }
        if let Some(board) = self.board {
            out.push_str(&format!("board = {}\n", board.name()));
        }
        for o in &self.overrides {
            let (field, value) = match o.setting {
                ChannelSetting::BaselineMv(v) => ("baseline_mv", v.to_string()),
                ChannelSetting::NoiseSigmaMv(v) => ("noise_sigma_mv", v.to_string()),
                ChannelSetting::Fault(f) => ("fault", f.to_string()),
            };
            out.push_str(&format!(
                "vmm.{}.channel.{}.{field} = {value}\n",
                sel(o.vmm),
                sel(o.channel)
            ));
        }
        out
    }
}
