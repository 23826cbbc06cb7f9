//! VMM3 configuration bitstream: 1728 bits, one 192-bit global block followed
//! by 64 per-channel blocks of 24 bits each.
//!
//! Bit `b` of the stream lives in byte `b / 8` at position `7 - b % 8`
//! (MSB first). Fields are packed contiguously in declaration order and every
//! reserved bit must be zero.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHANNELS_PER_VMM: usize = 64;
pub const CONFIG_BITS: usize = 1728;
pub const CONFIG_BYTES: usize = CONFIG_BITS / 8;

const GLOBAL_BITS: usize = 192;
const CHANNEL_BITS: usize = 24;

/// Front-end gain ladder in mV/fC, indexed by `gain_sel`.
pub const GAIN_TABLE_MV_PER_FC: [f64; 8] = [0.5, 1.0, 3.0, 4.5, 6.0, 9.0, 12.0, 16.0];
/// Peaking times in ns, indexed by `peak_time_sel`.
pub const PEAK_TIME_NS: [u32; 4] = [25, 50, 100, 200];

pub const MUX_THRESHOLD: u8 = 64;
pub const MUX_PULSER: u8 = 65;
pub const MUX_REFERENCE: u8 = 66;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("field {field} = {value} out of range (max {max})")]
    OutOfRange {
        field: String,
        value: u64,
        max: u64,
    },
    #[error("configuration stream must be {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("nonzero reserved bits at positions {0:?}")]
    ReservedBits(Vec<usize>),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown field name `{0}`")]
    UnknownField(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GlobalConfig {
    /// false = negative, true = positive.
    pub polarity: bool,
    pub gain_sel: u8,
    pub peak_time_sel: u8,
    pub threshold_dac: u16,
    pub pulser_dac: u16,
    pub monitor_mux: u8,
    pub monitor_enable: bool,
    pub acq_enable: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Channel disabled when set.
    pub mask: bool,
    pub test_pulse_enable: bool,
    /// Subtracts `trim * trim_step` from the effective threshold.
    pub trim: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VmmConfig {
    pub global: GlobalConfig,
    #[serde(with = "channel_array")]
    pub channels: [ChannelConfig; CHANNELS_PER_VMM],
}

mod channel_array {
    use super::{ChannelConfig, CHANNELS_PER_VMM};
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[ChannelConfig; CHANNELS_PER_VMM], s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[ChannelConfig; CHANNELS_PER_VMM], D::Error> {
        let v = Vec::<ChannelConfig>::deserialize(d)?;
        let n = v.len();
        v.try_into()
            .map_err(|_| D::Error::invalid_length(n, &"64 channel entries"))
    }
}

impl Default for VmmConfig {
    fn default() -> Self {
        Self {
            global: GlobalConfig::default(),
            channels: [ChannelConfig::default(); CHANNELS_PER_VMM],
        }
    }
}

/// One packed field: name, bit offset within its block, width.
struct FieldLayout {
    name: &'static str,
    offset: usize,
    width: usize,
}

const GLOBAL_LAYOUT: [FieldLayout; 8] = [
    FieldLayout { name: "polarity", offset: 0, width: 1 },
    FieldLayout { name: "gain_sel", offset: 1, width: 3 },
    FieldLayout { name: "peak_time_sel", offset: 4, width: 2 },
    FieldLayout { name: "threshold_dac", offset: 6, width: 10 },
    FieldLayout { name: "pulser_dac", offset: 16, width: 10 },
    FieldLayout { name: "monitor_mux", offset: 26, width: 7 },
    FieldLayout { name: "monitor_enable", offset: 33, width: 1 },
    FieldLayout { name: "acq_enable", offset: 34, width: 1 },
];
const GLOBAL_USED_BITS: usize = 35;

const CHANNEL_LAYOUT: [FieldLayout; 3] = [
    FieldLayout { name: "mask", offset: 0, width: 1 },
    FieldLayout { name: "test_pulse_enable", offset: 1, width: 1 },
    FieldLayout { name: "trim", offset: 2, width: 5 },
];
const CHANNEL_USED_BITS: usize = 7;

impl GlobalConfig {
    fn values(&self) -> [u64; 8] {
        [
            self.polarity as u64,
            self.gain_sel as u64,
            self.peak_time_sel as u64,
            self.threshold_dac as u64,
            self.pulser_dac as u64,
            self.monitor_mux as u64,
            self.monitor_enable as u64,
            self.acq_enable as u64,
        ]
    }

    fn from_values(v: [u64; 8]) -> Self {
        Self {
            polarity: v[0] != 0,
            gain_sel: v[1] as u8,
            peak_time_sel: v[2] as u8,
            threshold_dac: v[3] as u16,
            pulser_dac: v[4] as u16,
            monitor_mux: v[5] as u8,
            monitor_enable: v[6] != 0,
            acq_enable: v[7] != 0,
        }
    }

    pub fn gain_mv_per_fc(&self) -> f64 {
        GAIN_TABLE_MV_PER_FC[self.gain_sel as usize & 7]
    }
}

impl ChannelConfig {
    fn values(&self) -> [u64; 3] {
        [self.mask as u64, self.test_pulse_enable as u64, self.trim as u64]
    }

    fn from_values(v: [u64; 3]) -> Self {
        Self {
            mask: v[0] != 0,
            test_pulse_enable: v[1] != 0,
            trim: v[2] as u8,
        }
    }
}

fn check(field: impl Into<String>, value: u64, width: usize) -> Result<(), ConfigError> {
    let max = (1u64 << width) - 1;
    if value > max {
        return Err(ConfigError::OutOfRange {
            field: field.into(),
            value,
            max,
        });
    }
    Ok(())
}

impl VmmConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (f, v) in GLOBAL_LAYOUT.iter().zip(self.global.values()) {
            check(f.name, v, f.width)?;
        }
        for (c, ch) in self.channels.iter().enumerate() {
            for (f, v) in CHANNEL_LAYOUT.iter().zip(ch.values()) {
                check(format!("channel.{c}.{}", f.name), v, f.width)?;
            }
        }
        Ok(())
    }
}

fn put_bits(buf: &mut [u8], start: usize, width: usize, value: u64) {
    for i in 0..width {
        if (value >> (width - 1 - i)) & 1 == 1 {
            let bit = start + i;
            buf[bit / 8] |= 0x80 >> (bit % 8);
        }
    }
}

fn get_bits(buf: &[u8], start: usize, width: usize) -> u64 {
    (0..width).fold(0u64, |acc, i| {
        let bit = start + i;
        (acc << 1) | ((buf[bit / 8] >> (7 - bit % 8)) & 1) as u64
    })
}

/// Packs a configuration into its 216-byte stream.
pub fn encode(cfg: &VmmConfig) -> Result<[u8; CONFIG_BYTES], ConfigError> {
    cfg.validate()?;
    let mut out = [0u8; CONFIG_BYTES];
    for (f, v) in GLOBAL_LAYOUT.iter().zip(cfg.global.values()) {
        put_bits(&mut out, f.offset, f.width, v);
    }
    for (c, ch) in cfg.channels.iter().enumerate() {
        let base = GLOBAL_BITS + CHANNEL_BITS * c;
        for (f, v) in CHANNEL_LAYOUT.iter().zip(ch.values()) {
            put_bits(&mut out, base + f.offset, f.width, v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DecodeMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub config: VmmConfig,
    /// Stream positions of nonzero reserved bits (lenient mode only).
    pub reserved_bits_set: Vec<usize>,
}

fn reserved_positions(bits: &[u8]) -> Vec<usize> {
    let global = GLOBAL_USED_BITS..GLOBAL_BITS;
    let channels = (0..CHANNELS_PER_VMM).flat_map(|c| {
        let base = GLOBAL_BITS + CHANNEL_BITS * c;
        base + CHANNEL_USED_BITS..base + CHANNEL_BITS
    });
    global
        .chain(channels)
        .filter(|&b| get_bits(bits, b, 1) == 1)
        .collect()
}

/// Strict decode: nonzero reserved bits are an error.
pub fn decode(bits: &[u8]) -> Result<VmmConfig, ConfigError> {
    decode_with(bits, DecodeMode::Strict).map(|d| d.config)
}

pub fn decode_with(bits: &[u8], mode: DecodeMode) -> Result<Decoded, ConfigError> {
    if bits.len() != CONFIG_BYTES {
        return Err(ConfigError::Length {
            expected: CONFIG_BYTES,
            actual: bits.len(),
        });
    }
    let reserved = reserved_positions(bits);
    if mode == DecodeMode::Strict && !reserved.is_empty() {
        return Err(ConfigError::ReservedBits(reserved));
    }
    let mut gv = [0u64; 8];
    for (slot, f) in gv.iter_mut().zip(GLOBAL_LAYOUT.iter()) {
        *slot = get_bits(bits, f.offset, f.width);
    }
    let mut config = VmmConfig {
        global: GlobalConfig::from_values(gv),
        ..VmmConfig::default()
    };
    for (c, ch) in config.channels.iter_mut().enumerate() {
        let base = GLOBAL_BITS + CHANNEL_BITS * c;
        let mut cv = [0u64; 3];
        for (slot, f) in cv.iter_mut().zip(CHANNEL_LAYOUT.iter()) {
            *slot = get_bits(bits, base + f.offset, f.width);
        }
        *ch = ChannelConfig::from_values(cv);
    }
    Ok(Decoded {
        config,
        reserved_bits_set: reserved,
    })
}

/// `(name, value)` for every field in stable order: globals, then channels.
fn field_values(cfg: &VmmConfig) -> Vec<(String, u64)> {
    let mut out: Vec<(String, u64)> = GLOBAL_LAYOUT
        .iter()
        .zip(cfg.global.values())
        .map(|(f, v)| (f.name.to_string(), v))
        .collect();
    for (c, ch) in cfg.channels.iter().enumerate() {
        for (f, v) in CHANNEL_LAYOUT.iter().zip(ch.values()) {
            out.push((format!("channel.{c}.{}", f.name), v));
        }
    }
    out
}

fn annotate(name: &str, value: u64) -> String {
    match name {
        "polarity" => format!(" ({})", if value == 1 { "positive" } else { "negative" }),
        "gain_sel" => format!(" ({:.1} mV/fC)", GAIN_TABLE_MV_PER_FC[value as usize & 7]),
        "peak_time_sel" => format!(" ({} ns)", PEAK_TIME_NS[value as usize & 3]),
        "monitor_mux" => match value {
            0..=63 => format!(" (channel {value} baseline)"),
            64 => " (threshold)".to_string(),
            65 => " (pulser)".to_string(),
            66 => " (reference)".to_string(),
            _ => " (reserved)".to_string(),
        },
        _ => String::new(),
    }
}

/// Human-readable table of every non-default field.
pub fn describe(cfg: &VmmConfig) -> String {
    let mut out = String::from("# vmm configuration (non-default fields)\n");
    for (name, value) in field_values(cfg) {
        if value != 0 {
            let _ = writeln!(out, "{name} = {value}{}", annotate(&name, value));
        }
    }
    out
}

/// One line per field whose value differs: `name: a -> b`.
pub fn diff(a: &VmmConfig, b: &VmmConfig) -> Vec<String> {
    field_values(a)
        .into_iter()
        .zip(field_values(b))
        .filter(|((_, va), (_, vb))| va != vb)
        .map(|((name, va), (_, vb))| format!("{name}: {va} -> {vb}"))
        .collect()
}

/// Sets one named field (`gain_sel`, `channel.12.trim`, ...).
pub fn set_field(cfg: &mut VmmConfig, name: &str, value: u64) -> Result<(), ConfigError> {
    if let Some(i) = GLOBAL_LAYOUT.iter().position(|f| f.name == name) {
        check(name, value, GLOBAL_LAYOUT[i].width)?;
        let mut v = cfg.global.values();
        v[i] = value;
        cfg.global = GlobalConfig::from_values(v);
        return Ok(());
    }
    let unknown = || ConfigError::UnknownField(name.to_string());
    let rest = name.strip_prefix("channel.").ok_or_else(unknown)?;
    let (idx, field) = rest.split_once('.').ok_or_else(unknown)?;
    let c: usize = idx.parse().map_err(|_| unknown())?;
    if c >= CHANNELS_PER_VMM {
        return Err(unknown());
    }
    let i = CHANNEL_LAYOUT
        .iter()
        .position(|f| f.name == field)
        .ok_or_else(unknown)?;
    check(name, value, CHANNEL_LAYOUT[i].width)?;
    let mut v = cfg.channels[c].values();
    v[i] = value;
    cfg.channels[c] = ChannelConfig::from_values(v);
    Ok(())
}

/// Parses a line-oriented `name = integer` field file on top of the
/// all-zero configuration. `#` starts a comment.
pub fn parse_field_file(text: &str) -> Result<VmmConfig, ConfigError> {
    let mut cfg = VmmConfig::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| ConfigError::Parse {
            line: n + 1,
            message,
        };
        let (name, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err("expected `name = integer`".into()))?;
        let value: u64 = value
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("`{}` is not an integer", value.trim())))?;
        set_field(&mut cfg, name.trim(), value)?;
    }
    Ok(cfg)
}

/// Field file text that parses back to `cfg` (non-default fields only).
pub fn to_field_file(cfg: &VmmConfig) -> String {
    field_values(cfg)
        .into_iter()
        .filter(|(_, v)| *v != 0)
        .map(|(name, v)| format!("{name} = {v}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_config_encodes_to_zero_bytes() {
        let bytes = encode(&VmmConfig::default()).unwrap();
        assert_eq!(bytes.len(), 216);
        assert!(bytes.iter().all(|&b| b == 0));
    }

    #[test]
    fn threshold_only_sets_bits_6_to_15() {
        let mut cfg = VmmConfig::default();
        cfg.global.threshold_dac = 1023;
        let bytes = encode(&cfg).unwrap();
        assert_eq!(bytes[0], 0b0000_0011);
        assert_eq!(bytes[1], 0b1111_1111);
        assert!(bytes[2..].iter().all(|&b| b == 0));
    }

    #[test]
    fn channel_block_offsets() {
        let mut cfg = VmmConfig::default();
        cfg.channels[1].trim = 31;
        let bytes = encode(&cfg).unwrap();
        // channel 1 starts at bit 216 = byte 27; trim occupies bits +2..+6
        assert_eq!(bytes[27], 0b0011_1110);
        assert_eq!(bytes.iter().filter(|&&b| b != 0).count(), 1);
    }

    #[test]
    fn out_of_range_names_field() {
        let mut cfg = VmmConfig::default();
        cfg.global.threshold_dac = 1024;
        match encode(&cfg) {
            Err(ConfigError::OutOfRange { field, value, .. }) => {
                assert_eq!(field, "threshold_dac");
                assert_eq!(value, 1024);
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut cfg = VmmConfig::default();
        cfg.channels[9].trim = 32;
        assert!(matches!(encode(&cfg), Err(ConfigError::OutOfRange { field, .. }) if field == "channel.9.trim"));
    }

    #[test]
    fn decode_zero_and_wrong_length() {
        let d = decode_with(&[0u8; 216], DecodeMode::Strict).unwrap();
        assert_eq!(d.config, VmmConfig::default());
        assert!(d.reserved_bits_set.is_empty());
        assert_eq!(
            decode(&[0u8; 215]),
            Err(ConfigError::Length {
                expected: 216,
                actual: 215
            })
        );
    }

    #[test]
    fn reserved_bits_strict_vs_lenient() {
        let mut bytes = [0u8; 216];
        bytes[5] = 0x01; // bit 47, global reserved
        assert_eq!(decode(&bytes), Err(ConfigError::ReservedBits(vec![47])));
        let d = decode_with(&bytes, DecodeMode::Lenient).unwrap();
        assert_eq!(d.reserved_bits_set, vec![47]);
        assert_eq!(d.config, VmmConfig::default());
    }

    #[test]
    fn describe_lines() {
        assert_eq!(
            describe(&VmmConfig::default()),
            "# vmm configuration (non-default fields)\n"
        );
        let mut cfg = VmmConfig::default();
        cfg.global.gain_sel = 2;
        cfg.channels[3].mask = true;
        let text = describe(&cfg);
        assert!(text.contains("gain_sel = 2 (3.0 mV/fC)\n"));
        assert!(text.contains("channel.3.mask = 1\n"));
        assert_eq!(text, describe(&cfg));
    }

    #[test]
    fn field_file_round_trip_and_errors() {
        let text = "# bench defaults\ngain_sel = 2\nthreshold_dac=250\nchannel.5.mask = 1\n";
        let cfg = parse_field_file(text).unwrap();
        assert_eq!(cfg.global.gain_sel, 2);
        assert_eq!(cfg.global.threshold_dac, 250);
        assert!(cfg.channels[5].mask);
        assert_eq!(parse_field_file(&to_field_file(&cfg)).unwrap(), cfg);

        assert_eq!(
            parse_field_file("gain = 1"),
            Err(ConfigError::UnknownField("gain".into()))
        );
        assert!(matches!(
            parse_field_file("channel.64.trim = 1"),
            Err(ConfigError::UnknownField(_))
        ));
        assert!(matches!(
            parse_field_file("gain_sel = two"),
            Err(ConfigError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_field_file("gain_sel = 8"),
            Err(ConfigError::OutOfRange { .. })
        ));
    }

    #[test]
    fn diff_lists_changed_fields() {
        let a = VmmConfig::default();
        let mut b = a.clone();
        b.global.pulser_dac = 100;
        b.channels[63].test_pulse_enable = true;
        assert_eq!(
            diff(&a, &b),
            vec![
                "pulser_dac: 0 -> 100".to_string(),
                "channel.63.test_pulse_enable: 0 -> 1".to_string()
            ]
        );
        assert!(diff(&a, &a).is_empty());
    }
}
