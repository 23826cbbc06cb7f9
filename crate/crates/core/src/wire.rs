//! Framed binary protocol between test software and a board.
//!
//! Every frame is a 12-byte header followed by a typed payload:
//!
//! ```text
//! 0      2     3        4            8               12
//! +------+-----+--------+------------+---------------+-----------
//! | A7 5C| 01  |msg_type| seq (BE32) | payload_len   | payload...
//! +------+-----+--------+------------+---------------+-----------
//! ```
//!
//! All integers are big-endian. One frame per datagram on UDP.

use thiserror::Error;

use crate::config::CONFIG_BYTES;
use crate::device::{HitRecord, PDO_MAX};

pub const MAGIC: [u8; 2] = [0xA7, 0x5C];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 12;
pub const MAX_FRAME_LEN: usize = 65_507;
pub const MAX_HITS_PER_FRAME: usize = 4_000;
/// Largest sample count that fits one XADC_RESP frame.
pub const MAX_XADC_SAMPLES: usize = (MAX_FRAME_LEN - HEADER_LEN - 3) / 2;
const HIT_LEN: usize = 8;

pub mod msg {
    pub const CONFIG_WRITE: u8 = 0x01;
    pub const CONFIG_ACK: u8 = 0x02;
    pub const RUN_START: u8 = 0x03;
    pub const RUN_STOP: u8 = 0x04;
    pub const HIT_DATA: u8 = 0x05;
    pub const XADC_REQ: u8 = 0x06;
    pub const XADC_RESP: u8 = 0x07;
    pub const PULSE_TRIGGER: u8 = 0x08;
    pub const SIGBOARD_SET: u8 = 0x09;
    pub const STATUS_REQ: u8 = 0x0A;
    pub const STATUS_RESP: u8 = 0x0B;
    pub const ERROR: u8 = 0x0C;
}

/// Codes carried in ERROR frames.
pub mod error_code {
    pub const BAD_VMM: u16 = 0x0001;
    pub const MONITOR_DISABLED: u16 = 0x0002;
    pub const NOT_RUNNING: u16 = 0x0003;
    pub const MALFORMED: u16 = 0x0004;
    pub const RESERVED_MUX: u16 = 0x0005;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated header: {0} bytes")]
    TruncatedHeader(usize),
    #[error("bad magic {0:02X?}")]
    BadMagic([u8; 2]),
    #[error("unknown protocol version {0:#04x}")]
    UnknownVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownMsgType(u8),
    #[error("payload_len {declared} but {actual} payload bytes present")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("malformed payload for message {msg_type:#04x}: {reason}")]
    MalformedPayload { msg_type: u8, reason: String },
}

impl DecodeError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u16 {
        match self {
            DecodeError::TruncatedHeader(_) => 1,
            DecodeError::BadMagic(_) => 2,
            DecodeError::UnknownVersion(_) => 3,
            DecodeError::UnknownMsgType(_) => 4,
            DecodeError::LengthMismatch { .. } => 5,
            DecodeError::MalformedPayload { .. } => 6,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN}-byte limit")]
    FrameTooLarge(usize),
    #[error("{0} hits exceed the per-frame limit of {MAX_HITS_PER_FRAME}")]
    TooManyHits(usize),
    #[error("field out of range: {0}")]
    FieldRange(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    ConfigWrite { vmm: u8, bitstream: Box<[u8; CONFIG_BYTES]> },
    ConfigAck { vmm: u8, crc: u32 },
    RunStart,
    RunStop,
    HitData(Vec<HitRecord>),
    XadcReq { vmm: u8, n_samples: u16 },
    XadcResp { vmm: u8, codes: Vec<u16> },
    PulseTrigger { count: u32, period_us: u32 },
    SigboardSet { mode: u8, amplitude_counts: u16, seed: u32 },
    StatusReq,
    StatusResp { board_type: u8, n_vmm: u8, run_state: u8, fw: u16 },
    Error { code: u16, seq_ref: u32 },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::ConfigWrite { .. } => msg::CONFIG_WRITE,
            Message::ConfigAck { .. } => msg::CONFIG_ACK,
            Message::RunStart => msg::RUN_START,
            Message::RunStop => msg::RUN_STOP,
            Message::HitData(_) => msg::HIT_DATA,
            Message::XadcReq { .. } => msg::XADC_REQ,
            Message::XadcResp { .. } => msg::XADC_RESP,
            Message::PulseTrigger { .. } => msg::PULSE_TRIGGER,
            Message::SigboardSet { .. } => msg::SIGBOARD_SET,
            Message::StatusReq => msg::STATUS_REQ,
            Message::StatusResp { .. } => msg::STATUS_RESP,
            Message::Error { .. } => msg::ERROR,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::ConfigWrite { .. } => "CONFIG_WRITE",
            Message::ConfigAck { .. } => "CONFIG_ACK",
            Message::RunStart => "RUN_START",
            Message::RunStop => "RUN_STOP",
            Message::HitData(_) => "HIT_DATA",
            Message::XadcReq { .. } => "XADC_REQ",
            Message::XadcResp { .. } => "XADC_RESP",
            Message::PulseTrigger { .. } => "PULSE_TRIGGER",
            Message::SigboardSet { .. } => "SIGBOARD_SET",
            Message::StatusReq => "STATUS_REQ",
            Message::StatusResp { .. } => "STATUS_RESP",
            Message::Error { .. } => "ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub seq: u32,
    pub message: Message,
}

impl Frame {
    pub fn new(seq: u32, message: Message) -> Self {
        Self { seq, message }
    }
}

fn check_hit(h: &HitRecord) -> Result<(), String> {
    if h.vmm > 7 || h.channel > 63 || h.pdo > PDO_MAX || h.bcid > 4095 {
        return Err(format!("hit out of range: {h:?}"));
    }
    Ok(())
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, EncodeError> {
    let mut payload = Vec::new();
    match &frame.message {
        Message::ConfigWrite { vmm, bitstream } => {
            payload.push(*vmm);
            payload.extend_from_slice(&bitstream[..]);
        }
        Message::ConfigAck { vmm, crc } => {
            payload.push(*vmm);
            payload.extend_from_slice(&crc.to_be_bytes());
        }
        Message::RunStart | Message::RunStop | Message::StatusReq => {}
        Message::HitData(hits) => {
            if hits.len() > MAX_HITS_PER_FRAME {
                return Err(EncodeError::TooManyHits(hits.len()));
            }
            payload.reserve(2 + HIT_LEN * hits.len());
            payload.extend_from_slice(&(hits.len() as u16).to_be_bytes());
            for h in hits {
                check_hit(h).map_err(EncodeError::FieldRange)?;
                payload.push(h.vmm);
                payload.push(h.channel);
                payload.extend_from_slice(&h.pdo.to_be_bytes());
                payload.extend_from_slice(&h.bcid.to_be_bytes());
                payload.extend_from_slice(&h.flags.to_be_bytes());
            }
        }
        Message::XadcReq { vmm, n_samples } => {
            payload.push(*vmm);
            payload.extend_from_slice(&n_samples.to_be_bytes());
        }
        Message::XadcResp { vmm, codes } => {
            if codes.len() > MAX_XADC_SAMPLES {
                return Err(EncodeError::FrameTooLarge(HEADER_LEN + 3 + 2 * codes.len()));
            }
            payload.push(*vmm);
            payload.extend_from_slice(&(codes.len() as u16).to_be_bytes());
            for c in codes {
                payload.extend_from_slice(&c.to_be_bytes());
            }
        }
        Message::PulseTrigger { count, period_us } => {
            payload.extend_from_slice(&count.to_be_bytes());
            payload.extend_from_slice(&period_us.to_be_bytes());
        }
        Message::SigboardSet {
            mode,
            amplitude_counts,
            seed,
        } => {
            payload.push(*mode);
            payload.extend_from_slice(&amplitude_counts.to_be_bytes());
            payload.extend_from_slice(&seed.to_be_bytes());
        }
        Message::StatusResp {
            board_type,
            n_vmm,
            run_state,
            fw,
        } => {
            payload.extend_from_slice(&[*board_type, *n_vmm, *run_state]);
            payload.extend_from_slice(&fw.to_be_bytes());
        }
        Message::Error { code, seq_ref } => {
            payload.extend_from_slice(&code.to_be_bytes());
            payload.extend_from_slice(&seq_ref.to_be_bytes());
        }
    }
    let total = HEADER_LEN + payload.len();
    if total > MAX_FRAME_LEN {
        return Err(EncodeError::FrameTooLarge(total));
    }
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.message.msg_type());
    out.extend_from_slice(&frame.seq.to_be_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Header fields of a frame whose header parsed, even if the payload did not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawHeader {
    pub msg_type: u8,
    pub seq: u32,
    pub payload_len: usize,
}

pub fn decode_header(bytes: &[u8]) -> Result<RawHeader, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::TruncatedHeader(bytes.len()));
    }
    if bytes[0..2] != MAGIC {
        return Err(DecodeError::BadMagic([bytes[0], bytes[1]]));
    }
    if bytes[2] != VERSION {
        return Err(DecodeError::UnknownVersion(bytes[2]));
    }
    let msg_type = bytes[3];
    if !(msg::CONFIG_WRITE..=msg::ERROR).contains(&msg_type) {
        return Err(DecodeError::UnknownMsgType(msg_type));
    }
    Ok(RawHeader {
        msg_type,
        seq: u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]),
        payload_len: u32::from_be_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
    })
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, DecodeError> {
    let header = decode_header(bytes)?;
    let p = &bytes[HEADER_LEN..];
    if p.len() != header.payload_len {
        return Err(DecodeError::LengthMismatch {
            declared: header.payload_len,
            actual: p.len(),
        });
    }
    let t = header.msg_type;
    let malformed = |reason: String| DecodeError::MalformedPayload { msg_type: t, reason };
    let expect_len = |n: usize| {
        if p.len() == n {
            Ok(())
        } else {
            Err(malformed(format!("expected {n} payload bytes, got {}", p.len())))
        }
    };
    let message = match t {
        msg::CONFIG_WRITE => {
            expect_len(1 + CONFIG_BYTES)?;
            let mut bitstream = Box::new([0u8; CONFIG_BYTES]);
            bitstream.copy_from_slice(&p[1..]);
            Message::ConfigWrite { vmm: p[0], bitstream }
        }
        msg::CONFIG_ACK => {
            expect_len(5)?;
            Message::ConfigAck {
                vmm: p[0],
                crc: be32(p, 1),
            }
        }
        msg::RUN_START => {
            expect_len(0)?;
            Message::RunStart
        }
        msg::RUN_STOP => {
            expect_len(0)?;
            Message::RunStop
        }
        msg::HIT_DATA => {
            if p.len() < 2 {
                return Err(malformed("missing hit count".into()));
            }
            let n = be16(p, 0) as usize;
            if n > MAX_HITS_PER_FRAME {
                return Err(malformed(format!("{n} hits exceed per-frame limit")));
            }
            expect_len(2 + HIT_LEN * n)?;
            let hits = p[2..]
                .chunks_exact(HIT_LEN)
                .map(|c| {
                    let h = HitRecord {
                        vmm: c[0],
                        channel: c[1],
                        pdo: be16(c, 2),
                        bcid: be16(c, 4),
                        flags: be16(c, 6),
                    };
                    check_hit(&h).map(|_| h)
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(malformed)?;
            Message::HitData(hits)
        }
        msg::XADC_REQ => {
            expect_len(3)?;
            Message::XadcReq {
                vmm: p[0],
                n_samples: be16(p, 1),
            }
        }
        msg::XADC_RESP => {
            if p.len() < 3 {
                return Err(malformed("missing sample count".into()));
            }
            let n = be16(p, 1) as usize;
            expect_len(3 + 2 * n)?;
            Message::XadcResp {
                vmm: p[0],
                codes: p[3..].chunks_exact(2).map(|c| be16(c, 0)).collect(),
            }
        }
        msg::PULSE_TRIGGER => {
            expect_len(8)?;
            Message::PulseTrigger {
                count: be32(p, 0),
                period_us: be32(p, 4),
            }
        }
        msg::SIGBOARD_SET => {
            expect_len(7)?;
            Message::SigboardSet {
                mode: p[0],
                amplitude_counts: be16(p, 1),
                seed: be32(p, 3),
            }
        }
        msg::STATUS_REQ => {
            expect_len(0)?;
            Message::StatusReq
        }
        msg::STATUS_RESP => {
            expect_len(5)?;
            Message::StatusResp {
                board_type: p[0],
                n_vmm: p[1],
                run_state: p[2],
                fw: be16(p, 3),
            }
        }
        msg::ERROR => {
            expect_len(6)?;
            Message::Error {
                code: be16(p, 0),
                seq_ref: be32(p, 2),
            }
        }
        other => return Err(DecodeError::UnknownMsgType(other)),
    };
    Ok(Frame {
        seq: header.seq,
        message,
    })
}

/// Splits a hit list into HIT_DATA-sized batches.
pub fn hit_batches(hits: &[HitRecord]) -> impl Iterator<Item = &[HitRecord]> {
    hits.chunks(MAX_HITS_PER_FRAME)
}

/// Space-separated uppercase hex, 16 bytes per line.
pub fn hex_dump(bytes: &[u8]) -> String {
    bytes
        .chunks(16)
        .map(|line| {
            line.iter()
                .map(|b| format!("{b:02X}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parses hex text, ignoring whitespace and `#` comments.
pub fn parse_hex(text: &str) -> Result<Vec<u8>, String> {
    let digits: String = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| l.chars())
        .filter(|c| !c.is_whitespace())
        .collect();
    if !digits.len().is_multiple_of(2) {
        return Err("odd number of hex digits".into());
    }
    (0..digits.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&digits[i..i + 2], 16)
                .map_err(|_| format!("invalid hex `{}`", &digits[i..i + 2]))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_start_bytes() {
        let bytes = encode_frame(&Frame::new(1, Message::RunStart)).unwrap();
        assert_eq!(
            bytes,
            [0xA7, 0x5C, 0x01, 0x03, 0, 0, 0, 1, 0, 0, 0, 0]
        );
    }

    #[test]
    fn config_write_payload_len() {
        let f = Frame::new(
            9,
            Message::ConfigWrite {
                vmm: 0,
                bitstream: Box::new([0u8; CONFIG_BYTES]),
            },
        );
        let bytes = encode_frame(&f).unwrap();
        assert_eq!(be32(&bytes, 8), 217);
        assert_eq!(bytes.len(), 12 + 217);
        assert_eq!(decode_frame(&bytes).unwrap(), f);
    }

    #[test]
    fn decode_errors_are_distinct() {
        assert_eq!(decode_frame(&[0u8; 11]), Err(DecodeError::TruncatedHeader(11)));
        let mut ok = encode_frame(&Frame::new(1, Message::RunStart)).unwrap();
        ok[0] = 0;
        assert!(matches!(decode_frame(&ok), Err(DecodeError::BadMagic(_))));
        let mut v = encode_frame(&Frame::new(1, Message::RunStart)).unwrap();
        v[2] = 2;
        assert_eq!(decode_frame(&v), Err(DecodeError::UnknownVersion(2)));
        let mut t = encode_frame(&Frame::new(1, Message::RunStart)).unwrap();
        t[3] = 0x0D;
        assert_eq!(decode_frame(&t), Err(DecodeError::UnknownMsgType(0x0D)));

        // payload_len = 4 but only 3 bytes follow
        let mut short = encode_frame(&Frame::new(1, Message::RunStart)).unwrap();
        short[11] = 4;
        short.extend_from_slice(&[1, 2, 3]);
        assert_eq!(
            decode_frame(&short),
            Err(DecodeError::LengthMismatch {
                declared: 4,
                actual: 3
            })
        );
        // trailing bytes
        let mut trailing = encode_frame(&Frame::new(1, Message::RunStart)).unwrap();
        trailing.push(0);
        assert!(matches!(
            decode_frame(&trailing),
            Err(DecodeError::LengthMismatch { .. })
        ));
        // well-framed but wrong size for the type
        let mut bad = encode_frame(&Frame::new(1, Message::RunStart)).unwrap();
        bad[11] = 1;
        bad.push(0);
        assert!(matches!(
            decode_frame(&bad),
            Err(DecodeError::MalformedPayload { msg_type: 0x03, .. })
        ));

        let codes = [
            DecodeError::TruncatedHeader(0).code(),
            DecodeError::BadMagic([0, 0]).code(),
            DecodeError::UnknownVersion(0).code(),
            DecodeError::UnknownMsgType(0).code(),
            DecodeError::LengthMismatch { declared: 0, actual: 0 }.code(),
            DecodeError::MalformedPayload { msg_type: 0, reason: String::new() }.code(),
        ];
        let mut dedup = codes.to_vec();
        dedup.dedup();
        assert_eq!(dedup.len(), codes.len());
    }

    #[test]
    fn hit_limits() {
        let hit = HitRecord { vmm: 0, channel: 0, pdo: 0, bcid: 0, flags: 0 };
        let too_many = Message::HitData(vec![hit; MAX_HITS_PER_FRAME + 1]);
        assert_eq!(
            encode_frame(&Frame::new(0, too_many)),
            Err(EncodeError::TooManyHits(4001))
        );
        let full = Frame::new(0, Message::HitData(vec![hit; MAX_HITS_PER_FRAME]));
        let bytes = encode_frame(&full).unwrap();
        assert_eq!(bytes.len(), 12 + 2 + 8 * 4000);
        assert_eq!(decode_frame(&bytes).unwrap(), full);

        let bad = HitRecord { channel: 64, ..hit };
        assert!(matches!(
            encode_frame(&Frame::new(0, Message::HitData(vec![bad]))),
            Err(EncodeError::FieldRange(_))
        ));
    }

    #[test]
    fn xadc_resp_size_limit() {
        let ok = Message::XadcResp { vmm: 0, codes: vec![1; MAX_XADC_SAMPLES] };
        assert!(encode_frame(&Frame::new(0, ok)).unwrap().len() <= MAX_FRAME_LEN);
        let big = Message::XadcResp { vmm: 0, codes: vec![1; MAX_XADC_SAMPLES + 1] };
        assert!(matches!(
            encode_frame(&Frame::new(0, big)),
            Err(EncodeError::FrameTooLarge(_))
        ));
    }

    #[test]
    fn hex_helpers() {
        let bytes = vec![0xA7, 0x5C, 0x00, 0xFF];
        assert_eq!(hex_dump(&bytes), "A7 5C 00 FF");
        assert_eq!(parse_hex("a7 5C # magic\n00ff\n").unwrap(), bytes);
        assert!(parse_hex("abc").is_err());
        assert!(parse_hex("zz").is_err());
    }
}
