//! Binary wire protocol between a controller and the (emulated) sonar.
//!
//! Frame layout, little-endian throughout:
//!
//! ```text
//! +------+------+---------+--------+-------------+---------+----------+
//! | 0x50 | 0x33 | version | msg_id | payload_len | payload | checksum |
//! |  1   |  1   |    1    |   2    |      2      |   len   |    2     |
//! +------+------+---------+--------+-------------+---------+----------+
//! ```
//!
//! The checksum is the byte sum of everything before it, modulo 65536.

use std::fmt;

use thiserror::Error;

use crate::acoustics::{SamplingPlan, WaterConditions};
use crate::scanmodel::{Gain, ScanConfig, ScanLine};

pub const MAGIC: [u8; 2] = [0x50, 0x33];
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 7;
pub const CHECKSUM_LEN: usize = 2;
pub const MAX_PAYLOAD: usize = u16::MAX as usize;

/// Duration of one sample-period tick in seconds.
pub const TICK_SECONDS: f64 = 25e-9;

pub mod msg_id {
    pub const DEVICE_INFO: u16 = 0x0001;
    pub const SCAN_REQUEST: u16 = 0x0010;
    pub const SCAN_LINE_DATA: u16 = 0x0011;
    pub const ERROR_REPLY: u16 = 0x00FF;
}

/// Request for one sector sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanRequest {
    pub sector_start_grad: i16,
    pub sector_end_grad: i16,
    pub angular_step_grad: u8,
    pub sample_count: u16,
    pub sample_period_ticks: u16,
    pub gain: Gain,
}

impl ScanRequest {
    /// Builds the request for `config`, rounding the sample period to ticks.
    pub fn from_config(config: &ScanConfig) -> Result<Self, EncodeError> {
        Ok(Self {
            sector_start_grad: config.sector_start_grad,
            sector_end_grad: config.sector_end_grad,
            angular_step_grad: config.angular_step_grad,
            sample_count: u16::try_from(config.plan.sample_count)
                .map_err(|_| EncodeError::Invalid("sample count exceeds 65535".into()))?,
            sample_period_ticks: period_to_ticks(config.plan.sample_period_s)?,
            gain: config.gain,
        })
    }

    /// The scan configuration this request describes under `conditions`.
    pub fn to_config(&self, conditions: &WaterConditions<f64>) -> crate::Result<ScanConfig> {
        let plan = SamplingPlan::new(
            crate::acoustics::sound_speed(conditions),
            ticks_to_period(self.sample_period_ticks),
            self.sample_count as u32,
        )?;
        ScanConfig::new(
            plan,
            self.gain,
            self.sector_start_grad,
            self.sector_end_grad,
            self.angular_step_grad,
        )
    }
}

/// Quantizes a sample period to the nearest 25 ns tick.
pub fn period_to_ticks(period_s: f64) -> Result<u16, EncodeError> {
    let ticks = (period_s / TICK_SECONDS).round();
    if !(1.0..=u16::MAX as f64).contains(&ticks) {
        return Err(EncodeError::Invalid(format!(
            "sample period {period_s} s is not representable in 25 ns ticks"
        )));
    }
    Ok(ticks as u16)
}

pub fn ticks_to_period(ticks: u16) -> f64 {
    ticks as f64 * TICK_SECONDS
}

/// A protocol message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    DeviceInfo {
        firmware_major: u8,
        firmware_minor: u8,
    },
    ScanRequest(ScanRequest),
    ScanLineData {
        angle_grad: i16,
        gain: Gain,
        intensities: Vec<u8>,
    },
    ErrorReply {
        code: u8,
        detail: String,
    },
}

impl Message {
    pub fn msg_id(&self) -> u16 {
        match self {
            Message::DeviceInfo { .. } => msg_id::DEVICE_INFO,
            Message::ScanRequest(_) => msg_id::SCAN_REQUEST,
            Message::ScanLineData { .. } => msg_id::SCAN_LINE_DATA,
            Message::ErrorReply { .. } => msg_id::ERROR_REPLY,
        }
    }

    pub fn scan_line(line: &ScanLine, gain: Gain) -> Self {
        Message::ScanLineData {
            angle_grad: line.angle_grad,
            gain,
            intensities: line.intensities.clone(),
        }
    }

    fn payload(&self) -> Result<Vec<u8>, EncodeError> {
        let mut out = Vec::new();
        match self {
            Message::DeviceInfo {
                firmware_major,
                firmware_minor,
            } => out.extend_from_slice(&[*firmware_major, *firmware_minor]),
            Message::ScanRequest(req) => {
                if req.angular_step_grad == 0 {
                    return Err(EncodeError::Invalid("angular step must be at least 1".into()));
                }
                out.extend_from_slice(&req.sector_start_grad.to_le_bytes());
                out.extend_from_slice(&req.sector_end_grad.to_le_bytes());
                out.push(req.angular_step_grad);
                out.extend_from_slice(&req.sample_count.to_le_bytes());
                out.extend_from_slice(&req.sample_period_ticks.to_le_bytes());
                out.push(req.gain.index());
            }
            Message::ScanLineData {
                angle_grad,
                gain,
                intensities,
            } => {
                let count = u16::try_from(intensities.len())
                    .map_err(|_| EncodeError::PayloadTooLarge(5 + intensities.len()))?;
                out.reserve(5 + intensities.len());
                out.extend_from_slice(&angle_grad.to_le_bytes());
                out.push(gain.index());
                out.extend_from_slice(&count.to_le_bytes());
                out.extend_from_slice(intensities);
            }
            Message::ErrorReply { code, detail } => {
                out.push(*code);
                out.extend_from_slice(detail.as_bytes());
            }
        }
        if out.len() > MAX_PAYLOAD {
            return Err(EncodeError::PayloadTooLarge(out.len()));
        }
        Ok(out)
    }

    fn from_payload(id: u16, payload: &[u8]) -> Result<Self, DecodeError> {
        let malformed = |reason: String| DecodeError::Malformed { msg_id: id, reason };
        let expect_len = |n: usize| {
            if payload.len() == n {
                Ok(())
            } else {
                Err(malformed(format!("payload is {} bytes, expected {n}", payload.len())))
            }
        };
        let u16_at = |i: usize| u16::from_le_bytes([payload[i], payload[i + 1]]);
        let i16_at = |i: usize| i16::from_le_bytes([payload[i], payload[i + 1]]);
        let gain_at = |i: usize| {
            Gain::from_index(payload[i]).ok_or_else(|| malformed(format!("gain {} not in 0..=2", payload[i])))
        };
        match id {
            msg_id::DEVICE_INFO => {
                expect_len(2)?;
                Ok(Message::DeviceInfo {
                    firmware_major: payload[0],
                    firmware_minor: payload[1],
                })
            }
            msg_id::SCAN_REQUEST => {
                expect_len(10)?;
                let step = payload[4];
                if step == 0 {
                    return Err(malformed("angular step must be at least 1".into()));
                }
                Ok(Message::ScanRequest(ScanRequest {
                    sector_start_grad: i16_at(0),
                    sector_end_grad: i16_at(2),
                    angular_step_grad: step,
                    sample_count: u16_at(5),
                    sample_period_ticks: u16_at(7),
                    gain: gain_at(9)?,
                }))
            }
            msg_id::SCAN_LINE_DATA => {
                if payload.len() < 5 {
                    return Err(malformed(format!("payload is {} bytes, need at least 5", payload.len())));
                }
                let count = u16_at(3) as usize;
                expect_len(5 + count)?;
                Ok(Message::ScanLineData {
                    angle_grad: i16_at(0),
                    gain: gain_at(2)?,
                    intensities: payload[5..].to_vec(),
                })
            }
            msg_id::ERROR_REPLY => {
                if payload.is_empty() {
                    return Err(malformed("missing error code".into()));
                }
                let detail = std::str::from_utf8(&payload[1..])
                    .map_err(|e| malformed(format!("detail is not UTF-8: {e}")))?;
                Ok(Message::ErrorReply {
                    code: payload[0],
                    detail: detail.to_owned(),
                })
            }
            other => Err(DecodeError::UnknownMsgId(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds 65535")]
    PayloadTooLarge(usize),
    #[error("invalid message: {0}")]
    Invalid(String),
}

/// Problems reported by the stream decoder. None of them stop the stream.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("checksum mismatch: frame says {expected:#06x}, computed {computed:#06x}")]
    ChecksumMismatch { expected: u16, computed: u16 },
    #[error("unknown message id {0:#06x}")]
    UnknownMsgId(u16),
    #[error("malformed payload for message {msg_id:#06x}: {reason}")]
    Malformed { msg_id: u16, reason: String },
}

/// Byte sum modulo 65536.
pub fn checksum(bytes: &[u8]) -> u16 {
    bytes
        .iter()
        .fold(0u16, |acc, &b| acc.wrapping_add(b as u16))
}

/// Serializes `msg` into one complete frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>, EncodeError> {
    let payload = msg.payload()?;
    let mut frame = Vec::with_capacity(HEADER_LEN + payload.len() + CHECKSUM_LEN);
    frame.extend_from_slice(&MAGIC);
    frame.push(VERSION);
    frame.extend_from_slice(&msg.msg_id().to_le_bytes());
    frame.extend_from_slice(&(payload.len() as u16).to_le_bytes());
    frame.extend_from_slice(&payload);
    let sum = checksum(&frame);
    frame.extend_from_slice(&sum.to_le_bytes());
    Ok(frame)
}

/// Decodes exactly one frame occupying the whole of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<Message, DecodeError> {
    let mut dec = StreamDecoder::new();
    let mut events = dec.push(bytes);
    match (events.len(), dec.buffered()) {
        (1, 0) => events.pop().unwrap(),
        _ => Err(DecodeError::Malformed {
            msg_id: 0,
            reason: format!("expected exactly one frame in {} bytes", bytes.len()),
        }),
    }
}

pub type DecodeEvent = Result<Message, DecodeError>;

/// Incremental decoder for a byte stream carrying frames.
///
/// Bytes may arrive in arbitrary chunks. Anything that does not start with
/// the magic and version is skipped. A frame whose checksum fails is
/// reported and the search restarts one byte after its magic, so a false
/// magic inside garbage cannot swallow a real frame behind it.
#[derive(Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    pos: usize,
}

impl fmt::Debug for StreamDecoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StreamDecoder")
            .field("buffered", &self.buffered())
            .finish()
    }
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bytes held back waiting for the rest of a frame.
    pub fn buffered(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Feeds a chunk and returns every event it completes.
    pub fn push(&mut self, chunk: &[u8]) -> Vec<DecodeEvent> {
        self.buf.extend_from_slice(chunk);
        let mut events = Vec::new();
        while let Some(ev) = self.next_event() {
            events.push(ev);
        }
        if self.pos > 0 {
            self.buf.drain(..self.pos);
            self.pos = 0;
        }
        events
    }

    fn next_event(&mut self) -> Option<DecodeEvent> {
        if !self.sync() {
            return None;
        }
        let avail = &self.buf[self.pos..];
        if avail.len() < HEADER_LEN {
            return None;
        }
        let id = u16::from_le_bytes([avail[3], avail[4]]);
        let len = u16::from_le_bytes([avail[5], avail[6]]) as usize;
        let total = HEADER_LEN + len + CHECKSUM_LEN;
        if avail.len() < total {
            return None;
        }
        let frame = &avail[..total];
        let expected = u16::from_le_bytes([frame[total - 2], frame[total - 1]]);
        let computed = checksum(&frame[..HEADER_LEN + len]);
        if expected != computed {
            self.pos += 1;
            return Some(Err(DecodeError::ChecksumMismatch { expected, computed }));
        }
        let ev = Message::from_payload(id, &frame[HEADER_LEN..HEADER_LEN + len]);
        self.pos += total;
        Some(ev)
    }

    /// Advances to the next magic + version. Returns false when more input
    /// is needed to decide.
    fn sync(&mut self) -> bool {
        loop {
            let avail = &self.buf[self.pos..];
            match avail.iter().position(|&b| b == MAGIC[0]) {
                None => {
                    self.pos = self.buf.len();
                    return false;
                }
                Some(skip) => self.pos += skip,
            }
            let avail = &self.buf[self.pos..];
            if avail.len() < 3 {
                return false;
            }
            if avail[1] == MAGIC[1] && avail[2] == VERSION {
                return true;
            }
            self.pos += 1;
        }
    }
}
