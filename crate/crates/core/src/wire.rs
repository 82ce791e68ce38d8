//! Length-prefixed binary framing for the remote client protocol.
//!
//! Every frame is a 12-byte header followed by the payload:
//!
//! ```text
//! 0      2        3         4        8            12
//! +------+--------+---------+--------+------------+---------+
//! | 'RK' | ver=1  | msgtype | seq BE | length BE  | payload |
//! +------+--------+---------+--------+------------+---------+
//! ```

use thiserror::Error;

use crate::sim::CameraFrame;

pub const MAGIC: [u8; 2] = [0x52, 0x4B];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
pub const MAX_PAYLOAD: usize = 1 << 20;

pub const IMAGE_HEADER_LEN: usize = 13;
pub const FORMAT_GRAY8: u8 = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("payload of {0} bytes exceeds the 1 MiB limit")]
    OversizePayload(usize),
    #[error("malformed image payload")]
    BadImage,
}

impl WireError {
    pub fn code(&self) -> &'static str {
        match self {
            WireError::BadMagic(_) => "BadMagic",
            WireError::BadVersion(_) => "BadVersion",
            WireError::OversizePayload(_) => "OversizePayload",
            WireError::BadImage => "BadImage",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Welcome = 2,
    Subscribe = 3,
    Unsubscribe = 4,
    TelemetryImage = 5,
    TelemetryState = 6,
    TelemetryCustom = 7,
    Command = 8,
    CommandAck = 9,
    Heartbeat = 10,
    Error = 11,
    Bye = 12,
}

impl MsgType {
    pub fn from_u8(value: u8) -> Option<MsgType> {
        use MsgType::*;
        Some(match value {
            1 => Hello,
            2 => Welcome,
            3 => Subscribe,
            4 => Unsubscribe,
            5 => TelemetryImage,
            6 => TelemetryState,
            7 => TelemetryCustom,
            8 => Command,
            9 => CommandAck,
            10 => Heartbeat,
            11 => Error,
            12 => Bye,
            _ => return None,
        })
    }
}

/// One protocol frame. `msg_type` keeps the raw byte so that frames with
/// unknown types survive decoding and can be answered with an error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub msg_type: u8,
    pub seq: u32,
    pub payload: Vec<u8>,
}

impl WireFrame {
    pub fn new(msg_type: MsgType, seq: u32, payload: impl Into<Vec<u8>>) -> Self {
        WireFrame { msg_type: msg_type as u8, seq, payload: payload.into() }
    }

    pub fn kind(&self) -> Option<MsgType> {
        MsgType::from_u8(self.msg_type)
    }

    pub fn payload_str(&self) -> Option<&str> {
        std::str::from_utf8(&self.payload).ok()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), WireError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(WireError::OversizePayload(self.payload.len()));
        }
        out.reserve(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type);
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(())
    }
}

pub fn encode(frame: &WireFrame) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    frame.encode_into(&mut out)?;
    Ok(out)
}

/// Decodes as many complete frames as `bytes` holds and returns the unconsumed tail.
///
/// Header fields are validated as soon as they are available, so garbage is
/// rejected without waiting for a full header.
pub fn decode(bytes: &[u8]) -> Result<(Vec<WireFrame>, &[u8]), WireError> {
    let mut frames = Vec::new();
    let mut rest = bytes;
    loop {
        validate_partial_header(rest)?;
        if rest.len() < HEADER_LEN {
            return Ok((frames, rest));
        }
        let len = u32::from_be_bytes([rest[8], rest[9], rest[10], rest[11]]) as usize;
        if rest.len() < HEADER_LEN + len {
            return Ok((frames, rest));
        }
        frames.push(WireFrame {
            msg_type: rest[3],
            seq: u32::from_be_bytes([rest[4], rest[5], rest[6], rest[7]]),
            payload: rest[HEADER_LEN..HEADER_LEN + len].to_vec(),
        });
        rest = &rest[HEADER_LEN + len..];
    }
}

fn validate_partial_header(buf: &[u8]) -> Result<(), WireError> {
    for (i, &expected) in MAGIC.iter().enumerate() {
        match buf.get(i) {
            Some(&b) if b != expected => {
                return Err(WireError::BadMagic([buf[0], buf.get(1).copied().unwrap_or(0)]));
            }
            None => return Ok(()),
            _ => {}
        }
    }
    match buf.get(2) {
        Some(&v) if v != VERSION => return Err(WireError::BadVersion(v)),
        None => return Ok(()),
        _ => {}
    }
    if buf.len() >= HEADER_LEN {
        let len = u32::from_be_bytes([buf[8], buf[9], buf[10], buf[11]]) as usize;
        if len > MAX_PAYLOAD {
            return Err(WireError::OversizePayload(len));
        }
    }
    Ok(())
}

/// Stream reassembly on top of [`decode`].
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, chunk: &[u8]) -> Result<Vec<WireFrame>, WireError> {
        self.buf.extend_from_slice(chunk);
        let (frames, rest) = decode(&self.buf)?;
        let consumed = self.buf.len() - rest.len();
        self.buf.drain(..consumed);
        Ok(frames)
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Serializes a camera frame as a TELEMETRY_IMAGE payload.
pub fn encode_image(frame: &CameraFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + frame.pixels.len());
    out.extend_from_slice(&frame.width.to_be_bytes());
    out.extend_from_slice(&frame.height.to_be_bytes());
    out.push(FORMAT_GRAY8);
    out.extend_from_slice(&frame.timestamp.to_be_bytes());
    out.extend_from_slice(&frame.pixels);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePayload {
    pub width: u16,
    pub height: u16,
    pub format: u8,
    pub timestamp: f64,
    pub pixels: Vec<u8>,
}

pub fn decode_image(payload: &[u8]) -> Result<ImagePayload, WireError> {
    if payload.len() < IMAGE_HEADER_LEN {
        return Err(WireError::BadImage);
    }
    let width = u16::from_be_bytes([payload[0], payload[1]]);
    let height = u16::from_be_bytes([payload[2], payload[3]]);
    let format = payload[4];
    let timestamp = f64::from_be_bytes(payload[5..13].try_into().expect("8 bytes"));
    let pixels = payload[IMAGE_HEADER_LEN..].to_vec();
    if pixels.len() != width as usize * height as usize {
        return Err(WireError::BadImage);
    }
    Ok(ImagePayload { width, height, format, timestamp, pixels })
}
