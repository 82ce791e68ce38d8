//! Single-file interleaved recording format.
//!
//! A bag is the ASCII header `RIDEBAG1` followed by records of
//! `timestamp f64 BE | channel u8 | length u32 BE | payload`.

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const BAG_MAGIC: &[u8; 8] = b"RIDEBAG1";
pub const RECORD_HEADER_LEN: usize = 13;

pub const REC_CAM: u8 = 1;
pub const REC_SCAN: u8 = 2;
pub const REC_TF: u8 = 4;

#[derive(Debug, Error)]
pub enum BagError {
    #[error("not a bag file")]
    BadMagic,
    #[error("invalid channel {channel} at byte {offset}")]
    BadChannel { channel: u8, offset: usize },
    #[error("truncated record at byte {offset} after {} complete entries", entries.len())]
    TruncatedTail { entries: Vec<RecordEntry>, offset: usize },
    #[error("record mask {0} is outside 1..=7")]
    InvalidMask(u32),
    #[error("channel {0:?} is not enabled for this recording")]
    ChannelNotEnabled(Channel),
    #[error("recording already closed")]
    AlreadyClosed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Channel {
    Cam = 1,
    Scan = 2,
    Tf = 3,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Cam, Channel::Scan, Channel::Tf];

    pub fn from_u8(v: u8) -> Option<Channel> {
        match v {
            1 => Some(Channel::Cam),
            2 => Some(Channel::Scan),
            3 => Some(Channel::Tf),
            _ => None,
        }
    }

    /// The record-mask bit selecting this channel.
    pub fn mask_bit(self) -> u8 {
        match self {
            Channel::Cam => REC_CAM,
            Channel::Scan => REC_SCAN,
            Channel::Tf => REC_TF,
        }
    }
}

/// Bit set of recorded channels, always within `1..=7`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordMask(u8);

impl RecordMask {
    pub const ALL: RecordMask = RecordMask(REC_CAM | REC_SCAN | REC_TF);

    pub fn new(bits: u32) -> Result<Self, BagError> {
        if (1..=7).contains(&bits) {
            Ok(RecordMask(bits as u8))
        } else {
            Err(BagError::InvalidMask(bits))
        }
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, channel: Channel) -> bool {
        self.0 & channel.mask_bit() != 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordEntry {
    pub timestamp: f64,
    pub channel: Channel,
    pub payload: Vec<u8>,
}

impl RecordEntry {
    pub fn new(timestamp: f64, channel: Channel, payload: impl Into<Vec<u8>>) -> Self {
        RecordEntry { timestamp, channel, payload: payload.into() }
    }

    pub fn encoded_len(&self) -> usize {
        RECORD_HEADER_LEN + self.payload.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub cam: u64,
    pub scan: u64,
    pub tf: u64,
    /// Span between the first and last recorded timestamp.
    pub duration: f64,
}

impl Summary {
    pub fn count(&self, channel: Channel) -> u64 {
        match channel {
            Channel::Cam => self.cam,
            Channel::Scan => self.scan,
            Channel::Tf => self.tf,
        }
    }

    pub fn total(&self) -> u64 {
        self.cam + self.scan + self.tf
    }

    /// Recounts a decoded entry sequence.
    pub fn of(entries: &[RecordEntry]) -> Summary {
        let mut s = Summary::default();
        for e in entries {
            *s.count_mut(e.channel) += 1;
        }
        if let (Some(first), Some(last)) = (entries.first(), entries.last()) {
            s.duration = last.timestamp - first.timestamp;
        }
        s
    }

    fn count_mut(&mut self, channel: Channel) -> &mut u64 {
        match channel {
            Channel::Cam => &mut self.cam,
            Channel::Scan => &mut self.scan,
            Channel::Tf => &mut self.tf,
        }
    }
}

/// Whether an append kept its timestamp or had it raised to the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appended {
    InOrder,
    Clamped,
}

const FLUSH_EVERY: u64 = 50;

pub struct BagWriter<W: Write> {
    out: Option<W>,
    mask: RecordMask,
    last_timestamp: Option<f64>,
    first_timestamp: Option<f64>,
    summary: Summary,
    unflushed: u64,
}

impl BagWriter<BufWriter<File>> {
    pub fn create(path: &Path, mask: RecordMask) -> Result<Self, BagError> {
        let file = File::create(path)?;
        BagWriter::new(BufWriter::new(file), mask)
    }
}

impl<W: Write> BagWriter<W> {
    pub fn new(mut out: W, mask: RecordMask) -> Result<Self, BagError> {
        out.write_all(BAG_MAGIC)?;
        out.flush()?;
        Ok(BagWriter {
            out: Some(out),
            mask,
            last_timestamp: None,
            first_timestamp: None,
            summary: Summary::default(),
            unflushed: 0,
        })
    }

    pub fn mask(&self) -> RecordMask {
        self.mask
    }

    pub fn is_closed(&self) -> bool {
        self.out.is_none()
    }

    /// Appends one record. Timestamps that go backwards are raised to the
    /// previous timestamp so that every file stays monotone.
    pub fn append(&mut self, mut entry: RecordEntry) -> Result<Appended, BagError> {
        if !self.mask.contains(entry.channel) {
            return Err(BagError::ChannelNotEnabled(entry.channel));
        }
        let out = self.out.as_mut().ok_or(BagError::AlreadyClosed)?;
        let mut appended = Appended::InOrder;
        if let Some(last) = self.last_timestamp {
            if entry.timestamp.partial_cmp(&last).is_none_or(|o| o.is_lt()) {
                entry.timestamp = last;
                appended = Appended::Clamped;
            }
        }
        let len = u32::try_from(entry.payload.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "payload too large"))?;
        out.write_all(&entry.timestamp.to_be_bytes())?;
        out.write_all(&[entry.channel as u8])?;
        out.write_all(&len.to_be_bytes())?;
        out.write_all(&entry.payload)?;
        self.last_timestamp = Some(entry.timestamp);
        self.first_timestamp.get_or_insert(entry.timestamp);
        *self.summary.count_mut(entry.channel) += 1;
        self.unflushed += 1;
        if self.unflushed >= FLUSH_EVERY {
            self.flush()?;
        }
        Ok(appended)
    }

    pub fn flush(&mut self) -> Result<(), BagError> {
        if let Some(out) = self.out.as_mut() {
            out.flush()?;
            self.unflushed = 0;
        }
        Ok(())
    }

    /// Flushes and releases the sink. A second call fails with `AlreadyClosed`.
    pub fn close(&mut self) -> Result<Summary, BagError> {
        let mut out = self.out.take().ok_or(BagError::AlreadyClosed)?;
        out.flush()?;
        let mut summary = self.summary.clone();
        if let (Some(first), Some(last)) = (self.first_timestamp, self.last_timestamp) {
            summary.duration = last - first;
        }
        Ok(summary)
    }

    /// Consumes a closed or open writer and returns the underlying sink.
    pub fn into_inner(mut self) -> Option<W> {
        self.out.take()
    }
}

/// Parses a whole bag image.
pub fn parse(bytes: &[u8]) -> Result<Vec<RecordEntry>, BagError> {
    if bytes.len() < BAG_MAGIC.len() {
        return if BAG_MAGIC.starts_with(bytes) {
            Err(BagError::TruncatedTail { entries: Vec::new(), offset: 0 })
        } else {
            Err(BagError::BadMagic)
        };
    }
    if &bytes[..BAG_MAGIC.len()] != BAG_MAGIC {
        return Err(BagError::BadMagic);
    }
    let mut entries = Vec::new();
    let mut offset = BAG_MAGIC.len();
    while offset < bytes.len() {
        let rest = &bytes[offset..];
        if rest.len() < RECORD_HEADER_LEN {
            return Err(BagError::TruncatedTail { entries, offset });
        }
        let timestamp = f64::from_be_bytes(rest[..8].try_into().expect("8 bytes"));
        let channel = Channel::from_u8(rest[8]).ok_or(BagError::BadChannel { channel: rest[8], offset })?;
        let len = u32::from_be_bytes(rest[9..13].try_into().expect("4 bytes")) as usize;
        if rest.len() - RECORD_HEADER_LEN < len {
            return Err(BagError::TruncatedTail { entries, offset });
        }
        entries.push(RecordEntry {
            timestamp,
            channel,
            payload: rest[RECORD_HEADER_LEN..RECORD_HEADER_LEN + len].to_vec(),
        });
        offset += RECORD_HEADER_LEN + len;
    }
    Ok(entries)
}

pub fn read(path: &Path) -> Result<Vec<RecordEntry>, BagError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse(&bytes)
}

/// `rec_<UTC yyyymmdd_HHMMSS>.bag`
pub fn file_name(at: chrono::DateTime<chrono::Utc>) -> String {
    format!("rec_{}.bag", at.format("%Y%m%d_%H%M%S"))
}
