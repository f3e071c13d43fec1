//! Length-prefixed binary frames shared by the bus, the archive store and
//! coordinator traffic.
//!
//! ```text
//! frame   = u32 length (LE, excludes itself) | u8 type | payload
//! string  = u16 length (LE) | UTF-8 bytes
//! ```
//!
//! All integers are little-endian. Instance ids travel as 16 raw bytes in
//! UUID (big-endian) byte order.

use alloc::string::String;
use alloc::vec::Vec;

use crate::archive::{ArchiveQuery, ArchiveRecord, SortOrder, TimeRange};
use crate::key::{DataKey, KeyError, KeyPattern};
use crate::manifest::{AppId, InstanceId, Roles};

pub const PROTOCOL_VERSION: u16 = 1;
pub const DEFAULT_MAX_FRAME: u32 = 16 * 1024 * 1024;
/// Bytes in the length prefix.
pub const LEN_PREFIX: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Hello = 1,
    HelloAck = 2,
    PubBatch = 3,
    Ack = 4,
    Sub = 5,
    SubAck = 6,
    Unsub = 7,
    Deliver = 8,
    Err = 9,
    Ping = 10,
    Pong = 11,
    ArchiveBatch = 12,
    Query = 13,
    QueryResult = 14,
    SetIndex = 15,
}

impl FrameType {
    pub fn from_u8(b: u8) -> Option<Self> {
        use FrameType::*;
        Some(match b {
            1 => Hello,
            2 => HelloAck,
            3 => PubBatch,
            4 => Ack,
            5 => Sub,
            6 => SubAck,
            7 => Unsub,
            8 => Deliver,
            9 => Err,
            10 => Ping,
            11 => Pong,
            12 => ArchiveBatch,
            13 => Query,
            14 => QueryResult,
            15 => SetIndex,
            _ => return None,
        })
    }
}

/// Codes carried by ERR frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ErrorCode(pub u16);

impl ErrorCode {
    pub const MALFORMED_FRAME: ErrorCode = ErrorCode(1);
    pub const FRAME_TOO_LARGE: ErrorCode = ErrorCode(2);
    pub const SEQUENCE_GAP: ErrorCode = ErrorCode(3);
    pub const BACKPRESSURE: ErrorCode = ErrorCode(4);
    pub const TOO_MANY_SUBSCRIPTIONS: ErrorCode = ErrorCode(5);
    pub const UNKNOWN_SUBSCRIPTION: ErrorCode = ErrorCode(6);
    pub const NOT_AUTHENTICATED: ErrorCode = ErrorCode(7);
    pub const MALFORMED_KEY: ErrorCode = ErrorCode(8);
    pub const STORAGE_FULL: ErrorCode = ErrorCode(9);
    pub const MALFORMED_QUERY: ErrorCode = ErrorCode(10);
    pub const NOT_A_LITERAL_KEY: ErrorCode = ErrorCode(11);
    pub const VERSION_MISMATCH: ErrorCode = ErrorCode(12);
    pub const EMPTY_BATCH: ErrorCode = ErrorCode(13);
    pub const INTERNAL: ErrorCode = ErrorCode(14);
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("frame truncated")]
    Truncated,
    #[error("{0} trailing bytes after frame payload")]
    TrailingBytes(usize),
    #[error("unknown frame type {0}")]
    UnknownFrameType(u8),
    #[error("string is not valid UTF-8")]
    InvalidUtf8,
    #[error("frame of {len} bytes exceeds limit {max}")]
    FrameTooLarge { len: usize, max: u32 },
    #[error("invalid flag byte {0}")]
    BadFlag(u8),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
}

/// Little-endian primitive writer.
pub struct Writer<'a> {
    buf: &'a mut Vec<u8>,
}

impl<'a> Writer<'a> {
    pub fn new(buf: &'a mut Vec<u8>) -> Self {
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    /// u16-prefixed string; longer input is cut at the last char boundary that fits.
    pub fn str(&mut self, s: &str) -> &mut Self {
        let mut end = s.len().min(u16::MAX as usize);
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        self.u16(end as u16);
        self.buf.extend_from_slice(&s.as_bytes()[..end]);
        self
    }

    /// u32-prefixed byte string.
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn instance(&mut self, id: InstanceId) -> &mut Self {
        self.buf.extend_from_slice(&id.to_bytes());
        self
    }

    pub fn opt_f64(&mut self, v: Option<f64>) -> &mut Self {
        match v {
            Some(x) => self.u8(1).f64(x),
            None => self.u8(0),
        }
    }
}

/// Little-endian primitive reader over a borrowed payload.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(WireError::BadFlag(b)),
        }
    }

    pub fn str(&mut self) -> Result<&'a str, WireError> {
        let len = self.u16()? as usize;
        core::str::from_utf8(self.take(len)?).map_err(|_| WireError::InvalidUtf8)
    }

    pub fn string(&mut self) -> Result<String, WireError> {
        self.str().map(String::from)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let len = self.u32()? as usize;
        self.take(len)
    }

    pub fn instance(&mut self) -> Result<InstanceId, WireError> {
        Ok(InstanceId::from_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn key(&mut self) -> Result<DataKey, WireError> {
        Ok(DataKey::parse(self.str()?)?)
    }

    pub fn pattern(&mut self) -> Result<KeyPattern, WireError> {
        Ok(KeyPattern::parse(self.str()?)?)
    }

    pub fn app_id(&mut self) -> Result<AppId, WireError> {
        AppId::new(self.str()?).map_err(|_| WireError::Invalid("app id"))
    }

    pub fn opt_f64(&mut self) -> Result<Option<f64>, WireError> {
        Ok(if self.bool()? { Some(self.f64()?) } else { None })
    }

    pub fn finish(&self) -> Result<(), WireError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(WireError::TrailingBytes(n)),
        }
    }
}

/// One published item as it travels in PUB_BATCH.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PubEnvelope {
    pub key: DataKey,
    pub value: Vec<u8>,
    pub seq: u64,
}

/// A delivered item: the published envelope plus the producer identity the
/// bus learned from the producer's HELLO.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub key: DataKey,
    pub value: Vec<u8>,
    pub seq: u64,
    pub producer_app: String,
    pub producer_instance: InstanceId,
}

/// One record inside ARCHIVE_BATCH: the envelope plus the client-assigned timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub key: DataKey,
    pub value: Vec<u8>,
    pub seq: u64,
    pub timestamp_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Hello {
        version: u16,
        app_id: AppId,
        instance: InstanceId,
        roles: Roles,
    },
    HelloAck {
        version: u16,
        max_frame: u32,
    },
    PubBatch(Vec<PubEnvelope>),
    Ack {
        last_seq: u64,
        count: u32,
    },
    Sub {
        pattern: KeyPattern,
    },
    SubAck {
        sub_id: u64,
    },
    Unsub {
        sub_id: u64,
    },
    Deliver {
        sub_id: u64,
        envelope: Envelope,
    },
    Err {
        code: ErrorCode,
        message: String,
    },
    Ping(u64),
    Pong(u64),
    ArchiveBatch(Vec<ArchiveEntry>),
    Query(ArchiveQuery),
    /// One chunk of a query answer; `done` marks the final chunk.
    QueryResult {
        done: bool,
        records: Vec<ArchiveRecord>,
    },
    SetIndex {
        key: DataKey,
        enabled: bool,
    },
}

/// Reserves the length prefix, lets `body` write type + payload, then patches the length.
pub fn write_frame(out: &mut Vec<u8>, ty: FrameType, body: impl FnOnce(&mut Writer<'_>)) {
    let start = out.len();
    out.extend_from_slice(&[0; LEN_PREFIX]);
    out.push(ty as u8);
    body(&mut Writer::new(out));
    let len = (out.len() - start - LEN_PREFIX) as u32;
    out[start..start + LEN_PREFIX].copy_from_slice(&len.to_le_bytes());
}

pub fn encode_envelope_fields(w: &mut Writer<'_>, key: &str, value: &[u8], seq: u64) {
    w.str(key).bytes(value).u64(seq);
}

pub fn encode_deliver(
    out: &mut Vec<u8>,
    sub_id: u64,
    key: &str,
    value: &[u8],
    seq: u64,
    producer_app: &str,
    producer_instance: InstanceId,
) {
    write_frame(out, FrameType::Deliver, |w| {
        w.u64(sub_id);
        encode_envelope_fields(w, key, value, seq);
        w.str(producer_app).instance(producer_instance);
    });
}

pub fn encode_record(w: &mut Writer<'_>, r: &ArchiveRecord) {
    w.str(r.key.as_str())
        .bytes(&r.value)
        .u64(r.timestamp_us)
        .str(&r.producer_app)
        .instance(r.producer_instance);
}

pub fn decode_record(r: &mut Reader<'_>) -> Result<ArchiveRecord, WireError> {
    Ok(ArchiveRecord {
        key: r.key()?,
        value: r.bytes()?.into(),
        timestamp_us: r.u64()?,
        producer_app: r.string()?,
        producer_instance: r.instance()?,
    })
}

/// Encoded size of a record inside QUERY_RESULT or a store segment.
pub fn record_len(r: &ArchiveRecord) -> usize {
    2 + r.key.as_str().len() + 4 + r.value.len() + 8 + 2 + r.producer_app.len() + 16
}

fn encode_query(w: &mut Writer<'_>, q: &ArchiveQuery) {
    w.str(q.pattern.as_str());
    match q.time_range {
        Some(range) => w.u8(1).u64(range.lo()).u64(range.hi()),
        None => w.u8(0).u64(0).u64(0),
    };
    match &q.producer_app {
        Some(app) => w.u8(1).str(app),
        None => w.u8(0).str(""),
    };
    match q.limit {
        Some(limit) => w.u8(1).u32(limit),
        None => w.u8(0).u32(0),
    };
    w.u8(match q.order {
        SortOrder::Ascending => 0,
        SortOrder::Descending => 1,
    });
}

fn decode_query(r: &mut Reader<'_>) -> Result<ArchiveQuery, WireError> {
    let pattern = r.pattern()?;
    let has_range = r.bool()?;
    let (lo, hi) = (r.u64()?, r.u64()?);
    let time_range = if has_range {
        Some(TimeRange::new(lo, hi).ok_or(WireError::Invalid("time range"))?)
    } else {
        None
    };
    let has_producer = r.bool()?;
    let producer = r.string()?;
    let has_limit = r.bool()?;
    let limit = r.u32()?;
    let order = match r.u8()? {
        0 => SortOrder::Ascending,
        1 => SortOrder::Descending,
        b => return Err(WireError::BadFlag(b)),
    };
    Ok(ArchiveQuery {
        pattern,
        time_range,
        producer_app: has_producer.then_some(producer),
        limit: has_limit.then_some(limit),
        order,
    })
}

impl Frame {
    pub fn frame_type(&self) -> FrameType {
        match self {
            Frame::Hello { .. } => FrameType::Hello,
            Frame::HelloAck { .. } => FrameType::HelloAck,
            Frame::PubBatch(_) => FrameType::PubBatch,
            Frame::Ack { .. } => FrameType::Ack,
            Frame::Sub { .. } => FrameType::Sub,
            Frame::SubAck { .. } => FrameType::SubAck,
            Frame::Unsub { .. } => FrameType::Unsub,
            Frame::Deliver { .. } => FrameType::Deliver,
            Frame::Err { .. } => FrameType::Err,
            Frame::Ping(_) => FrameType::Ping,
            Frame::Pong(_) => FrameType::Pong,
            Frame::ArchiveBatch(_) => FrameType::ArchiveBatch,
            Frame::Query(_) => FrameType::Query,
            Frame::QueryResult { .. } => FrameType::QueryResult,
            Frame::SetIndex { .. } => FrameType::SetIndex,
        }
    }

    /// Appends the complete frame, length prefix included.
    pub fn encode(&self, out: &mut Vec<u8>) {
        write_frame(out, self.frame_type(), |w| match self {
            Frame::Hello {
                version,
                app_id,
                instance,
                roles,
            } => {
                w.u16(*version).str(app_id.as_str()).instance(*instance).u8(roles.bits());
            }
            Frame::HelloAck { version, max_frame } => {
                w.u16(*version).u32(*max_frame);
            }
            Frame::PubBatch(envs) => {
                w.u32(envs.len() as u32);
                for e in envs {
                    encode_envelope_fields(w, e.key.as_str(), &e.value, e.seq);
                }
            }
            Frame::Ack { last_seq, count } => {
                w.u64(*last_seq).u32(*count);
            }
            Frame::Sub { pattern } => {
                w.str(pattern.as_str());
            }
            Frame::SubAck { sub_id } | Frame::Unsub { sub_id } => {
                w.u64(*sub_id);
            }
            Frame::Deliver { sub_id, envelope } => {
                w.u64(*sub_id);
                encode_envelope_fields(w, envelope.key.as_str(), &envelope.value, envelope.seq);
                w.str(&envelope.producer_app).instance(envelope.producer_instance);
            }
            Frame::Err { code, message } => {
                w.u16(code.0).str(message);
            }
            Frame::Ping(n) | Frame::Pong(n) => {
                w.u64(*n);
            }
            Frame::ArchiveBatch(entries) => {
                w.u32(entries.len() as u32);
                for e in entries {
                    encode_envelope_fields(w, e.key.as_str(), &e.value, e.seq);
                    w.u64(e.timestamp_us);
                }
            }
            Frame::Query(q) => encode_query(w, q),
            Frame::QueryResult { done, records } => {
                w.bool(*done).u32(records.len() as u32);
                for r in records {
                    encode_record(w, r);
                }
            }
            Frame::SetIndex { key, enabled } => {
                w.str(key.as_str()).bool(*enabled);
            }
        });
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out);
        out
    }

    /// Decodes a frame body: the type byte followed by the payload (no length prefix).
    pub fn decode(body: &[u8]) -> Result<Frame, WireError> {
        let (&ty, payload) = body.split_first().ok_or(WireError::Truncated)?;
        let ty = FrameType::from_u8(ty).ok_or(WireError::UnknownFrameType(ty))?;
        let mut r = Reader::new(payload);
        let frame = match ty {
            FrameType::Hello => Frame::Hello {
                version: r.u16()?,
                app_id: r.app_id()?,
                instance: r.instance()?,
                roles: Roles::from_bits(r.u8()?).ok_or(WireError::Invalid("role bits"))?,
            },
            FrameType::HelloAck => Frame::HelloAck {
                version: r.u16()?,
                max_frame: r.u32()?,
            },
            FrameType::PubBatch => {
                let n = r.u32()? as usize;
                let mut envs = Vec::with_capacity(n.min(r.remaining() / 14));
                for _ in 0..n {
                    envs.push(PubEnvelope {
                        key: r.key()?,
                        value: r.bytes()?.into(),
                        seq: r.u64()?,
                    });
                }
                Frame::PubBatch(envs)
            }
            FrameType::Ack => Frame::Ack {
                last_seq: r.u64()?,
                count: r.u32()?,
            },
            FrameType::Sub => Frame::Sub {
                pattern: r.pattern()?,
            },
            FrameType::SubAck => Frame::SubAck { sub_id: r.u64()? },
            FrameType::Unsub => Frame::Unsub { sub_id: r.u64()? },
            FrameType::Deliver => Frame::Deliver {
                sub_id: r.u64()?,
                envelope: Envelope {
                    key: r.key()?,
                    value: r.bytes()?.into(),
                    seq: r.u64()?,
                    producer_app: r.string()?,
                    producer_instance: r.instance()?,
                },
            },
            FrameType::Err => Frame::Err {
                code: ErrorCode(r.u16()?),
                message: r.string()?,
            },
            FrameType::Ping => Frame::Ping(r.u64()?),
            FrameType::Pong => Frame::Pong(r.u64()?),
            FrameType::ArchiveBatch => {
                let n = r.u32()? as usize;
                let mut entries = Vec::with_capacity(n.min(r.remaining() / 22));
                for _ in 0..n {
                    entries.push(ArchiveEntry {
                        key: r.key()?,
                        value: r.bytes()?.into(),
                        seq: r.u64()?,
                        timestamp_us: r.u64()?,
                    });
                }
                Frame::ArchiveBatch(entries)
            }
            FrameType::Query => Frame::Query(decode_query(&mut r)?),
            FrameType::QueryResult => {
                let done = r.bool()?;
                let n = r.u32()? as usize;
                let mut records = Vec::with_capacity(n.min(r.remaining() / 32));
                for _ in 0..n {
                    records.push(decode_record(&mut r)?);
                }
                Frame::QueryResult { done, records }
            }
            FrameType::SetIndex => Frame::SetIndex {
                key: r.key()?,
                enabled: r.bool()?,
            },
        };
        r.finish()?;
        Ok(frame)
    }
}

/// Splits one complete frame off the front of `buf`.
///
/// Returns `Ok(None)` when more bytes are needed, and the decoded frame plus
/// the number of bytes consumed otherwise.
pub fn decode_from_buffer(buf: &[u8], max_frame: u32) -> Result<Option<(Frame, usize)>, WireError> {
    if buf.len() < LEN_PREFIX {
        return Ok(None);
    }
    let len = u32::from_le_bytes(buf[..LEN_PREFIX].try_into().unwrap());
    if len > max_frame {
        return Err(WireError::FrameTooLarge {
            len: len as usize,
            max: max_frame,
        });
    }
    let total = LEN_PREFIX + len as usize;
    if buf.len() < total {
        return Ok(None);
    }
    Ok(Some((Frame::decode(&buf[LEN_PREFIX..total])?, total)))
}
