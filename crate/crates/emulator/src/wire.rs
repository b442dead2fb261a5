//! Datagram layout. All header integers and payload floats are little-endian.
//!
//! ```text
//! offset  size  field
//!      0     4  magic 0x49435021
//!      4     1  version (1)
//!      5     1  msg_type
//!      6     4  frame_id
//!     10     4  total_samples
//!     14     2  chunk_idx
//!     16     2  chunk_cnt
//!     18     -  payload (data: interleaved f32 I/Q; config/ping: UTF-8 text)
//! ```

use std::collections::HashMap;
use std::hash::Hash;
use std::time::{Duration, Instant};

use num_complex::Complex32;

pub const MAGIC: u32 = 0x4943_5021;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
pub const MAX_PAYLOAD: usize = 1400;
/// I/Q pairs that fit in one payload.
pub const SAMPLES_PER_CHUNK: usize = MAX_PAYLOAD / 8;
/// Payload of a ping that asks for the counters instead of an echo.
pub const STATS_REQUEST: &[u8] = b"stats";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MsgType {
    Data = 0,
    Config = 1,
    Ping = 2,
    DataResponse = 3,
    ConfigAck = 4,
}

impl TryFrom<u8> for MsgType {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        Ok(match v {
            0 => MsgType::Data,
            1 => MsgType::Config,
            2 => MsgType::Ping,
            3 => MsgType::DataResponse,
            4 => MsgType::ConfigAck,
            other => return Err(WireError::MsgType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("datagram of {0} bytes is shorter than the header")]
    Short(usize),
    #[error("bad magic {0:#010x}")]
    Magic(u32),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unknown message type {0}")]
    MsgType(u8),
    #[error("payload of {0} bytes exceeds {MAX_PAYLOAD}")]
    Oversize(usize),
    #[error("chunk {idx} of {cnt} is out of range")]
    ChunkIndex { idx: u16, cnt: u16 },
    #[error("frame {frame_id}: {reason}")]
    Inconsistent { frame_id: u32, reason: String },
    #[error("frame of {0} samples needs more than 65535 chunks")]
    TooLong(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datagram {
    pub msg_type: MsgType,
    pub frame_id: u32,
    pub total_samples: u32,
    pub chunk_idx: u16,
    pub chunk_cnt: u16,
    pub payload: Vec<u8>,
}

impl Datagram {
    /// A single-chunk control message (config, ping, ack) carrying `payload`.
    pub fn control(msg_type: MsgType, frame_id: u32, payload: &[u8]) -> Self {
        Self { msg_type, frame_id, total_samples: 0, chunk_idx: 0, chunk_cnt: 1, payload: payload.to_vec() }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.payload.len());
        buf.extend_from_slice(&MAGIC.to_le_bytes());
        buf.push(VERSION);
        buf.push(self.msg_type as u8);
        buf.extend_from_slice(&self.frame_id.to_le_bytes());
        buf.extend_from_slice(&self.total_samples.to_le_bytes());
        buf.extend_from_slice(&self.chunk_idx.to_le_bytes());
        buf.extend_from_slice(&self.chunk_cnt.to_le_bytes());
        buf.extend_from_slice(&self.payload);
        buf
    }

    /// Parses and checks everything that can be checked on one datagram alone.
    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < HEADER_LEN {
            return Err(WireError::Short(buf.len()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]);
        let magic = u32_at(0);
        if magic != MAGIC {
            return Err(WireError::Magic(magic));
        }
        if buf[4] != VERSION {
            return Err(WireError::Version(buf[4]));
        }
        let msg_type = MsgType::try_from(buf[5])?;
        let d = Datagram {
            msg_type,
            frame_id: u32_at(6),
            total_samples: u32_at(10),
            chunk_idx: u16_at(14),
            chunk_cnt: u16_at(16),
            payload: buf[HEADER_LEN..].to_vec(),
        };
        if d.payload.len() > MAX_PAYLOAD {
            return Err(WireError::Oversize(d.payload.len()));
        }
        if d.chunk_idx >= d.chunk_cnt {
            return Err(WireError::ChunkIndex { idx: d.chunk_idx, cnt: d.chunk_cnt });
        }
        if d.carries_samples() {
            let total = d.total_samples as usize;
            let bad = |reason: String| Err(WireError::Inconsistent { frame_id: d.frame_id, reason });
            if d.chunk_cnt as usize != chunk_count(total) {
                return bad(format!("{} chunks for {total} samples", d.chunk_cnt));
            }
            let want = chunk_len(total, d.chunk_idx as usize) * 8;
            if d.payload.len() != want {
                return bad(format!("chunk {} has {} payload bytes, expected {want}", d.chunk_idx, d.payload.len()));
            }
        }
        Ok(d)
    }

    fn carries_samples(&self) -> bool {
        matches!(self.msg_type, MsgType::Data | MsgType::DataResponse)
    }
}

/// Chunks needed for `total` samples; an empty frame still takes one.
pub fn chunk_count(total: usize) -> usize {
    total.div_ceil(SAMPLES_PER_CHUNK).max(1)
}

fn chunk_len(total: usize, idx: usize) -> usize {
    total.saturating_sub(idx * SAMPLES_PER_CHUNK).min(SAMPLES_PER_CHUNK)
}

/// Splits a frame into data (or data-response) datagrams.
pub fn chunk_frame(msg_type: MsgType, frame_id: u32, samples: &[Complex32]) -> Result<Vec<Datagram>, WireError> {
    let cnt = chunk_count(samples.len());
    if cnt > u16::MAX as usize || samples.len() > u32::MAX as usize {
        return Err(WireError::TooLong(samples.len()));
    }
    let total = samples.len() as u32;
    let chunks: Vec<&[Complex32]> = if samples.is_empty() { vec![&[]] } else { samples.chunks(SAMPLES_PER_CHUNK).collect() };
    Ok(chunks
        .into_iter()
        .enumerate()
        .map(|(i, c)| Datagram {
            msg_type,
            frame_id,
            total_samples: total,
            chunk_idx: i as u16,
            chunk_cnt: cnt as u16,
            payload: c.iter().flat_map(|s| s.re.to_le_bytes().into_iter().chain(s.im.to_le_bytes())).collect(),
        })
        .collect())
}

fn payload_samples(payload: &[u8]) -> Vec<Complex32> {
    payload
        .chunks_exact(8)
        .map(|c| {
            Complex32::new(
                f32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
                f32::from_le_bytes(c[4..].try_into().expect("4 bytes")),
            )
        })
        .collect()
}

struct Partial {
    total: u32,
    chunk_cnt: u16,
    chunks: Vec<Option<Vec<u8>>>,
    received: usize,
    started: Instant,
}

/// Collects chunks per key until a frame is complete. Chunks may arrive in
/// any order; duplicates are ignored.
pub struct Reassembler<K> {
    frames: HashMap<K, Partial>,
    timeout: Duration,
}

impl<K: Eq + Hash + Clone> Reassembler<K> {
    pub fn new(timeout: Duration) -> Self {
        Self { frames: HashMap::new(), timeout }
    }

    pub fn pending(&self) -> usize {
        self.frames.len()
    }

    /// Adds a decoded sample-carrying chunk. Returns the frame's samples once
    /// every chunk is in. A chunk that disagrees with the frame in progress is
    /// rejected and leaves that frame untouched.
    pub fn insert(&mut self, key: K, d: Datagram, now: Instant) -> Result<Option<Vec<Complex32>>, WireError> {
        let entry = self.frames.entry(key.clone()).or_insert_with(|| Partial {
            total: d.total_samples,
            chunk_cnt: d.chunk_cnt,
            chunks: vec![None; d.chunk_cnt as usize],
            received: 0,
            started: now,
        });
        if entry.total != d.total_samples || entry.chunk_cnt != d.chunk_cnt {
            return Err(WireError::Inconsistent {
                frame_id: d.frame_id,
                reason: format!(
                    "chunk says {} samples in {} chunks, frame in progress has {} in {}",
                    d.total_samples, d.chunk_cnt, entry.total, entry.chunk_cnt
                ),
            });
        }
        let slot = &mut entry.chunks[d.chunk_idx as usize];
        if slot.is_none() {
            *slot = Some(d.payload);
            entry.received += 1;
        }
        if entry.received < entry.chunks.len() {
            return Ok(None);
        }
        let done = self.frames.remove(&key).expect("present");
        Ok(Some(done.chunks.into_iter().flat_map(|c| payload_samples(&c.expect("complete"))).collect()))
    }

    /// Drops frames older than the timeout; returns how many.
    pub fn expire(&mut self, now: Instant) -> usize {
        let before = self.frames.len();
        let timeout = self.timeout;
        self.frames.retain(|_, p| now.duration_since(p.started) < timeout);
        before - self.frames.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Vec<Complex32> {
        (0..n).map(|i| Complex32::new(i as f32, -(i as f32) * 0.5)).collect()
    }

    #[test]
    fn chunk_arithmetic() {
        assert_eq!(SAMPLES_PER_CHUNK, 175);
        let one = chunk_frame(MsgType::Data, 1, &ramp(175)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].payload.len(), 1400);
        let six = chunk_frame(MsgType::Data, 1, &ramp(1000)).unwrap();
        assert_eq!(six.len(), (1000usize * 8).div_ceil(1400));
        assert_eq!(six[5].payload.len(), (1000 - 5 * 175) * 8);
        assert_eq!(chunk_frame(MsgType::Data, 1, &[]).unwrap().len(), 1);
    }

    #[test]
    fn header_round_trip_and_layout() {
        let d = Datagram { msg_type: MsgType::Data, frame_id: 7, total_samples: 1, chunk_idx: 0, chunk_cnt: 1, payload: vec![0; 8] };
        let bytes = d.encode();
        assert_eq!(&bytes[..6], &[0x21, 0x50, 0x43, 0x49, 1, 0]);
        assert_eq!(&bytes[6..10], &7u32.to_le_bytes());
        assert_eq!(Datagram::decode(&bytes).unwrap(), d);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        let good = Datagram::control(MsgType::Ping, 3, b"").encode();
        assert_eq!(Datagram::decode(&good[..10]), Err(WireError::Short(10)));
        let mut b = good.clone();
        b[0] ^= 1;
        assert!(matches!(Datagram::decode(&b), Err(WireError::Magic(_))));
        let mut b = good.clone();
        b[4] = 2;
        assert_eq!(Datagram::decode(&b), Err(WireError::Version(2)));
        let mut b = good.clone();
        b[5] = 9;
        assert_eq!(Datagram::decode(&b), Err(WireError::MsgType(9)));
        let mut b = good.clone();
        b[14] = 1;
        assert!(matches!(Datagram::decode(&b), Err(WireError::ChunkIndex { .. })));
        let mut b = good;
        b.extend(vec![0; MAX_PAYLOAD + 1]);
        assert!(matches!(Datagram::decode(&b), Err(WireError::Oversize(_))));
        let mut d = chunk_frame(MsgType::Data, 1, &ramp(10)).unwrap().remove(0);
        d.payload.pop();
        assert!(matches!(Datagram::decode(&d.encode()), Err(WireError::Inconsistent { .. })));
    }

    #[test]
    fn conflicting_chunk_leaves_frame_intact() {
        let now = Instant::now();
        let mut r = Reassembler::new(Duration::from_secs(2));
        let chunks = chunk_frame(MsgType::Data, 4, &ramp(400)).unwrap();
        assert_eq!(r.insert(0, chunks[0].clone(), now).unwrap(), None);
        let stray = chunk_frame(MsgType::Data, 4, &ramp(10)).unwrap().remove(0);
        assert!(r.insert(0, stray, now).is_err());
        assert_eq!(r.insert(0, chunks[0].clone(), now).unwrap(), None);
        assert_eq!(r.insert(0, chunks[2].clone(), now).unwrap(), None);
        assert_eq!(r.insert(0, chunks[1].clone(), now).unwrap(), Some(ramp(400)));
        assert_eq!(r.pending(), 0);
    }

    #[test]
    fn stale_frames_expire() {
        let t0 = Instant::now();
        let mut r = Reassembler::new(Duration::from_secs(2));
        let chunks = chunk_frame(MsgType::Data, 1, &ramp(400)).unwrap();
        r.insert("a", chunks[0].clone(), t0).unwrap();
        assert_eq!(r.expire(t0 + Duration::from_millis(1999)), 0);
        assert_eq!(r.expire(t0 + Duration::from_secs(2)), 1);
        assert_eq!(r.pending(), 0);
    }
}
