//! `TimedEnvelope`: the topic-tagged wrapper around every inter-stage message.
//!
//! Wire layout (little-endian): `u16 topic_len, topic utf-8, u64 seq,
//! u64 capture_ts_us, u64 publish_ts_us, u8 payload_kind, u32 payload_len, payload`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::wire::{PutLe, Reader};

/// Largest payload accepted on the bus.
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

/// An empty payload marks end-of-stream on a topic.
pub const END_OF_STREAM: &[u8] = &[];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PayloadKind {
    Flame = 0,
    Mel = 1,
    Arkit = 2,
    Vad = 3,
    Metrics = 4,
}

impl PayloadKind {
    pub const ALL: [PayloadKind; 5] = [
        PayloadKind::Flame,
        PayloadKind::Mel,
        PayloadKind::Arkit,
        PayloadKind::Vad,
        PayloadKind::Metrics,
    ];

    pub fn from_u8(v: u8) -> Result<Self> {
        Self::ALL
            .get(v as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown payload kind {v}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedEnvelope {
    pub topic: String,
    pub seq: u64,
    pub capture_ts_us: u64,
    pub publish_ts_us: u64,
    pub payload_kind: PayloadKind,
    pub payload: Vec<u8>,
}

const FIXED_LEN: usize = 8 + 8 + 8 + 1 + 4;

impl TimedEnvelope {
    pub fn is_end_of_stream(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn encoded_len(&self) -> usize {
        2 + self.topic.len() + FIXED_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(Error::PayloadTooLarge(self.payload.len()));
        }
        if self.topic.len() > u16::MAX as usize {
            return Err(Error::Contract("topic longer than 65535 bytes".into()));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.put_u16(self.topic.len() as u16);
        out.extend_from_slice(self.topic.as_bytes());
        out.put_u64(self.seq);
        out.put_u64(self.capture_ts_us);
        out.put_u64(self.publish_ts_us);
        out.put_u8(self.payload_kind as u8);
        out.put_u32(self.payload.len() as u32);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "envelope");
        let topic_len = r.u16()? as usize;
        let topic = std::str::from_utf8(r.take(topic_len)?)
            .map_err(|e| Error::Format(format!("envelope topic: {e}")))?
            .to_string();
        let seq = r.u64()?;
        let capture_ts_us = r.u64()?;
        let publish_ts_us = r.u64()?;
        let payload_kind = PayloadKind::from_u8(r.u8()?)?;
        let len = r.u32()? as usize;
        if len > MAX_PAYLOAD {
            return Err(Error::PayloadTooLarge(len));
        }
        let payload = r.take(len)?.to_vec();
        r.expect_end()?;
        Ok(Self {
            topic,
            seq,
            capture_ts_us,
            publish_ts_us,
            payload_kind,
            payload,
        })
    }

    /// Reads one envelope from a stream. `Ok(None)` on clean EOF before the first byte.
    pub fn read_from(stream: &mut impl Read) -> Result<Option<Self>> {
        let mut len_buf = [0u8; 2];
        match stream.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let topic_len = u16::from_le_bytes(len_buf) as usize;
        let mut head = vec![0u8; topic_len + FIXED_LEN];
        stream.read_exact(&mut head)?;
        let payload_len =
            u32::from_le_bytes(head[head.len() - 4..].try_into().expect("4 bytes")) as usize;
        if payload_len > MAX_PAYLOAD {
            return Err(Error::PayloadTooLarge(payload_len));
        }
        let mut buf = Vec::with_capacity(2 + head.len() + payload_len);
        buf.extend_from_slice(&len_buf);
        buf.extend_from_slice(&head);
        buf.resize(buf.len() + payload_len, 0);
        let start = 2 + head.len();
        stream.read_exact(&mut buf[start..])?;
        Self::decode(&buf).map(Some)
    }

    pub fn write_to(&self, stream: &mut impl Write) -> Result<()> {
        stream.write_all(&self.encode()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kind() -> impl Strategy<Value = PayloadKind> {
        (0u8..5).prop_map(|v| PayloadKind::from_u8(v).unwrap())
    }

    proptest! {
        #[test]
        fn roundtrip(
            topic in "[a-z.]{0,12}",
            seq in any::<u64>(),
            capture in any::<u64>(),
            lag in 0u64..1_000_000,
            kind in kind(),
            payload in proptest::collection::vec(any::<u8>(), 0..512),
        ) {
            let env = TimedEnvelope {
                topic,
                seq,
                capture_ts_us: capture,
                publish_ts_us: capture.saturating_add(lag),
                payload_kind: kind,
                payload,
            };
            let bytes = env.encode().unwrap();
            prop_assert_eq!(bytes.len(), env.encoded_len());
            prop_assert_eq!(&TimedEnvelope::decode(&bytes).unwrap(), &env);
            let mut cursor = std::io::Cursor::new(bytes);
            prop_assert_eq!(TimedEnvelope::read_from(&mut cursor).unwrap().unwrap(), env);
            prop_assert!(TimedEnvelope::read_from(&mut cursor).unwrap().is_none());
        }
    }

    #[test]
    fn layout_is_little_endian() {
        let env = TimedEnvelope {
            topic: "ab".into(),
            seq: 1,
            capture_ts_us: 2,
            publish_ts_us: 3,
            payload_kind: PayloadKind::Mel,
            payload: vec![9],
        };
        let b = env.encode().unwrap();
        assert_eq!(&b[..4], &[2, 0, b'a', b'b']);
        assert_eq!(&b[4..12], &1u64.to_le_bytes());
        assert_eq!(b[28], 1);
        assert_eq!(&b[29..33], &1u32.to_le_bytes());
        assert_eq!(b[33], 9);
    }

    #[test]
    fn oversize_payload_rejected() {
        let env = TimedEnvelope {
            topic: "x".into(),
            seq: 0,
            capture_ts_us: 0,
            publish_ts_us: 0,
            payload_kind: PayloadKind::Flame,
            payload: vec![0; MAX_PAYLOAD + 1],
        };
        assert!(matches!(env.encode(), Err(Error::PayloadTooLarge(_))));
    }

    #[test]
    fn truncated_is_format_error() {
        assert!(matches!(
            TimedEnvelope::decode(&[3, 0, b'a']),
            Err(Error::Format(_))
        ));
        assert!(TimedEnvelope::decode(&[
            0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 7, 0, 0,
            0, 0
        ])
        .is_err());
    }
}
