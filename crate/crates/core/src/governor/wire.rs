//! Envelopes and their length-prefixed canonical JSON framing.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::canonical_json;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GovernorId(String);

impl GovernorId {
    pub fn new(label: impl Into<String>) -> Self {
        GovernorId(label.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GovernorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for GovernorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl From<&str> for GovernorId {
    fn from(s: &str) -> Self {
        GovernorId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeKind {
    SignalDeliver,
    Ack,
    BlobRequest,
    BlobReply,
    SyncState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub msg_id: String,
    pub from: GovernorId,
    pub to: GovernorId,
    pub kind: EnvelopeKind,
    pub payload: serde_json::Value,
    pub sent_at: u64,
}

/// Four-byte big-endian length, then the envelope as canonical JSON.
pub fn encode(envelope: &Envelope) -> Vec<u8> {
    let body = canonical_json(envelope).into_bytes();
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes one frame, returning the envelope and the bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Envelope, usize)> {
    let header: [u8; 4] = bytes
        .get(..4)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| Error::Corrupt("truncated frame header".into()))?;
    let len = u32::from_be_bytes(header) as usize;
    let body = bytes.get(4..4 + len).ok_or_else(|| Error::Corrupt("truncated frame body".into()))?;
    let envelope = serde_json::from_slice(body).map_err(|e| Error::Corrupt(format!("envelope: {e}")))?;
    Ok((envelope, 4 + len))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip_back_to_back() {
        let a = Envelope {
            msg_id: "g1-1".into(),
            from: "g1".into(),
            to: "g2".into(),
            kind: EnvelopeKind::Ack,
            payload: serde_json::json!({"ack": "g2-7"}),
            sent_at: 3,
        };
        let b = Envelope { msg_id: "g1-2".into(), kind: EnvelopeKind::BlobRequest, ..a.clone() };
        let mut stream = encode(&a);
        stream.extend(encode(&b));
        let (first, used) = decode(&stream).unwrap();
        let (second, rest) = decode(&stream[used..]).unwrap();
        assert_eq!((first, second), (a, b));
        assert_eq!(used + rest, stream.len());
        assert!(decode(&stream[..used - 1]).is_err());
        assert_eq!(encode(&decode(&stream).unwrap().0), stream[..used]);
    }
}
