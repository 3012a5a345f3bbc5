//! Binary datagram layout, little-endian throughout:
//!
//! | bytes | field        |
//! |-------|--------------|
//! | 4     | scenario_id  |
//! | 1     | sender       |
//! | 4     | mpc_step     |
//! | 2     | outer_iter   |
//! | 2     | inner_iter   |
//! | 1     | phase        |
//! | 4     | seq          |
//! | 2     | payload_len  |
//! | 8·len | payload f64  |
//! | 4     | CRC32 of all preceding bytes |

use thiserror::Error;

pub const HEADER_LEN: usize = 20;
pub const MAX_DATAGRAM: usize = 1400;
pub const MAX_PAYLOAD: usize = (MAX_DATAGRAM - HEADER_LEN - 4) / 8;

/// Flag set on `phase` for a resend request; the request names the awaited
/// key with `sender` set to the agent whose message is missing.
pub const RESEND_FLAG: u8 = 0x80;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("payload of {0} values exceeds the datagram limit of {MAX_PAYLOAD}")]
    Oversize(usize),
    #[error("datagram truncated: {0} bytes")]
    Truncated(usize),
    #[error("declared payload length {declared} does not match datagram size {actual}")]
    Length { declared: usize, actual: usize },
    #[error("checksum mismatch")]
    Checksum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MessageKey {
    pub sender: u8,
    pub mpc_step: u32,
    pub outer_iter: u16,
    pub inner_iter: u16,
    pub phase: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterateMessage {
    pub scenario_id: u32,
    pub key: MessageKey,
    pub seq: u32,
    pub payload: Vec<f64>,
}

impl IterateMessage {
    pub fn is_resend_request(&self) -> bool {
        self.key.phase & RESEND_FLAG != 0
    }

    pub fn resend_request(scenario_id: u32, key: MessageKey) -> Self {
        Self {
            scenario_id,
            key: MessageKey {
                phase: key.phase | RESEND_FLAG,
                ..key
            },
            seq: 0,
            payload: Vec::new(),
        }
    }

    /// Key of the message a resend request asks for.
    pub fn requested_key(&self) -> MessageKey {
        MessageKey {
            phase: self.key.phase & !RESEND_FLAG,
            ..self.key
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.payload.len() + 4
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(WireError::Oversize(self.payload.len()));
        }
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(&self.scenario_id.to_le_bytes());
        buf.push(self.key.sender);
        buf.extend_from_slice(&self.key.mpc_step.to_le_bytes());
        buf.extend_from_slice(&self.key.outer_iter.to_le_bytes());
        buf.extend_from_slice(&self.key.inner_iter.to_le_bytes());
        buf.push(self.key.phase);
        buf.extend_from_slice(&self.seq.to_le_bytes());
        buf.extend_from_slice(&(self.payload.len() as u16).to_le_bytes());
        for v in &self.payload {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < HEADER_LEN + 4 {
            return Err(WireError::Truncated(buf.len()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([buf[o], buf[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().expect("4 bytes"));
        let len = u16_at(18) as usize;
        let expected = HEADER_LEN + 8 * len + 4;
        if buf.len() != expected {
            return Err(WireError::Length {
                declared: len,
                actual: buf.len(),
            });
        }
        let body = &buf[..expected - 4];
        if crc32fast::hash(body) != u32_at(expected - 4) {
            return Err(WireError::Checksum);
        }
        let payload = body[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            scenario_id: u32_at(0),
            key: MessageKey {
                sender: buf[4],
                mpc_step: u32_at(5),
                outer_iter: u16_at(9),
                inner_iter: u16_at(11),
                phase: buf[13],
            },
            seq: u32_at(14),
            payload,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> IterateMessage {
        IterateMessage {
            scenario_id: 0xdead_beef,
            key: MessageKey {
                sender: 3,
                mpc_step: 77,
                outer_iter: 2,
                inner_iter: 5,
                phase: 1,
            },
            seq: 9,
            payload: vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300],
        }
    }

    #[test]
    fn header_layout() {
        let buf = sample().encode().unwrap();
        assert_eq!(buf.len(), 20 + 32 + 4);
        assert_eq!(&buf[0..4], &0xdead_beef_u32.to_le_bytes());
        assert_eq!(buf[4], 3);
        assert_eq!(&buf[5..9], &77u32.to_le_bytes());
        assert_eq!(buf[13], 1);
        assert_eq!(&buf[18..20], &4u16.to_le_bytes());
        assert_eq!(&buf[20..28], &1.5f64.to_le_bytes());
    }

    #[test]
    fn corrupt_byte_detected() {
        let mut buf = sample().encode().unwrap();
        buf[25] ^= 0x10;
        assert_eq!(IterateMessage::decode(&buf), Err(WireError::Checksum));
    }

    #[test]
    fn oversize_rejected() {
        let mut m = sample();
        m.payload = vec![0.0; MAX_PAYLOAD + 1];
        assert_eq!(m.encode(), Err(WireError::Oversize(MAX_PAYLOAD + 1)));
        m.payload.pop();
        assert_eq!(m.encode().unwrap().len(), m.encoded_len());
        assert!(m.encoded_len() <= MAX_DATAGRAM);
    }

    #[test]
    fn resend_request_roundtrip() {
        let m = sample();
        let req = IterateMessage::resend_request(m.scenario_id, m.key);
        let back = IterateMessage::decode(&req.encode().unwrap()).unwrap();
        assert!(back.is_resend_request());
        assert_eq!(back.requested_key(), m.key);
    }
}
