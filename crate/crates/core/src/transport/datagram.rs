//! Message fragmentation for datagram links.
//!
//! Each datagram is a 16-byte little-endian subheader followed by a slice
//! of the message:
//!
//! ```text
//! offset size field
//!      0    8 frame_id        copied from the message header
//!      8    2 msg_type        copied from the message header
//!     10    2 fragment_index  0-based
//!     12    2 fragment_count  >= 1
//!     14    2 reserved        0
//! ```

use std::net::{SocketAddr, UdpSocket};

use super::{MessageSink, TransportError};
use crate::protocol::{HEADER_LEN, MAGIC};

pub const FRAGMENT_HEADER_LEN: usize = 16;
/// 60 KiB of message data per datagram.
pub const DEFAULT_FRAGMENT_PAYLOAD: usize = 60 * 1024;
/// Largest UDP payload over IPv4.
pub const MAX_DATAGRAM_LEN: usize = 65_507;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FragmentHeader {
    pub frame_id: u64,
    pub msg_type: u16,
    pub index: u16,
    pub count: u16,
}

pub fn fragment_count(msg_len: usize, fragment_payload: usize) -> usize {
    msg_len.div_ceil(fragment_payload).max(1)
}

/// Splits an encoded wire message into datagrams.
pub fn fragment(msg: &[u8], fragment_payload: usize) -> Result<Vec<Vec<u8>>, TransportError> {
    if msg.len() < HEADER_LEN || msg[0..4] != MAGIC {
        return Err(TransportError::NotAMessage(msg.len()));
    }
    if fragment_payload == 0 {
        return Err(TransportError::InvalidConfig("fragment_payload must be >= 1".into()));
    }
    let frame_id = u64::from_le_bytes(msg[8..16].try_into().unwrap());
    let msg_type = u16::from_le_bytes([msg[6], msg[7]]);
    let count = fragment_count(msg.len(), fragment_payload);
    let count16 = u16::try_from(count).map_err(|_| TransportError::TooManyFragments { count })?;
    Ok(msg
        .chunks(fragment_payload)
        .enumerate()
        .map(|(i, chunk)| {
            let mut d = Vec::with_capacity(FRAGMENT_HEADER_LEN + chunk.len());
            d.extend_from_slice(&frame_id.to_le_bytes());
            d.extend_from_slice(&msg_type.to_le_bytes());
            d.extend_from_slice(&(i as u16).to_le_bytes());
            d.extend_from_slice(&count16.to_le_bytes());
            d.extend_from_slice(&[0, 0]);
            d.extend_from_slice(chunk);
            d
        })
        .collect())
}

/// Splits a datagram into subheader and body; `None` if malformed.
pub fn parse_fragment(datagram: &[u8]) -> Option<(FragmentHeader, &[u8])> {
    if datagram.len() < FRAGMENT_HEADER_LEN {
        return None;
    }
    let h = FragmentHeader {
        frame_id: u64::from_le_bytes(datagram[0..8].try_into().unwrap()),
        msg_type: u16::from_le_bytes([datagram[8], datagram[9]]),
        index: u16::from_le_bytes([datagram[10], datagram[11]]),
        count: u16::from_le_bytes([datagram[12], datagram[13]]),
    };
    if h.count == 0 || h.index >= h.count || datagram[14..16] != [0, 0] {
        return None;
    }
    Some((h, &datagram[FRAGMENT_HEADER_LEN..]))
}

/// Partially received message.
#[derive(Debug)]
pub(super) struct Partial {
    pub frame_id: u64,
    pub msg_type: u16,
    pub parts: Vec<Option<Vec<u8>>>,
    pub have: usize,
}

impl Partial {
    pub fn new(h: &FragmentHeader) -> Self {
        Partial {
            frame_id: h.frame_id,
            msg_type: h.msg_type,
            parts: vec![None; h.count as usize],
            have: 0,
        }
    }

    pub fn key(&self) -> (u64, u16) {
        (self.frame_id, self.msg_type)
    }

    /// Stores a fragment; false for duplicates.
    pub fn insert(&mut self, index: u16, body: &[u8]) -> bool {
        let slot = &mut self.parts[index as usize];
        if slot.is_some() {
            return false;
        }
        *slot = Some(body.to_vec());
        self.have += 1;
        true
    }

    pub fn is_complete(&self) -> bool {
        self.have == self.parts.len()
    }

    pub fn assemble(self) -> Vec<u8> {
        let len = self.parts.iter().flatten().map(Vec::len).sum();
        let mut out = Vec::with_capacity(len);
        for p in self.parts.into_iter().flatten() {
            out.extend_from_slice(&p);
        }
        out
    }
}

/// Sends fragmented messages over UDP to a fixed peer.
pub struct DatagramSender {
    socket: UdpSocket,
    peer: SocketAddr,
    fragment_payload: usize,
    max_message_bytes: usize,
}

impl DatagramSender {
    pub fn new(
        socket: UdpSocket,
        peer: SocketAddr,
        fragment_payload: usize,
        max_message_bytes: usize,
    ) -> Result<Self, TransportError> {
        if fragment_payload == 0 || fragment_payload + FRAGMENT_HEADER_LEN > MAX_DATAGRAM_LEN {
            return Err(TransportError::InvalidConfig(format!(
                "fragment payload {fragment_payload} does not fit a datagram"
            )));
        }
        Ok(DatagramSender {
            socket,
            peer,
            fragment_payload,
            max_message_bytes,
        })
    }
}

impl MessageSink for DatagramSender {
    fn send_message(&mut self, msg: &[u8]) -> Result<(), TransportError> {
        if msg.len() > self.max_message_bytes {
            return Err(TransportError::Oversize {
                len: msg.len(),
                max: self.max_message_bytes,
            });
        }
        for d in fragment(msg, self.fragment_payload)? {
            self.socket.send_to(&d, self.peer)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud;
    use crate::protocol::encode_cloud;

    #[test]
    fn fragments_reassemble_in_order() {
        let mut c = PointCloud::new(77, 1);
        for i in 0..5000 {
            c.push([i as f32, 0.0, 1.0], [1, 2, 3]);
        }
        let msg = encode_cloud(&c).unwrap();
        let frags = fragment(&msg, 1000).unwrap();
        assert_eq!(frags.len(), fragment_count(msg.len(), 1000));
        let (h0, _) = parse_fragment(&frags[0]).unwrap();
        let mut p = Partial::new(&h0);
        for f in &frags {
            let (h, body) = parse_fragment(f).unwrap();
            assert_eq!((h.frame_id, h.msg_type, h.count as usize), (77, 1, frags.len()));
            assert!(p.insert(h.index, body));
        }
        assert!(!p.insert(0, b"dup"));
        assert!(p.is_complete());
        assert_eq!(p.assemble(), msg);
    }

    #[test]
    fn rejects_malformed_subheaders() {
        assert!(parse_fragment(&[0u8; 15]).is_none());
        let mut d = vec![0u8; 20];
        assert!(parse_fragment(&d).is_none()); // count 0
        d[12] = 1;
        assert!(parse_fragment(&d).is_some());
        d[10] = 1; // index == count
        assert!(parse_fragment(&d).is_none());
        assert!(fragment(b"not a message at all, honestly", 10).is_err());
    }
}
