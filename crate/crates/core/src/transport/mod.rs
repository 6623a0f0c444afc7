//! Moving wire messages between the pipeline host and a consumer.
//!
//! Two framings are supported: a reliable byte stream where each message is
//! prefixed by its `u32` little-endian length, and datagrams where each
//! message is split into fragments carrying a small subheader. Either way
//! the receiving side funnels complete messages into a [`ReceiverState`]
//! that only ever exposes the newest frame per message type.

mod datagram;
mod link;
mod receiver;
mod stream;

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::cloud_message_len;

pub use datagram::{
    fragment, fragment_count, parse_fragment, DatagramSender, FragmentHeader, DEFAULT_FRAGMENT_PAYLOAD,
    FRAGMENT_HEADER_LEN, MAX_DATAGRAM_LEN,
};
pub use link::{LatencyModel, LinkConfig, LinkSink, SimulatedLink, TraceEvent};
pub use receiver::{receive_latest, Counters, ReceiverState, SharedReceiver};
pub use stream::{read_frame, write_frame, StreamSender, LENGTH_PREFIX_LEN};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("message of {len} bytes exceeds the {max}-byte limit")]
    Oversize { len: usize, max: usize },
    #[error("message too short to carry a wire header ({0} bytes)")]
    NotAMessage(usize),
    #[error("message needs {count} fragments, more than the 16-bit fragment count allows")]
    TooManyFragments { count: usize },
    #[error("invalid transport configuration: {0}")]
    InvalidConfig(String),
    #[error("peer closed the connection")]
    Closed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Length-prefixed messages over TCP.
    #[default]
    Stream,
    /// Fragmented messages over UDP.
    Datagram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub endpoint: String,
    pub mode: Mode,
    pub max_message_bytes: usize,
    /// In-flight partial messages the datagram reassembler holds.
    pub receive_buffer_frames: usize,
    /// Message bytes per datagram fragment.
    pub fragment_payload: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            endpoint: "127.0.0.1:7878".to_string(),
            mode: Mode::Stream,
            max_message_bytes: 4 << 20,
            receive_buffer_frames: 2,
            fragment_payload: DEFAULT_FRAGMENT_PAYLOAD,
        }
    }
}

impl TransportConfig {
    /// Checks the limits can carry a full-budget cloud.
    pub fn validate(&self, point_budget: usize) -> Result<(), TransportError> {
        let need = cloud_message_len(point_budget);
        if self.max_message_bytes < need {
            return Err(TransportError::InvalidConfig(format!(
                "max_message_bytes {} is below the largest cloud message ({need} bytes)",
                self.max_message_bytes
            )));
        }
        if self.receive_buffer_frames == 0 {
            return Err(TransportError::InvalidConfig("receive_buffer_frames must be >= 1".into()));
        }
        if self.fragment_payload == 0 || self.fragment_payload + FRAGMENT_HEADER_LEN > MAX_DATAGRAM_LEN {
            return Err(TransportError::InvalidConfig(format!(
                "fragment_payload must be in 1..={}",
                MAX_DATAGRAM_LEN - FRAGMENT_HEADER_LEN
            )));
        }
        Ok(())
    }
}

/// Destination for encoded wire messages.
pub trait MessageSink {
    fn send_message(&mut self, msg: &[u8]) -> Result<(), TransportError>;
}

impl MessageSink for Vec<Vec<u8>> {
    fn send_message(&mut self, msg: &[u8]) -> Result<(), TransportError> {
        self.push(msg.to_vec());
        Ok(())
    }
}

impl<S: MessageSink + ?Sized> MessageSink for &mut S {
    fn send_message(&mut self, msg: &[u8]) -> Result<(), TransportError> {
        (**self).send_message(msg)
    }
}

impl<S: MessageSink + ?Sized> MessageSink for Box<S> {
    fn send_message(&mut self, msg: &[u8]) -> Result<(), TransportError> {
        (**self).send_message(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_fits_default_budget() {
        TransportConfig::default().validate(75_000).unwrap();
        let small = TransportConfig {
            max_message_bytes: 1000,
            ..Default::default()
        };
        assert!(small.validate(75_000).is_err());
    }
}
