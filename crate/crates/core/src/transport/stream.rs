use std::io::{self, Read, Write};

use super::{MessageSink, TransportError};

pub const LENGTH_PREFIX_LEN: usize = 4;

/// Writes `msg` with its length prefix. Oversize messages are refused before
/// anything is written.
pub fn write_frame<W: Write>(w: &mut W, msg: &[u8], max: usize) -> Result<(), TransportError> {
    if msg.len() > max || msg.len() > u32::MAX as usize {
        return Err(TransportError::Oversize { len: msg.len(), max });
    }
    w.write_all(&(msg.len() as u32).to_le_bytes())?;
    w.write_all(msg)?;
    Ok(())
}

/// Reads one length-prefixed message. `Ok(None)` on a clean end of stream
/// at a message boundary.
pub fn read_frame<R: Read>(r: &mut R, max: usize) -> Result<Option<Vec<u8>>, TransportError> {
    let mut prefix = [0u8; LENGTH_PREFIX_LEN];
    let mut got = 0;
    while got < LENGTH_PREFIX_LEN {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(TransportError::Closed),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(prefix) as usize;
    if len > max {
        return Err(TransportError::Oversize { len, max });
    }
    let mut msg = vec![0u8; len];
    r.read_exact(&mut msg).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TransportError::Closed,
        _ => e.into(),
    })?;
    Ok(Some(msg))
}

/// Single writer over any byte stream (usually a `TcpStream`).
pub struct StreamSender<W: Write> {
    inner: W,
    max_message_bytes: usize,
    bytes_sent: u64,
}

impl<W: Write> StreamSender<W> {
    pub fn new(inner: W, max_message_bytes: usize) -> Self {
        StreamSender {
            inner,
            max_message_bytes,
            bytes_sent: 0,
        }
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

impl<W: Write> MessageSink for StreamSender<W> {
    fn send_message(&mut self, msg: &[u8]) -> Result<(), TransportError> {
        write_frame(&mut self.inner, msg, self.max_message_bytes)?;
        self.inner.flush()?;
        self.bytes_sent += (LENGTH_PREFIX_LEN + msg.len()) as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip_and_eof() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello", 100).unwrap();
        write_frame(&mut buf, b"", 100).unwrap();
        assert_eq!(&buf[..4], &5u32.to_le_bytes());
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r, 100).unwrap().unwrap(), b"hello");
        assert_eq!(read_frame(&mut r, 100).unwrap().unwrap(), b"");
        assert!(read_frame(&mut r, 100).unwrap().is_none());
    }

    #[test]
    fn oversize_refused_before_writing() {
        let mut buf = Vec::new();
        let err = write_frame(&mut buf, &[0u8; 11], 10).unwrap_err();
        assert!(matches!(err, TransportError::Oversize { len: 11, max: 10 }));
        assert!(buf.is_empty());
    }

    #[test]
    fn truncated_stream_is_closed() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"abcdef", 100).unwrap();
        let mut r = &buf[..7];
        assert!(matches!(read_frame(&mut r, 100), Err(TransportError::Closed)));
        let mut r = &buf[..2];
        assert!(matches!(read_frame(&mut r, 100), Err(TransportError::Closed)));
        let mut r = &buf[..];
        assert!(matches!(read_frame(&mut r, 3), Err(TransportError::Oversize { .. })));
    }
}
