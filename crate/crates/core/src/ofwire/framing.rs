use log::warn;

use super::{decode_message, Message, WireError, HEADER_LEN};

/// Splits a TCP byte stream into OpenFlow messages.
///
/// `accumulator` carries any partial message left over from earlier calls.
/// Messages of unsupported types (and bodies that fail to decode but are
/// correctly framed) are skipped. A bad version or a header length below 8
/// means the stream is out of sync and is returned as an error.
pub fn frame_stream(accumulator: &mut Vec<u8>, incoming: &[u8]) -> Result<Vec<Message>, WireError> {
    let mut framer = StreamFramer { buf: std::mem::take(accumulator), skipped: 0 };
    let result = framer.push(incoming);
    *accumulator = framer.buf;
    result
}

/// Stateful wrapper around [`frame_stream`] owned by one connection.
#[derive(Debug, Default)]
pub struct StreamFramer {
    buf: Vec<u8>,
    skipped: u64,
}

impl StreamFramer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, incoming: &[u8]) -> Result<Vec<Message>, WireError> {
        self.buf.extend_from_slice(incoming);
        let mut out = Vec::new();
        let mut offset = 0;
        while self.buf.len() - offset >= HEADER_LEN {
            match decode_message(&self.buf[offset..]) {
                Ok((msg, used)) => {
                    out.push(msg);
                    offset += used;
                }
                Err(WireError::Truncated { .. }) => break,
                Err(WireError::UnsupportedType { msg_type, length }) => {
                    log::debug!("skipping unsupported openflow message type {msg_type}");
                    self.skipped += 1;
                    offset += length;
                }
                Err(e @ (WireError::BadVersion(_) | WireError::BadLength(_))) => {
                    self.buf.drain(..offset);
                    return Err(e);
                }
                Err(e) => {
                    let length = u16::from_be_bytes([self.buf[offset + 2], self.buf[offset + 3]]) as usize;
                    warn!("skipping undecodable openflow message: {e}");
                    self.skipped += 1;
                    offset += length;
                }
            }
        }
        self.buf.drain(..offset);
        Ok(out)
    }

    /// Bytes of an incomplete message waiting for more input.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    /// Count of messages dropped because they were outside the supported subset
    /// or failed to decode.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }
}
