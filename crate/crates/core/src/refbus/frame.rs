//! Length-prefixed framing for stream transports: a 4-byte big-endian body
//! length followed by the body.

use std::io::{self, Read};

use crate::backend::BackendError;

pub const HEADER_LEN: usize = 4;

/// Upper bound on a single frame body.
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

pub fn encode_frame(body: &[u8], out: &mut Vec<u8>) -> Result<(), BackendError> {
    if body.len() > MAX_FRAME_LEN {
        return Err(BackendError::FrameTooLarge(body.len()));
    }
    out.clear();
    out.reserve(HEADER_LEN + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    Ok(())
}

#[derive(Debug, PartialEq, Eq)]
pub enum FramePoll {
    Frame(Vec<u8>),
    /// The read timed out; any partial frame is kept for the next poll.
    Pending,
    /// Clean end of stream on a frame boundary.
    Eof,
}

/// Incremental frame decoder that survives arbitrary read boundaries and
/// read timeouts.
#[derive(Debug, Default)]
pub struct FrameReader {
    header: [u8; HEADER_LEN],
    header_filled: usize,
    body: Vec<u8>,
    body_filled: usize,
    in_body: bool,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_partial(&self) -> bool {
        self.in_body || self.header_filled > 0
    }

    pub fn poll<R: Read + ?Sized>(&mut self, reader: &mut R) -> Result<FramePoll, BackendError> {
        loop {
            let target: &mut [u8] = if self.in_body {
                &mut self.body[self.body_filled..]
            } else {
                &mut self.header[self.header_filled..]
            };
            if !target.is_empty() {
                let n = match reader.read(target) {
                    Ok(0) => {
                        return if self.has_partial() {
                            Err(BackendError::TruncatedFrame)
                        } else {
                            Ok(FramePoll::Eof)
                        };
                    }
                    Ok(n) => n,
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                        return Ok(FramePoll::Pending);
                    }
                    Err(e) => return Err(e.into()),
                };
                if self.in_body {
                    self.body_filled += n;
                } else {
                    self.header_filled += n;
                }
            }
            if !self.in_body && self.header_filled == HEADER_LEN {
                let len = u32::from_be_bytes(self.header) as usize;
                if len > MAX_FRAME_LEN {
                    return Err(BackendError::FrameTooLarge(len));
                }
                self.body = vec![0; len];
                self.body_filled = 0;
                self.in_body = true;
            }
            if self.in_body && self.body_filled == self.body.len() {
                self.in_body = false;
                self.header_filled = 0;
                self.body_filled = 0;
                return Ok(FramePoll::Frame(std::mem::take(&mut self.body)));
            }
        }
    }
}
