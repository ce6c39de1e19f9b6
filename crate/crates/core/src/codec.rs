//! Message payload wire format.
//!
//! A payload of `P` bytes is the send timestamp in ASCII decimal nanoseconds,
//! one `|` separator, then `A` (0x41) fill up to exactly `P` bytes:
//!
//! ```text
//! 1700000000123456789|AAAAAAAAAAAA
//! ```
//!
//! External adapter shims produce and consume this format, so it is fixed
//! byte for byte.

use thiserror::Error;

pub const SEPARATOR: u8 = b'|';
pub const FILL: u8 = b'A';

/// Longest decimal `u64` (20 digits) plus the separator.
pub const MIN_PAYLOAD_SIZE: usize = 21;

const MAX_DIGITS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("payload size {size} is below the {MIN_PAYLOAD_SIZE}-byte minimum")]
    PayloadTooSmall { size: usize },
    #[error("malformed payload: {0}")]
    MalformedPayload(&'static str),
}

/// A complete message body of the configured size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload(Vec<u8>);

impl Payload {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[u8]> for Payload {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

pub fn encode(timestamp_ns: u64, size: usize) -> Result<Payload, CodecError> {
    let mut buf = Vec::with_capacity(size);
    encode_into(timestamp_ns, size, &mut buf)?;
    Ok(Payload(buf))
}

/// Like [`encode`], reusing `buf` (cleared first).
pub fn encode_into(timestamp_ns: u64, size: usize, buf: &mut Vec<u8>) -> Result<(), CodecError> {
    if size < MIN_PAYLOAD_SIZE {
        return Err(CodecError::PayloadTooSmall { size });
    }
    buf.clear();
    buf.reserve(size);
    let mut digits = [0u8; MAX_DIGITS];
    let mut n = timestamp_ns;
    let mut start = MAX_DIGITS;
    loop {
        start -= 1;
        digits[start] = b'0' + (n % 10) as u8;
        n /= 10;
        if n == 0 {
            break;
        }
    }
    buf.extend_from_slice(&digits[start..]);
    buf.push(SEPARATOR);
    buf.resize(size, FILL);
    Ok(())
}

/// Extract the embedded timestamp, validating the whole payload against the
/// expected size.
pub fn decode(bytes: &[u8], expected_size: usize) -> Result<u64, CodecError> {
    if expected_size < MIN_PAYLOAD_SIZE {
        return Err(CodecError::PayloadTooSmall { size: expected_size });
    }
    if bytes.len() != expected_size {
        return Err(CodecError::MalformedPayload("length differs from configured size"));
    }
    let header_end = bytes
        .iter()
        .take(MAX_DIGITS + 1)
        .position(|b| *b == SEPARATOR)
        .ok_or(CodecError::MalformedPayload("missing separator"))?;
    if header_end == 0 {
        return Err(CodecError::MalformedPayload("empty timestamp"));
    }
    let mut value: u64 = 0;
    for &b in &bytes[..header_end] {
        if !b.is_ascii_digit() {
            return Err(CodecError::MalformedPayload("non-digit in timestamp"));
        }
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add(u64::from(b - b'0')))
            .ok_or(CodecError::MalformedPayload("timestamp overflows u64"))?;
    }
    if bytes[header_end + 1..].iter().any(|b| *b != FILL) {
        return Err(CodecError::MalformedPayload("unexpected padding byte"));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encodes_reference_layout() {
        let p = encode(1_700_000_000_123_456_789, 32).unwrap();
        assert_eq!(p.as_bytes(), b"1700000000123456789|AAAAAAAAAAAA");
        assert_eq!(p.len(), 32);
        assert_eq!(decode(p.as_bytes(), 32).unwrap(), 1_700_000_000_123_456_789);
    }

    #[test]
    fn extreme_timestamps_fit_minimum_size() {
        for t in [0, 9, 10, u64::MAX] {
            let p = encode(t, MIN_PAYLOAD_SIZE).unwrap();
            assert_eq!(decode(p.as_bytes(), MIN_PAYLOAD_SIZE).unwrap(), t);
        }
        assert_eq!(encode(u64::MAX, 21).unwrap().as_bytes(), b"18446744073709551615|");
    }

    #[test]
    fn too_small() {
        assert_eq!(encode(1, 8), Err(CodecError::PayloadTooSmall { size: 8 }));
        assert_eq!(encode(1, 20), Err(CodecError::PayloadTooSmall { size: 20 }));
    }

    #[test]
    fn rejects_corruption() {
        let good = encode(42, 32).unwrap().into_bytes();
        let mut bad_fill = good.clone();
        bad_fill[30] = b'B';
        assert!(decode(&bad_fill, 32).is_err());
        assert!(decode(&good[..20], 32).is_err());
        assert!(decode(&good[..20], 20).is_err());
        let mut no_sep = good.clone();
        no_sep[2] = b'A';
        assert!(decode(&no_sep, 32).is_err());
        let mut letter = good.clone();
        letter[0] = b'x';
        assert!(decode(&letter, 32).is_err());
        assert!(decode(&[b'A'; 32], 32).is_err());
        let mut overflow = b"99999999999999999999|".to_vec();
        overflow.resize(32, FILL);
        assert!(decode(&overflow, 32).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        assert_eq!(encode(123, 4096).unwrap(), encode(123, 4096).unwrap());
    }

    proptest! {
        #[test]
        fn roundtrip(t in any::<u64>(), size in MIN_PAYLOAD_SIZE..4096usize) {
            let p = encode(t, size).unwrap();
            prop_assert_eq!(p.len(), size);
            prop_assert_eq!(decode(p.as_bytes(), size).unwrap(), t);
        }

        #[test]
        fn single_byte_flip_in_padding_is_detected(t in any::<u64>(), size in 40usize..512, pos in 21usize..40, byte in any::<u8>()) {
            prop_assume!(byte != FILL);
            let mut p = encode(t, size).unwrap().into_bytes();
            p[pos] = byte;
            prop_assert!(decode(&p, size).is_err());
        }
    }
}
