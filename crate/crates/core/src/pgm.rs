//! Binary (P5) PGM encode/decode, 8-bit maxval 255 only.

use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PgmError {
    /// File does not start with "P5".
    BadMagic,
    /// Maxval other than 255.
    BadMaxval(u32),
    /// Payload shorter than width*height.
    Truncated { expected: usize, got: usize },
    /// Unparseable header.
    Malformed,
}

impl fmt::Display for PgmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PgmError::BadMagic => write!(f, "bad magic (expected P5)"),
            PgmError::BadMaxval(v) => write!(f, "unsupported maxval {v} (expected 255)"),
            PgmError::Truncated { expected, got } => {
                write!(f, "truncated payload: expected {expected} bytes, got {got}")
            }
            PgmError::Malformed => write!(f, "malformed header"),
        }
    }
}

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = Vec::with_capacity(pixels.len() + 32);
    out.extend_from_slice(alloc::format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(pixels);
    out
}

/// Returns (width, height, pixels). Accepts '#' comments in the header.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(PgmError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(PgmError::Malformed),
            }
        }
        let start = pos;
        while let Some(b) = bytes.get(pos) {
            if b.is_ascii_digit() {
                pos += 1;
            } else {
                break;
            }
        }
        if pos == start {
            return Err(PgmError::Malformed);
        }
        let s = core::str::from_utf8(&bytes[start..pos]).map_err(|_| PgmError::Malformed)?;
        *field = s.parse().map_err(|_| PgmError::Malformed)?;
    }
    let (width, height, maxval) = (fields[0] as usize, fields[1] as usize, fields[2]);
    if maxval != 255 {
        return Err(PgmError::BadMaxval(maxval));
    }
    // exactly one whitespace byte between header and payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PgmError::Malformed),
    }
    let expected = width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(PgmError::Truncated { expected, got: payload.len() });
    }
    Ok((width, height, payload[..expected].to_vec()))
}

/// [0,1] floats to 8-bit, round to nearest.
pub fn quantize(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8)
        .collect()
}

pub fn dequantize(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| b as f32 / 255.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode(3, 2, &[0, 1, 2, 3, 4, 255]);
        assert_eq!(&bytes[..9], b"P5\n3 2\n255\n"[..9].as_ref());
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 1, 2, 3, 4, 255]);
    }

    #[test]
    fn round_trip_preserves_pixels() {
        let pixels: Vec<u8> = (0..=255).collect();
        let bytes = encode(16, 16, &pixels);
        let (w, h, out) = decode(&bytes).unwrap();
        assert_eq!((w, h), (16, 16));
        assert_eq!(out, pixels);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n# again\n255\n\x10\x20";
        let (w, h, out) = decode(bytes).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(out, vec![0x10, 0x20]);
    }

    #[test]
    fn ascii_pgm_is_rejected_as_bad_magic() {
        assert!(matches!(decode(b"P2\n2 1\n255\n1 2"), Err(PgmError::BadMagic)));
        assert!(matches!(decode(b"PX"), Err(PgmError::BadMagic)));
    }

    #[test]
    fn wrong_maxval_is_rejected() {
        assert!(matches!(
            decode(b"P5\n2 1\n65535\n\x01\x02\x03\x04"),
            Err(PgmError::BadMaxval(65535))
        ));
    }

    #[test]
    fn short_payload_is_truncated() {
        assert!(matches!(decode(b"P5\n2 2\n255\n\x01\x02"), Err(PgmError::Truncated { expected: 4, got: 2 })));
    }

    #[test]
    fn garbage_header_is_malformed() {
        assert!(matches!(decode(b"P5\nduck 1\n255\n\x01"), Err(PgmError::Malformed)));
    }

    #[test]
    fn quantize_round_trips_through_dequantize() {
        let values = [0.0f32, 1.0, 0.5, 0.25, 0.8];
        let q = quantize(&values);
        assert_eq!(q, vec![0, 255, 128, 64, 204]);
        let d = dequantize(&q);
        for (orig, back) in values.iter().zip(&d) {
            assert!((orig - back).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // u8 -> f32 -> u8 is exact
        let pixels: Vec<u8> = (0..=255).collect();
        assert_eq!(quantize(&dequantize(&pixels)), pixels);
    }
}
