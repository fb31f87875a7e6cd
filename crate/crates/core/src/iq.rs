//! Raw IQ dumps: the bytes `SPHY`, a version byte, then interleaved
//! little-endian `f32` I/Q pairs.

use std::fs;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPHY";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 5;

pub fn encode_iq(samples: &[Complex64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + samples.len() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for x in samples {
        out.extend_from_slice(&(x.re as f32).to_le_bytes());
        out.extend_from_slice(&(x.im as f32).to_le_bytes());
    }
    out
}

pub fn decode_iq(bytes: &[u8]) -> Result<Vec<Complex64>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::BadIqFile("missing SPHY header".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::BadIqFile(format!(
            "unsupported version {}",
            bytes[4]
        )));
    }
    let body = &bytes[HEADER_LEN..];
    if !body.len().is_multiple_of(8) {
        return Err(Error::BadIqFile(format!(
            "payload of {} bytes is not a whole number of I/Q pairs",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(f64::from(re), f64::from(im))
        })
        .collect())
}

pub fn write_iq(path: impl AsRef<Path>, samples: &[Complex64]) -> Result<()> {
    fs::write(path, encode_iq(samples))?;
    Ok(())
}

pub fn read_iq(path: impl AsRef<Path>) -> Result<Vec<Complex64>> {
    decode_iq(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let x: Vec<Complex64> = (0..37)
            .map(|n| Complex64::new((n as f64 * 0.3).sin(), -(n as f64) * 0.01))
            .collect();
        let bytes = encode_iq(&x);
        assert_eq!(&bytes[..5], b"SPHY\x01");
        assert_eq!(bytes.len(), 5 + 37 * 8);
        let y = decode_iq(&bytes).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_headers_and_lengths() {
        assert!(decode_iq(b"NOPE\x01").is_err());
        assert!(decode_iq(b"SPHY\x02").is_err());
        assert!(decode_iq(b"SPHY\x01abc").is_err());
        assert!(decode_iq(b"SPHY\x01").unwrap().is_empty());
    }
}
