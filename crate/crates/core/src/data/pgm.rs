//! Binary portable graymap (P5) files, 8- or 16-bit big-endian samples.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples.
    pub samples: Vec<u16>,
}

impl Pgm {
    pub fn new(width: usize, height: usize, maxval: u16, samples: Vec<u16>) -> Result<Self> {
        if maxval == 0 || samples.len() != width * height || width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "PGM of {width}x{height} with maxval {maxval} cannot hold {} samples",
                samples.len()
            )));
        }
        if let Some(s) = samples.iter().find(|&&s| s > maxval) {
            return Err(Error::InvalidArgument(format!("PGM sample {s} exceeds maxval {maxval}")));
        }
        Ok(Pgm {
            width,
            height,
            maxval,
            samples,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.samples.iter().map(|&s| s as u8));
        } else {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("malformed PGM: {m}"));
        if bytes.get(..2) != Some(b"P5") {
            return Err(bad("missing P5 magic"));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for f in &mut fields {
            // whitespace and comments before each header field
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *f = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad header field"))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(bad("header not terminated"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval == 0 || maxval > u16::MAX as usize {
            return Err(bad("maxval out of range"));
        }
        let n = width * height;
        let body = &bytes[pos..];
        let samples: Vec<u16> = if maxval < 256 {
            if body.len() != n {
                return Err(bad("pixel data length"));
            }
            body.iter().map(|&b| b as u16).collect()
        } else {
            if body.len() != 2 * n {
                return Err(bad("pixel data length"));
            }
            body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        };
        Pgm::new(width, height, maxval as u16, samples).map_err(|e| bad(&e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Pgm::decode(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// Maps `[0, 1]` values to 8-bit samples, clamping outside the range.
pub fn to_u8_samples(values: &[f64]) -> Vec<u16> {
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16).collect()
}
