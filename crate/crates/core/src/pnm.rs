//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{reason} at byte {offset}")]
pub struct PnmError {
    pub offset: usize,
    pub reason: String,
}

fn err<T>(offset: usize, reason: impl Into<String>) -> Result<T, PnmError> {
    Err(PnmError {
        offset,
        reason: reason.into(),
    })
}

/// Decoded raster with interleaved 8-bit samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PnmError> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return if self.pos >= self.bytes.len() {
                err(self.pos, format!("truncated header, expected {what}"))
            } else {
                err(self.pos, format!("expected {what}"))
            };
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| err(start, format!("{what} out of range")), Ok)
    }
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Raster, PnmError> {
    if bytes.len() < 2 {
        return err(bytes.len(), "truncated magic number");
    }
    if &bytes[..2] != magic {
        return err(0, format!("expected magic {}", String::from_utf8_lossy(magic)));
    }
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let max_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return err(max_at, format!("maxval {maxval} unsupported, need 255"));
    }
    if width == 0 || height == 0 {
        return err(max_at, "zero image dimension");
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        Some(_) => return err(c.pos, "expected whitespace after maxval"),
        None => return err(c.pos, "truncated header"),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or(PnmError {
            offset: c.pos,
            reason: "image too large".into(),
        })?;
    let have = bytes.len() - c.pos;
    if have < need {
        return err(bytes.len(), format!("truncated pixel data: need {need} bytes, have {have}"));
    }
    if have > need {
        return err(c.pos + need, "trailing bytes after pixel data");
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: bytes[c.pos..].to_vec(),
    })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Raster, PnmError> {
    decode(bytes, b"P6", 3)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Raster, PnmError> {
    decode(bytes, b"P5", 1)
}

/// Encodes `raster` as P6 or P5 depending on its channel count.
pub fn encode(raster: &Raster) -> Vec<u8> {
    let magic = if raster.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.data);
    out
}

/// `round(255 * v)` with `v` clamped to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let r = Raster {
            width: 2,
            height: 1,
            channels: 3,
            data: vec![1, 2, 3, 4, 5, 6],
        };
        assert_eq!(decode_ppm(&encode(&r)).unwrap(), r);
        let g = Raster {
            width: 1,
            height: 2,
            channels: 1,
            data: vec![0, 255],
        };
        assert_eq!(decode_pgm(&encode(&g)).unwrap(), g);
    }

    #[test]
    fn comments_in_header() {
        let r = decode_ppm(b"P6 # made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(r.data, vec![1, 2, 3]);
    }

    #[test]
    fn errors_carry_offsets() {
        let e = decode_ppm(b"P6\n2 2\n255\n\x00\x00").unwrap_err();
        assert_eq!(e.offset, 13);
        assert!(e.to_string().contains("truncated"));
        assert_eq!(decode_ppm(b"P3\n1 1\n255\n").unwrap_err().offset, 0);
        assert_eq!(decode_ppm(b"P6\n1 x").unwrap_err().offset, 5);
        assert_eq!(decode_ppm(b"P6\n1 1\n65535\n").unwrap_err().offset, 6);
        assert!(decode_pgm(b"P5\n1 1\n255\n\x00\x00").is_err());
    }
}
