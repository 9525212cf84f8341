//! Binary PPM (`P6`, maxval 255) frames.

use std::path::Path;

use super::IngestError;

/// Row-major RGB8 image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.pixels[o..o + 3].copy_from_slice(&rgb);
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, IngestError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(IngestError::BadHeader(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| IngestError::BadHeader(format!("{what} out of range")))
    }
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Frame, IngestError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(IngestError::BadHeader("magic is not P6".into()));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    if r.pos < bytes.len() && !bytes[r.pos].is_ascii_whitespace() && bytes[r.pos] != b'#' {
        return Err(IngestError::BadHeader("magic is not P6".into()));
    }
    let width = r.number("width")? as usize;
    let height = r.number("height")? as usize;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(IngestError::BadHeader(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(IngestError::BadHeader(format!("maxval {maxval}")));
    }
    if maxval != 255 {
        return Err(IngestError::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(r.pos) {
        Some(c) if c.is_ascii_whitespace() => r.pos += 1,
        _ => return Err(IngestError::BadHeader("no whitespace after maxval".into())),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| IngestError::BadHeader("image too large".into()))?;
    let data = &bytes[r.pos..];
    if data.len() < expected {
        return Err(IngestError::TruncatedPixels {
            expected,
            actual: data.len(),
        });
    }
    Ok(Frame {
        width,
        height,
        pixels: data[..expected].to_vec(),
    })
}

pub fn write_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.pixels);
    out
}

pub fn read_ppm(path: &Path) -> Result<Frame, IngestError> {
    let bytes = std::fs::read(path).map_err(|e| IngestError::io(path, e))?;
    parse_ppm(&bytes)
}
