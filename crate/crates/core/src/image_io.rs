//! Binary PPM (P6) and PGM (P5) images, 8 bits per sample.
//!
//! Images are `C×H×W` tensors with samples in `[0, 1]`; `C` is 3 for PPM
//! and 1 for PGM.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn malformed(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset, msg: msg.into() }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(malformed(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| malformed(start, format!("{what} is too large")))
    }
}

/// Decodes a P6 or P5 file held in memory.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(malformed(0, "expected magic P6 or P5")),
    };
    let mut h = Header { bytes, pos: 2 };
    if !h.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(malformed(2, "expected whitespace after magic"));
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    let max_at = {
        h.skip_space();
        h.pos
    };
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(malformed(max_at, format!("image extent {width}×{height} is empty")));
    }
    if maxval == 0 {
        return Err(malformed(max_at, "maxval must be positive"));
    }
    if maxval > 255 {
        return Err(malformed(
            max_at,
            format!("maxval {maxval} means 16-bit samples; only 8-bit images are supported"),
        ));
    }
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed(h.pos, "expected a single whitespace byte before the raster"));
    }
    let start = h.pos + 1;
    let n = channels * height * width;
    let raster = bytes
        .get(start..start + n)
        .ok_or_else(|| malformed(bytes.len(), format!("raster truncated, need {n} bytes")))?;
    if let Some(&v) = raster.iter().find(|&&v| v as usize > maxval) {
        return Err(malformed(start, format!("sample {v} exceeds maxval {maxval}")));
    }
    // Interleaved HWC on disk, planar CHW in memory.
    let scale = maxval as f64;
    let plane = height * width;
    Tensor::new(
        &[channels, height, width],
        (0..n)
            .map(|i| raster[(i % plane) * channels + i / plane] as f64 / scale)
            .collect(),
    )
}

/// Encodes a `3×H×W` tensor as P6 or a `1×H×W` tensor as P5. Samples are
/// clamped to `[0, 1]` and rounded to the nearest of 256 levels.
pub fn encode_pnm(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3()?;
    let magic = match c {
        3 => "P6",
        1 => "P5",
        _ => return Err(Error::shape(format!("cannot encode {c}-channel image"))),
    };
    if !img.is_finite() {
        return Err(Error::NonFinite("image contains NaN or infinity".into()));
    }
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = img.data();
    out.extend((0..c * plane).map(|i| {
        let v = d[(i % c) * plane + i / c];
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }));
    Ok(out)
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        e => e,
    })
}

pub fn write_pnm(path: &Path, img: &Tensor) -> Result<()> {
    write_atomic(path, &encode_pnm(img)?)
}

/// Writes through a temporary file in the destination directory and renames
/// it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
