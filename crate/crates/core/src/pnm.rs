//! Binary portable pixmap (P6) and graymap (P5) codecs, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Header of a parsed P5/P6 file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PnmHeader {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub maxval: usize,
    /// Byte offset of the first raster byte.
    pub data_offset: usize,
}

fn parse_err(what: &'static str, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        what: what.to_string(),
        offset,
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(self.what, start, format!("expected {field}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(self.what, start, format!("{field} out of range")))
    }
}

/// Parses the header of a P5 (`channels = 1`) or P6 (`channels = 3`) file.
pub fn parse_header(bytes: &[u8], what: &'static str) -> Result<PnmHeader> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(parse_err(what, 0, "expected magic P5 or P6")),
    };
    let mut c = Cursor { bytes, pos: 2, what };
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(parse_err(what, 2, "expected whitespace after magic"));
    }
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(what, maxval_at, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(parse_err(what, maxval_at, format!("maxval {maxval} unsupported (1..=255)")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(parse_err(what, c.pos, "expected single whitespace before raster")),
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| parse_err(what, 0, "dimensions overflow"))?;
    let have = bytes.len() - c.pos;
    if have < need {
        return Err(parse_err(
            what,
            bytes.len(),
            format!("raster truncated: {have} of {need} bytes"),
        ));
    }
    Ok(PnmHeader {
        channels,
        width,
        height,
        maxval,
        data_offset: c.pos,
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an H×W×3 tensor with values in `[0, 1]` (clamped) as P6.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = img.dims3()?;
    if c != 3 {
        return Err(Error::dim(format!("P6 needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Decodes P6 into an H×W×3 tensor scaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let hd = parse_header(bytes, "P6 image")?;
    if hd.channels != 3 {
        return Err(parse_err("P6 image", 0, "expected magic P6"));
    }
    let n = hd.width * hd.height * 3;
    let scale = hd.maxval as f64;
    let data = bytes[hd.data_offset..hd.data_offset + n]
        .iter()
        .map(|&b| {
            if b as usize > hd.maxval {
                Err(())
            } else {
                Ok(b as f64 / scale)
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| parse_err("P6 image", hd.data_offset, "sample exceeds maxval"))?;
    Tensor::new(&[hd.height, hd.width, 3], data)
}

/// Encodes 8-bit gray values (row-major) as P5.
pub fn encode_pgm(values: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    if values.len() != h * w || h == 0 || w == 0 {
        return Err(Error::dim(format!("{} gray values for a {h}×{w} image", values.len())));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(values);
    Ok(out)
}

/// Decodes P5 into `(height, width, values)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let hd = parse_header(bytes, "P5 graymap")?;
    if hd.channels != 1 {
        return Err(parse_err("P5 graymap", 0, "expected magic P5"));
    }
    let n = hd.width * hd.height;
    Ok((hd.height, hd.width, bytes[hd.data_offset..hd.data_offset + n].to_vec()))
}

pub fn encode_mask(mask: &[bool], h: usize, w: usize) -> Result<Vec<u8>> {
    let v: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    encode_pgm(&v, h, w)
}

/// Decodes a 0/255 graymap. Any other value is a parse error.
pub fn decode_mask(bytes: &[u8]) -> Result<(usize, usize, Vec<bool>)> {
    let hd = parse_header(bytes, "mask")?;
    let (h, w, v) = decode_pgm(bytes)?;
    let mut out = Vec::with_capacity(v.len());
    for (i, &b) in v.iter().enumerate() {
        match b {
            0 => out.push(false),
            255 => out.push(true),
            _ => {
                return Err(parse_err(
                    "mask",
                    hd.data_offset + i,
                    format!("mask value {b} is neither 0 nor 255"),
                ))
            }
        }
    }
    Ok((h, w, out))
}

/// Affine map of `values` onto `0..=255`. Returns the bytes and `(min, scale)`
/// such that `value = min + byte * scale`, up to quantisation.
pub fn rescale_to_gray(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        // Flat band: mid gray.
        return (vec![128; values.len()], lo, 0.0);
    }
    let scale = (hi - lo) / 255.0;
    let bytes = values.iter().map(|&v| ((v - lo) / scale).round() as u8).collect();
    (bytes, lo, scale)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&read_file(path)?)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    write_file(path, &encode_ppm(img)?)
}

pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    decode_mask(&read_file(path)?)
}

pub fn write_mask(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    write_file(path, &encode_mask(mask, h, w)?)
}
