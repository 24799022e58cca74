//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::path::Path;

use super::{GrayImage, Image};
use crate::error::{Error, Result};

struct Header {
    width: usize,
    height: usize,
    payload_at: usize,
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { offset, msg: msg.into() }
}

/// Parse `magic width height maxval` plus the single whitespace byte before the payload.
/// `#` comments may appear wherever whitespace is allowed in the header.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments; at least one separator is required
        let start = pos;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        if pos == start {
            return Err(format_err(pos, "expected whitespace in header"));
        }
        let digits_at = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if pos == digits_at {
            return Err(format_err(pos, "expected a decimal number in header"));
        }
        let text = std::str::from_utf8(&bytes[digits_at..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| format_err(digits_at, format!("number {text} out of range")))?;
        if k < 2 && *field == 0 {
            return Err(format_err(digits_at, "zero image dimension"));
        }
    }
    if fields[2] != 255 {
        return Err(format_err(pos, format!("maxval {} unsupported, only 255", fields[2])));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err(pos, "expected single whitespace before payload")),
    }
    Ok(Header { width: fields[0], height: fields[1], payload_at: pos })
}

fn payload(bytes: &[u8], h: &Header, channels: usize) -> Result<Vec<u8>> {
    let need = h
        .width
        .checked_mul(h.height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| format_err(0, "image dimensions overflow"))?;
    let have = bytes.len() - h.payload_at;
    if have < need {
        return Err(format_err(bytes.len(), format!("short payload: {have} of {need} bytes")));
    }
    Ok(bytes[h.payload_at..h.payload_at + need].to_vec())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let h = parse_header(bytes, b"P6")?;
    let rgb = payload(bytes, &h, 3)?;
    Ok(Image { width: h.width, height: h.height, rgb })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let h = parse_header(bytes, b"P5")?;
    let data = payload(bytes, &h, 1)?;
    Ok(GrayImage { width: h.width, height: h.height, data })
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.rgb);
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format { offset, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    with_path(path, decode_ppm(&read(path)?))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    with_path(path, decode_pgm(&read(path)?))
}

pub fn save_ppm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}
