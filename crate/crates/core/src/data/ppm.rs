//! Binary PPM (P6) and PGM (P5) readers/writers, 8-bit, maxval 255.
//!
//! Pixels quantize to bytes on save and scale back to [0, 1] on load, so a
//! save/load round trip is the identity on quantized values.

use super::{DataError, Image};
use std::io::Write;
use std::path::Path;

/// Parse a binary P6 file. Header tokens may be separated by any whitespace
/// and `#` comments; maxval must be 255.
pub fn load_ppm(path: &Path) -> Result<Image, DataError> {
    let bytes = std::fs::read(path)?;
    parse_ppm(&bytes)
}

pub(crate) fn parse_ppm(bytes: &[u8]) -> Result<Image, DataError> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(DataError::Format {
            offset: 0,
            msg: format!(
                "bad magic {:?}, expected P6",
                String::from_utf8_lossy(&bytes[..bytes.len().min(2)])
            ),
        });
    }
    pos += 2;
    let width = read_header_int(bytes, &mut pos)?;
    let height = read_header_int(bytes, &mut pos)?;
    let maxval = read_header_int(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(DataError::Format {
            offset: pos,
            msg: format!("maxval {maxval}, only 255 supported"),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(DataError::Format {
            offset: pos,
            msg: "missing whitespace before pixel payload".into(),
        });
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() - pos < need {
        return Err(DataError::Format {
            offset: bytes.len(),
            msg: format!(
                "truncated payload: need {need} bytes, have {}",
                bytes.len() - pos
            ),
        });
    }
    let pixels = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Image::new(height, width, pixels)
}

fn read_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize, DataError> {
    // Skip whitespace and comments.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return Err(DataError::Format {
            offset: start,
            msg: "expected decimal header field".into(),
        });
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(DataError::Format {
            offset: start,
            msg: "unparseable header field".into(),
        })
}

pub fn save_ppm(img: &Image, path: &Path) -> Result<(), DataError> {
    let mut out = Vec::with_capacity(img.pixels.len() + 32);
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    out.extend(img.pixels.iter().map(|&p| quantize(p)));
    std::fs::write(path, out)?;
    Ok(())
}

/// Write a grayscale map as binary P5, maxval 255. `values` are clamped to
/// [0, 1] before quantization.
pub fn save_pgm(values: &[f64], height: usize, width: usize, path: &Path) -> Result<(), DataError> {
    if values.len() != height * width {
        return Err(DataError::InvalidArgument(format!(
            "{height}x{width} map needs {} values, got {}",
            height * width,
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(values.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend(values.iter().map(|&v| quantize(v.clamp(0.0, 1.0))));
    std::fs::write(path, out)?;
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round() as u8
}
