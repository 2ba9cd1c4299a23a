//! Classification maps as binary PPM (P6) images.
//!
//! Class `c >= 1` renders as `palette[c - 1]`; label 0 (unlabeled) renders
//! black. Output is byte-exact for fixed inputs: `P6\n{width} {height}\n255\n`
//! followed by the RGB payload.

use crate::{Error, Result};

pub fn render_map(labels: &[u16], height: usize, width: usize, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(Error::Contract(format!(
            "render_map: {} labels for a {}x{} map",
            labels.len(),
            height,
            width
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    out.reserve(labels.len() * 3);
    for (i, &l) in labels.iter().enumerate() {
        let rgb = match l {
            0 => [0, 0, 0],
            c if (c as usize) <= palette.len() => palette[c as usize - 1],
            c => {
                return Err(Error::Contract(format!(
                    "render_map: label {} at pixel ({}, {}) has no palette entry",
                    c,
                    i / width,
                    i % width
                )))
            }
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

/// Parses a binary P6 image back into `(height, width, rgb)`. Accepts the
/// general header grammar (whitespace separated, `#` comments).
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::data("ppm: not a P6 file"));
    }
    let width: usize = parse_number(&next_token(bytes, &mut pos)?)?;
    let height: usize = parse_number(&next_token(bytes, &mut pos)?)?;
    let maxval: usize = parse_number(&next_token(bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::Data(format!("ppm: unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos || bytes.len() - pos != need {
        return Err(Error::Data(format!(
            "ppm: payload is {} bytes, expected {}",
            bytes.len().saturating_sub(pos),
            need
        )));
    }
    let rgb = bytes[pos..]
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok((height, width, rgb))
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<Vec<u8>> {
    // Skip whitespace and # comments.
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
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::data("ppm: truncated header"));
    }
    Ok(bytes[start..*pos].to_vec())
}

fn parse_number(token: &[u8]) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::data("ppm: malformed header number"))
}
