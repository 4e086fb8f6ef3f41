//! Binary greyscale PGM (P5) frames.

use std::path::Path;

use tivode::error::{Error, Result};

/// Writes `pixels` in `[0, 1]` as an 8-bit P5 image.
pub fn write_pgm(path: &Path, pixels: &[f64], height: usize, width: usize) -> Result<()> {
    if pixels.len() != height * width {
        return Err(Error::Input(format!(
            "{} pixels for a {height}x{width} image",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a P5 image with `maxval ≤ 255`; returns `(pixels, height, width)`
/// with pixels scaled to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                reason: "truncated PGM header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let header_end = pos as u64;
    let bad = |reason: &str| Error::Format {
        offset: header_end,
        reason: reason.to_string(),
    };
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5) file"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad PGM width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad PGM height"))?;
    let maxval: u32 = fields[3].parse().map_err(|_| bad("bad PGM maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM files are supported"));
    }
    pos += 1;
    let data = bytes.get(pos..pos + width * height).ok_or_else(|| bad("truncated PGM pixel data"))?;
    let scale = maxval as f64;
    Ok((data.iter().map(|&b| b as f64 / scale).collect(), height, width))
}
