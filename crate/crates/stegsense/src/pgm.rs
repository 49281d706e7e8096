//! Binary PGM (P5) reading and writing, maxval 255 only.
//!
//! The writer emits exactly `P5\n<w> <h>\n255\n` followed by the raw rows,
//! so identical images produce identical files. The reader additionally
//! tolerates `#` comment lines inside the header and arbitrary whitespace
//! between header tokens; parse errors carry the byte offset.

use crate::error::{Error, Result};
use crate::image::Image8;
use std::fs;
use std::path::Path;

pub fn write_pgm(img: &Image8, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend_from_slice(img.pixels());
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pgm(path: &Path) -> Result<Image8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_pgm(&bytes).map_err(|(offset, detail)| Error::Parse {
        path: Some(path.to_path_buf()),
        offset,
        detail,
    })
}

type ParseResult<T> = std::result::Result<T, (usize, String)>;

fn parse_pgm(bytes: &[u8]) -> ParseResult<Image8> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err((0, "not a binary PGM (magic != P5)".into()));
    }
    let mut pos = 2;
    let (_, width) = read_header_int(bytes, &mut pos)?;
    let (_, height) = read_header_int(bytes, &mut pos)?;
    let (maxval_at, maxval) = read_header_int(bytes, &mut pos)?;
    if maxval != 255 {
        return Err((maxval_at, format!("maxval {maxval} unsupported (need 255)")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        Some(_) | None => {
            return Err((pos, "missing whitespace before pixel data".into()));
        }
    }
    if width == 0 || height == 0 {
        return Err((2, format!("empty image {width}x{height}")));
    }
    let need = width * height;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err((
            bytes.len(),
            format!("truncated pixel data ({} of {need} bytes)", raster.len()),
        ));
    }
    if raster.len() > need {
        return Err((
            pos + need,
            format!("{} trailing bytes after pixel data", raster.len() - need),
        ));
    }
    Image8::new(width, height, raster.to_vec()).map_err(|e| (2, e.to_string()))
}

/// Parses the next decimal header token, skipping whitespace and `#` comment
/// lines before it. Returns the token's byte offset together with its value.
fn read_header_int(bytes: &[u8], pos: &mut usize) -> ParseResult<(usize, usize)> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while !matches!(bytes.get(*pos), None | Some(b'\n')) {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_digit() => break,
            Some(b) => {
                return Err((*pos, format!("unexpected byte 0x{b:02x} in header")));
            }
            None => return Err((*pos, "header ended early".into())),
        }
    }
    let start = *pos;
    let mut value = 0usize;
    while let Some(b) = bytes.get(*pos) {
        if !b.is_ascii_digit() {
            break;
        }
        value = value
            .checked_mul(10)
            .and_then(|v| v.checked_add(usize::from(b - b'0')))
            .ok_or((start, "header value overflows".to_string()))?;
        *pos += 1;
    }
    Ok((start, value))
}
