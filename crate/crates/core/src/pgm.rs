//! Binary PGM (P5, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::Frame;

pub fn encode(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.pixels);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Frame> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    let magic = next_token(bytes, &mut pos).ok_or_else(|| Error::Data("empty PGM".into()))?;
    if magic != b"P5" {
        return Err(Error::Data(format!(
            "not a binary PGM (magic {:?})",
            String::from_utf8_lossy(magic)
        )));
    }
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        let tok = next_token(bytes, &mut pos)
            .ok_or_else(|| Error::Data(format!("PGM header ends before {name}")))?;
        fields[i] = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("PGM {name} is not a number")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Data(format!(
            "PGM maxval {maxval} unsupported, expected 255"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| {
        Error::Data(format!(
            "PGM raster truncated: {} of {need} bytes",
            bytes.len().saturating_sub(pos)
        ))
    })?;
    Frame::new(w, h, raster.to_vec())
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn read(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, frame: &Frame) -> Result<()> {
    fs::write(path, encode(frame)).map_err(|e| Error::io(path, e))
}
