//! Binary PGM (P5) read/write, 8- and 16-bit.
//!
//! 16-bit samples are big-endian per the Netpbm convention. Round trips are
//! bit-exact: u16 → f64 in [0,1] → u16 recovers the original samples.

use crate::error::{CliError, Result};
use crate::fsutil;
use sdf_core::Tensor;
use std::path::Path;

/// Write a [1,1,H,W] image in [0,1] as 16-bit (or 8-bit) binary PGM.
pub fn write_pgm(path: &Path, img: &Tensor, sixteen_bit: bool) -> Result<()> {
    let (b, c, h, w) = img.dims4()?;
    if b != 1 || c != 1 {
        return Err(CliError::format(path, format!("PGM wants [1,1,H,W], got {:?}", img.shape())));
    }
    let maxval: u32 = if sixteen_bit { 65535 } else { 255 };
    let mut bytes = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        if sixteen_bit {
            bytes.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            bytes.push(q as u8);
        }
    }
    fsutil::write_atomic(path, &bytes)
}

/// Read a binary PGM into a [1,1,H,W] tensor scaled to [0,1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fsutil::read_bytes(path)?;
    let bad = |detail: &str| CliError::format(path, detail.to_string());
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(bad("not a binary PGM (missing P5 magic)"));
    }
    // header: three whitespace-separated fields after the magic, with
    // optional `#` comment lines
    let mut pos = 2;
    let mut fields: Vec<usize> = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ASCII"))?;
        fields.push(text.parse().map_err(|_| bad("bad header number"))?);
    }
    pos += 1; // the single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("unsupported maxval"));
    }
    let wide = maxval > 255;
    let expected = w * h * if wide { 2 } else { 1 };
    if bytes.len() < pos + expected {
        return Err(bad("truncated pixel data"));
    }
    let mut data = Vec::with_capacity(w * h);
    if wide {
        for i in 0..w * h {
            let s = pos + 2 * i;
            let q = u16::from_be_bytes([bytes[s], bytes[s + 1]]);
            data.push(q as f64 / maxval as f64);
        }
    } else {
        for i in 0..w * h {
            data.push(bytes[pos + i] as f64 / maxval as f64);
        }
    }
    Ok(Tensor::new(&[1, 1, h, w], data)?)
}
