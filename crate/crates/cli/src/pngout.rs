//! Write-only grayscale PNG for gallery outputs.

use crate::error::{CliError, Result};
use crate::fsutil;
use sdf_core::Tensor;
use std::path::Path;

pub fn write_png_gray(path: &Path, img: &Tensor, sixteen_bit: bool) -> Result<()> {
    let (b, c, h, w) = img.dims4()?;
    if b != 1 || c != 1 {
        return Err(CliError::format(path, format!("PNG wants [1,1,H,W], got {:?}", img.shape())));
    }
    let mut raw: Vec<u8> = Vec::with_capacity(img.numel() * 2);
    for &v in img.data() {
        if sixteen_bit {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            raw.extend_from_slice(&q.to_be_bytes());
        } else {
            raw.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(if sixteen_bit { png::BitDepth::Sixteen } else { png::BitDepth::Eight });
        let mut writer = enc
            .write_header()
            .map_err(|e| CliError::format(path, format!("png header: {e}")))?;
        writer
            .write_image_data(&raw)
            .map_err(|e| CliError::format(path, format!("png data: {e}")))?;
    }
    fsutil::write_atomic(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_deterministic_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 / 15.0);
        write_png_gray(&path, &img, false).unwrap();
        let a = std::fs::read(&path).unwrap();
        assert_eq!(&a[1..4], b"PNG");
        write_png_gray(&path, &img, false).unwrap();
        assert_eq!(a, std::fs::read(&path).unwrap());
    }
}
