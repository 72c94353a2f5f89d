//! Binary 8-bit grayscale PGM (`P5`) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes raw 8-bit pixels with a `P5` header and maxval 255.
pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::contract(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_bytes(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode(width, height, pixels)?).map_err(|e| Error::io(path, e))
}

/// Quantizes a `[1, h, w]` (or `[h, w]`) tensor with values in `[0, 1]`.
pub fn tensor_pixels(image: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = match image.shape() {
        &[1, h, w] | &[h, w] => (h, w),
        other => return Err(Error::contract(format!("expected a single-channel image, got {other:?}"))),
    };
    let pixels = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok((w, h, pixels))
}

pub fn write(image: &Tensor, path: &Path) -> Result<()> {
    let (w, h, pixels) = tensor_pixels(image)?;
    write_bytes(path, w, h, &pixels)
}

/// Decodes a `P5` file into a `[1, h, w]` tensor with values in `[0, 1]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    if bytes.get(..2) != Some(b"P5") {
        return Err(Error::format(0, "not a binary grayscale PGM (expected P5)"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start as u64, "malformed PGM header"))?;
    }
    let [width, height, maxval] = fields;
    if !(1..=255).contains(&maxval) {
        return Err(Error::format(pos as u64, format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(pos as u64, "missing whitespace after PGM header"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    if payload.len() != width * height {
        return Err(Error::format(
            pos as u64,
            format!("payload has {} bytes, expected {}", payload.len(), width * height),
        ));
    }
    let scale = maxval as f64;
    Tensor::new(
        vec![1, height, width],
        payload.iter().map(|&b| (b as f64 / scale).min(1.0)).collect(),
    )
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let values: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let img = Tensor::new(vec![1, 3, 4], values).unwrap();
        let (w, h, px) = tensor_pixels(&img).unwrap();
        let back = decode(&encode(w, h, &px).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn single_pixel_payload() {
        let bytes = encode(1, 1, &[0]).unwrap();
        assert_eq!(bytes, b"P5\n1 1\n255\n\0");
        assert_eq!(decode(&bytes).unwrap().data(), [0.0]);
    }

    #[test]
    fn rejects_colour_and_truncation() {
        assert!(matches!(decode(b"P6\n1 1\n255\n\0\0\0"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode(b"P5\n2 2\n255\n\0\0\0"), Err(Error::Format { .. })));
        let commented = decode(b"P5 # made by hand\n1 1 255\n\x7f").unwrap();
        assert_eq!(commented.shape(), [1, 1, 1]);
    }
}
