//! 8-bit grayscale PGM (P5) decoding/encoding and bilinear resizing.
//!
//! P5 is the only accepted input format; anything else (including PNG) is
//! reported as unsupported. Decoded pixels are scaled by the file's maxval
//! into `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn img_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Raw 8-bit grayscale image.
#[derive(Debug)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

/// Parses a binary PGM (P5) file with `#` header comments.
pub fn decode_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(path.to_path_buf(), e))?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let hint = if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
            "PNG input is not supported"
        } else if bytes.starts_with(b"P2") {
            "ASCII PGM (P2) is not supported"
        } else {
            "not a binary PGM"
        };
        return Err(img_err(path, format!("unsupported format: {hint}; 8-bit P5 PGM required")));
    }

    let mut pos = 2usize;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(img_err(path, "corrupt header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| img_err(path, format!("bad header value `{text}`")))?;
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(img_err(path, "corrupt header"));
    }
    pos += 1;

    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if width == 0 || height == 0 {
        return Err(img_err(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(img_err(
            path,
            format!("maxval {maxval} unsupported (8-bit required)"),
        ));
    }
    let expect = width * height;
    if bytes.len() - pos < expect {
        return Err(img_err(
            path,
            format!("corrupt payload: expected {expect} bytes, found {}", bytes.len() - pos),
        ));
    }
    Ok(GrayImage {
        width,
        height,
        maxval: maxval as u16,
        pixels: bytes[pos..pos + expect].to_vec(),
    })
}

/// Writes a binary PGM (P5) with maxval 255.
pub fn encode_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| Error::Io(path.to_path_buf(), e))
}

/// Bilinear resize of a `[1, H, W]` tensor. Sample positions follow the
/// half-pixel-center convention `src = (dst + 0.5) * in/out - 0.5`, clamped
/// to the image; constants are preserved exactly up to rounding.
pub fn resize_bilinear<T: Scalar>(img: &Tensor<T>, target: usize) -> Tensor<T> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h == target && w == target {
        return img.clone();
    }
    let src = img.data();
    let mut out = vec![T::zero(); target * target];
    let sy = h as f64 / target as f64;
    let sx = w as f64 / target as f64;
    for r in 0..target {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = T::from_f64(fy - y0 as f64);
        for c in 0..target {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = T::from_f64(fx - x0 as f64);
            let one = T::one();
            let top = src[y0 * w + x0] * (one - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (one - wx) + src[y1 * w + x1] * wx;
            out[r * target + c] = top * (one - wy) + bot * wy;
        }
    }
    Tensor::new(&[1, target, target], out).unwrap()
}

/// Decodes a P5 PGM into a `[1, size, size]` tensor in `[0, 1]`.
pub fn decode_image<T: Scalar>(path: &Path, target_size: usize) -> Result<Tensor<T>> {
    let img = decode_pgm(path)?;
    let inv = 1.0 / img.maxval as f64;
    let data: Vec<T> = img
        .pixels
        .iter()
        .map(|&p| T::from_f64(p as f64 * inv))
        .collect();
    let t = Tensor::new(&[1, img.height, img.width], data)?;
    Ok(resize_bilinear(&t, target_size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn two_by_two_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        encode_pgm(&p, 2, 2, &[0, 255, 0, 255]).unwrap();
        let img: Tensor<f64> = decode_image(&p, 2).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn resize_preserves_constant_images() {
        let img = Tensor::<f64>::full(&[1, 7, 7], 0.625);
        let r = resize_bilinear(&img, 13);
        for &v in r.data() {
            assert!((v - 0.625).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_error_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.pgm");
        let mut rng = Rng::new(5);
        let orig: Vec<f64> = (0..64).map(|_| rng.next_f64()).collect();
        let pixels: Vec<u8> = orig.iter().map(|&v| (v * 255.0).round() as u8).collect();
        encode_pgm(&p, 8, 8, &pixels).unwrap();
        let back: Tensor<f64> = decode_image(&p, 8).unwrap();
        for (a, b) in orig.iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        std::fs::write(&p, b"P5\n# a comment\n2 1\n255\n\x10\x20").unwrap();
        let img = decode_pgm(&p).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixels, vec![0x10, 0x20]);
    }

    #[test]
    fn png_magic_is_rejected_distinctly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, [0x89, b'P', b'N', b'G', 0x0d, 0x0a]).unwrap();
        let err = decode_pgm(&p).unwrap_err().to_string();
        assert!(err.contains("PNG"), "{err}");
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        std::fs::write(&p, b"P5\n4 4\n255\n\x00\x01").unwrap();
        let err = decode_pgm(&p).unwrap_err().to_string();
        assert!(err.contains("corrupt payload"), "{err}");
    }

    #[test]
    fn non_255_maxval_scales() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        std::fs::write(&p, b"P5\n1 1\n100\n\x64").unwrap(); // 100/100 = 1.0
        let img: Tensor<f64> = decode_image(&p, 1).unwrap();
        assert_eq!(img.data(), &[1.0]);
    }
}
