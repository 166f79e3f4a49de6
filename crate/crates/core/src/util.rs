//! Image I/O, resampling, and hashing helpers shared across the pipeline.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Convert an (H, W, 3) u8 array to an `RgbImage`.
pub fn array_to_rgb(frame: ArrayView3<u8>) -> RgbImage {
    let (h, w, _) = frame.dim();
    let mut img = ImageBuffer::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                Rgb([frame[[y, x, 0]], frame[[y, x, 1]], frame[[y, x, 2]]]),
            );
        }
    }
    img
}

/// Convert an `RgbImage` to an (H, W, 3) u8 array.
pub fn rgb_to_array(img: &RgbImage) -> Array3<u8> {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c];
        }
    }
    out
}

/// Write an (H, W, 3) frame as a PNG file.
pub fn save_frame_png(frame: ArrayView3<u8>, path: &Path) -> Result<()> {
    array_to_rgb(frame)
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Load an (H, W, 3) frame from a PNG file.
pub fn load_frame_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .to_rgb8();
    Ok(rgb_to_array(&img))
}

/// Write a boolean mask as a binary PBM (P4) file, one bit per pixel.
pub fn save_mask_pbm(mask: ArrayView2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let mut bytes = format!("P4\n{w} {h}\n").into_bytes();
    for y in 0..h {
        let mut byte = 0u8;
        for x in 0..w {
            if mask[[y, x]] {
                byte |= 0x80 >> (x % 8);
            }
            if x % 8 == 7 {
                bytes.push(byte);
                byte = 0;
            }
        }
        if w % 8 != 0 {
            bytes.push(byte);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load a boolean mask from a binary PBM (P4) file.
pub fn load_mask_pbm(path: &Path) -> Result<Array2<bool>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_err = || Error::manifest(path, "invalid PBM header");
    // Header: "P4\n{w} {h}\n", then packed rows.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 3 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(&bytes[start..pos]);
    }
    if fields.len() < 3 || fields[0] != b"P4" {
        return Err(header_err());
    }
    let w: usize = std::str::from_utf8(fields[1])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(header_err)?;
    let h: usize = std::str::from_utf8(fields[2])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(header_err)?;
    pos += 1; // single whitespace after the height
    let row_bytes = w.div_ceil(8);
    if bytes.len() < pos + row_bytes * h {
        return Err(Error::manifest(path, "truncated PBM payload"));
    }
    let mut mask = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let b = bytes[pos + y * row_bytes + x / 8];
            mask[[y, x]] = b & (0x80 >> (x % 8)) != 0;
        }
    }
    Ok(mask)
}

/// Nearest-neighbor resize of an RGB frame to (out_h, out_w).
pub fn resize_rgb_nearest(frame: ArrayView3<u8>, out_h: usize, out_w: usize) -> Array3<u8> {
    let (h, w, _) = frame.dim();
    let mut out = Array3::zeros((out_h, out_w, 3));
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            let sx = x * w / out_w;
            for c in 0..3 {
                out[[y, x, c]] = frame[[sy, sx, c]];
            }
        }
    }
    out
}

/// Nearest-neighbor resize of a boolean mask to (out_h, out_w).
pub fn resize_mask_nearest(mask: ArrayView2<bool>, out_h: usize, out_w: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((out_h, out_w), false);
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            out[[y, x]] = mask[[sy, x * w / out_w]];
        }
    }
    out
}

/// FNV-1a 64-bit hash; used for stable seed derivation, not for content identity.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derive a child seed from a base seed and a list of labels.
///
/// Stable across platforms and runs; label order matters.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for label in labels {
        h = h
            .rotate_left(17)
            .wrapping_mul(0x0000_0100_0000_01b3)
            .wrapping_add(fnv1a64(label.as_bytes()));
    }
    h
}

/// SHA-256 of a byte slice as a lowercase hex string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// SHA-256 of a file's contents as a lowercase hex string.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
