//! HSC1 binary files: `HSC1`, u32 height, u32 width, u32 channels, the
//! channel wavelengths as f32, then the planar f32 payload. Little-endian.
//!
//! RGB images use the same layout with three channels whose wavelengths are
//! the camera channel centers in plane order (600, 550, 450).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hsi::{RgbImage, SpectralCube, Wavelengths};

pub const MAGIC: &[u8; 4] = b"HSC1";
pub const RGB_WAVELENGTHS: [f64; 3] = [600.0, 550.0, 450.0];
const HEADER: usize = 16;

fn encode(height: usize, width: usize, wavelengths: &[f64], data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * (wavelengths.len() + data.len()));
    out.extend_from_slice(MAGIC);
    for v in [height, width, wavelengths.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in wavelengths.iter().chain(data) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Decoded file contents before any domain validation.
struct Raw {
    height: usize,
    width: usize,
    wavelengths: Vec<f64>,
    data: Vec<f64>,
}

fn decode(bytes: &[u8], path: &Path) -> Result<Raw> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let seen = &bytes[..bytes.len().min(4)];
        return Err(Error::format(
            path,
            format!(
                "bad magic {:?} ({seen:02x?}), expected \"HSC1\"",
                String::from_utf8_lossy(seen)
            ),
        ));
    }
    if bytes.len() < HEADER {
        return Err(Error::format(path, format!("truncated header: {} bytes", bytes.len())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (height, width, channels) = (word(0), word(1), word(2));
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::format(
            path,
            format!("empty dimensions {height}x{width}x{channels}"),
        ));
    }
    let values = height
        .checked_mul(width)
        .and_then(|p| p.checked_mul(channels))
        .and_then(|n| n.checked_add(channels))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    let expected = values
        .checked_mul(4)
        .and_then(|n| n.checked_add(HEADER))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} bytes for {height}x{width}x{channels}, found {}",
                bytes.len()
            ),
        ));
    }
    let floats: Vec<f64> = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if floats.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite value in payload"));
    }
    let data = floats[channels..].to_vec();
    Ok(Raw {
        height,
        width,
        wavelengths: floats[..channels].to_vec(),
        data,
    })
}

fn read_raw(path: &Path) -> Result<Raw> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Serialized bytes of a cube. Values are stored as f32.
pub fn encode_cube(cube: &SpectralCube) -> Vec<u8> {
    encode(cube.height(), cube.width(), cube.wavelengths().as_slice(), cube.data())
}

pub fn decode_cube(bytes: &[u8], path: &Path) -> Result<SpectralCube> {
    let raw = decode(bytes, path)?;
    let wl = Wavelengths::new(raw.wavelengths).map_err(|e| Error::format(path, e.to_string()))?;
    SpectralCube::from_reflectance(raw.height, raw.width, wl, raw.data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_cube(path: &Path, cube: &SpectralCube) -> Result<()> {
    fs::write(path, encode_cube(cube)).map_err(|e| Error::io(path, e))
}

/// Reads a cube, clamping values into `[0, 1]`.
pub fn read_cube(path: &Path) -> Result<SpectralCube> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cube(&bytes, path)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let bytes = encode(img.height(), img.width(), &RGB_WAVELENGTHS, img.data());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let raw = read_raw(path)?;
    if raw.wavelengths.len() != RgbImage::CHANNELS {
        return Err(Error::format(
            path,
            format!("expected 3 channels, found {}", raw.wavelengths.len()),
        ));
    }
    RgbImage::from_clamped(raw.height, raw.width, raw.data).map_err(|e| Error::format(path, e.to_string()))
}
