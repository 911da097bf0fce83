//! Synthetic image datasets and the raw image container.
//!
//! Raw container layout, little-endian:
//!
//! ```text
//! "IDFR" | version u16 | width u32 | height u32 | channels u32 | bits u8
//!        | image count u32 | samples | checksum [8]
//! ```
//!
//! Samples are row-major `(image, row, column, channel)`, one byte each up
//! to 8 bits and two bytes otherwise.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{checksum8, verify_checksum, ByteReader};
use crate::error::{Error, Result};
use crate::grid::GridTensor;

pub const RAW_MAGIC: &[u8; 4] = b"IDFR";
pub const RAW_VERSION: u16 = 1;
pub const RAW_EXTENSION: &str = "idfr";

/// Identifier of the 8x8 RGB 8-bit synthetic dataset.
pub const SYNTH8X8: &str = "synth8x8";

/// Seeded synthetic images: a smooth luminance gradient, an optional
/// sinusoidal texture, per-channel colour shifts and quantized Gaussian
/// noise, clamped to the code range.
pub fn synthetic_images(
    height: usize,
    width: usize,
    channels: usize,
    bits: u32,
    n: usize,
    seed: u64,
) -> Result<GridTensor> {
    if !(1..=16).contains(&bits) || height == 0 || width == 0 || channels == 0 {
        return Err(Error::Parameter(format!(
            "cannot synthesise {height}x{width}x{channels} images at {bits} bits"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = ((1u64 << bits) - 1) as f64;
    let mut codes = Vec::with_capacity(n * height * width * channels);
    let unit = |i: usize, n: usize| {
        if n > 1 {
            i as f64 / (n - 1) as f64 - 0.5
        } else {
            0.0
        }
    };
    for _ in 0..n {
        let base = rng.gen_range(0.2..0.8);
        let (gx, gy) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let texture = rng.gen_bool(0.5);
        let amp = if texture {
            rng.gen_range(0.0..0.15)
        } else {
            0.0
        };
        let (fx, fy) = (rng.gen_range(0..4) as f64, rng.gen_range(0..4) as f64);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let shift: Vec<f64> = (0..channels).map(|_| rng.gen_range(-0.15..0.15)).collect();
        let scale: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.8..1.2)).collect();
        let noise =
            Normal::new(0.0, rng.gen_range(0.5..3.0) * max / 255.0).expect("positive deviation");
        for y in 0..height {
            for x in 0..width {
                let arg = std::f64::consts::TAU
                    * (fx * x as f64 / width as f64 + fy * y as f64 / height as f64)
                    + phase;
                let lum = base + gx * unit(x, width) + gy * unit(y, height) + amp * arg.sin();
                for c in 0..channels {
                    let v = (lum * scale[c] + shift[c]) * max + noise.sample(&mut rng);
                    codes.push(v.round().clamp(0.0, max) as i64);
                }
            }
        }
    }
    GridTensor::new([n, height, width, channels], codes, bits)
}

/// `n` images of the synth8x8 dataset.
pub fn synth8x8(n: usize, seed: u64) -> Result<GridTensor> {
    synthetic_images(8, 8, 3, 8, n, seed)
}

pub fn raw_to_bytes(x: &GridTensor) -> Result<Vec<u8>> {
    let [n, h, w, c] = x.shape();
    let bits = x.bits();
    let wide = bits > 8;
    let mut out = Vec::with_capacity(23 + x.len() * if wide { 2 } else { 1 } + 8);
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    for d in [w, h, c, n] {
        if d > u32::MAX as usize {
            return Err(Error::Format(format!("dimension {d} too large")));
        }
    }
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.push(u8::try_from(bits).map_err(|_| Error::Format("bit depth too large".into()))?);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    if bits > 16 {
        return Err(Error::Format(format!(
            "raw images hold at most 16 bits, got {bits}"
        )));
    }
    for &v in x.codes() {
        if wide {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        } else {
            out.push(v as u8);
        }
    }
    let sum = checksum8(&out);
    out.extend_from_slice(&sum);
    Ok(out)
}

pub fn raw_from_bytes(bytes: &[u8]) -> Result<GridTensor> {
    if bytes.len() < 4 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Format("not a raw image file".into()));
    }
    let body = verify_checksum(bytes, "raw image")?;
    let mut r = ByteReader::new(&body[4..], "raw image");
    let version = r.u16()?;
    if version != RAW_VERSION {
        return Err(Error::Format(format!(
            "unsupported raw image version {version}"
        )));
    }
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let c = r.u32()? as usize;
    let bits = r.u8()? as u32;
    let n = r.u32()? as usize;
    if !(1..=16).contains(&bits) {
        return Err(Error::Format(format!("raw image bit depth {bits}")));
    }
    let count = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Format("raw image dimensions overflow".into()))?;
    let width = if bits > 8 { 2 } else { 1 };
    let samples = r.take(
        count
            .checked_mul(width)
            .ok_or_else(|| Error::Format("raw image too large".into()))?,
    )?;
    r.finish()?;
    let codes = if width == 2 {
        samples
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as i64)
            .collect()
    } else {
        samples.iter().map(|&b| b as i64).collect()
    };
    GridTensor::new([n, h, w, c], codes, bits).map_err(|e| Error::Format(format!("raw image: {e}")))
}

pub fn write_raw(path: &Path, x: &GridTensor) -> Result<()> {
    std::fs::write(path, raw_to_bytes(x)?)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<GridTensor> {
    raw_from_bytes(&std::fs::read(path)?)
}

/// Stacks every `.idfr` file in `dir`, in file-name order.
pub fn read_raw_dir(dir: &Path) -> Result<GridTensor> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == RAW_EXTENSION));
    files.sort();
    if files.is_empty() {
        return Err(Error::Format(format!(
            "no .{RAW_EXTENSION} files in {}",
            dir.display()
        )));
    }
    let parts = files
        .iter()
        .map(|p| read_raw(p))
        .collect::<Result<Vec<_>>>()?;
    GridTensor::stack(&parts)
}
