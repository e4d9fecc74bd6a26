//! `CIMG1` binary container.
//!
//! Layout: the 5-byte magic `CIMG1`, a single-line JSON header terminated by
//! `\n`, then the payload planes in row-major order. `f32` payloads are
//! little-endian; complex slices store the real plane followed by the
//! imaginary plane. Masks use `"dtype":"u8"` with one plane of 0/1 bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ComplexImage, MaskMode, MaskParams, SamplingMask};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"CIMG1";

#[derive(Serialize, Deserialize)]
struct ComplexHeader {
    height: usize,
    width: usize,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct MaskHeader {
    height: usize,
    width: usize,
    dtype: String,
    acceleration: f64,
    center_fraction: f64,
    mode: MaskMode,
    seed: u64,
    sigma: f64,
}

/// Serialises a container to bytes.
pub fn encode<H: Serialize>(header: &H, planes: &[&[u8]]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let payload: usize = planes.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 1 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&json);
    out.push(b'\n');
    for p in planes {
        out.extend_from_slice(p);
    }
    Ok(out)
}

/// Splits container bytes into the parsed header and the raw payload.
pub fn decode<H: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<(H, Vec<u8>)> {
    let bad = |reason: &str| Error::Container {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("bad magic (expected CIMG1)"));
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header terminator"))?;
    let header = serde_json::from_slice(&rest[..nl]).map_err(|e| bad(&format!("invalid header: {e}")))?;
    Ok((header, rest[nl + 1..].to_vec()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn f32_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn encode_complex(img: &ComplexImage) -> Result<Vec<u8>> {
    let header = ComplexHeader {
        height: img.height(),
        width: img.width(),
        dtype: "f32".into(),
    };
    encode(&header, &[&f32_to_le(img.real()), &f32_to_le(img.imag())])
}

pub fn decode_complex(bytes: &[u8], path: &Path) -> Result<ComplexImage> {
    let (h, payload): (ComplexHeader, _) = decode(bytes, path)?;
    let bad = |reason: String| Error::Container {
        path: path.to_path_buf(),
        reason,
    };
    if h.dtype != "f32" {
        return Err(bad(format!("expected dtype f32, found {}", h.dtype)));
    }
    let n = h.height * h.width;
    if payload.len() != 8 * n {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            8 * n
        )));
    }
    let real = le_to_f32(&payload[..4 * n]);
    let imag = le_to_f32(&payload[4 * n..]);
    ComplexImage::new(h.height, h.width, real, imag).map_err(|e| bad(e.to_string()))
}

pub fn write_complex(path: &Path, img: &ComplexImage) -> Result<()> {
    write_bytes(path, &encode_complex(img)?)
}

pub fn read_complex(path: &Path) -> Result<ComplexImage> {
    decode_complex(&read_bytes(path)?, path)
}

pub fn encode_mask(mask: &SamplingMask) -> Result<Vec<u8>> {
    let p = mask.params();
    let header = MaskHeader {
        height: mask.height(),
        width: mask.width(),
        dtype: "u8".into(),
        acceleration: p.acceleration,
        center_fraction: p.center_fraction,
        mode: p.mode,
        seed: p.seed,
        sigma: p.sigma,
    };
    let plane: Vec<u8> = mask.sampled().iter().map(|&s| s as u8).collect();
    encode(&header, &[&plane])
}

pub fn write_mask(path: &Path, mask: &SamplingMask) -> Result<()> {
    write_bytes(path, &encode_mask(mask)?)
}

pub fn read_mask(path: &Path) -> Result<SamplingMask> {
    let bytes = read_bytes(path)?;
    let (h, payload): (MaskHeader, _) = decode(&bytes, path)?;
    let bad = |reason: String| Error::Container {
        path: path.to_path_buf(),
        reason,
    };
    if h.dtype != "u8" {
        return Err(bad(format!("expected dtype u8, found {}", h.dtype)));
    }
    if payload.len() != h.height * h.width || payload.iter().any(|&b| b > 1) {
        return Err(bad("mask plane must hold height*width bytes of 0/1".into()));
    }
    let params = MaskParams {
        acceleration: h.acceleration,
        center_fraction: h.center_fraction,
        sigma: h.sigma,
        mode: h.mode,
        seed: h.seed,
    };
    SamplingMask::from_parts(
        h.height,
        h.width,
        payload.iter().map(|&b| b == 1).collect(),
        params,
    )
}
