//! The HCUBE container: a magic line, a one-line JSON header, and raw
//! little-endian samples in band-major, row-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cube::HyperCube;
use crate::error::{Error, Result};

pub const CUBE_MAGIC: &[u8] = b"HCUBE1\n";
pub const LAYOUT: &str = "band-major row-major";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub dtype: Dtype,
    pub layout: String,
    /// Payload length in bytes.
    pub byte_length: usize,
}

pub fn encode_cube(cube: &HyperCube, dtype: Dtype) -> Vec<u8> {
    let header = CubeHeader {
        width: cube.width(),
        height: cube.height(),
        bands: cube.bands(),
        dtype,
        layout: LAYOUT.to_string(),
        byte_length: cube.data().len() * dtype.size(),
    };
    let mut out = CUBE_MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    for &v in cube.data() {
        match dtype {
            Dtype::F32 => out.extend((v as f32).to_le_bytes()),
            Dtype::F64 => out.extend(v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_cube(bytes: &[u8]) -> Result<HyperCube> {
    let rest = bytes.strip_prefix(CUBE_MAGIC).ok_or(Error::BadMagic("HCUBE1"))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("header line is not terminated".into()))?;
    let header: CubeHeader =
        serde_json::from_slice(&rest[..nl]).map_err(|e| Error::Header(e.to_string()))?;
    if header.layout != LAYOUT {
        return Err(Error::Header(format!("unsupported layout '{}'", header.layout)));
    }
    let computed = header.width * header.height * header.bands * header.dtype.size();
    if header.byte_length != computed {
        return Err(Error::LengthMismatch {
            declared: header.byte_length,
            computed,
        });
    }
    let payload = &rest[nl + 1..];
    if payload.len() < computed {
        return Err(Error::TruncatedPayload {
            expected: computed,
            found: payload.len(),
        });
    }
    if payload.len() > computed {
        return Err(Error::TrailingData(payload.len() - computed));
    }
    let data = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    HyperCube::new(header.width, header.height, header.bands, data)
}

pub fn write_cube(path: impl AsRef<Path>, cube: &HyperCube, dtype: Dtype) -> Result<()> {
    super::write_atomic(path.as_ref(), &encode_cube(cube, dtype))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HyperCube> {
    decode_cube(&std::fs::read(path)?)
}
