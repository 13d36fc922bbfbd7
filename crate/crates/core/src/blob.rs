//! On-disk tensor formats.
//!
//! Latent blob: the 16-byte magic `SORTBLOCK-LATENT`, a little-endian `u64`
//! header length, a JSON header `{shape, dtype, seed, config_hash}` and the
//! raw little-endian `f32` payload.
//!
//! Trace tensors: a bare little-endian `f32` file next to a `.json` sidecar
//! `{shape, dtype, step, block}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const LATENT_MAGIC: &[u8; 16] = b"SORTBLOCK-LATENT";
pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentHeader {
    pub shape: [usize; 2],
    pub dtype: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlob {
    pub header: LatentHeader,
    pub latent: Matrix,
}

impl LatentBlob {
    pub fn new(latent: Matrix, seed: u64, config_hash: String) -> Self {
        Self {
            header: LatentHeader {
                shape: [latent.rows(), latent.cols()],
                dtype: DTYPE_F32LE.to_string(),
                seed,
                config_hash,
            },
            latent,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let payload = self.latent.to_le_bytes();
        let mut out = Vec::with_capacity(16 + 8 + header.len() + payload.len());
        out.extend_from_slice(LATENT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..16] != LATENT_MAGIC {
            return Err(Error::Format("not a latent blob (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let body = &bytes[24..];
        if body.len() < len {
            return Err(Error::Format("truncated latent header".into()));
        }
        let header: LatentHeader = serde_json::from_slice(&body[..len])
            .map_err(|e| Error::Format(format!("latent header: {e}")))?;
        if header.dtype != DTYPE_F32LE {
            return Err(Error::Format(format!(
                "unsupported dtype {:?}",
                header.dtype
            )));
        }
        let latent = Matrix::from_le_bytes(header.shape[0], header.shape[1], &body[len..])
            .map_err(|e| Error::Format(format!("latent payload: {e}")))?;
        Ok(Self { header, latent })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Hex SHA-256 of a canonical JSON value.
pub fn config_hash(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json value serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub shape: [usize; 2],
    pub dtype: String,
    pub step: usize,
    pub block: Option<usize>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

pub fn write_tensor_blob(path: &Path, t: &Matrix, step: usize, block: Option<usize>) -> Result<()> {
    fs::write(path, t.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    let side = TensorSidecar {
        shape: [t.rows(), t.cols()],
        dtype: DTYPE_F32LE.to_string(),
        step,
        block,
    };
    let side_path = sidecar_path(path);
    let json = serde_json::to_vec(&side).expect("sidecar serializes");
    fs::write(&side_path, json).map_err(|e| Error::io(&side_path, e))
}

pub fn read_tensor_blob(path: &Path) -> Result<(Matrix, TensorSidecar)> {
    let side_path = sidecar_path(path);
    let side_bytes = fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: TensorSidecar = serde_json::from_slice(&side_bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", side_path.display())))?;
    if side.dtype != DTYPE_F32LE {
        return Err(Error::Format(format!(
            "{}: unsupported dtype {:?}",
            side_path.display(),
            side.dtype
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = Matrix::from_le_bytes(side.shape[0], side.shape[1], &bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((t, side))
}
