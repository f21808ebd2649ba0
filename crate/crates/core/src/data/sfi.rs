//! `.sfi`: a preprocessed sample. `SFI1`, then `H`, `W`, `C` as little-endian
//! `u32`, then `H·W·C` little-endian `f32` values in `[0, 1]`.

use std::path::Path;

use super::DataError;
use crate::tensor::Tensor;

pub const SFI_MAGIC: &[u8; 4] = b"SFI1";

pub fn encode_sfi(img: &Tensor) -> Result<Vec<u8>, DataError> {
    let &[h, w, c] = img.shape() else {
        return Err(DataError::Sfi(format!("expected [H, W, C], got {:?}", img.shape())));
    };
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DataError::Sfi(format!("value {v} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(16 + img.numel() * 4);
    out.extend_from_slice(SFI_MAGIC);
    for d in [h, w, c] {
        let d = u32::try_from(d).map_err(|_| DataError::Sfi(format!("extent {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_sfi(bytes: &[u8]) -> Result<Tensor, DataError> {
    if bytes.len() < 16 || &bytes[..4] != SFI_MAGIC {
        return Err(DataError::Sfi("missing SFI1 header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    if bytes.len() - 16 != n * 4 {
        return Err(DataError::Sfi(format!(
            "{:?} needs {} payload bytes, found {}",
            shape,
            n * 4,
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| DataError::Sfi(e.to_string()))
}

pub fn write_sfi(path: &Path, img: &Tensor) -> Result<(), DataError> {
    let bytes = encode_sfi(img)?;
    std::fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn read_sfi(path: &Path) -> Result<Tensor, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_sfi(&bytes)
}
