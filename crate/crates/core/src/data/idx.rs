//! IDX files: big-endian magic `00 00 <dtype> <ndims>`, big-endian `u32`
//! dimension sizes, then raw bytes. Only unsigned-byte payloads (dtype
//! `0x08`) are supported.

use std::path::Path;

use super::{DataError, Dataset, Result, SplitTag};
use crate::tensor::Tensor;

const UBYTE: u8 = 0x08;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn err(offset: usize, message: impl Into<String>) -> DataError {
    DataError::Idx {
        offset,
        message: message.into(),
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "file shorter than the 4-byte magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != UBYTE {
        return Err(err(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(err(3, "zero dimensions"));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(err(bytes.len(), format!("truncated header, need {header} bytes")));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| err(4, "dimension product overflows"))?;
    let end = header
        .checked_add(count)
        .ok_or_else(|| err(4, "dimension product overflows"))?;
    if bytes.len() < end {
        return Err(err(
            bytes.len(),
            format!("truncated payload, expected {count} bytes after offset {header}"),
        ));
    }
    if bytes.len() > end {
        return Err(err(end, "trailing bytes after payload"));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..end].to_vec(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Images file (`[N, H, W]` or `[N, C, H, W]`) as a `[N, C, H, W]` tensor
/// scaled to `[0, 1]`.
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    let arr = parse_idx(&read(path)?)?;
    let shape = match arr.dims.as_slice() {
        [n, h, w] => vec![*n, 1, *h, *w],
        [n, c, h, w] => vec![*n, *c, *h, *w],
        other => return Err(err(3, format!("expected 3 or 4 image dimensions, got {}", other.len()))),
    };
    let data = arr.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(shape, data).map_err(|e| err(4, e.to_string()))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let arr = parse_idx(&read(path)?)?;
    if arr.dims.len() != 1 {
        return Err(err(3, format!("labels must be 1-D, got {} dimensions", arr.dims.len())));
    }
    Ok(arr.data.iter().map(|&b| b as usize).collect())
}

/// Load an images/labels IDX pair. `classes` defaults to `max(label) + 1`.
/// Example ids are `id_offset + index`.
pub fn load_idx(
    images: &Path,
    labels: &Path,
    name: &str,
    split: SplitTag,
    classes: Option<usize>,
    id_offset: u64,
) -> Result<Dataset> {
    let x = load_idx_images(images)?;
    let y = load_idx_labels(labels)?;
    let classes = classes.unwrap_or_else(|| y.iter().max().map_or(1, |m| m + 1));
    let ids = (0..y.len() as u64).map(|i| id_offset + i).collect();
    Dataset::new(name, split, x, y, ids, classes)
}

/// Serialize unsigned bytes with the given dimensions as IDX.
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}
