//! IDX files (the MNIST distribution format).
//!
//! ```text
//! byte 0-1   zero
//! byte 2     element type, only 0x08 (unsigned byte) is accepted
//! byte 3     number of dimensions d
//! 4..4+4d    big-endian u32 sizes
//! then       raw elements, row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::Dataset;

/// Parsed header and payload of an unsigned-byte IDX file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len(), "file shorter than the 4-byte magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(0, "magic must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(Error::format(2, format!("element type 0x{:02X} is not unsigned byte (0x08)", bytes[2])));
    }
    let nd = bytes[3] as usize;
    if nd == 0 {
        return Err(Error::format(3, "zero dimensions"));
    }
    let header = 4 + 4 * nd;
    if bytes.len() < header {
        return Err(Error::format(bytes.len(), "file truncated inside dimension sizes"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(4, "dimension sizes overflow"))?;
    let payload = &bytes[header..];
    if payload.len() < count {
        return Err(Error::format(
            bytes.len(),
            format!("payload truncated: {count} elements declared, {} present", payload.len()),
        ));
    }
    if payload.len() > count {
        return Err(Error::format(
            header + count,
            format!("{} trailing bytes after {count} declared elements", payload.len() - count),
        ));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

pub fn idx_to_bytes(array: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, array.dims.len() as u8];
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

/// `N×H×W` images scaled to `[0, 1]` and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl IdxDataset {
    /// Flattened single-channel training view.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let n = self.labels.len();
        Dataset::new(
            self.images.reshape(vec![n, self.height * self.width])?,
            self.labels.clone(),
            [1, self.height, self.width],
        )
    }
}

pub fn idx_dataset_from_bytes(images: &[u8], labels: &[u8]) -> Result<IdxDataset> {
    let img = parse_idx(images)?;
    let lab = parse_idx(labels)?;
    let [n, h, w] = img.dims[..] else {
        return Err(Error::format(3, format!("image file has {} dimensions, expected 3", img.dims.len())));
    };
    if lab.dims.len() != 1 {
        return Err(Error::format(3, format!("label file has {} dimensions, expected 1", lab.dims.len())));
    }
    if lab.dims[0] != n {
        return Err(Error::format(4, format!("label count {} does not match image count {n}", lab.dims[0])));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(4, "empty image file"));
    }
    let pixels = img.data.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(IdxDataset {
        images: Tensor::new(vec![n, h, w], pixels)?,
        labels: lab.data.iter().map(|&b| b as usize).collect(),
        height: h,
        width: w,
    })
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<IdxDataset> {
    idx_dataset_from_bytes(&std::fs::read(images_path)?, &std::fs::read(labels_path)?)
}
