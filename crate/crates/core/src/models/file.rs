//! Model file layout (all integers little-endian):
//!
//! ```text
//! offset 0   b"ADVG"
//!        4   u32 format version
//!        8   u32 descriptor length L
//!       12   L bytes of UTF-8 architecture descriptor
//!   12 + L   f64 parameters in layer order, exactly param_count of them
//! ```

use std::fs;
use std::path::Path;

use super::{Architecture, Model};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADVG";
pub const FORMAT_VERSION: u32 = 1;

pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let descriptor = model.architecture().to_string();
    let mut out = Vec::with_capacity(12 + descriptor.len() + 8 * model.arch.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(descriptor.as_bytes());
    for p in model.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(offset, "file truncated inside header"))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "missing ADVG magic"));
    }
    let version = read_u32(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    let len = read_u32(bytes, 8)? as usize;
    let desc_bytes = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::format(12, "file truncated inside architecture descriptor"))?;
    let descriptor = std::str::from_utf8(desc_bytes)
        .map_err(|e| Error::format(12 + e.valid_up_to(), "descriptor is not UTF-8"))?;
    let arch: Architecture = descriptor
        .parse()
        .map_err(|e| Error::format(12, format!("bad architecture descriptor: {e}")))?;

    let payload_at = 12 + len;
    let payload = &bytes[payload_at..];
    let expected = 8 * arch.param_count();
    if payload.len() != expected {
        return Err(Error::format(
            payload_at,
            format!(
                "parameter payload is {} bytes, architecture {arch} needs {expected}",
                payload.len()
            ),
        ));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let params = arch
        .param_shapes()
        .into_iter()
        .map(|shape| {
            let n = shape.iter().product();
            Tensor::from_parts(shape, values.by_ref().take(n).collect())
        })
        .collect();
    Model::from_params(arch, params)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    model_from_bytes(&fs::read(path)?)
}
