//! The conventional `.flo` optical-flow layout: the four bytes `PIEH`,
//! little-endian `i32` width and height, then row-major interleaved `f32`
//! `(dx, dy)` pairs.

use std::path::Path;

use super::FlowField;
use crate::error::{Error, Result};

pub const FLO_MAGIC: &[u8; 4] = b"PIEH";

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.dx().len());
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for (dx, dy) in flow.dx().iter().zip(flow.dy()) {
        out.extend_from_slice(&(*dx as f32).to_le_bytes());
        out.extend_from_slice(&(*dy as f32).to_le_bytes());
    }
    out
}

/// Decodes `.flo` bytes; `origin` is used only for error messages.
pub fn decode_flo(bytes: &[u8], origin: &Path) -> Result<FlowField> {
    if bytes.len() < 12 || &bytes[..4] != FLO_MAGIC {
        return Err(Error::format(origin, "missing PIEH header"));
    }
    let word = |i: usize| i32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (width, height) = (word(4), word(8));
    if width <= 0 || height <= 0 {
        return Err(Error::format(
            origin,
            format!("bad dimensions {width}x{height}"),
        ));
    }
    let (width, height) = (width as usize, height as usize);
    let n = width * height;
    if bytes.len() != 12 + 8 * n {
        return Err(Error::format(
            origin,
            format!(
                "expected {} bytes of flow data, found {}",
                8 * n,
                bytes.len() - 12
            ),
        ));
    }
    let mut dx = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    for pair in bytes[12..].chunks_exact(8) {
        dx.push(f32::from_le_bytes(pair[..4].try_into().unwrap()) as f64);
        dy.push(f32::from_le_bytes(pair[4..].try_into().unwrap()) as f64);
    }
    FlowField::new(height, width, dx, dy).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    crate::io::write_atomic(path, &encode_flo(flow))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_flo(&bytes, path)
}
