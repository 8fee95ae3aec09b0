//! Offset-field files: one line of JSON header, then `dx` and `dy` as
//! row-major little-endian `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use zoomwarp::{GridDims, OffsetField, ScalarField};

use crate::error::{io_err, CliError, Result};

pub const MAGIC: &str = "zoomwarp-offsets";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetHeader {
    pub format: String,
    pub version: u32,
    pub height: usize,
    pub width: usize,
    /// Output resolution divided by offset resolution.
    pub scale: f64,
    pub dtype: String,
    pub endianness: String,
    pub layout: String,
    pub channels: Vec<String>,
}

impl OffsetHeader {
    pub fn new(dims: GridDims, scale: f64) -> Self {
        Self {
            format: MAGIC.into(),
            version: 1,
            height: dims.height(),
            width: dims.width(),
            scale,
            dtype: "f32".into(),
            endianness: "little".into(),
            layout: "row-major".into(),
            channels: vec!["dx".into(), "dy".into()],
        }
    }
}

pub fn encode_offset_field(field: &OffsetField, scale: f64) -> Vec<u8> {
    let header = serde_json::to_string(&OffsetHeader::new(field.dims(), scale)).expect("header serializes");
    let mut out = Vec::with_capacity(header.len() + 1 + 8 * field.dims().len());
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for v in field.dx().as_slice().iter().chain(field.dy().as_slice()) {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_offset_field(bytes: &[u8], path: &Path) -> Result<(OffsetHeader, OffsetField)> {
    let bad = |reason: String| CliError::OffsetFormat {
        path: path.to_path_buf(),
        reason,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: OffsetHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != MAGIC || header.dtype != "f32" || header.endianness != "little" {
        return Err(bad(format!("unsupported header {header:?}")));
    }
    let dims = GridDims::new(header.height, header.width)?;
    let payload = &bytes[nl + 1..];
    if payload.len() != 8 * dims.len() {
        return Err(bad(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            8 * dims.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let (dx, dy) = values.split_at(dims.len());
    let field = OffsetField::new(
        ScalarField::from_vec(dims, dx.to_vec())?,
        ScalarField::from_vec(dims, dy.to_vec())?,
    )?;
    Ok((header, field))
}

pub fn write_offset_field(path: &Path, field: &OffsetField, scale: f64) -> Result<()> {
    fs::write(path, encode_offset_field(field, scale)).map_err(io_err(path))
}

pub fn read_offset_field(path: &Path) -> Result<(OffsetHeader, OffsetField)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_offset_field(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_exact_layout() {
        let dims = GridDims::new(2, 3).unwrap();
        let dx = ScalarField::from_vec(dims, vec![0.0, 0.5, -1.0, 0.25, 2.0, 1.5]).unwrap();
        let dy = ScalarField::filled(dims, -0.125);
        let field = OffsetField::new(dx, dy).unwrap();
        let bytes = encode_offset_field(&field, 8.0);
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let payload = &bytes[nl + 1..];
        assert_eq!(payload.len(), 48);
        assert_eq!(&payload[4..8], &0.5f32.to_le_bytes());
        assert_eq!(&payload[8..12], &[0x00, 0x00, 0x80, 0xbf]);
        assert_eq!(&payload[24..28], &(-0.125f32).to_le_bytes());
        let (header, back) = decode_offset_field(&bytes, Path::new("mem")).unwrap();
        assert_eq!(header.scale, 8.0);
        assert_eq!(back, field);
    }

    #[test]
    fn rejects_truncated_payload() {
        let field = OffsetField::zeros(GridDims::new(3, 3).unwrap());
        let mut bytes = encode_offset_field(&field, 1.0);
        bytes.pop();
        assert!(decode_offset_field(&bytes, Path::new("mem")).is_err());
        assert!(decode_offset_field(b"no header", Path::new("mem")).is_err());
    }
}
