//! Binary checkpoint: magic, version, JSON header, then raw little-endian f64s.
//!
//! ```text
//! b"PLE1" | u32 version | u64 header_len | header (JSON) | data
//! ```
//!
//! The header records the config, architecture and, for every segment, its
//! name, shape, element offset into the data section and block label.

use super::params::{Architecture, Block, ModelParams};
use super::PleConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamVector, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"PLE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: PleConfig,
    architecture: Architecture,
    segments: Vec<SegmentEntry>,
}

#[derive(Serialize, Deserialize)]
struct SegmentEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    block: String,
}

pub fn checkpoint_to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut segments = Vec::new();
    let mut offset = 0;
    for (i, (name, t)) in params.values().iter().enumerate() {
        segments.push(SegmentEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            block: params.block_of(i).label().to_string(),
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header {
        config: params.config().clone(),
        architecture: params.architecture(),
        segments,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.values().tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("checkpoint truncated in {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut rest = bytes;
    if take(&mut rest, 4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(take(&mut rest, 8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::Format("header too large".into()))?;
    let header: Header = serde_json::from_slice(take(&mut rest, header_len, "header")?)?;
    if !rest.len().is_multiple_of(8) {
        return Err(Error::Format("data section is not a whole number of f64 values".into()));
    }
    let data: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut values = ParamVector::new();
    let mut expected_offset = 0;
    for seg in &header.segments {
        let n: usize = seg.shape.iter().product();
        if seg.offset != expected_offset || seg.offset + n > data.len() {
            return Err(Error::Format(format!("segment `{}` has an inconsistent offset", seg.name)));
        }
        Block::from_label(&seg.block)?;
        values.push(
            seg.name.clone(),
            Tensor::new(seg.shape.clone(), data[seg.offset..seg.offset + n].to_vec())?,
        )?;
        expected_offset += n;
    }
    if expected_offset != data.len() {
        return Err(Error::Format(format!(
            "data section holds {} values, segments cover {}",
            data.len(),
            expected_offset
        )));
    }
    let params = ModelParams::from_values(&header.config, header.architecture, values)?;
    for (i, seg) in header.segments.iter().enumerate() {
        if params.block_of(i).label() != seg.block {
            return Err(Error::Format(format!("segment `{}` has the wrong block label", seg.name)));
        }
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelParams {
        let dense = ModelParams::init_dense(&PleConfig::tiny(15), 9).unwrap();
        ModelParams::clone_from_dense(&dense).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = model();
        m.values_mut().segment_mut(0).data_mut()[0] = 0.1 + 0.2;
        m.values_mut().segment_mut(1).data_mut()[0] = -0.0;
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&m).unwrap()).unwrap();
        for (a, b) in m.values().tensors().iter().zip(back.values().tensors()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(back.config(), m.config());
        assert_eq!(back.architecture(), Architecture::PathLocked);
    }

    #[test]
    fn header_layout() {
        let bytes = checkpoint_to_bytes(&model()).unwrap();
        assert_eq!(&bytes[..4], b"PLE1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + n]).unwrap();
        let labels: Vec<&str> = header["segments"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s["block"].as_str().unwrap())
            .collect();
        assert!(labels.contains(&"alpha") && labels.contains(&"beta0") && labels.contains(&"beta1"));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = checkpoint_to_bytes(&model()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(checkpoint_from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(checkpoint_from_bytes(&bad).is_err());
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(checkpoint_from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ple");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), m);
    }
}
