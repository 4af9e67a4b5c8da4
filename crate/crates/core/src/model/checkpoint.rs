//! Binary checkpoint: 16-byte fixed header, JSON header, little-endian blob.
//!
//! ```text
//! 0..4    magic "PRNE"
//! 4..8    format version (u32 LE)
//! 8..12   JSON header length in bytes (u32 LE)
//! 12..16  CRC-32 of the JSON header (u32 LE)
//! 16..    JSON header, then the tensor blob
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetConfig, ResidualNet, TensorKind};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::prune::PruneMasks;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PRNE";
pub const CHECKPOINT_VERSION: u32 = 1;
const FIXED: usize = 16;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    config: NetConfig,
    blob_len: usize,
    blob_crc32: u32,
    tensors: Vec<Entry>,
    masks: PruneMasks,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    offset: usize,
}

fn corrupt(offset: usize, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        offset,
        reason: reason.into(),
    }
}

pub fn encode<T: Real>(net: &ResidualNet<T>, masks: &PruneMasks) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for t in net.tensors() {
        tensors.push(Entry {
            name: t.name.clone(),
            kind: t.kind,
            shape: t.tensor.shape().to_vec(),
            offset: blob.len(),
        });
        for &v in t.tensor.data() {
            v.write_le(&mut blob);
        }
    }
    let header = Header {
        dtype: T::DTYPE.to_string(),
        config: net.config().clone(),
        blob_len: blob.len(),
        blob_crc32: crc32fast::hash(&blob),
        tensors,
        masks: masks.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(FIXED + json.len() + blob.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&json).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<(ResidualNet<T>, PruneMasks)> {
    if bytes.len() < FIXED {
        return Err(corrupt(bytes.len(), "truncated fixed header"));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(corrupt(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32_at(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(4, format!("unsupported version {version}")));
    }
    let header_len = u32_at(bytes, 8) as usize;
    let blob_start = FIXED
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt(8, format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let json = &bytes[FIXED..blob_start];
    let (stored, computed) = (u32_at(bytes, 12), crc32fast::hash(json));
    if stored != computed {
        return Err(corrupt(12, format!("header CRC {stored:08x} does not match {computed:08x}")));
    }
    let header: Header =
        serde_json::from_slice(json).map_err(|e| corrupt(FIXED, format!("unreadable header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(corrupt(FIXED, format!("dtype {} but {} requested", header.dtype, T::DTYPE)));
    }
    let blob = &bytes[blob_start..];
    if blob.len() != header.blob_len {
        return Err(corrupt(
            blob_start + blob.len().min(header.blob_len),
            format!("blob is {} bytes, header says {}", blob.len(), header.blob_len),
        ));
    }
    if crc32fast::hash(blob) != header.blob_crc32 {
        return Err(corrupt(blob_start, "tensor data CRC mismatch"));
    }

    let mut net = ResidualNet::<T>::build(&header.config, 0)
        .map_err(|e| corrupt(FIXED, format!("invalid config: {e}")))?;
    if header.tensors.len() != net.tensors().len() {
        return Err(corrupt(
            FIXED,
            format!("{} tensors stored, architecture has {}", header.tensors.len(), net.tensors().len()),
        ));
    }
    for (entry, slot) in header.tensors.iter().zip(net.tensors_mut()) {
        let at = blob_start + entry.offset;
        if entry.name != slot.name || entry.shape != slot.tensor.shape() || entry.kind != slot.kind {
            return Err(corrupt(at, format!("tensor {} does not match the architecture", entry.name)));
        }
        let n = slot.tensor.numel();
        let end = entry.offset + n * T::BYTES;
        if end > blob.len() {
            return Err(corrupt(at, format!("tensor {} runs past the end of the file", entry.name)));
        }
        let data = blob[entry.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        let requires_grad = slot.tensor.requires_grad;
        slot.tensor = Tensor::new(&entry.shape, data)?;
        slot.tensor.requires_grad = requires_grad;
        if !slot.tensor.is_finite() {
            return Err(corrupt(at, format!("tensor {} holds non-finite values", entry.name)));
        }
    }
    header
        .masks
        .check_against(&net)
        .map_err(|e| corrupt(FIXED, format!("masks: {e}")))?;
    Ok((net, header.masks))
}

pub fn save_checkpoint<T: Real>(path: &Path, net: &ResidualNet<T>, masks: &PruneMasks) -> Result<()> {
    write_atomic(path, &encode(net, masks)?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ResidualNet<T>, PruneMasks)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> ResidualNet<f32> {
        let cfg = NetConfig {
            stage_channels: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            input_size: 8,
            ..NetConfig::default()
        };
        ResidualNet::build(&cfg, 7).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let n = net();
        let mut masks = PruneMasks::all_active(&n);
        masks.layers.get_mut("layer1.0.conv1").unwrap()[2] = false;
        let bytes = encode(&n, &masks).unwrap();
        let (back, m2) = decode::<f32>(&bytes).unwrap();
        assert_eq!(back, n);
        assert_eq!(m2, masks);
        assert_eq!(encode(&back, &m2).unwrap(), bytes);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let n = net();
        save_checkpoint(&path, &n, &PruneMasks::all_active(&n)).unwrap();
        let (back, _) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back, n);
        let missing = load_checkpoint::<f32>(&dir.path().join("nope"));
        assert!(matches!(missing, Err(Error::MissingArtifact(_))));
    }

    fn offset_of(r: Result<(ResidualNet<f32>, PruneMasks)>) -> usize {
        match r {
            Err(Error::Checkpoint { offset, .. }) => offset,
            other => panic!("expected checkpoint error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn corruption_names_offset() {
        let n = net();
        let bytes = encode(&n, &PruneMasks::all_active(&n)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(offset_of(decode(&bad)), 0);
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(offset_of(decode(&bad)), 4);
        let mut bad = bytes.clone();
        bad[20] ^= 0x40;
        assert_eq!(offset_of(decode(&bad)), 12);
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 1;
        let header_len = u32_at(&bytes, 8) as usize;
        assert_eq!(offset_of(decode(&bad)), 16 + header_len);
        assert_eq!(offset_of(decode(&bytes[..10])), 10);
        assert_eq!(offset_of(decode(&bytes[..bytes.len() - 3])), bytes.len() - 3);
    }

    #[test]
    fn dtype_is_checked() {
        let n = net();
        let bytes = encode(&n, &PruneMasks::all_active(&n)).unwrap();
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Checkpoint { .. })));
    }
}
