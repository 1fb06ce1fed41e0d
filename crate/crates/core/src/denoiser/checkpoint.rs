//! Binary checkpoint: `"TSDM"`, u32 version, u64 header length, a JSON
//! header (config and tensor table), then little-endian f64 payload.

use serde::{Deserialize, Serialize};
use tsdm_tensor::Tensor;

use super::{Denoiser, DenoiserConfig, DenoiserParams, NormStats};
use crate::error::{Result, TsdmError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSDM";
pub const CHECKPOINT_VERSION: u32 = 1;

const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: DenoiserConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

fn fail(msg: impl Into<String>) -> TsdmError {
    TsdmError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(model: &Denoiser) -> Vec<u8> {
    let m = model.norm.channels();
    let norm = [
        (
            NORM_MEAN,
            Tensor::new([m], model.norm.mean.clone()).expect("norm length"),
        ),
        (
            NORM_STD,
            Tensor::new([m], model.norm.std.clone()).expect("norm length"),
        ),
    ];
    let all: Vec<(&str, &Tensor)> = norm
        .iter()
        .map(|(n, t)| (*n, t))
        .chain(model.params.iter())
        .collect();

    let mut offset = 0u64;
    let tensors = all
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.numel() as u64;
            entry
        })
        .collect();
    let header = Header {
        config: model.config.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::with_capacity(PREAMBLE + header.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &all {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses and fully validates a checkpoint. Never panics on malformed input.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Denoiser> {
    if bytes.len() < PREAMBLE {
        return Err(fail("truncated preamble"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[PREAMBLE..];
    let header_len = usize::try_from(header_len)
        .ok()
        .filter(|&l| l <= rest.len())
        .ok_or_else(|| fail("header length exceeds file"))?;
    let (header, payload) = rest.split_at(header_len);
    let header: Header =
        serde_json::from_slice(header).map_err(|e| fail(format!("header: {e}")))?;
    header.config.validate().map_err(|e| fail(e.to_string()))?;

    let mut expected_offset = 0usize;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| fail(format!("tensor {} is too large", entry.name)))?;
        let bytes_len = numel
            .checked_mul(8)
            .ok_or_else(|| fail(format!("tensor {} is too large", entry.name)))?;
        if usize::try_from(entry.offset).ok() != Some(expected_offset) {
            return Err(fail(format!("tensor {} is not contiguous", entry.name)));
        }
        let end = expected_offset
            .checked_add(bytes_len)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| fail(format!("tensor {} runs past the payload", entry.name)))?;
        let data = payload[expected_offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(entry.shape, data).map_err(|e| fail(e.to_string()))?;
        tensors.push((entry.name, t));
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(fail("trailing bytes after payload"));
    }

    let mut iter = tensors.into_iter();
    let m = header.config.channels_in;
    let mut norm_vec = |name: &str| -> Result<Vec<f64>> {
        match iter.next() {
            Some((n, t)) if n == name && t.shape() == [m] => Ok(t.into_data()),
            _ => Err(fail(format!("missing {name} of length {m}"))),
        }
    };
    let mean = norm_vec(NORM_MEAN)?;
    let std = norm_vec(NORM_STD)?;
    if mean.iter().any(|v| !v.is_finite()) || std.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(fail(
            "normalization statistics must be finite with positive spread",
        ));
    }
    let params = DenoiserParams::from_entries(&header.config, iter.collect())
        .map_err(|e| fail(e.to_string()))?;
    Ok(Denoiser {
        config: header.config,
        params,
        norm: NormStats { mean, std },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Denoiser {
        let cfg = DenoiserConfig {
            channels_in: 2,
            base_width: 4,
            depth: 1,
            time_embed_dim: 4,
            kernel: 3,
            groups: 2,
        };
        let mut model = Denoiser::init(cfg, 9).unwrap();
        model.norm = NormStats {
            mean: vec![0.1, -3.7e-12],
            std: vec![1.0 / 3.0, 2.5e7],
        };
        model
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = small();
        let bytes = encode_checkpoint(&model);
        assert_eq!(&bytes[..4], b"TSDM");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&small());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_checkpoint(&magic).is_err());
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(decode_checkpoint(&version).is_err());
        let mut huge = bytes.clone();
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_checkpoint(&huge).is_err());
        assert!(decode_checkpoint(&[]).is_err());
    }
}
