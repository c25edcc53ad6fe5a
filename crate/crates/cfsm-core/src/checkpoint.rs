//! Single-file checkpoint container.
//!
//! Layout: `u32` header length, JSON metadata header, `u32` tensor count,
//! tensor records (name, dtype, shape, little-endian f32 payload), and a
//! trailing SHA-256 over everything before it. Tensors are written in name
//! order (the `ParamSet` iteration order), so identical states produce
//! identical files.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::graph::Arr;
use crate::nn::ParamSet;

pub const SCHEMA_VERSION: u32 = 1;

/// `kind` header value of stage-1 synthesis checkpoints.
pub const KIND_STAGE1: &str = "cfsm-stage1";
/// `kind` header value of recognizer checkpoints.
pub const KIND_FR: &str = "fr";

/// Serializable RNG snapshot (ChaCha12 seed + word position).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RngState {
    pub seed_hex: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha12Rng) -> Self {
        let seed = rng.get_seed();
        RngState {
            seed_hex: hex_encode(&seed),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<rand_chacha::ChaCha12Rng> {
        use rand::SeedableRng;
        let seed_bytes = hex_decode(&self.seed_hex)
            .ok_or_else(|| CoreError::Metadata("bad rng seed hex".into()))?;
        let seed: [u8; 32] = seed_bytes
            .try_into()
            .map_err(|_| CoreError::Metadata("rng seed must be 32 bytes".into()))?;
        let mut rng = rand_chacha::ChaCha12Rng::from_seed(seed);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| CoreError::Metadata("bad rng word_pos".into()))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// JSON metadata header stored ahead of the tensor records.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    /// "cfsm-stage1" or "fr".
    pub kind: String,
    pub step: u64,
    /// Resolved configuration echo (arbitrary JSON).
    pub config: serde_json::Value,
    pub rng: RngState,
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, params: &ParamSet) -> Result<()> {
    let mut body: Vec<u8> = Vec::new();
    let header = serde_json::to_vec(meta)
        .map_err(|e| CoreError::Metadata(format!("header serialization: {e}")))?;
    body.extend_from_slice(&(header.len() as u32).to_le_bytes());
    body.extend_from_slice(&header);
    body.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        body.extend_from_slice(&(name.len() as u32).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        let dtype = b"f32";
        body.extend_from_slice(&(dtype.len() as u32).to_le_bytes());
        body.extend_from_slice(dtype);
        body.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for d in tensor.shape() {
            body.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        body.extend_from_slice(&((tensor.len() * 4) as u64).to_le_bytes());
        let std = tensor
            .as_standard_layout();
        for v in std.iter() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest: [u8; 32] = Sha256::digest(&body).into();
    body.extend_from_slice(&digest);

    // Write via a sibling temp file so a crash cannot leave a torn archive.
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&body)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParamSet)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 32 + 8 {
        return Err(CoreError::CorruptCheckpoint(format!(
            "{}: file too short ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 32);
    let digest: [u8; 32] = Sha256::digest(body).into();
    if digest != tail {
        return Err(CoreError::CorruptCheckpoint(format!(
            "{}: checksum mismatch (file truncated or edited)",
            path.display()
        )));
    }

    let mut cur = Cursor { buf: body, pos: 0 };
    let header_len = cur.read_u32()? as usize;
    let header = cur.read_bytes(header_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(header)
        .map_err(|e| CoreError::Metadata(format!("header parse: {e}")))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(CoreError::SchemaVersion {
            found: meta.schema_version,
            supported: SCHEMA_VERSION,
        });
    }

    let count = cur.read_u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = cur.read_u32()? as usize;
        let name = String::from_utf8(cur.read_bytes(name_len)?.to_vec())
            .map_err(|_| CoreError::CorruptCheckpoint("non-UTF-8 tensor name".into()))?;
        let dtype_len = cur.read_u32()? as usize;
        let dtype = cur.read_bytes(dtype_len)?;
        if dtype != b"f32" {
            return Err(CoreError::CorruptCheckpoint(format!(
                "tensor `{name}`: unsupported dtype {:?}",
                String::from_utf8_lossy(dtype)
            )));
        }
        let ndim = cur.read_u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.read_u64()? as usize);
        }
        let data_len = cur.read_u64()? as usize;
        let expect: usize = shape.iter().product::<usize>() * 4;
        if data_len != expect {
            return Err(CoreError::CorruptCheckpoint(format!(
                "tensor `{name}`: payload {data_len} bytes, shape implies {expect}"
            )));
        }
        let raw = cur.read_bytes(data_len)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Arr::from_shape_vec(ndarray::IxDyn(&shape), values)
            .map_err(|e| CoreError::CorruptCheckpoint(format!("tensor `{name}`: {e}")))?;
        if params.contains(&name) {
            return Err(CoreError::CorruptCheckpoint(format!(
                "duplicate tensor name `{name}`"
            )));
        }
        params.insert(name, tensor);
    }
    if cur.pos != body.len() {
        return Err(CoreError::CorruptCheckpoint(format!(
            "{} trailing bytes after tensor records",
            body.len() - cur.pos
        )));
    }
    Ok((meta, params))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn read_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CoreError::CorruptCheckpoint(
                "unexpected end of archive".into(),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn read_u32(&mut self) -> Result<u32> {
        let b = self.read_bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn read_u64(&mut self) -> Result<u64> {
        let b = self.read_bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn sample_state() -> (CheckpointMeta, ParamSet) {
        let mut params = ParamSet::new();
        params.insert("enc.conv1.w", Arr::from_elem(IxDyn(&[2, 3, 3, 3]), 0.25));
        params.insert("style.U", Arr::from_elem(IxDyn(&[8, 4]), -1.5));
        params.insert("style.mu", Arr::zeros(IxDyn(&[8])));
        let rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        let meta = CheckpointMeta {
            schema_version: SCHEMA_VERSION,
            kind: "cfsm-stage1".into(),
            step: 17,
            config: serde_json::json!({"q": 4, "d": 8}),
            rng: RngState::capture(&rng),
        };
        (meta, params)
    }

    #[test]
    fn round_trip_is_exact_and_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let (meta, params) = sample_state();
        save_checkpoint(&p1, &meta, &params).unwrap();
        let (meta2, params2) = load_checkpoint(&p1).unwrap();
        assert_eq!(meta2.step, 17);
        assert_eq!(meta2.kind, "cfsm-stage1");
        assert_eq!(params2, params);
        save_checkpoint(&p2, &meta2, &params2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_archive_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let (meta, params) = sample_state();
        save_checkpoint(&p, &meta, &params).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        match load_checkpoint(&p) {
            Err(CoreError::CorruptCheckpoint(msg)) => {
                assert!(msg.contains("checksum") || msg.contains("short"), "{msg}")
            }
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let (meta, params) = sample_state();
        save_checkpoint(&p, &meta, &params).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CoreError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn future_schema_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.ckpt");
        let (mut meta, params) = sample_state();
        meta.schema_version = SCHEMA_VERSION + 1;
        // Bypass the writer's implicit version by writing meta as-is.
        save_checkpoint(&p, &meta, &params).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CoreError::SchemaVersion { found, .. }) if found == SCHEMA_VERSION + 1
        ));
    }

    #[test]
    fn rng_state_round_trips_mid_stream() {
        use rand::RngCore;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        for _ in 0..13 {
            rng.next_u32();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore().unwrap();
        for _ in 0..20 {
            assert_eq!(rng.next_u64(), restored.next_u64());
        }
    }
}
