//! Checkpoint binary: magic `SSSL`, version 1, little-endian, named f32
//! tensor table, trailing CRC32 of all preceding bytes. The header carries
//! the step counter, RNG state, and the run configuration so a round trip
//! restores training exactly.

use super::TrainError;
use crate::tensor::Tensor;
use std::path::Path;

const MAGIC: &[u8; 4] = b"SSSL";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointBundle {
    pub arch_hash: u64,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl CheckpointBundle {
    pub fn tensor(&self, name: &str) -> Result<&Tensor, TrainError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor '{name}'")))
    }

    pub fn expect_arch_hash(&self, expected: u64) -> Result<(), TrainError> {
        if self.arch_hash != expected {
            return Err(TrainError::ConfigHashMismatch {
                expected,
                found: self.arch_hash,
            });
        }
        Ok(())
    }
}

pub fn encode_checkpoint(b: &CheckpointBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&b.arch_hash.to_le_bytes());
    out.extend_from_slice(&b.step.to_le_bytes());
    out.extend_from_slice(&b.rng_seed);
    out.extend_from_slice(&b.rng_word_pos.to_le_bytes());
    out.extend_from_slice(&(b.config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(b.config_text.as_bytes());
    out.extend_from_slice(&(b.tensors.len() as u32).to_le_bytes());
    for (name, t) in &b.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint(b: &CheckpointBundle, path: &Path) -> Result<(), TrainError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, encode_checkpoint(b))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle, TrainError> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointBundle, TrainError> {
    if bytes.len() < 4 + 4 + 4 {
        return Err(TrainError::Checkpoint("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(TrainError::Checkpoint(format!(
            "checksum failure: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(TrainError::Checkpoint(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let arch_hash = r.u64()?;
    let step = r.u64()?;
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(r.take(32)?);
    let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let cfg_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|e| TrainError::Checkpoint(format!("config text not UTF-8: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| TrainError::Checkpoint(format!("tensor name not UTF-8: {e}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::from_data(&shape, data)
            .map_err(|e| TrainError::Checkpoint(format!("tensor '{name}': {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(TrainError::Checkpoint(format!(
            "{} trailing bytes after tensor table",
            body.len() - r.pos
        )));
    }
    Ok(CheckpointBundle {
        arch_hash,
        step,
        rng_seed,
        rng_word_pos,
        config_text,
        tensors,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.bytes.len() {
            return Err(TrainError::Checkpoint(format!(
                "truncated at byte {}: need {n} more",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
