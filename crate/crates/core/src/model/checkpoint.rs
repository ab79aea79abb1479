//! Binary checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "SPNMTCK\0" | version u32 | meta_len u32 | meta (JSON)
//! n_tensors u32 | per tensor: name_len u32, name, dtype u8, rank u32,
//!                             dims u64 * rank, f32 payload (row-major)
//! n_masks u32   | per mask:   name_len u32, name, n_bits u64,
//!                             packed bits (LSB first, row-major)
//! ```
//!
//! The JSON block carries the architecture, which tensor shapes alone do
//! not determine (head count, dropout, ...).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, TransformerConfig};
use crate::autodiff::{DType, Tensor};
use crate::error::{Error, Result};
use crate::pruning::{Mask, SparsityMasks};

pub const MAGIC: &[u8; 8] = b"SPNMTCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: TransformerConfig,
    pub step: u64,
    pub seed: u64,
    pub end_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams<f32>,
    pub masks: SparsityMasks,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.params.len())?;
        for (name, t) in self.params.iter() {
            put_name(&mut out, name)?;
            out.push(DType::F32.tag());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, self.masks.len())?;
        for (name, mask) in self.masks.iter() {
            put_name(&mut out, name)?;
            out.extend_from_slice(&(mask.len() as u64).to_le_bytes());
            let mut bytes = vec![0u8; mask.len().div_ceil(8)];
            for (i, &k) in mask.keep().iter().enumerate() {
                if k {
                    bytes[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = get_u32(&mut r)? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(&mut r, meta_len)?)?;
        meta.model.validate()?;

        let mut params = ModelParams::new();
        for _ in 0..get_u32(&mut r)? {
            let name = get_name(&mut r)?;
            let mut tag = [0u8; 1];
            read_exact(&mut r, &mut tag)?;
            if tag[0] != DType::F32.tag() {
                return Err(bad(format!("{name}: unsupported dtype tag {}", tag[0])));
            }
            let rank = get_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(get_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = take(&mut r, n.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            params.insert(name, t)?;
        }

        let mut masks = SparsityMasks::default();
        for _ in 0..get_u32(&mut r)? {
            let name = get_name(&mut r)?;
            let n_bits = get_u64(&mut r)? as usize;
            let t = params
                .get(&name)
                .ok_or_else(|| bad(format!("mask for unknown tensor {name}")))?;
            if t.len() != n_bits {
                return Err(bad(format!("{name}: mask has {n_bits} bits for {} weights", t.len())));
            }
            let bits = take(&mut r, n_bits.div_ceil(8))?;
            let keep = (0..n_bits).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
            masks.insert(name, Mask::new(t.shape().to_vec(), keep));
        }
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { meta, params, masks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&bytes).and_then(|_| f.sync_all()))
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| bad(format!("{n} does not fit in u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| bad("unexpected end of file"))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(bad("unexpected end of file"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_name(r: &mut &[u8]) -> Result<String> {
    let len = get_u32(r)? as usize;
    String::from_utf8(take(r, len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))
}
