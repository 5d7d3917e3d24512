//! Bit-exact binary checkpoint container.
//!
//! Layout (all multi-byte values little-endian unless noted):
//!
//! ```text
//! offset 0   magic "BPCK"
//! offset 4   version u32
//! offset 8   payload:
//!     config_hash u64
//!     tensor_count u32
//!     per tensor: name_len u32, name utf-8, dtype u8 (0 = f64),
//!                 ndim u32, dims u64 x ndim, data f64 bits x numel
//!     pruner_flag u8
//!       if 1: m_len u64, m f64s, tau f64, t f64, iter u64,
//!             phase u8, epoch u32,
//!             hard_flag u8 [hard_len u64, hard u8s of 0/1]
//!     partition_flag u8
//!       if 1: bo u32, bi u32, layer_count u32,
//!             per layer: name_len u32, name, out u32, in u32, kh u32,
//!                        kw u32, layout u8 (0 conv OIHW, 1 linear IO),
//!                        macs_per_weight f64
//! trailing 4 bytes: crc32 of the payload
//! ```
//!
//! Floats round-trip through their raw bit patterns, so write-then-read is
//! bit-identical. Unknown versions and checksum mismatches are rejected.

use std::path::Path;

use crate::blocks::{BlockPartition, BlockSpec, LayerDesc, WeightLayout};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrunerState {
    pub m: Vec<f64>,
    pub tau: f64,
    pub t: f64,
    pub iter: u64,
    /// Driver phase discriminant (pruner-specific).
    pub phase: u8,
    /// Global epoch counter at save time.
    pub epoch: u32,
    pub hard_mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionDesc {
    pub bo: u32,
    pub bi: u32,
    pub layers: Vec<LayerDesc>,
}

impl PartitionDesc {
    pub fn from_partition(p: &BlockPartition) -> Self {
        PartitionDesc {
            bo: p.spec().bo as u32,
            bi: p.spec().bi as u32,
            layers: p.layer_descs(),
        }
    }

    pub fn to_partition(&self) -> Result<BlockPartition> {
        BlockPartition::new(self.layers.clone(), BlockSpec::new(self.bo as usize, self.bi as usize)?)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub tensors: Vec<TensorEntry>,
    pub pruner: Option<PrunerState>,
    pub partition: Option<PartitionDesc>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        put_u64(&mut payload, self.config_hash);
        put_u32(&mut payload, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut payload, &t.name);
            payload.push(0u8); // dtype f64
            put_u32(&mut payload, t.shape.len() as u32);
            for &d in &t.shape {
                put_u64(&mut payload, d as u64);
            }
            for &v in &t.data {
                put_u64(&mut payload, v.to_bits());
            }
        }
        match &self.pruner {
            None => payload.push(0),
            Some(p) => {
                payload.push(1);
                put_u64(&mut payload, p.m.len() as u64);
                for &v in &p.m {
                    put_u64(&mut payload, v.to_bits());
                }
                put_u64(&mut payload, p.tau.to_bits());
                put_u64(&mut payload, p.t.to_bits());
                put_u64(&mut payload, p.iter);
                payload.push(p.phase);
                put_u32(&mut payload, p.epoch);
                match &p.hard_mask {
                    None => payload.push(0),
                    Some(h) => {
                        payload.push(1);
                        put_u64(&mut payload, h.len() as u64);
                        payload.extend(h.iter().map(|&v| if v != 0.0 { 1u8 } else { 0u8 }));
                    }
                }
            }
        }
        match &self.partition {
            None => payload.push(0),
            Some(pd) => {
                payload.push(1);
                put_u32(&mut payload, pd.bo);
                put_u32(&mut payload, pd.bi);
                put_u32(&mut payload, pd.layers.len() as u32);
                for l in &pd.layers {
                    put_str(&mut payload, &l.name);
                    put_u32(&mut payload, l.out_ch as u32);
                    put_u32(&mut payload, l.in_ch as u32);
                    put_u32(&mut payload, l.kh as u32);
                    put_u32(&mut payload, l.kw as u32);
                    payload.push(match l.layout {
                        WeightLayout::ConvOihw => 0,
                        WeightLayout::LinearIo => 1,
                    });
                    put_u64(&mut payload, l.macs_per_weight.to_bits());
                }
            }
        }

        let crc = crc32fast::hash(&payload);
        let mut out = Vec::with_capacity(payload.len() + 12);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 12 {
            return Err(Error::Checkpoint(format!("file too short: {} bytes", bytes.len())));
        }
        if bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:02x?} at offset 0 (want \"BPCK\")",
                &bytes[0..4]
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let payload = &bytes[8..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let crc = crc32fast::hash(payload);
        if crc != stored_crc {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: payload hashes to {crc:#010x}, trailer says {stored_crc:#010x}"
            )));
        }

        let mut r = Cursor { bytes: payload, pos: 0 };
        let config_hash = r.u64()?;
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.string()?;
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: unsupported dtype {dtype} at offset {}",
                    r.pos
                )));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(f64::from_bits(r.u64()?));
            }
            tensors.push(TensorEntry { name, shape, data });
        }
        let pruner = if r.u8()? == 1 {
            let m_len = r.u64()? as usize;
            let mut m = Vec::with_capacity(m_len);
            for _ in 0..m_len {
                m.push(f64::from_bits(r.u64()?));
            }
            let tau = f64::from_bits(r.u64()?);
            let t = f64::from_bits(r.u64()?);
            let iter = r.u64()?;
            let phase = r.u8()?;
            let epoch = r.u32()?;
            let hard_mask = if r.u8()? == 1 {
                let len = r.u64()? as usize;
                let mut h = Vec::with_capacity(len);
                for _ in 0..len {
                    h.push(r.u8()? as f64);
                }
                Some(h)
            } else {
                None
            };
            Some(PrunerState { m, tau, t, iter, phase, epoch, hard_mask })
        } else {
            None
        };
        let partition = if r.u8()? == 1 {
            let bo = r.u32()?;
            let bi = r.u32()?;
            let n_layers = r.u32()? as usize;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let name = r.string()?;
                let out_ch = r.u32()? as usize;
                let in_ch = r.u32()? as usize;
                let kh = r.u32()? as usize;
                let kw = r.u32()? as usize;
                let layout = match r.u8()? {
                    0 => WeightLayout::ConvOihw,
                    1 => WeightLayout::LinearIo,
                    other => {
                        return Err(Error::Checkpoint(format!(
                            "layer {name}: unknown layout tag {other} at offset {}",
                            r.pos
                        )))
                    }
                };
                let macs_per_weight = f64::from_bits(r.u64()?);
                layers.push(LayerDesc { name, out_ch, in_ch, kh, kw, layout, macs_per_weight });
            }
            Some(PartitionDesc { bo, bi, layers })
        } else {
            None
        };
        if r.pos != payload.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload (offset {})",
                payload.len() - r.pos,
                r.pos
            )));
        }
        Ok(Checkpoint { config_hash, tensors, pruner, partition })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated payload at offset {} (wanted {n} more bytes)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint(format!("invalid utf-8 name at offset {}", self.pos)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_hash: 0xdead_beef_1234,
            tensors: vec![
                TensorEntry {
                    name: "conv1.w".into(),
                    shape: vec![2, 1, 3, 3],
                    data: (0..18).map(|i| i as f64 * 0.25 - 1.0).collect(),
                },
                TensorEntry { name: "fc.b".into(), shape: vec![4], data: vec![0.0, -0.0, 1e-300, f64::MAX] },
            ],
            pruner: Some(PrunerState {
                m: vec![0.5, -0.25, 3.0],
                tau: 1e-5,
                t: -17.25,
                iter: 1234,
                phase: 1,
                epoch: 7,
                hard_mask: Some(vec![1.0, 0.0, 1.0]),
            }),
            partition: Some(PartitionDesc {
                bo: 4,
                bi: 4,
                layers: vec![LayerDesc::conv("conv1", 2, 1, 3, 3, 64.0)],
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck, back);
        // Serialization itself is deterministic.
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bpck");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn corrupt_payload_byte_fails_checksum() {
        let ck = sample();
        let mut bytes = ck.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("checksum mismatch"), "{err}");
    }

    #[test]
    fn wrong_magic_and_version_rejected() {
        let ck = sample();
        let mut bytes = ck.to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("bad magic"));

        let mut bytes = ck.to_bytes();
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("unsupported checkpoint version 9"), "{err}");
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let ck = sample();
        let bytes = ck.to_bytes();
        // Chop inside the tensor table, keeping the crc trailer plausible.
        let cut = &bytes[..40];
        let err = Checkpoint::from_bytes(cut).unwrap_err().to_string();
        assert!(
            err.contains("checksum mismatch") || err.contains("truncated"),
            "{err}"
        );
    }

    #[test]
    fn partition_desc_rebuilds() {
        let ck = sample();
        let p = ck.partition.unwrap().to_partition().unwrap();
        assert_eq!(p.n_blocks(), 9);
    }
}
