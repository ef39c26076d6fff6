//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "LOCALNET"
//! version      u32       currently 1
//! config_len   u32
//! config       config_len bytes of UTF-8 `key = value` lines
//! n_params     u32
//! n_params x block
//! has_optim    u8        0 or 1
//! if has_optim:
//!   step       u64
//!   lr, beta1, beta2, eps   f64 each
//!   n_blocks   u32
//!   n_blocks x block
//!
//! block:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rank       u32
//!   dims       rank x u64
//!   values     prod(dims) x f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LOCALNET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerBlock {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub tensors: Vec<TensorBlock>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: String,
    pub params: Vec<TensorBlock>,
    pub optimizer: Option<OptimizerBlock>,
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> Option<&TensorBlock> {
        self.params.iter().find(|b| b.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, self.config.as_bytes());
        put_blocks(&mut out, &self.params);
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step.to_le_bytes());
                for v in [o.lr, o.beta1, o.beta2, o.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                put_blocks(&mut out, &o.tensors);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let config = r.string()?;
        let params = r.blocks()?;
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let lr = r.f64()?;
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let tensors = r.blocks()?;
                Some(OptimizerBlock {
                    step,
                    lr,
                    beta1,
                    beta2,
                    eps,
                    tensors,
                })
            }
            b => return Err(Error::Data(format!("bad optimizer flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config,
            params,
            optimizer,
        })
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_blocks(out: &mut Vec<u8>, blocks: &[TensorBlock]) {
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        put_bytes(out, b.name.as_bytes());
        out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for &d in &b.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &b.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }

    fn blocks(&mut self) -> Result<Vec<TensorBlock>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()?;
            let mut shape = Vec::new();
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = self.take(
                len.checked_mul(4)
                    .ok_or_else(|| Error::Data("tensor too large".into()))?,
            )?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(TensorBlock { name, shape, values });
        }
        Ok(out)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "m = 4\nk = 2\n".into(),
            params: vec![
                TensorBlock {
                    name: "cpl.0.weight".into(),
                    shape: vec![2, 3],
                    values: vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.0],
                },
                TensorBlock {
                    name: "scalar".into(),
                    shape: vec![],
                    values: vec![4.0],
                },
            ],
            optimizer: Some(OptimizerBlock {
                step: 12,
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                tensors: vec![TensorBlock {
                    name: "adam.m.cpl.0.weight".into(),
                    shape: vec![2, 3],
                    values: vec![0.5; 6],
                }],
            }),
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], b"LOCALNET");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 12);
        assert_eq!(&bytes[16..28], b"m = 4\nk = 2\n");
        // first block: count, name length, name, rank, dims
        assert_eq!(u32::from_le_bytes(bytes[28..32].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[32..36].try_into().unwrap()), 12);
        assert_eq!(&bytes[36..48], b"cpl.0.weight");
        assert_eq!(u32::from_le_bytes(bytes[48..52].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[52..60].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[60..68].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[68..72].try_into().unwrap()), 1.0);
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let c = sample();
        write_checkpoint(&path, &c).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), c);
    }

    #[test]
    fn truncation_and_magic_are_errors() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
