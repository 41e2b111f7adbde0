//! Binary checkpoint: `SRXC`, format version, 32-byte config digest,
//! `m n d` as `u32`, both embedding tables as little-endian `f32`
//! row-major, then the optimizer step (`u64`) and its four moment tables as
//! little-endian `f64`.

use std::path::Path;

use crate::error::{Result, SorexError};
use crate::tensor::Matrix;
use crate::towers::Embeddings;
use crate::training::adam::AdamState;

const MAGIC: &[u8; 4] = b"SRXC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub m: usize,
    pub n: usize,
    pub emb: Embeddings,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.emb.dim();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        for x in [self.m, self.n, d] {
            out.extend_from_slice(&(x as u32).to_le_bytes());
        }
        for table in [&self.emb.interaction, &self.emb.social] {
            for &x in table.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for table in self.optimizer.m.iter().chain(&self.optimizer.v) {
            for &x in table.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(SorexError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(SorexError::Format(format!("unsupported checkpoint version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let (m, n, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let rows = m + n;
        let f32_table = |r: &mut Reader| -> Result<Matrix> {
            let raw = r.take(rows * d * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            Ok(Matrix::from_vec(rows, d, data))
        };
        let interaction = f32_table(&mut r)?;
        let social = f32_table(&mut r)?;
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let f64_table = |r: &mut Reader| -> Result<Matrix> {
            let raw = r.take(rows * d * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Ok(Matrix::from_vec(rows, d, data))
        };
        let (m0, m1, v0, v1) = (f64_table(&mut r)?, f64_table(&mut r)?, f64_table(&mut r)?, f64_table(&mut r)?);
        if r.pos != bytes.len() {
            return Err(SorexError::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        let emb = Embeddings { interaction, social };
        if !emb.interaction.is_finite() || !emb.social.is_finite() {
            return Err(SorexError::Format("checkpoint holds non-finite parameters".into()));
        }
        Ok(Checkpoint { digest, m, n, emb, optimizer: AdamState { step, m: [m0, m1], v: [v0, v1] } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| SorexError::io(path, e))
    }

    /// Loads and checks the digest against the current configuration.
    pub fn load(path: &Path, expected_digest: &[u8; 32]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SorexError::io(path, e))?;
        let ck = Self::from_bytes(&bytes)?;
        if &ck.digest != expected_digest {
            return Err(SorexError::DigestMismatch {
                expected: crate::config::hex(expected_digest),
                found: crate::config::hex(&ck.digest),
            });
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SorexError::Format("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
