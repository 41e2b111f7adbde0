//! `SRXG` binary cache: the preprocessed graph, its split and the id maps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SRXG" | version u32 | m u32 | n u32 | nnz_interactions u32 | nnz_social u32
//! user->item offsets [(m+1) x u32] | user->item indices [nnz_interactions x u32]
//! social offsets [(m+1) x u32]     | social indices [nnz_social x u32]
//! split seed u64 | 3 x (count u32, count x (user u32, item u32))
//! m x (len u32, utf8) user ids | n x (len u32, utf8) item ids
//! ```

use std::fs;
use std::path::Path;

use super::{Csr, DatasetSplit, JointGraph};
use crate::error::{Result, SorexError};

const MAGIC: &[u8; 4] = b"SRXG";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedData {
    pub graph: JointGraph,
    pub split: DatasetSplit,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

impl PreparedData {
    pub fn train_graph(&self) -> JointGraph {
        self.split.train_graph(&self.graph)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.graph;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let put = |out: &mut Vec<u8>, x: u32| out.extend_from_slice(&x.to_le_bytes());
        put(&mut out, VERSION);
        put(&mut out, g.num_users() as u32);
        put(&mut out, g.num_items() as u32);
        put(&mut out, g.user_items_csr().indices.len() as u32);
        put(&mut out, g.social_csr().indices.len() as u32);
        for csr in [g.user_items_csr(), g.social_csr()] {
            for &x in csr.offsets.iter().chain(&csr.indices) {
                put(&mut out, x);
            }
        }
        out.extend_from_slice(&self.split.seed.to_le_bytes());
        for edges in [&self.split.train, &self.split.valid, &self.split.test] {
            put(&mut out, edges.len() as u32);
            for &(u, v) in edges.iter() {
                put(&mut out, u);
                put(&mut out, v);
            }
        }
        for id in self.user_ids.iter().chain(&self.item_ids) {
            put(&mut out, id.len() as u32);
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(SorexError::Format("missing SRXG magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(SorexError::Format(format!("unsupported graph cache version {version}")));
        }
        let m = r.u32()? as usize;
        let n = r.u32()? as usize;
        let nnz_i = r.u32()? as usize;
        let nnz_s = r.u32()? as usize;
        let user_items = r.csr(m, nnz_i, n)?;
        let social = r.csr(m, nnz_s, m)?;
        let seed = r.u64()?;
        let mut lists = Vec::with_capacity(3);
        for _ in 0..3 {
            let len = r.u32()? as usize;
            let mut edges = Vec::with_capacity(len.min(bytes.len() / 8));
            for _ in 0..len {
                edges.push((r.u32()?, r.u32()?));
            }
            lists.push(edges);
        }
        let test = lists.pop().unwrap_or_default();
        let valid = lists.pop().unwrap_or_default();
        let train = lists.pop().unwrap_or_default();
        let mut ids = Vec::with_capacity(m + n);
        for _ in 0..m + n {
            let len = r.u32()? as usize;
            let s = std::str::from_utf8(r.take(len)?).map_err(|e| SorexError::Format(format!("id not utf8: {e}")))?;
            ids.push(s.to_owned());
        }
        if r.pos != bytes.len() {
            return Err(SorexError::Format("trailing bytes in graph cache".into()));
        }
        let item_ids = ids.split_off(m);
        let graph = JointGraph::from_csr(m, n, user_items, social);
        graph.validate().map_err(SorexError::Format)?;
        for &(u, v) in train.iter().chain(&valid).chain(&test) {
            if u as usize >= m || v as usize >= n {
                return Err(SorexError::Format(format!("split edge ({u},{v}) out of range")));
            }
        }
        Ok(PreparedData { graph, split: DatasetSplit { train, valid, test, seed }, user_ids: ids, item_ids })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| SorexError::Format("truncated graph cache".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn csr(&mut self, rows: usize, nnz: usize, cols: usize) -> Result<Csr> {
        let offsets = (0..=rows).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let indices = (0..nnz).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let monotone = offsets.windows(2).all(|w| w[0] <= w[1]);
        if offsets.first() != Some(&0) || offsets.last().copied() != Some(nnz as u32) || !monotone {
            return Err(SorexError::Format("bad CSR offsets".into()));
        }
        if indices.iter().any(|&c| c as usize >= cols) {
            return Err(SorexError::Format("CSR index out of range".into()));
        }
        Ok(Csr { offsets, indices })
    }
}

pub fn write_cache(path: &Path, data: &PreparedData) -> Result<()> {
    fs::write(path, data.to_bytes()).map_err(|e| SorexError::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<PreparedData> {
    let bytes = fs::read(path).map_err(|e| SorexError::io(path, e))?;
    PreparedData::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{split, toy_a};

    fn sample() -> PreparedData {
        let graph = toy_a();
        let split = split(&graph, (0.5, 0.25, 0.25), 9).unwrap();
        PreparedData { graph, split, user_ids: vec!["a".into(), "b".into(), "ç".into()], item_ids: vec!["x".into(), "y".into()] }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let d = sample();
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..4], b"SRXG");
        let back = PreparedData::from_bytes(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(PreparedData::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(PreparedData::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(PreparedData::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(PreparedData::from_bytes(&extra).is_err());
    }
}
