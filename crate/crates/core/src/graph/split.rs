use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::JointGraph;
use crate::error::{Result, SorexError};
use crate::rng::{stream, Purpose};

/// Train/validation/test partition of the interaction edges. Social edges
/// are never split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<(u32, u32)>,
    pub valid: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    pub seed: u64,
}

impl DatasetSplit {
    /// The structure every model-side computation sees: all social edges and
    /// the training interactions only.
    pub fn train_graph(&self, full: &JointGraph) -> JointGraph {
        full.with_interactions(&self.train)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeBatch {
    pub anchor: (u32, u32),
    pub negatives: Vec<u32>,
}

pub fn split(graph: &JointGraph, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (tr, va, te) = ratios;
    let ok = [tr, va, te].iter().all(|r| r.is_finite() && *r >= 0.0) && tr > 0.0 && ((tr + va + te) - 1.0).abs() <= 1e-9;
    if !ok {
        return Err(SorexError::InvalidRatios(ratios));
    }
    let mut edges = graph.interaction_edges();
    let mut rng = stream(seed, Purpose::Split, &[]);
    edges.shuffle(&mut rng);

    let total = edges.len();
    let n_train = ((tr * total as f64).round() as usize).min(total);
    let n_valid = ((va * total as f64).round() as usize).min(total - n_train);
    let test = edges.split_off(n_train + n_valid);
    let valid = edges.split_off(n_train);
    Ok(DatasetSplit { train: edges, valid, test, seed })
}

/// Draws `count` items the anchor user has not interacted with in `train_graph`.
///
/// Negatives are distinct unless fewer than `count` candidates exist, in
/// which case they are drawn with replacement from the whole pool.
pub fn sample_negatives<R: Rng + ?Sized>(train_graph: &JointGraph, anchor: (u32, u32), count: usize, rng: &mut R) -> Result<NegativeBatch> {
    let user = anchor.0 as usize;
    let n = train_graph.num_items();
    let seen = train_graph.items_of(user);
    let pool_size = n - seen.len();
    if pool_size == 0 {
        return Err(SorexError::NoNegatives { user });
    }

    let negatives = if pool_size < count || seen.len() * 2 > n {
        let pool: Vec<u32> = (0..n as u32).filter(|v| seen.binary_search(v).is_err()).collect();
        if pool_size < count {
            (0..count).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
        } else {
            pool.choose_multiple(rng, count).copied().collect()
        }
    } else {
        let mut taken = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let v = rng.gen_range(0..n as u32);
            if seen.binary_search(&v).is_err() && taken.insert(v) {
                out.push(v);
            }
        }
        out
    };
    Ok(NegativeBatch { anchor, negatives })
}
