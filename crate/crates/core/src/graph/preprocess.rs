use std::collections::BTreeSet;

use super::{JointGraph, RawDataset};
use crate::error::{Result, SorexError};

/// A filtered, densely reindexed graph with the original ids of every node.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub graph: JointGraph,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

/// Iteratively drops users and items with fewer than `min_interactions`
/// interactions until nothing changes, then reindexes the survivors.
///
/// Social edges are symmetrized and deduplicated; edges touching a removed
/// user are dropped. With `min_interactions = 0` nothing is removed.
pub fn preprocess(raw: &RawDataset, min_interactions: usize) -> Result<Preprocessed> {
    let m = raw.user_ids.len();
    let n = raw.item_ids.len();
    let edges: BTreeSet<(u32, u32)> = raw.interactions.iter().copied().collect();

    let mut user_alive = vec![true; m];
    let mut item_alive = vec![true; n];
    if min_interactions > 0 {
        loop {
            let mut user_deg = vec![0usize; m];
            let mut item_deg = vec![0usize; n];
            for &(u, v) in &edges {
                if user_alive[u as usize] && item_alive[v as usize] {
                    user_deg[u as usize] += 1;
                    item_deg[v as usize] += 1;
                }
            }
            let mut changed = false;
            for u in 0..m {
                if user_alive[u] && user_deg[u] < min_interactions {
                    user_alive[u] = false;
                    changed = true;
                }
            }
            for v in 0..n {
                if item_alive[v] && item_deg[v] < min_interactions {
                    item_alive[v] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }

    let remap = |alive: &[bool]| -> Vec<Option<u32>> {
        let mut next = 0u32;
        alive
            .iter()
            .map(|&a| {
                a.then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect()
    };
    let user_map = remap(&user_alive);
    let item_map = remap(&item_alive);

    let interactions: Vec<(u32, u32)> = edges.iter().filter_map(|&(u, v)| Some((user_map[u as usize]?, item_map[v as usize]?))).collect();
    let social: Vec<(u32, u32)> = raw.social.iter().filter_map(|&(a, b)| Some((user_map[a as usize]?, user_map[b as usize]?))).collect();

    let user_ids: Vec<String> = raw.user_ids.iter().zip(&user_alive).filter(|(_, &a)| a).map(|(id, _)| id.clone()).collect();
    let item_ids: Vec<String> = raw.item_ids.iter().zip(&item_alive).filter(|(_, &a)| a).map(|(id, _)| id.clone()).collect();

    if interactions.is_empty() {
        return Err(SorexError::EmptyGraph { min_interactions });
    }

    let graph = JointGraph::from_edges(user_ids.len(), item_ids.len(), &interactions, &social);
    Ok(Preprocessed { graph, user_ids, item_ids })
}
