//! Hop-wise attention over explanation paths and re-aggregation of ID
//! embeddings into the final user representation.

use crate::egopath::{EgoPath, SampledExplanation, TowerContext};
use crate::graph::NodeRef;
use crate::tensor::{axpy, dot, softmax, Matrix};
use crate::towers::TowerScores;

/// Parameter-free attention of `node` toward `candidate`: `cos / sqrt(d)`.
pub fn node_attention(ctx: &TowerContext, node: NodeRef, candidate: usize, d: usize) -> f64 {
    ctx.cos(node, candidate) / (d as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionEntry {
    /// Index into the walk pool.
    pub path: usize,
    pub node: NodeRef,
    pub raw: f64,
    /// Path draw weight; `1` for hard-kept paths.
    pub weight: f64,
    pub alpha: f64,
}

/// Normalized attention, one list per hop `1..=k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HopAttention {
    pub hops: Vec<Vec<AttentionEntry>>,
}

impl HopAttention {
    pub fn nonempty_hops(&self) -> usize {
        self.hops.iter().filter(|h| !h.is_empty()).count()
    }

    pub fn entries(&self) -> impl Iterator<Item = &AttentionEntry> {
        self.hops.iter().flatten()
    }
}

/// Raw attention for every non-EMPTY slot of every path with a positive
/// draw, grouped by hop.
pub fn raw_attention(
    ctx: &TowerContext,
    paths: &[EgoPath],
    explanation: &SampledExplanation,
    k: usize,
    d: usize,
) -> Vec<Vec<AttentionEntry>> {
    let mut hops: Vec<Vec<AttentionEntry>> = vec![Vec::new(); k];
    for &t in &explanation.kept {
        let weight = explanation.draws[t];
        if weight <= 0.0 {
            continue;
        }
        for (hop, node) in paths[t].nodes() {
            hops[hop - 1].push(AttentionEntry {
                path: t,
                node,
                raw: node_attention(ctx, node, explanation.candidate, d),
                weight,
                alpha: 0.0,
            });
        }
    }
    hops
}

/// Softmax over each hop's entries. Draw weights enter as `ln(weight)` added
/// to the raw attention, so hard-kept paths (weight 1) use the raw value.
/// Repeated occurrences of a node stay separate entries.
pub fn hopwise_normalize(mut hops: Vec<Vec<AttentionEntry>>) -> HopAttention {
    for hop in hops.iter_mut().filter(|h| !h.is_empty()) {
        let logits: Vec<f64> = hop.iter().map(|e| e.raw + e.weight.ln()).collect();
        for (e, a) in hop.iter_mut().zip(softmax(&logits)) {
            e.alpha = a;
        }
    }
    HopAttention { hops }
}

/// `(h + sum_q alpha_q * e_q) / (k + 1)` with `e_q` the ID embedding of `q`.
///
/// `renorm_empty` divides by `1 + nonempty hops` instead.
pub fn reaggregate(h: &[f64], attention: &HopAttention, table: &Matrix, m: usize, renorm_empty: bool) -> Vec<f64> {
    let mut out = h.to_vec();
    for e in attention.entries() {
        let row = match e.node {
            NodeRef::User(u) => u as usize,
            NodeRef::Item(v) => m + v as usize,
        };
        axpy(e.alpha, table.row(row), &mut out);
    }
    let denom = if renorm_empty { 1 + attention.nonempty_hops() } else { attention.hops.len() + 1 };
    out.iter_mut().for_each(|x| *x /= denom as f64);
    out
}

/// Dot products of the re-aggregated users with the candidate's item
/// representation in each tower (`c^r_j` and `e^s_j`).
pub fn explained_score(h_hat_r: &[f64], h_hat_s: &[f64], c_r: &[f64], e_s: &[f64], social_tower: bool) -> TowerScores {
    TowerScores::new(dot(h_hat_r, c_r), dot(h_hat_s, e_s), social_tower)
}
