//! Ego-path pools and candidate-aware explanation sampling.
//!
//! A walk of up to `k` uniform steps from the target user is compacted into
//! an ego-path: the source and any repeated node are removed, and the result
//! is right-padded with `EMPTY` to `k` slots. A user's pool is a multiset of
//! `n_w` such paths. For each candidate item the paths are scored by mean
//! cosine similarity, mapped to `[0, 1]`, and drawn as Bernoulli variables
//! (or their binary-concrete relaxation during training).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Result, SorexError};
use crate::graph::{JointGraph, NodeRef};
use crate::tensor::{dot, sigmoid, Matrix};
use crate::towers::Tower;

/// Clamp applied to probabilities before taking logits in the relaxation.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EgoPath {
    pub source: u32,
    /// Exactly `k` entries; `None` is the `EMPTY` padding node.
    pub slots: Vec<Option<NodeRef>>,
}

impl EgoPath {
    pub fn k(&self) -> usize {
        self.slots.len()
    }

    /// Non-empty slots with their 1-based hop index.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, NodeRef)> + '_ {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.map(|n| (i + 1, n)))
    }

    pub fn len_nonempty(&self) -> usize {
        self.slots.iter().take_while(|s| s.is_some()).count()
    }

    pub fn is_full(&self) -> bool {
        self.slots.iter().all(Option::is_some)
    }

    /// Checks padding, distinctness and reachability against `graph`: every
    /// kept node is adjacent to the source or to an earlier kept node.
    pub fn validate(&self, graph: &JointGraph) -> std::result::Result<(), String> {
        let len = self.len_nonempty();
        if self.slots[len..].iter().any(Option::is_some) {
            return Err("EMPTY slots are not a suffix".into());
        }
        let source = NodeRef::User(self.source);
        let kept: Vec<NodeRef> = self.slots[..len].iter().map(|s| s.expect("prefix is non-empty")).collect();
        for (t, &node) in kept.iter().enumerate() {
            if !graph.contains(node) {
                return Err(format!("slot {t} node {node} out of range"));
            }
            if node == source || kept[..t].contains(&node) {
                return Err(format!("slot {t} repeats {node}"));
            }
            let reachable = graph.adjacent(source, node) || kept[..t].iter().any(|&p| graph.adjacent(p, node));
            if !reachable {
                return Err(format!("slot {t} node {node} not adjacent to the path"));
            }
        }
        Ok(())
    }
}

/// `source<TAB>slot0,slot1,...` with `_` for EMPTY.
impl std::fmt::Display for EgoPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "u{}\t", self.source)?;
        for (i, s) in self.slots.iter().enumerate() {
            if i > 0 {
                f.write_char(',')?;
            }
            match s {
                Some(n) => write!(f, "{n}")?,
                None => f.write_char('_')?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalkPool {
    pub source: u32,
    pub k: usize,
    pub paths: Vec<EgoPath>,
}

impl WalkPool {
    pub fn empty(source: u32, k: usize) -> Self {
        WalkPool { source, k, paths: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Debug dump, one path per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for p in &self.paths {
            let _ = writeln!(out, "{p}");
        }
        out
    }
}

/// Compacts a walk (starting at the source) into an ego-path of `k` slots.
pub fn to_ego_path(walk: &[NodeRef], k: usize) -> EgoPath {
    let source = match walk.first() {
        Some(NodeRef::User(u)) => *u,
        other => panic!("walk must start at a user, got {other:?}"),
    };
    let mut slots: Vec<Option<NodeRef>> = Vec::with_capacity(k);
    for &node in &walk[1..] {
        if node == walk[0] || slots.contains(&Some(node)) {
            continue;
        }
        if slots.len() < k {
            slots.push(Some(node));
        }
    }
    slots.resize(k, None);
    EgoPath { source, slots }
}

fn walk_once<R: Rng + ?Sized>(graph: &JointGraph, source: NodeRef, k: usize, rng: &mut R, buf: &mut Vec<NodeRef>) {
    buf.clear();
    buf.push(source);
    let mut cur = source;
    for _ in 0..k {
        let deg = graph.joint_degree(cur);
        if deg == 0 {
            break;
        }
        cur = graph.joint_neighbor(cur, rng.gen_range(0..deg));
        buf.push(cur);
    }
}

/// Samples `n_w` uniform random walks of `k` steps from `source` and
/// compacts each into an ego-path. Repeated paths are kept.
pub fn sample_walks<R: Rng + ?Sized>(graph: &JointGraph, source: usize, k: usize, n_w: usize, rng: &mut R) -> Result<WalkPool> {
    let start = NodeRef::User(source as u32);
    if graph.joint_degree(start) == 0 {
        return Err(SorexError::IsolatedSource { user: source });
    }
    let mut buf = Vec::with_capacity(k + 1);
    let paths = (0..n_w)
        .map(|_| {
            walk_once(graph, start, k, rng, &mut buf);
            to_ego_path(&buf, k)
        })
        .collect();
    Ok(WalkPool { source: source as u32, k, paths })
}

/// Exact distribution over ego-paths by exhaustive enumeration of all
/// `k`-step walks, each weighted by the product of `1/degree`.
///
/// Aborts once more than `cap` complete walks would be enumerated.
pub fn enumerate_ego_paths(graph: &JointGraph, source: usize, k: usize, cap: usize) -> Result<Vec<(EgoPath, f64)>> {
    let start = NodeRef::User(source as u32);
    if graph.joint_degree(start) == 0 {
        return Err(SorexError::IsolatedSource { user: source });
    }
    let mut dist: BTreeMap<EgoPath, f64> = BTreeMap::new();
    let mut walks = 0usize;
    let mut walk = vec![start];

    fn rec(
        graph: &JointGraph,
        k: usize,
        cap: usize,
        walk: &mut Vec<NodeRef>,
        prob: f64,
        walks: &mut usize,
        dist: &mut BTreeMap<EgoPath, f64>,
    ) -> Result<()> {
        let cur = *walk.last().expect("walk starts non-empty");
        let deg = graph.joint_degree(cur);
        if walk.len() == k + 1 || deg == 0 {
            *walks += 1;
            if *walks > cap {
                return Err(SorexError::EnumerationCap { cap });
            }
            *dist.entry(to_ego_path(walk, k)).or_insert(0.0) += prob;
            return Ok(());
        }
        for i in 0..deg {
            walk.push(graph.joint_neighbor(cur, i));
            rec(graph, k, cap, walk, prob / deg as f64, walks, dist)?;
            walk.pop();
        }
        Ok(())
    }

    rec(graph, k, cap, &mut walk, 1.0, &mut walks, &mut dist)?;
    Ok(dist.into_iter().collect())
}

/// Unit-normalized node states of one tower, for cosine lookups.
#[derive(Debug, Clone)]
pub struct TowerContext {
    pub tower: Tower,
    pub m: usize,
    unit: Matrix,
}

impl TowerContext {
    /// `states` is indexed by global node id; candidates are item rows.
    pub fn new(tower: Tower, m: usize, states: &Matrix) -> Self {
        TowerContext { tower, m, unit: states.row_normalized() }
    }

    pub fn global(&self, node: NodeRef) -> usize {
        match node {
            NodeRef::User(u) => u as usize,
            NodeRef::Item(v) => self.m + v as usize,
        }
    }

    /// Cosine similarity between a node's state and a candidate item's state.
    pub fn cos(&self, node: NodeRef, candidate: usize) -> f64 {
        dot(self.unit.row(self.global(node)), self.unit.row(self.m + candidate)).clamp(-1.0, 1.0)
    }

    pub fn unit(&self) -> &Matrix {
        &self.unit
    }
}

/// Mean slot cosine: `sum_slots cos(slot, candidate) / divisor`, EMPTY
/// slots contributing 0. The divisor is `k` unless `k_minus_one_divisor` asks
/// for `k - 1`, in which case the result is clamped to `[-1, 1]`.
pub fn path_similarity(ctx: &TowerContext, path: &EgoPath, candidate: usize, k_minus_one_divisor: bool) -> f64 {
    let divisor = if k_minus_one_divisor { path.k() - 1 } else { path.k() } as f64;
    let s = path.nodes().map(|(_, q)| ctx.cos(q, candidate)).sum::<f64>() / divisor;
    if k_minus_one_divisor {
        s.clamp(-1.0, 1.0)
    } else {
        s
    }
}

/// Maps a similarity in `[-1, 1]` to a probability in `[0, 1]`.
pub fn rescale(p_star: f64) -> f64 {
    assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&p_star), "path similarity {p_star} outside [-1, 1]");
    ((p_star + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Binary-concrete relaxation of `Bernoulli(p)` driven by uniform noise `u`.
pub fn concrete_draw(p: f64, u: f64, tau: f64) -> f64 {
    sigmoid(concrete_logit(p, u, tau))
}

pub fn concrete_logit(p: f64, u: f64, tau: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let u = u.clamp(PROB_EPS, 1.0 - PROB_EPS);
    ((p / (1.0 - p)).ln() + (u / (1.0 - u)).ln()) / tau
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingMode {
    /// Independent Bernoulli draws; a path is kept when its draw is 1.
    Hard,
    /// Binary-concrete draws in `(0, 1)` at temperature `tau`.
    Relaxed { tau: f64 },
    /// The `k` highest-probability paths, ties broken by pool position.
    TopK(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledExplanation {
    pub tower: Tower,
    pub candidate: usize,
    pub probs: Vec<f64>,
    /// Per-path weight: `0`/`1` in hard and top-K modes, in `(0, 1)` when relaxed.
    pub draws: Vec<f64>,
    /// Uniform noise behind each draw (empty for top-K).
    pub noise: Vec<f64>,
    pub kept: Vec<usize>,
}

impl SampledExplanation {
    /// Explanation that keeps exactly `kept`, for complement and random
    /// removal experiments.
    pub fn with_kept(&self, kept: Vec<usize>) -> Self {
        let mut draws = vec![0.0; self.probs.len()];
        for &t in &kept {
            draws[t] = 1.0;
        }
        SampledExplanation { draws, noise: Vec::new(), kept, ..self.clone() }
    }

    /// Pool indices not in `kept`.
    pub fn complement(&self) -> Vec<usize> {
        let mut mark = vec![false; self.probs.len()];
        self.kept.iter().for_each(|&t| mark[t] = true);
        (0..self.probs.len()).filter(|&t| !mark[t]).collect()
    }
}

/// Draws the explanation subset for one candidate given per-path `probs`.
pub fn sample_subset<R: Rng + ?Sized>(
    tower: Tower,
    candidate: usize,
    probs: Vec<f64>,
    mode: SamplingMode,
    rng: &mut R,
) -> SampledExplanation {
    match mode {
        SamplingMode::Hard => {
            let noise: Vec<f64> = probs.iter().map(|_| rng.gen::<f64>()).collect();
            let draws: Vec<f64> = probs.iter().zip(&noise).map(|(&p, &u)| if u < p { 1.0 } else { 0.0 }).collect();
            let kept = (0..probs.len()).filter(|&t| draws[t] == 1.0).collect();
            SampledExplanation { tower, candidate, probs, draws, noise, kept }
        }
        SamplingMode::Relaxed { tau } => {
            let noise: Vec<f64> = probs.iter().map(|_| rng.gen::<f64>()).collect();
            let draws = probs.iter().zip(&noise).map(|(&p, &u)| concrete_draw(p, u, tau)).collect();
            let kept = (0..probs.len()).collect();
            SampledExplanation { tower, candidate, probs, draws, noise, kept }
        }
        SamplingMode::TopK(k) => {
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
            let mut kept: Vec<usize> = order.into_iter().take(k).collect();
            kept.sort_unstable();
            let mut draws = vec![0.0; probs.len()];
            kept.iter().for_each(|&t| draws[t] = 1.0);
            SampledExplanation { tower, candidate, probs, draws, noise: Vec::new(), kept }
        }
    }
}
