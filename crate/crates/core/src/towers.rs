//! Two-tower encoders: LightGCN on the interaction graph and an
//! influence-weighted LightGCN variant on the social graph.
//!
//! Both towers work on `(m + n) x d` tables indexed by global node id.
//! Propagation is expressed as repeated products with constant sparse
//! operators so the same operators drive the autodiff forward pass.

use std::sync::Arc;

use rand::Rng;

use crate::config::TowerConfig;
use crate::graph::JointGraph;
use crate::rng::{stream, Purpose};
use crate::sparse::SparseMatrix;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tower {
    Interaction,
    Social,
}

impl Tower {
    pub const BOTH: [Tower; 2] = [Tower::Interaction, Tower::Social];

    pub fn as_str(self) -> &'static str {
        match self {
            Tower::Interaction => "interaction",
            Tower::Social => "social",
        }
    }
}

/// The trainable parameters: interaction table `E^r` and social table `E^s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub interaction: Matrix,
    pub social: Matrix,
}

impl Embeddings {
    pub fn table(&self, tower: Tower) -> &Matrix {
        match tower {
            Tower::Interaction => &self.interaction,
            Tower::Social => &self.social,
        }
    }

    pub fn dim(&self) -> usize {
        self.interaction.cols()
    }

    pub fn round_to_f32(&mut self) {
        for t in [&mut self.interaction, &mut self.social] {
            t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

/// I.i.d. uniform entries in `[-scale, scale]`; the two tables use distinct
/// derived streams.
pub fn init_embeddings(m: usize, n: usize, d: usize, seed: u64, scale: f64) -> Embeddings {
    assert!(scale > 0.0, "init scale must be positive");
    let table = |which: u64| {
        let mut rng = stream(seed, Purpose::Init, &[which]);
        let data = (0..(m + n) * d).map(|_| rng.gen_range(-scale..=scale)).collect();
        Matrix::from_vec(m + n, d, data)
    };
    Embeddings { interaction: table(0), social: table(1) }
}

/// Social influence per directed social entry, aligned with
/// `graph.friends_of(q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceWeights {
    offsets: Vec<usize>,
    friends: Vec<u32>,
    /// `phi(i, q)` for friend `i` of user `q`.
    pub phi: Vec<f64>,
    /// Softmax of `phi` over each user's friends.
    pub alpha: Vec<f64>,
}

impl InfluenceWeights {
    /// `(friend, phi, alpha)` triples for user `q`.
    pub fn of(&self, q: usize) -> impl Iterator<Item = (u32, f64, f64)> + '_ {
        let span = self.offsets[q]..self.offsets[q + 1];
        self.friends[span.clone()].iter().zip(&self.phi[span.clone()]).zip(&self.alpha[span]).map(|((&f, &p), &a)| (f, p, a))
    }
}

fn sorted_intersection(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Square root of the Jaccard similarity of two users' item sets; 0 when
/// both are empty.
pub fn jaccard_phi(graph: &JointGraph, a: usize, b: usize) -> f64 {
    let (ia, ib) = (graph.items_of(a), graph.items_of(b));
    let inter = sorted_intersection(ia, ib);
    let union = ia.len() + ib.len() - inter;
    if union == 0 {
        0.0
    } else {
        (inter as f64 / union as f64).sqrt()
    }
}

pub fn jaccard_influence(graph: &JointGraph) -> InfluenceWeights {
    let m = graph.num_users();
    let mut offsets = Vec::with_capacity(m + 1);
    let mut friends = Vec::new();
    let mut phi = Vec::new();
    let mut alpha = Vec::new();
    offsets.push(0);
    for q in 0..m {
        let row: Vec<f64> = graph.friends_of(q).iter().map(|&i| jaccard_phi(graph, i as usize, q)).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|p| (p - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        friends.extend_from_slice(graph.friends_of(q));
        alpha.extend(exps.iter().map(|e| e / total));
        phi.extend(row);
        offsets.push(friends.len());
    }
    InfluenceWeights { offsets, friends, phi, alpha }
}

/// `D^{-1/2} A^R D^{-1/2}` over global ids.
///
/// Isolated nodes carry their own state through every layer, so their
/// layer mean is the ID embedding.
pub fn interaction_operator(graph: &JointGraph) -> SparseMatrix {
    let m = graph.num_users();
    let deg = |node: usize| -> f64 {
        if node < m {
            graph.items_of(node).len() as f64
        } else {
            graph.users_of(node - m).len() as f64
        }
    };
    let rows = (0..graph.num_nodes())
        .map(|q| {
            let dq = deg(q);
            let nbrs: Vec<usize> = if q < m {
                graph.items_of(q).iter().map(|&v| m + v as usize).collect()
            } else {
                graph.users_of(q - m).iter().map(|&u| u as usize).collect()
            };
            if nbrs.is_empty() {
                return vec![(q, 1.0)];
            }
            nbrs.into_iter().map(|i| (i, 1.0 / (dq.sqrt() * deg(i).sqrt()))).collect()
        })
        .collect();
    SparseMatrix::from_rows(graph.num_nodes(), rows)
}

/// Social aggregation operator over global ids; item rows are empty.
///
/// With influence weights each user row holds `alpha`; otherwise the
/// symmetric `1/sqrt(|N_i| |N_q|)` normalization on the social graph.
/// Users without friends keep their own state.
pub fn social_operator(graph: &JointGraph, influence: Option<&InfluenceWeights>) -> SparseMatrix {
    let m = graph.num_users();
    let mut rows: Vec<Vec<(usize, f64)>> = (0..m)
        .map(|q| match influence {
            _ if graph.friends_of(q).is_empty() => vec![(q, 1.0)],
            Some(w) => w.of(q).map(|(i, _, a)| (i as usize, a)).collect(),
            None => {
                let dq = graph.friends_of(q).len() as f64;
                graph.friends_of(q).iter().map(|&i| (i as usize, 1.0 / (dq * graph.friends_of(i as usize).len() as f64).sqrt())).collect()
            }
        })
        .collect();
    rows.resize(graph.num_nodes(), Vec::new());
    SparseMatrix::from_rows(graph.num_nodes(), rows)
}

/// Operators that map `(H^s, E^s)` to social-tower node states:
/// users keep `h^s`, items get the mean of their interactors' `h^s`, and
/// cold items (or every item without transfer) fall back to `e^s_j`.
pub fn item_social_operators(graph: &JointGraph, item_transfer: bool) -> (SparseMatrix, SparseMatrix) {
    let m = graph.num_users();
    let nn = graph.num_nodes();
    let mut pool = Vec::with_capacity(nn);
    let mut own = Vec::with_capacity(nn);
    for u in 0..m {
        pool.push(vec![(u, 1.0)]);
        own.push(Vec::new());
    }
    for j in 0..graph.num_items() {
        let users = graph.users_of(j);
        if item_transfer && !users.is_empty() {
            let w = 1.0 / users.len() as f64;
            pool.push(users.iter().map(|&u| (u as usize, w)).collect());
            own.push(Vec::new());
        } else {
            pool.push(Vec::new());
            own.push(vec![(m + j, 1.0)]);
        }
    }
    (SparseMatrix::from_rows(nn, pool), SparseMatrix::from_rows(nn, own))
}

/// All constant operators derived from the training graph.
#[derive(Debug, Clone)]
pub struct Operators {
    pub m: usize,
    pub n: usize,
    pub k1: usize,
    pub k2: usize,
    pub interaction: Arc<SparseMatrix>,
    pub social: Arc<SparseMatrix>,
    pub item_pool: Arc<SparseMatrix>,
    pub item_own: Arc<SparseMatrix>,
    pub influence: InfluenceWeights,
}

impl Operators {
    pub fn new(graph: &JointGraph, cfg: &TowerConfig) -> Self {
        let influence = jaccard_influence(graph);
        let social = social_operator(graph, cfg.social_influence.then_some(&influence));
        let (item_pool, item_own) = item_social_operators(graph, cfg.item_transfer);
        Operators {
            m: graph.num_users(),
            n: graph.num_items(),
            k1: cfg.k1,
            k2: cfg.k2,
            interaction: Arc::new(interaction_operator(graph)),
            social: Arc::new(social),
            item_pool: Arc::new(item_pool),
            item_own: Arc::new(item_own),
            influence,
        }
    }
}

/// Mean of `x, Wx, W²x, ..., W^k x`.
pub fn propagate(op: &SparseMatrix, x: &Matrix, layers: usize) -> Matrix {
    let mut acc = x.clone();
    let mut cur = x.clone();
    for _ in 0..layers {
        cur = op.matmul(&cur);
        acc.add_scaled(&cur, 1.0);
    }
    acc.scale(1.0 / (layers + 1) as f64);
    acc
}

/// GNN-encoded states of both towers, indexed by global node id.
#[derive(Debug, Clone)]
pub struct EncodedState {
    pub m: usize,
    /// Rows `0..m` are `h^r`, rows `m..` are `c^r`.
    pub interaction: Matrix,
    /// Rows `0..m` are `h^s`; item rows are unused by scoring.
    pub social: Matrix,
    /// Users `h^s`, items `h~^s`: the social tower's similarity states.
    pub social_nodes: Matrix,
}

impl EncodedState {
    pub fn h_r(&self, user: usize) -> &[f64] {
        self.interaction.row(user)
    }

    pub fn c_r(&self, item: usize) -> &[f64] {
        self.interaction.row(self.m + item)
    }

    pub fn h_s(&self, user: usize) -> &[f64] {
        self.social.row(user)
    }

    pub fn item_social(&self, item: usize) -> &[f64] {
        self.social_nodes.row(self.m + item)
    }

    /// The matrix whose rows serve as similarity states for `tower`.
    pub fn node_states(&self, tower: Tower) -> &Matrix {
        match tower {
            Tower::Interaction => &self.interaction,
            Tower::Social => &self.social_nodes,
        }
    }

    /// The user's own encoded state in `tower`.
    pub fn user_state(&self, tower: Tower, user: usize) -> &[f64] {
        match tower {
            Tower::Interaction => self.h_r(user),
            Tower::Social => self.h_s(user),
        }
    }
}

pub fn encode(ops: &Operators, emb: &Embeddings) -> EncodedState {
    let interaction = propagate(&ops.interaction, &emb.interaction, ops.k1);
    let social = propagate(&ops.social, &emb.social, ops.k2);
    let mut social_nodes = ops.item_pool.matmul(&social);
    social_nodes.add_scaled(&ops.item_own.matmul(&emb.social), 1.0);
    EncodedState { m: ops.m, interaction, social, social_nodes }
}

/// Social-tower representation of one item, computed directly.
pub fn item_social_repr(social: &Matrix, emb_social: &Matrix, graph: &JointGraph, item: usize, item_transfer: bool) -> Vec<f64> {
    let users = graph.users_of(item);
    if !item_transfer || users.is_empty() {
        return emb_social.row(graph.num_users() + item).to_vec();
    }
    let mut out = vec![0.0; social.cols()];
    for &u in users {
        crate::tensor::axpy(1.0 / users.len() as f64, social.row(u as usize), &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TowerScores {
    pub g_r: f64,
    pub g_s: f64,
    pub g: f64,
}

impl TowerScores {
    pub fn new(g_r: f64, g_s: f64, social_tower: bool) -> Self {
        TowerScores { g_r, g_s, g: if social_tower { g_r + g_s } else { g_r } }
    }

    pub fn tower(&self, tower: Tower) -> f64 {
        match tower {
            Tower::Interaction => self.g_r,
            Tower::Social => self.g_s,
        }
    }
}

/// Scores without explanation re-aggregation.
pub fn base_score(state: &EncodedState, emb: &Embeddings, user: usize, item: usize, social_tower: bool) -> TowerScores {
    let g_r = dot(state.h_r(user), state.c_r(item));
    let g_s = dot(state.h_s(user), emb.social.row(state.m + item));
    TowerScores::new(g_r, g_s, social_tower)
}
