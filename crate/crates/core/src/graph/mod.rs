//! User–item interaction graph and user–user social graph.
//!
//! Nodes live in one global index space: users take `0..m`, items take
//! `m..m+n`. [`NodeRef`] is the typed view; ordering a `NodeRef` list matches
//! ordering the corresponding global ids.

mod cache;
mod io;
mod preprocess;
mod split;

pub use cache::{read_cache, write_cache, PreparedData};
pub use io::{load_dataset, RawDataset};
pub use preprocess::{preprocess, Preprocessed};
pub use split::{sample_negatives, split, DatasetSplit, NegativeBatch};

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeRef {
    User(u32),
    Item(u32),
}

impl NodeRef {
    pub fn is_user(self) -> bool {
        matches!(self, NodeRef::User(_))
    }

    pub fn is_item(self) -> bool {
        matches!(self, NodeRef::Item(_))
    }

    pub fn index(self) -> usize {
        match self {
            NodeRef::User(i) | NodeRef::Item(i) => i as usize,
        }
    }

    pub fn kind_str(self) -> &'static str {
        match self {
            NodeRef::User(_) => "user",
            NodeRef::Item(_) => "item",
        }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::User(i) => write!(f, "u{i}"),
            NodeRef::Item(i) => write!(f, "v{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Interaction,
    Social,
    Joint,
}

/// Compressed sparse rows over `u32` column indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub(crate) struct Csr {
    pub(crate) offsets: Vec<u32>,
    pub(crate) indices: Vec<u32>,
}

impl Csr {
    /// Builds rows from `(row, col)` pairs; duplicates are removed and each
    /// row is sorted ascending.
    pub(crate) fn from_pairs(rows: usize, pairs: &mut Vec<(u32, u32)>) -> Self {
        pairs.sort_unstable();
        pairs.dedup();
        let mut offsets = vec![0u32; rows + 1];
        for &(r, _) in pairs.iter() {
            offsets[r as usize + 1] += 1;
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        let indices = pairs.iter().map(|&(_, c)| c).collect();
        Csr { offsets, indices }
    }

    pub(crate) fn row(&self, r: usize) -> &[u32] {
        &self.indices[self.offsets[r] as usize..self.offsets[r + 1] as usize]
    }
}

/// Immutable joint graph: interactions `R` (both directions) and the
/// symmetric social matrix `S`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointGraph {
    m: usize,
    n: usize,
    user_items: Csr,
    item_users: Csr,
    social: Csr,
}

impl JointGraph {
    /// Builds the graph from interaction `(user, item)` and social
    /// `(user, user)` pairs. Social pairs are symmetrized, self-loops are
    /// dropped, and duplicates collapse.
    ///
    /// Panics if an index is out of range.
    pub fn from_edges(m: usize, n: usize, interactions: &[(u32, u32)], social: &[(u32, u32)]) -> Self {
        let mut ui: Vec<(u32, u32)> = interactions.to_vec();
        let mut iu: Vec<(u32, u32)> = interactions.iter().map(|&(u, v)| (v, u)).collect();
        for &(u, v) in interactions {
            assert!((u as usize) < m && (v as usize) < n, "interaction ({u},{v}) out of range");
        }
        let mut ss = Vec::with_capacity(social.len() * 2);
        for &(a, b) in social {
            assert!((a as usize) < m && (b as usize) < m, "social ({a},{b}) out of range");
            if a != b {
                ss.push((a, b));
                ss.push((b, a));
            }
        }
        JointGraph {
            m,
            n,
            user_items: Csr::from_pairs(m, &mut ui),
            item_users: Csr::from_pairs(n, &mut iu),
            social: Csr::from_pairs(m, &mut ss),
        }
    }

    pub(crate) fn from_csr(m: usize, n: usize, user_items: Csr, social: Csr) -> Self {
        let mut iu = Vec::with_capacity(user_items.indices.len());
        for u in 0..m {
            for &v in user_items.row(u) {
                iu.push((v, u as u32));
            }
        }
        JointGraph { m, n, item_users: Csr::from_pairs(n, &mut iu), user_items, social }
    }

    /// Same nodes and social edges, interactions replaced by `interactions`.
    pub fn with_interactions(&self, interactions: &[(u32, u32)]) -> Self {
        let mut ui = interactions.to_vec();
        let user_items = Csr::from_pairs(self.m, &mut ui);
        JointGraph::from_csr(self.m, self.n, user_items, self.social.clone())
    }

    pub fn num_users(&self) -> usize {
        self.m
    }

    pub fn num_items(&self) -> usize {
        self.n
    }

    pub fn num_nodes(&self) -> usize {
        self.m + self.n
    }

    pub fn num_interactions(&self) -> usize {
        self.user_items.indices.len()
    }

    /// Undirected social edge count.
    pub fn num_social(&self) -> usize {
        self.social.indices.len() / 2
    }

    pub fn items_of(&self, user: usize) -> &[u32] {
        self.user_items.row(user)
    }

    pub fn users_of(&self, item: usize) -> &[u32] {
        self.item_users.row(item)
    }

    pub fn friends_of(&self, user: usize) -> &[u32] {
        self.social.row(user)
    }

    pub fn has_interaction(&self, user: usize, item: usize) -> bool {
        self.items_of(user).binary_search(&(item as u32)).is_ok()
    }

    pub fn are_friends(&self, a: usize, b: usize) -> bool {
        self.friends_of(a).binary_search(&(b as u32)).is_ok()
    }

    pub fn global(&self, node: NodeRef) -> usize {
        match node {
            NodeRef::User(u) => u as usize,
            NodeRef::Item(v) => self.m + v as usize,
        }
    }

    pub fn node(&self, global: usize) -> NodeRef {
        if global < self.m {
            NodeRef::User(global as u32)
        } else {
            NodeRef::Item((global - self.m) as u32)
        }
    }

    pub fn contains(&self, node: NodeRef) -> bool {
        match node {
            NodeRef::User(u) => (u as usize) < self.m,
            NodeRef::Item(v) => (v as usize) < self.n,
        }
    }

    /// Degree on the joint graph `A` (social + interaction for users).
    pub fn joint_degree(&self, node: NodeRef) -> usize {
        match node {
            NodeRef::User(u) => self.friends_of(u as usize).len() + self.items_of(u as usize).len(),
            NodeRef::Item(v) => self.users_of(v as usize).len(),
        }
    }

    /// The `i`-th joint-graph neighbor in ascending order, without allocating.
    pub fn joint_neighbor(&self, node: NodeRef, i: usize) -> NodeRef {
        match node {
            NodeRef::User(u) => {
                let friends = self.friends_of(u as usize);
                if i < friends.len() {
                    NodeRef::User(friends[i])
                } else {
                    NodeRef::Item(self.items_of(u as usize)[i - friends.len()])
                }
            }
            NodeRef::Item(v) => NodeRef::User(self.users_of(v as usize)[i]),
        }
    }

    /// Whether `a` and `b` are adjacent on the joint graph.
    pub fn adjacent(&self, a: NodeRef, b: NodeRef) -> bool {
        match (a, b) {
            (NodeRef::User(x), NodeRef::User(y)) => self.are_friends(x as usize, y as usize),
            (NodeRef::User(u), NodeRef::Item(v)) | (NodeRef::Item(v), NodeRef::User(u)) => self.has_interaction(u as usize, v as usize),
            (NodeRef::Item(_), NodeRef::Item(_)) => false,
        }
    }

    /// Sorted neighbor list under `relation`.
    pub fn neighbors(&self, node: NodeRef, relation: Relation) -> Vec<NodeRef> {
        match (node, relation) {
            (NodeRef::User(u), Relation::Interaction) => self.items_of(u as usize).iter().map(|&v| NodeRef::Item(v)).collect(),
            (NodeRef::User(u), Relation::Social) => self.friends_of(u as usize).iter().map(|&f| NodeRef::User(f)).collect(),
            (NodeRef::User(_), Relation::Joint) => (0..self.joint_degree(node)).map(|i| self.joint_neighbor(node, i)).collect(),
            (NodeRef::Item(_), Relation::Social) => Vec::new(),
            (NodeRef::Item(v), Relation::Interaction | Relation::Joint) => {
                self.users_of(v as usize).iter().map(|&u| NodeRef::User(u)).collect()
            }
        }
    }

    /// Interaction edges as sorted `(user, item)` pairs.
    pub fn interaction_edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.num_interactions());
        for u in 0..self.m {
            out.extend(self.items_of(u).iter().map(|&v| (u as u32, v)));
        }
        out
    }

    /// Undirected social edges as sorted `(a, b)` pairs with `a < b`.
    pub fn social_edges(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.num_social());
        for a in 0..self.m {
            out.extend(self.friends_of(a).iter().filter(|&&b| b > a as u32).map(|&b| (a as u32, b)));
        }
        out
    }

    pub(crate) fn user_items_csr(&self) -> &Csr {
        &self.user_items
    }

    pub(crate) fn social_csr(&self) -> &Csr {
        &self.social
    }

    /// Checks every structural invariant; used by tests and cache loading.
    pub fn validate(&self) -> Result<(), String> {
        let sorted_unique = |row: &[u32]| row.windows(2).all(|w| w[0] < w[1]);
        for u in 0..self.m {
            let items = self.items_of(u);
            if !sorted_unique(items) || items.iter().any(|&v| v as usize >= self.n) {
                return Err(format!("user {u}: bad interaction row"));
            }
            let friends = self.friends_of(u);
            if !sorted_unique(friends) || friends.iter().any(|&f| f as usize >= self.m) {
                return Err(format!("user {u}: bad social row"));
            }
            if friends.contains(&(u as u32)) {
                return Err(format!("user {u}: self-loop"));
            }
            for &f in friends {
                if !self.are_friends(f as usize, u) {
                    return Err(format!("social edge ({u},{f}) not symmetric"));
                }
            }
            for &v in items {
                if self.users_of(v as usize).binary_search(&(u as u32)).is_err() {
                    return Err(format!("interaction ({u},{v}) missing reverse"));
                }
            }
        }
        let total: usize = (0..self.n).map(|v| self.users_of(v).len()).sum();
        if total != self.num_interactions() {
            return Err("item degrees do not match interaction count".into());
        }
        Ok(())
    }
}

/// The three-user, two-item graph used throughout the tests:
/// interactions u0–v0, u1–v0, u1–v1, u2–v1; social u0–u1, u1–u2.
pub fn toy_a() -> JointGraph {
    JointGraph::from_edges(3, 2, &[(0, 0), (1, 0), (1, 1), (2, 1)], &[(0, 1), (1, 2)])
}
