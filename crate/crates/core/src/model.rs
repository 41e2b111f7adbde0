//! The trained model and its inference-time scorer.
//!
//! [`Scorer`] holds one forward pass of both towers and scores candidates
//! against a shared walk pool. It is the plain (non-recording) route; the
//! training forward pass in [`crate::training::forward`] records the same
//! computation on the autodiff tape, and tests check the two agree.

use std::sync::Arc;

use rand::Rng;

use crate::config::ModelConfig;
use crate::egopath::{rescale, sample_subset, sample_walks, EgoPath, SampledExplanation, SamplingMode, TowerContext, WalkPool};
use crate::graph::{JointGraph, NodeRef};
use crate::reaggregate::{hopwise_normalize, reaggregate, AttentionEntry, HopAttention};
use crate::tensor::{dot, Matrix};
use crate::towers::{base_score, encode, init_embeddings, Embeddings, EncodedState, Operators, Tower, TowerScores};

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    /// Training graph: all social edges, training interactions only.
    pub graph: Arc<JointGraph>,
    pub ops: Arc<Operators>,
    pub emb: Embeddings,
}

impl Model {
    pub fn new(config: ModelConfig, graph: Arc<JointGraph>, emb: Embeddings) -> Self {
        assert_eq!(emb.interaction.rows(), graph.num_nodes(), "embedding rows");
        assert_eq!(emb.dim(), config.tower.d, "embedding dim");
        let ops = Arc::new(Operators::new(&graph, &config.tower));
        Model { config, graph, ops, emb }
    }

    pub fn init(config: ModelConfig, graph: Arc<JointGraph>, seed: u64) -> Self {
        let mut emb = init_embeddings(graph.num_users(), graph.num_items(), config.tower.d, seed, config.tower.init_scale);
        if config.tower.precision == crate::config::Precision::F32 {
            emb.round_to_f32();
        }
        Model::new(config, graph, emb)
    }

    pub fn scorer(&self) -> Scorer<'_> {
        let state = encode(&self.ops, &self.emb);
        let m = self.graph.num_users();
        let contexts = [
            TowerContext::new(Tower::Interaction, m, state.node_states(Tower::Interaction)),
            TowerContext::new(Tower::Social, m, state.node_states(Tower::Social)),
        ];
        Scorer { model: self, state, contexts }
    }

    /// Sampling mode at inference: top-K when configured, else Bernoulli.
    pub fn eval_mode(&self) -> SamplingMode {
        match self.config.egopath.topk {
            Some(k) => SamplingMode::TopK(k),
            None => SamplingMode::Hard,
        }
    }
}

/// A walk pool with its distinct nodes resolved, so per-candidate cosines
/// are computed once per distinct node.
#[derive(Debug, Clone)]
pub struct PreparedPool {
    pub pool: WalkPool,
    pub distinct: Vec<NodeRef>,
    /// Per path, per slot: index into `distinct`.
    slot_index: Vec<Vec<Option<usize>>>,
}

impl PreparedPool {
    pub fn new(pool: WalkPool) -> Self {
        let mut distinct: Vec<NodeRef> = pool.paths.iter().flat_map(|p| p.nodes().map(|(_, n)| n)).collect();
        distinct.sort_unstable();
        distinct.dedup();
        let slot_index = pool
            .paths
            .iter()
            .map(|p| p.slots.iter().map(|s| s.map(|n| distinct.binary_search(&n).expect("node listed"))).collect())
            .collect();
        PreparedPool { pool, distinct, slot_index }
    }

    /// Per path, per slot: index into [`PreparedPool::distinct`].
    pub fn slot_index(&self) -> &[Vec<Option<usize>>] {
        &self.slot_index
    }

    pub fn paths(&self) -> &[EgoPath] {
        &self.pool.paths
    }

    pub fn len(&self) -> usize {
        self.pool.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.paths.is_empty()
    }
}

/// Per-candidate similarity view of one tower over a prepared pool.
#[derive(Debug, Clone)]
pub struct TowerView {
    pub tower: Tower,
    pub candidate: usize,
    /// Cosine of each distinct pool node with the candidate.
    pub cos: Vec<f64>,
    pub p_star: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TowerDetail {
    pub view: TowerView,
    pub explanation: SampledExplanation,
    pub attention: HopAttention,
    pub h_hat: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Explained {
    pub candidate: usize,
    pub scores: TowerScores,
    pub interaction: TowerDetail,
    pub social: TowerDetail,
}

impl Explained {
    pub fn detail(&self, tower: Tower) -> &TowerDetail {
        match tower {
            Tower::Interaction => &self.interaction,
            Tower::Social => &self.social,
        }
    }
}

pub struct Scorer<'a> {
    pub model: &'a Model,
    pub state: EncodedState,
    contexts: [TowerContext; 2],
}

impl<'a> Scorer<'a> {
    pub fn context(&self, tower: Tower) -> &TowerContext {
        &self.contexts[tower as usize]
    }

    fn k(&self) -> usize {
        self.model.config.egopath.k
    }

    /// Walk pool for `user`; empty when the user has no joint-graph neighbors.
    pub fn pool<R: Rng + ?Sized>(&self, user: usize, rng: &mut R) -> PreparedPool {
        let eg = &self.model.config.egopath;
        let pool = sample_walks(&self.model.graph, user, eg.k, eg.n_w, rng).unwrap_or_else(|_| WalkPool::empty(user as u32, eg.k));
        PreparedPool::new(pool)
    }

    pub fn base(&self, user: usize, item: usize) -> TowerScores {
        base_score(&self.state, &self.model.emb, user, item, self.model.config.tower.social_tower)
    }

    pub fn view(&self, tower: Tower, pp: &PreparedPool, candidate: usize) -> TowerView {
        let ctx = self.context(tower);
        let unit = ctx.unit();
        let cand = unit.row(self.state.m + candidate);
        let cos: Vec<f64> = pp.distinct.iter().map(|&n| dot(unit.row(ctx.global(n)), cand).clamp(-1.0, 1.0)).collect();
        let eg = &self.model.config.egopath;
        let divisor = if eg.k_minus_one_divisor { eg.k - 1 } else { eg.k } as f64;
        let p_star: Vec<f64> = pp
            .slot_index
            .iter()
            .map(|slots| {
                let s = slots.iter().flatten().map(|&i| cos[i]).sum::<f64>() / divisor;
                if eg.k_minus_one_divisor {
                    s.clamp(-1.0, 1.0)
                } else {
                    s
                }
            })
            .collect();
        let probs = p_star.iter().map(|&p| rescale(p)).collect();
        TowerView { tower, candidate, cos, p_star, probs }
    }

    /// Attention and re-aggregated user state for a given explanation.
    pub fn reaggregated(
        &self,
        user: usize,
        pp: &PreparedPool,
        view: &TowerView,
        explanation: &SampledExplanation,
    ) -> (HopAttention, Vec<f64>) {
        let k = self.k();
        let scale = 1.0 / (self.model.config.tower.d as f64).sqrt();
        let mut hops: Vec<Vec<AttentionEntry>> = vec![Vec::new(); k];
        for &t in &explanation.kept {
            let weight = explanation.draws[t];
            if weight <= 0.0 {
                continue;
            }
            for (slot, idx) in pp.slot_index[t].iter().enumerate() {
                if let Some(i) = *idx {
                    hops[slot].push(AttentionEntry { path: t, node: pp.distinct[i], raw: view.cos[i] * scale, weight, alpha: 0.0 });
                }
            }
        }
        let attention = hopwise_normalize(hops);
        let table = self.model.emb.table(view.tower);
        let h = self.state.user_state(view.tower, user);
        let h_hat = reaggregate(h, &attention, table, self.state.m, self.model.config.egopath.renorm_empty);
        (attention, h_hat)
    }

    fn candidate_repr(&self, tower: Tower, item: usize) -> &[f64] {
        match tower {
            Tower::Interaction => self.state.c_r(item),
            Tower::Social => self.model.emb.social.row(self.state.m + item),
        }
    }

    fn detail<R: Rng + ?Sized>(
        &self,
        tower: Tower,
        user: usize,
        pp: &PreparedPool,
        candidate: usize,
        mode: SamplingMode,
        rng: &mut R,
    ) -> TowerDetail {
        let view = self.view(tower, pp, candidate);
        let explanation = sample_subset(tower, candidate, view.probs.clone(), mode, rng);
        let (attention, h_hat) = self.reaggregated(user, pp, &view, &explanation);
        TowerDetail { view, explanation, attention, h_hat }
    }

    /// Samples explanations in both towers and scores the candidate.
    /// The interaction tower draws first, then the social tower, from `rng`.
    pub fn explain<R: Rng + ?Sized>(&self, user: usize, pp: &PreparedPool, candidate: usize, mode: SamplingMode, rng: &mut R) -> Explained {
        let interaction = self.detail(Tower::Interaction, user, pp, candidate, mode, rng);
        let social = self.detail(Tower::Social, user, pp, candidate, mode, rng);
        let scores = self.scores_from(user, candidate, &interaction.h_hat, &social.h_hat);
        Explained { candidate, scores, interaction, social }
    }

    fn scores_from(&self, user: usize, candidate: usize, h_hat_r: &[f64], h_hat_s: &[f64]) -> TowerScores {
        if !self.model.config.egopath.reaggregation {
            return self.base(user, candidate);
        }
        let g_r = dot(h_hat_r, self.candidate_repr(Tower::Interaction, candidate));
        let g_s = dot(h_hat_s, self.candidate_repr(Tower::Social, candidate));
        TowerScores::new(g_r, g_s, self.model.config.tower.social_tower)
    }

    /// Score under explicitly given explanations (e.g. complements).
    pub fn rescore(
        &self,
        user: usize,
        pp: &PreparedPool,
        candidate: usize,
        expl_r: &SampledExplanation,
        expl_s: &SampledExplanation,
    ) -> TowerScores {
        if !self.model.config.egopath.reaggregation {
            return self.base(user, candidate);
        }
        let (_, h_r) = self.reaggregated(user, pp, &self.view(Tower::Interaction, pp, candidate), expl_r);
        let (_, h_s) = self.reaggregated(user, pp, &self.view(Tower::Social, pp, candidate), expl_s);
        self.scores_from(user, candidate, &h_r, &h_s)
    }

    /// Fused score only; skips explanation work when re-aggregation is off.
    pub fn score<R: Rng + ?Sized>(&self, user: usize, pp: &PreparedPool, candidate: usize, mode: SamplingMode, rng: &mut R) -> f64 {
        if !self.model.config.egopath.reaggregation {
            return self.base(user, candidate).g;
        }
        self.explain(user, pp, candidate, mode, rng).scores.g
    }

    /// Node states, for inspection.
    pub fn node_states(&self, tower: Tower) -> &Matrix {
        self.state.node_states(tower)
    }
}
