//! Multi-task objective, gradients and the optimization loop.

pub mod adam;
pub mod checkpoint;
pub mod forward;
pub mod loss;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{EgoPathConfig, Precision, RunConfig};
use crate::egopath::{sample_walks, SamplingMode, WalkPool};
use crate::error::{Result, SorexError};
use crate::evaluation::{evaluate_tasks, validation_tasks, EvalKey};
use crate::graph::{sample_negatives, JointGraph, PreparedData};
use crate::model::{Model, PreparedPool};
use crate::rng::{stream, Purpose};
use crate::tensor::Matrix;

use adam::{AdamParams, AdamState};
use checkpoint::Checkpoint;
use forward::{forward, BatchInput, PairSpec};
use loss::LossBreakdown;

/// Concrete temperature for `epoch`, annealed linearly from `tau_start`
/// to `tau_end` over `epochs`.
pub fn tau_at(eg: &EgoPathConfig, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return eg.tau_start;
    }
    let f = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    eg.tau_start + (eg.tau_end - eg.tau_start) * f
}

/// One `(user, friend, non-friend)` triple per directed social edge, in
/// shuffled order. Users befriending everyone contribute nothing.
pub fn friend_triples(graph: &JointGraph, seed: u64, epoch: u64) -> Vec<(usize, usize, usize)> {
    let m = graph.num_users();
    let mut rng = stream(seed, Purpose::SocialPairs, &[epoch]);
    let mut edges: Vec<(usize, usize)> = (0..m).flat_map(|u| graph.friends_of(u).iter().map(move |&f| (u, f as usize))).collect();
    edges.shuffle(&mut rng);
    edges
        .into_iter()
        .filter(|&(u, _)| graph.friends_of(u).len() + 1 < m)
        .map(|(u, f)| loop {
            let n = rng.gen_range(0..m);
            if n != u && !graph.are_friends(u, n) {
                break (u, f, n);
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_hr: Option<f64>,
    pub val_ndcg: Option<f64>,
    pub seconds: f64,
}

impl EpochLog {
    pub const TSV_HEADER: &'static str = "epoch\tloss_total\tloss_main\tloss_aux\tval_hr10\tval_ndcg10\tseconds";

    pub fn tsv_line(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(|| "NA".to_owned(), |v| format!("{v:.6}"));
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{:.3}",
            self.epoch,
            self.loss.total,
            self.loss.main(),
            self.loss.aux,
            opt(self.val_hr),
            opt(self.val_ndcg),
            self.seconds
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation NDCG (the last
    /// epoch when there is no validation data).
    pub model: Model,
    pub optimizer: AdamState,
    pub log: Vec<EpochLog>,
    /// 1-based; 0 means the initial parameters were kept.
    pub best_epoch: usize,
    pub best_val_ndcg: Option<f64>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, digest: [u8; 32]) -> Checkpoint {
        Checkpoint {
            digest,
            m: self.model.graph.num_users(),
            n: self.model.graph.num_items(),
            emb: self.model.emb.clone(),
            optimizer: self.optimizer.clone(),
        }
    }
}

fn pool_for(graph: &JointGraph, eg: &EgoPathConfig, user: usize, rng: &mut impl Rng) -> PreparedPool {
    let pool = sample_walks(graph, user, eg.k, eg.n_w, rng).unwrap_or_else(|_| WalkPool::empty(user as u32, eg.k));
    PreparedPool::new(pool)
}

/// One optimizer step over `chunk` of training edges. Returns the batch
/// loss; the model is left untouched on error.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    cfg: &RunConfig,
    model: &mut Model,
    adam: &mut AdamState,
    chunk: &[(u32, u32)],
    friends: &[(usize, usize, usize)],
    mode: SamplingMode,
    epoch: u64,
    batch: u64,
) -> Result<LossBreakdown> {
    let graph = model.graph.clone();
    let eg = &model.config.egopath;
    let mut neg_rng = stream(cfg.seed, Purpose::Negatives, &[epoch, batch]);
    let mut pool_of: HashMap<u32, usize> = HashMap::new();
    let mut pools = Vec::new();
    let mut pairs = Vec::new();
    let mut triples = Vec::new();
    for &(u, v) in chunk {
        let pool = *pool_of.entry(u).or_insert_with(|| {
            pools.push(pool_for(&graph, eg, u as usize, &mut stream(cfg.seed, Purpose::Walks, &[epoch, batch, u as u64])));
            pools.len() - 1
        });
        // A user who has interacted with every item yields no BPR triple.
        let negatives = match sample_negatives(&graph, (u, v), cfg.train.train_negatives, &mut neg_rng) {
            Ok(batch) => batch.negatives,
            Err(SorexError::NoNegatives { .. }) => continue,
            Err(e) => return Err(e),
        };
        pairs.push(PairSpec { user: u as usize, item: v as usize, pool });
        let pos = pairs.len() - 1;
        for neg in negatives {
            pairs.push(PairSpec { user: u as usize, item: neg as usize, pool });
            triples.push((pos, pairs.len() - 1));
        }
    }
    let noise = if matches!(mode, SamplingMode::TopK(_)) {
        Vec::new()
    } else {
        let mut rng = stream(cfg.seed, Purpose::Draws, &[epoch, batch]);
        pairs
            .iter()
            .map(|p| {
                let n = pools[p.pool].len();
                [(0..n).map(|_| rng.gen::<f64>()).collect(), (0..n).map(|_| rng.gen::<f64>()).collect()]
            })
            .collect()
    };
    let input = BatchInput { pools: &pools, pairs, noise, mode, triples, friends: friends.to_vec() };
    let fp = forward(model, cfg.train.gamma, cfg.train.lambda, &input);
    if !fp.breakdown.is_finite() {
        return Err(SorexError::NonFinite(format!("loss {:?} at epoch {} batch {}", fp.breakdown, epoch + 1, batch)));
    }
    let mut grads = fp.tape.backward(fp.total)?;
    let shape = model.emb.interaction.shape();
    let gr = grads.take(fp.er).unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
    let gs = grads.take(fp.es).unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
    let hp = AdamParams { lr: cfg.train.lr, beta1: cfg.train.beta1, beta2: cfg.train.beta2, eps: cfg.train.eps };
    adam.step(&mut model.emb, [&gr, &gs], &hp)?;
    if model.config.tower.precision == Precision::F32 {
        model.emb.round_to_f32();
    }
    Ok(fp.breakdown)
}

/// Runs the full loop: shuffled mini-batches with fresh negatives, pools
/// and draws, per-epoch validation, early stopping on validation NDCG.
pub fn train(cfg: &RunConfig, data: &PreparedData, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let graph = Arc::new(data.train_graph());
    let mut model = Model::init(cfg.model_config(), graph.clone(), cfg.seed);
    let mut adam = AdamState::new(graph.num_nodes(), cfg.model.d);
    let mut best = (model.emb.clone(), adam.clone());
    let mut best_epoch = 0;
    let mut best_ndcg: Option<f64> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut aborted = None;
    let epochs = cfg.train.epochs;
    let has_validation = !data.split.valid.is_empty();

    'epochs: for epoch in 0..epochs {
        let start = Instant::now();
        let e = epoch as u64;
        let mut edges = data.split.train.clone();
        edges.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, &[e]));
        let friends = if cfg.train.gamma > 0.0 { friend_triples(&graph, cfg.seed, e) } else { Vec::new() };
        let mode = match cfg.egopath.topk {
            Some(k) => SamplingMode::TopK(k),
            None => SamplingMode::Relaxed { tau: tau_at(&cfg.egopath, epoch, epochs) },
        };
        let batches = edges.len().div_ceil(cfg.train.batch_size).max(1);
        let mut total = LossBreakdown::default();
        for b in 0..batches {
            let chunk = &edges[(b * cfg.train.batch_size).min(edges.len())..((b + 1) * cfg.train.batch_size).min(edges.len())];
            let fr = &friends[b * friends.len() / batches..(b + 1) * friends.len() / batches];
            match train_batch(cfg, &mut model, &mut adam, chunk, fr, mode, e, b as u64) {
                Ok(l) => total.add(&l),
                Err(err @ SorexError::NonFinite(_)) => {
                    aborted = Some(err.to_string());
                    break 'epochs;
                }
                Err(err) => return Err(err),
            }
        }

        let (mut val_hr, mut val_ndcg) = (None, None);
        if has_validation {
            let tasks = validation_tasks(&graph, &data.split.valid, cfg.train.val_negatives, cfg.seed, e)?;
            let key = EvalKey { seed: cfg.seed, salt: e + 1 };
            let report = evaluate_tasks(&model, &tasks, cfg.train.val_passes.max(1), cfg.eval.top_k, key, cfg.threads)?;
            val_hr = Some(report.hr);
            val_ndcg = Some(report.ndcg);
        }
        let entry = EpochLog { epoch: epoch + 1, loss: total, val_hr, val_ndcg, seconds: start.elapsed().as_secs_f64() };
        on_epoch(&entry);
        log.push(entry);

        match val_ndcg {
            Some(v) if best_ndcg.is_some_and(|b| v <= b) => since_best += 1,
            _ => {
                best = (model.emb.clone(), adam.clone());
                best_epoch = epoch + 1;
                best_ndcg = val_ndcg;
                since_best = 0;
            }
        }
        if has_validation && since_best >= cfg.train.patience {
            break;
        }
    }

    model.emb = best.0;
    Ok(TrainOutcome { model, optimizer: best.1, log, best_epoch, best_val_ndcg: best_ndcg, aborted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{split, toy_a};

    #[test]
    fn tau_schedule() {
        let eg = EgoPathConfig::default();
        assert_eq!(tau_at(&eg, 0, 8), 1.0);
        assert!((tau_at(&eg, 7, 8) - 0.3).abs() < 1e-12);
        assert_eq!(tau_at(&eg, 0, 1), 1.0);
    }

    #[test]
    fn friend_triples_are_valid() {
        let g = JointGraph::from_edges(5, 1, &[], &[(0, 1), (1, 2), (2, 3)]);
        let t = friend_triples(&g, 3, 0);
        assert_eq!(t.len(), 6);
        for (u, p, n) in t {
            assert!(g.are_friends(u, p));
            assert!(n != u && !g.are_friends(u, n));
        }
        let full = JointGraph::from_edges(2, 1, &[], &[(0, 1)]);
        assert!(friend_triples(&full, 3, 0).is_empty());
    }

    fn toy_data() -> PreparedData {
        let inter: Vec<(u32, u32)> = (0..6u32).flat_map(|u| [(u, u % 4), (u, (u + 1) % 4), (u, (u + 2) % 4)]).collect();
        let social = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)];
        let graph = JointGraph::from_edges(6, 4, &inter, &social);
        let split = split(&graph, (0.8, 0.1, 0.1), 5).unwrap();
        PreparedData { graph, split, user_ids: (0..6).map(|i| i.to_string()).collect(), item_ids: (0..4).map(|i| i.to_string()).collect() }
    }

    fn toy_cfg() -> RunConfig {
        let mut cfg = RunConfig { seed: 9, ..RunConfig::default() };
        cfg.model.d = 4;
        cfg.egopath.n_w = 6;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 4;
        cfg.train.train_negatives = 2;
        cfg.train.val_negatives = 3;
        cfg
    }

    #[test]
    fn seeded_runs_give_identical_checkpoints() {
        let data = toy_data();
        let cfg = toy_cfg();
        let a = train(&cfg, &data, |_| {}).unwrap();
        let b = train(&cfg, &data, |_| {}).unwrap();
        assert_eq!(a.checkpoint([0; 32]).to_bytes(), b.checkpoint([0; 32]).to_bytes());
        assert_eq!(a.log.len(), 2);
        assert!(a.aborted.is_none());
    }

    #[test]
    fn zero_gamma_equals_no_friend_triples() {
        let data = toy_data();
        let mut cfg = toy_cfg();
        cfg.train.gamma = 0.0;
        let a = train(&cfg, &data, |_| {}).unwrap();
        assert!(a.log.iter().all(|l| l.loss.aux == 0.0));
    }

    #[test]
    fn training_reduces_loss_on_toy_graph() {
        let g = toy_a();
        let split = crate::graph::DatasetSplit { train: g.interaction_edges(), valid: vec![], test: vec![], seed: 0 };
        let data =
            PreparedData { graph: g, split, user_ids: vec!["a".into(), "b".into(), "c".into()], item_ids: vec!["x".into(), "y".into()] };
        let mut cfg = toy_cfg();
        cfg.train.epochs = 30;
        cfg.train.lr = 0.05;
        cfg.train.train_negatives = 1;
        let out = train(&cfg, &data, |_| {}).unwrap();
        let first = out.log.first().unwrap().loss.main();
        let last = out.log.last().unwrap().loss.main();
        assert!(last < first, "{first} -> {last}");
        assert_eq!(out.best_epoch, 30);
    }

    #[test]
    fn log_line_format() {
        let l = EpochLog {
            epoch: 3,
            loss: LossBreakdown { total: 1.5, main_r: 0.5, aux: 0.25, ..Default::default() },
            val_hr: Some(0.2),
            val_ndcg: None,
            seconds: 1.0,
        };
        assert_eq!(l.tsv_line().split('\t').count(), EpochLog::TSV_HEADER.split('\t').count());
        assert!(l.tsv_line().starts_with("3\t1.500000\t0.500000\t0.250000\t0.200000\tNA"));
    }
}
