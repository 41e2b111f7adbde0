//! Training forward pass recorded on the autodiff tape.
//!
//! A batch is a list of scored `(user, item)` pairs, each tied to a walk
//! pool and to fixed per-path uniform noise for both towers. BPR triples
//! reference pairs by index, so positives and negatives of one user share
//! that user's pool.

use crate::autodiff::{Tape, Var};
use crate::egopath::{SamplingMode, PROB_EPS};
use crate::graph::NodeRef;
use crate::model::{Model, PreparedPool};
use crate::sparse::SparseMatrix;
use crate::towers::{Tower, TowerScores};
use crate::training::loss::LossBreakdown;

use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSpec {
    pub user: usize,
    pub item: usize,
    /// Index into [`BatchInput::pools`].
    pub pool: usize,
}

#[derive(Debug, Clone)]
pub struct BatchInput<'a> {
    pub pools: &'a [PreparedPool],
    pub pairs: Vec<PairSpec>,
    /// Per pair, uniform noise for the interaction then the social tower,
    /// one value per pool path. Unused in top-K mode.
    pub noise: Vec<[Vec<f64>; 2]>,
    pub mode: SamplingMode,
    /// `(positive pair, negative pair)` indices.
    pub triples: Vec<(usize, usize)>,
    /// `(user, friend, non-friend)`.
    pub friends: Vec<(usize, usize, usize)>,
}

pub struct ForwardPass {
    pub tape: Tape,
    pub er: Var,
    pub es: Var,
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub scores: Vec<TowerScores>,
}

fn propagate(tape: &mut Tape, op: &Arc<SparseMatrix>, x: Var, layers: usize) -> Var {
    let w = 1.0 / (layers + 1) as f64;
    let mut cur = x;
    let mut terms = vec![(x, w)];
    for _ in 0..layers {
        cur = tape.spmm(op.clone(), cur);
        terms.push((cur, w));
    }
    tape.lincomb(terms)
}

fn global(m: usize, node: NodeRef) -> usize {
    match node {
        NodeRef::User(u) => u as usize,
        NodeRef::Item(v) => m + v as usize,
    }
}

struct TowerInputs {
    tower: Tower,
    /// Similarity states of every node.
    states: Var,
    /// Encoded user states that re-aggregation starts from.
    users: Var,
    /// ID embedding table for re-aggregated path nodes.
    table: Var,
    /// Candidate representation table (item rows).
    candidates: Var,
}

/// Explained scores for every pair in one tower, as a column.
fn explained_tower(tape: &mut Tape, model: &Model, input: &BatchInput, t: &TowerInputs) -> Var {
    let m = model.graph.num_users();
    let eg = &model.config.egopath;
    let k = eg.k;
    let d = model.config.tower.d;
    let pairs = &input.pairs;

    let unit = tape.row_normalize(t.states);
    let mut ia = Vec::new();
    let mut ib = Vec::new();
    let mut cos_base = Vec::with_capacity(pairs.len());
    for p in pairs {
        cos_base.push(ia.len());
        for &node in &input.pools[p.pool].distinct {
            ia.push(global(m, node));
            ib.push(m + p.item);
        }
    }
    let n_cos = ia.len();
    let cos = tape.gather_dot(unit, ia, unit, ib);

    let divisor = if eg.k_minus_one_divisor { k - 1 } else { k } as f64;
    let mut path_rows = Vec::new();
    let mut path_base = Vec::with_capacity(pairs.len());
    for (pi, p) in pairs.iter().enumerate() {
        path_base.push(path_rows.len());
        for slots in input.pools[p.pool].slot_index() {
            path_rows.push(slots.iter().flatten().map(|&i| (cos_base[pi] + i, 1.0 / divisor)).collect());
        }
    }
    let n_paths = path_rows.len();
    let similarity = Arc::new(SparseMatrix::from_rows(n_cos, path_rows));
    let p_star = tape.spmm(similarity, cos);
    let probs = tape.affine(p_star, 0.5, 0.5);

    let tower_slot = t.tower as usize;
    let (log_weights, kept) = match input.mode {
        SamplingMode::Relaxed { tau } => {
            let noise: Vec<f64> = input.noise.iter().flat_map(|n| n[tower_slot].iter().copied()).collect();
            assert_eq!(noise.len(), n_paths, "noise per path");
            (Some(tape.log_concrete(probs, &noise, tau, PROB_EPS)), vec![true; n_paths])
        }
        SamplingMode::Hard => {
            let pv = tape.value(probs).data();
            let noise: Vec<f64> = input.noise.iter().flat_map(|n| n[tower_slot].iter().copied()).collect();
            assert_eq!(noise.len(), n_paths, "noise per path");
            (None, pv.iter().zip(&noise).map(|(&p, &u)| u < p).collect())
        }
        SamplingMode::TopK(top) => {
            let pv = tape.value(probs).data();
            let mut kept = vec![false; n_paths];
            for (pi, p) in pairs.iter().enumerate() {
                let base = path_base[pi];
                let len = input.pools[p.pool].len();
                let mut order: Vec<usize> = (0..len).collect();
                order.sort_by(|&a, &b| pv[base + b].total_cmp(&pv[base + a]).then(a.cmp(&b)));
                order.into_iter().take(top).for_each(|t| kept[base + t] = true);
            }
            (None, kept)
        }
    };

    let mut cos_idx = Vec::new();
    let mut path_idx = Vec::new();
    let mut node_rows = Vec::new();
    let mut entry_pair = Vec::new();
    let mut offsets = vec![0];
    let mut scale = Vec::with_capacity(pairs.len());
    for (pi, p) in pairs.iter().enumerate() {
        let pp = &input.pools[p.pool];
        let mut nonempty = 0;
        for hop in 0..k {
            for (t, slots) in pp.slot_index().iter().enumerate() {
                let g = path_base[pi] + t;
                if !kept[g] {
                    continue;
                }
                if let Some(i) = slots[hop] {
                    cos_idx.push(cos_base[pi] + i);
                    path_idx.push(g);
                    node_rows.push(global(m, pp.distinct[i]));
                    entry_pair.push(pi);
                }
            }
            if *offsets.last().expect("nonempty") != cos_idx.len() {
                nonempty += 1;
            }
            offsets.push(cos_idx.len());
        }
        let denom = if eg.renorm_empty { 1 + nonempty } else { k + 1 };
        scale.push(1.0 / denom as f64);
    }

    let raw = tape.gather(cos, cos_idx);
    let raw = tape.affine(raw, 1.0 / (d as f64).sqrt(), 0.0);
    let logits = match log_weights {
        Some(lw) => {
            let lw = tape.gather(lw, path_idx);
            tape.add(raw, lw)
        }
        None => raw,
    };
    let alpha = tape.segment_softmax(logits, offsets);
    let agg = tape.weighted_row_sum(alpha, t.table, node_rows, entry_pair, pairs.len());
    let h = tape.gather(t.users, pairs.iter().map(|p| p.user).collect());
    let sum = tape.add(h, agg);
    let h_hat = tape.row_scale(sum, scale);
    tape.gather_dot(h_hat, (0..pairs.len()).collect(), t.candidates, pairs.iter().map(|p| m + p.item).collect())
}

fn bpr_sum(tape: &mut Tape, scores: Var, triples: &[(usize, usize)]) -> Var {
    let pos = tape.gather(scores, triples.iter().map(|t| t.0).collect());
    let neg = tape.gather(scores, triples.iter().map(|t| t.1).collect());
    let margin = tape.sub(pos, neg);
    let l = tape.softplus_neg(margin);
    tape.sum(l)
}

/// Records the full multi-task loss for one batch.
pub fn forward(model: &Model, gamma: f64, lambda: f64, input: &BatchInput) -> ForwardPass {
    if !matches!(input.mode, SamplingMode::TopK(_)) {
        assert_eq!(input.noise.len(), input.pairs.len(), "noise per pair");
    }
    let m = model.graph.num_users();
    let social_tower = model.config.tower.social_tower;
    let ops = &model.ops;
    let mut tape = Tape::new();
    let er = tape.leaf(model.emb.interaction.clone());
    let es = tape.leaf(model.emb.social.clone());
    let hr = propagate(&mut tape, &ops.interaction, er, ops.k1);
    let hs = propagate(&mut tape, &ops.social, es, ops.k2);

    let (g_r, g_s) = if model.config.egopath.reaggregation && !input.pairs.is_empty() {
        let pooled = tape.spmm(ops.item_pool.clone(), hs);
        let own = tape.spmm(ops.item_own.clone(), es);
        let social_nodes = tape.add(pooled, own);
        let r = TowerInputs { tower: Tower::Interaction, states: hr, users: hr, table: er, candidates: hr };
        let s = TowerInputs { tower: Tower::Social, states: social_nodes, users: hs, table: es, candidates: es };
        (explained_tower(&mut tape, model, input, &r), explained_tower(&mut tape, model, input, &s))
    } else {
        let users: Vec<usize> = input.pairs.iter().map(|p| p.user).collect();
        let items: Vec<usize> = input.pairs.iter().map(|p| m + p.item).collect();
        (tape.gather_dot(hr, users.clone(), hr, items.clone()), tape.gather_dot(hs, users, es, items))
    };
    let g = if social_tower { tape.add(g_r, g_s) } else { g_r };

    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut breakdown = LossBreakdown::default();
    if !input.triples.is_empty() {
        let lr = bpr_sum(&mut tape, g_r, &input.triples);
        let lf = bpr_sum(&mut tape, g, &input.triples);
        breakdown.main_r = tape.value(lr).item();
        breakdown.main_fused = tape.value(lf).item();
        terms.push((lr, 1.0));
        terms.push((lf, 1.0));
        if social_tower {
            let ls = bpr_sum(&mut tape, g_s, &input.triples);
            breakdown.main_s = tape.value(ls).item();
            terms.push((ls, 1.0));
        }
    }
    if gamma > 0.0 && !input.friends.is_empty() {
        let us: Vec<usize> = input.friends.iter().map(|f| f.0).collect();
        let fp = tape.gather_dot(hs, us.clone(), hs, input.friends.iter().map(|f| f.1).collect());
        let fneg = tape.gather_dot(hs, us, hs, input.friends.iter().map(|f| f.2).collect());
        let margin = tape.sub(fp, fneg);
        let l = tape.softplus_neg(margin);
        let aux = tape.sum(l);
        breakdown.aux = tape.value(aux).item();
        terms.push((aux, gamma));
    }
    let reg_r = tape.sum_squares(er);
    let reg_s = tape.sum_squares(es);
    breakdown.reg = lambda * (tape.value(reg_r).item() + tape.value(reg_s).item());
    terms.push((reg_r, lambda));
    terms.push((reg_s, lambda));
    let total = tape.lincomb(terms);
    breakdown.total = tape.value(total).item();

    let (vr, vs) = (tape.value(g_r).data(), tape.value(g_s).data());
    let scores = vr.iter().zip(vs).map(|(&a, &b)| TowerScores::new(a, b, social_tower)).collect();
    ForwardPass { tape, er, es, total, breakdown, scores }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EgoPathConfig, ModelConfig, Precision, TowerConfig};
    use crate::graph::{toy_a, JointGraph};
    use crate::training::loss::{main_loss, social_loss, total_loss};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model_on(graph: JointGraph, d: usize, n_w: usize, tweak: impl FnOnce(&mut ModelConfig)) -> Model {
        let mut cfg = ModelConfig {
            tower: TowerConfig { d, precision: Precision::F64, init_scale: 0.5, ..Default::default() },
            egopath: EgoPathConfig { k: 2, n_w, ..Default::default() },
        };
        tweak(&mut cfg);
        Model::init(cfg, Arc::new(graph), 11)
    }

    struct Fixture {
        pools: Vec<PreparedPool>,
        pairs: Vec<PairSpec>,
        noise: Vec<[Vec<f64>; 2]>,
        triples: Vec<(usize, usize)>,
    }

    fn fixture(model: &Model, seed: u64) -> Fixture {
        let scorer = model.scorer();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = &model.graph;
        let mut pools = Vec::new();
        let mut pairs = Vec::new();
        let mut triples = Vec::new();
        for u in 0..g.num_users() {
            let Some(&pos) = g.items_of(u).first() else { continue };
            pools.push(scorer.pool(u, &mut rng));
            let pi = pools.len() - 1;
            pairs.push(PairSpec { user: u, item: pos as usize, pool: pi });
            let pos_pair = pairs.len() - 1;
            for j in (0..g.num_items()).filter(|&j| !g.has_interaction(u, j)) {
                pairs.push(PairSpec { user: u, item: j, pool: pi });
                triples.push((pos_pair, pairs.len() - 1));
            }
        }
        let noise = pairs
            .iter()
            .map(|p| {
                let n = pools[p.pool].len();
                [(0..n).map(|_| rng.gen::<f64>()).collect(), (0..n).map(|_| rng.gen::<f64>()).collect()]
            })
            .collect();
        Fixture { pools, pairs, noise, triples }
    }

    #[test]
    fn tape_scores_match_plain_scorer() {
        for reaggregation in [true, false] {
            for renorm in [false, true] {
                let model = model_on(toy_a(), 6, 5, |c| {
                    c.egopath.reaggregation = reaggregation;
                    c.egopath.renorm_empty = renorm;
                });
                let fx = fixture(&model, 3);
                for mode in [SamplingMode::Hard, SamplingMode::TopK(2)] {
                    let input = BatchInput {
                        pools: &fx.pools,
                        pairs: fx.pairs.clone(),
                        noise: fx.noise.clone(),
                        mode,
                        triples: fx.triples.clone(),
                        friends: vec![],
                    };
                    let fp = forward(&model, 0.0, 0.0, &input);
                    let scorer = model.scorer();
                    for (pi, p) in fx.pairs.iter().enumerate() {
                        let pp = &fx.pools[p.pool];
                        let mut expl = Vec::new();
                        for tower in Tower::BOTH {
                            let view = scorer.view(tower, pp, p.item);
                            let e = match mode {
                                SamplingMode::Hard => {
                                    let kept: Vec<usize> =
                                        (0..pp.len()).filter(|&t| fx.noise[pi][tower as usize][t] < view.probs[t]).collect();
                                    crate::egopath::sample_subset(
                                        tower,
                                        p.item,
                                        view.probs.clone(),
                                        SamplingMode::TopK(0),
                                        &mut ChaCha8Rng::seed_from_u64(0),
                                    )
                                    .with_kept(kept)
                                }
                                _ => crate::egopath::sample_subset(
                                    tower,
                                    p.item,
                                    view.probs.clone(),
                                    mode,
                                    &mut ChaCha8Rng::seed_from_u64(0),
                                ),
                            };
                            expl.push(e);
                        }
                        let plain = scorer.rescore(p.user, pp, p.item, &expl[0], &expl[1]);
                        let tape = fp.scores[pi];
                        assert!((plain.g_r - tape.g_r).abs() < 1e-12, "g_r {} vs {}", plain.g_r, tape.g_r);
                        assert!((plain.g_s - tape.g_s).abs() < 1e-12, "g_s {} vs {}", plain.g_s, tape.g_s);
                    }
                }
            }
        }
    }

    #[test]
    fn relaxed_draws_match_plain_attention_route() {
        let model = model_on(toy_a(), 6, 5, |_| {});
        let fx = fixture(&model, 5);
        let tau = 0.7;
        let input = BatchInput {
            pools: &fx.pools,
            pairs: fx.pairs.clone(),
            noise: fx.noise.clone(),
            mode: SamplingMode::Relaxed { tau },
            triples: vec![],
            friends: vec![],
        };
        let fp = forward(&model, 0.0, 0.0, &input);
        let scorer = model.scorer();
        for (pi, p) in fx.pairs.iter().enumerate() {
            let pp = &fx.pools[p.pool];
            let mut h = Vec::new();
            for tower in Tower::BOTH {
                let view = scorer.view(tower, pp, p.item);
                let draws: Vec<f64> = view
                    .probs
                    .iter()
                    .zip(&fx.noise[pi][tower as usize])
                    .map(|(&pr, &u)| crate::egopath::concrete_draw(pr, u, tau))
                    .collect();
                let mut e = crate::egopath::sample_subset(
                    tower,
                    p.item,
                    view.probs.clone(),
                    SamplingMode::TopK(0),
                    &mut ChaCha8Rng::seed_from_u64(0),
                );
                e.kept = (0..pp.len()).collect();
                e.draws = draws;
                h.push(e);
            }
            let plain = scorer.rescore(p.user, pp, p.item, &h[0], &h[1]);
            assert!((plain.g - fp.scores[pi].g).abs() < 1e-12);
        }
    }

    #[test]
    fn breakdown_matches_plain_losses() {
        let g = JointGraph::from_edges(4, 3, &[(0, 0), (1, 0), (1, 1), (2, 1), (3, 2)], &[(0, 1), (1, 2), (2, 3)]);
        let model = model_on(g, 5, 4, |c| c.egopath.reaggregation = false);
        let fx = fixture(&model, 1);
        let friends = vec![(0, 1, 3), (1, 2, 3), (3, 2, 0)];
        let input = BatchInput {
            pools: &fx.pools,
            pairs: fx.pairs.clone(),
            noise: fx.noise.clone(),
            mode: SamplingMode::Hard,
            triples: fx.triples.clone(),
            friends: friends.clone(),
        };
        let fp = forward(&model, 0.5, 0.01, &input);
        let scorer = model.scorer();
        let trip: Vec<_> = fx
            .triples
            .iter()
            .map(|&(a, b)| (scorer.base(fx.pairs[a].user, fx.pairs[a].item), scorer.base(fx.pairs[b].user, fx.pairs[b].item)))
            .collect();
        let main = main_loss(&trip, true);
        let aux = social_loss(&scorer.state.social, &friends);
        let expect = total_loss(main, aux, &model.emb.interaction, &model.emb.social, 0.5, 0.01);
        for (a, b) in [
            (expect.main_r, fp.breakdown.main_r),
            (expect.main_s, fp.breakdown.main_s),
            (expect.main_fused, fp.breakdown.main_fused),
            (expect.aux, fp.breakdown.aux),
            (expect.reg, fp.breakdown.reg),
            (expect.total, fp.breakdown.total),
        ] {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn disabled_social_tower_gives_no_main_gradient_to_social_table() {
        let model = model_on(toy_a(), 4, 4, |c| c.tower.social_tower = false);
        let fx = fixture(&model, 2);
        let input = BatchInput {
            pools: &fx.pools,
            pairs: fx.pairs.clone(),
            noise: fx.noise.clone(),
            mode: SamplingMode::Relaxed { tau: 0.5 },
            triples: fx.triples.clone(),
            friends: vec![],
        };
        let fp = forward(&model, 0.0, 0.0, &input);
        let grads = fp.tape.backward(fp.total).unwrap();
        assert!(grads.get(fp.es).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
        assert!(grads.get(fp.er).is_some());
    }

    #[test]
    fn regularizer_gradient_is_two_lambda_e() {
        let model = model_on(toy_a(), 4, 4, |_| {});
        let input = BatchInput { pools: &[], pairs: vec![], noise: vec![], mode: SamplingMode::Hard, triples: vec![], friends: vec![] };
        let fp = forward(&model, 0.5, 0.003, &input);
        let grads = fp.tape.backward(fp.total).unwrap();
        for (g, e) in grads.get(fp.er).unwrap().data().iter().zip(model.emb.interaction.data()) {
            assert!((g - 2.0 * 0.003 * e).abs() < 1e-15);
        }
    }
}
