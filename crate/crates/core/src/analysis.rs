//! Explanation analysis: path templates, triangle and quadrilateral motifs
//! formed in a walk pool, their detection by sampled explanations, and
//! JSON/DOT export of individual explanations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use rand::seq::SliceRandom;

use crate::config::{AnalysisConfig, TriangleRule};
use crate::egopath::{EgoPath, WalkPool};
use crate::error::Result;
use crate::evaluation::{draw_stream, map_tasks, pool_for, rank_against, EvalKey, UserTask};
use crate::graph::{JointGraph, NodeRef};
use crate::model::{Explained, Model, PreparedPool, Scorer};
use crate::rng::{stream, Purpose};
use crate::towers::Tower;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PathTemplate {
    /// user, user: friend of friend.
    Fof,
    /// item, user: co-purchase.
    Cop,
    /// user, item: friend's interaction.
    Fi,
    /// Padded path.
    Short,
    /// Any other shape, including every path when `k > 2`.
    Other,
}

impl PathTemplate {
    pub fn as_str(self) -> &'static str {
        match self {
            PathTemplate::Fof => "fof",
            PathTemplate::Cop => "cop",
            PathTemplate::Fi => "fi",
            PathTemplate::Short => "short",
            PathTemplate::Other => "other",
        }
    }
}

pub fn classify_path(path: &EgoPath) -> PathTemplate {
    if !path.is_full() {
        return PathTemplate::Short;
    }
    if path.k() != 2 {
        return PathTemplate::Other;
    }
    match (path.slots[0], path.slots[1]) {
        (Some(NodeRef::User(_)), Some(NodeRef::User(_))) => PathTemplate::Fof,
        (Some(NodeRef::Item(_)), Some(NodeRef::User(_))) => PathTemplate::Cop,
        (Some(NodeRef::User(_)), Some(NodeRef::Item(_))) => PathTemplate::Fi,
        _ => PathTemplate::Other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MotifKind {
    Triangle,
    Quadrilateral,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotifInstance {
    pub kind: MotifKind,
    /// Triangles: `fof` or `cop`. Quadrilaterals: the two path templates
    /// joined by `+` in sorted order.
    pub label: String,
    /// Source first, then the other nodes in sorted order.
    pub nodes: Vec<NodeRef>,
    /// Pool indices of realizing paths. For quadrilaterals, `sides` splits
    /// them by middle node.
    pub paths: Vec<usize>,
    pub sides: [Vec<usize>; 2],
}

fn prefix(path: &EgoPath) -> Option<(NodeRef, NodeRef)> {
    match path.slots.get(..2) {
        Some([Some(a), Some(b)]) => Some((*a, *b)),
        _ => None,
    }
}

/// Triangles closed by a path's first two slots and quadrilaterals formed
/// by two paths whose first two slots share the second node.
pub fn find_motifs(pool: &WalkPool, graph: &JointGraph) -> Vec<MotifInstance> {
    let source = NodeRef::User(pool.source);
    let mut triangles: BTreeMap<[NodeRef; 2], Vec<usize>> = BTreeMap::new();
    let mut by_end: BTreeMap<NodeRef, BTreeMap<NodeRef, Vec<usize>>> = BTreeMap::new();
    for (t, path) in pool.paths.iter().enumerate() {
        let Some((a, b)) = prefix(path) else { continue };
        if !graph.adjacent(source, a) || !graph.adjacent(a, b) {
            continue;
        }
        if graph.adjacent(source, b) {
            triangles.entry(if a < b { [a, b] } else { [b, a] }).or_default().push(t);
        }
        by_end.entry(b).or_default().entry(a).or_default().push(t);
    }

    let mut out = Vec::new();
    for ([a, b], paths) in triangles {
        let label = if a.is_user() && b.is_user() { "fof" } else { "cop" };
        out.push(MotifInstance {
            kind: MotifKind::Triangle,
            label: label.into(),
            nodes: vec![source, a, b],
            paths,
            sides: [vec![], vec![]],
        });
    }
    for (x, middles) in by_end {
        let mids: Vec<(&NodeRef, &Vec<usize>)> = middles.iter().collect();
        for i in 0..mids.len() {
            for j in i + 1..mids.len() {
                let (a, pa) = mids[i];
                let (b, pb) = mids[j];
                if !graph.adjacent(source, *b) || !graph.adjacent(*b, x) {
                    continue;
                }
                let mut labels = [classify_path(&pool.paths[pa[0]]).as_str(), classify_path(&pool.paths[pb[0]]).as_str()];
                labels.sort_unstable();
                let mut nodes = vec![*a, x, *b];
                nodes.sort_unstable();
                nodes.insert(0, source);
                let mut paths: Vec<usize> = pa.iter().chain(pb).copied().collect();
                paths.sort_unstable();
                out.push(MotifInstance {
                    kind: MotifKind::Quadrilateral,
                    label: labels.join("+"),
                    nodes,
                    paths,
                    sides: [pa.clone(), pb.clone()],
                });
            }
        }
    }
    out
}

/// Whether the kept subset exposes `motif`. Triangles follow `rule` over
/// their realizing paths; quadrilaterals need a kept path on each side.
pub fn is_detected(motif: &MotifInstance, kept: &[bool], rule: TriangleRule) -> bool {
    match motif.kind {
        MotifKind::Triangle => match rule {
            TriangleRule::Any => motif.paths.iter().any(|&t| kept[t]),
            TriangleRule::All => motif.paths.iter().all(|&t| kept[t]),
        },
        MotifKind::Quadrilateral => motif.sides.iter().all(|side| side.iter().any(|&t| kept[t])),
    }
}

/// Mean rescaled similarity of a motif's realizing paths.
pub fn motif_similarity(motif: &MotifInstance, probs: &[f64]) -> f64 {
    motif.paths.iter().map(|&t| probs[t]).sum::<f64>() / motif.paths.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tally {
    pub formed: usize,
    pub detected: usize,
    pub sum_p: f64,
}

impl Tally {
    /// `None` when nothing was formed.
    pub fn rate(&self) -> Option<f64> {
        (self.formed > 0).then(|| self.detected as f64 / self.formed as f64)
    }

    pub fn mean_p(&self) -> Option<f64> {
        (self.formed > 0).then(|| self.sum_p / self.formed as f64)
    }
}

/// Candidate group: the held-out item or a sampled negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Positive,
    Negative,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Positive => "positive",
            Group::Negative => "negative",
        }
    }
}

/// Tallies keyed by `(tower, group, row type)`. Row types are
/// `triangle:<label>`, `quad:<label>`, `path:<template>` and `all_paths`.
/// Motifs only ever involve full-length paths; `path:short` is reported
/// so that `all_paths` stays the pool-wide mean.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MotifStats {
    pub rows: BTreeMap<(Tower, Group, String), Tally>,
}

impl MotifStats {
    /// Adds one explained candidate: motif detection and similarity, path
    /// template counts, and the pool-wide baseline.
    #[allow(clippy::too_many_arguments)]
    pub fn record(
        &mut self,
        tower: Tower,
        group: Group,
        pool: &WalkPool,
        motifs: &[MotifInstance],
        kept: &[bool],
        probs: &[f64],
        rule: TriangleRule,
    ) {
        for m in motifs {
            let prefix = match m.kind {
                MotifKind::Triangle => "triangle",
                MotifKind::Quadrilateral => "quad",
            };
            let row = self.rows.entry((tower, group, format!("{prefix}:{}", m.label))).or_default();
            row.formed += 1;
            row.detected += usize::from(is_detected(m, kept, rule));
            row.sum_p += motif_similarity(m, probs);
        }
        for (t, path) in pool.paths.iter().enumerate() {
            let template = classify_path(path);
            for key in [format!("path:{}", template.as_str()), "all_paths".to_owned()] {
                let row = self.rows.entry((tower, group, key)).or_default();
                row.formed += 1;
                row.detected += usize::from(kept[t]);
                row.sum_p += probs[t];
            }
        }
    }

    pub const TSV_HEADER: &'static str = "dataset\ttower\tgroup\tmotif_type\tformed\tdetected\trate\tmean_p";

    pub fn to_tsv(&self, dataset: &str) -> String {
        let mut out = String::from(Self::TSV_HEADER);
        out.push('\n');
        let opt = |x: Option<f64>| x.map_or_else(|| "NA".to_owned(), |v| format!("{v:.6}"));
        for ((tower, group, ty), t) in &self.rows {
            let _ = writeln!(
                out,
                "{dataset}\t{}\t{}\t{ty}\t{}\t{}\t{}\t{}",
                tower.as_str(),
                group.as_str(),
                t.formed,
                t.detected,
                opt(t.rate()),
                opt(t.mean_p())
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotRecord {
    pub node: String,
    pub kind: &'static str,
    pub sim: f64,
    pub attn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathRecord {
    pub slots: Vec<SlotRecord>,
    pub p: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MotifRecord {
    pub kind: MotifKind,
    #[serde(rename = "type")]
    pub label: String,
    pub nodes: Vec<String>,
    pub detected: bool,
}

/// One explanation: kept paths with per-slot similarity and attention, and
/// the motifs formed in the pool.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplanationDoc {
    pub user: String,
    pub candidate: String,
    pub tower: &'static str,
    pub k: usize,
    pub n_w: usize,
    pub pool_mean_p: f64,
    pub paths: Vec<PathRecord>,
    pub motifs: Vec<MotifRecord>,
}

impl ExplanationDoc {
    pub fn build(
        user: usize,
        pool: &PreparedPool,
        explained: &Explained,
        tower: Tower,
        motifs: &[MotifInstance],
        rule: TriangleRule,
    ) -> Self {
        let detail = explained.detail(tower);
        let probs = &detail.view.probs;
        let n = probs.len();
        let mut kept = vec![false; n];
        detail.explanation.kept.iter().for_each(|&t| kept[t] = true);
        let mut attn: BTreeMap<(usize, NodeRef), f64> = BTreeMap::new();
        for e in detail.attention.entries() {
            *attn.entry((e.path, e.node)).or_default() += e.alpha;
        }
        let sim_of = |node: NodeRef| pool.distinct.binary_search(&node).map(|i| detail.view.cos[i]).unwrap_or(0.0);
        let paths = detail
            .explanation
            .kept
            .iter()
            .map(|&t| PathRecord {
                slots: pool.paths()[t]
                    .nodes()
                    .map(|(_, q)| SlotRecord {
                        node: q.to_string(),
                        kind: q.kind_str(),
                        sim: sim_of(q),
                        attn: attn.get(&(t, q)).copied().unwrap_or(0.0),
                    })
                    .collect(),
                p: probs[t],
                kept: true,
            })
            .collect();
        ExplanationDoc {
            user: NodeRef::User(user as u32).to_string(),
            candidate: NodeRef::Item(explained.candidate as u32).to_string(),
            tower: tower.as_str(),
            k: pool.pool.k,
            n_w: n,
            pool_mean_p: if n == 0 { 0.0 } else { probs.iter().sum::<f64>() / n as f64 },
            paths,
            motifs: motifs
                .iter()
                .map(|m| MotifRecord {
                    kind: m.kind,
                    label: m.label.clone(),
                    nodes: m.nodes.iter().map(|q| q.to_string()).collect(),
                    detected: is_detected(m, &kept, rule),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Directed graph of the kept paths. Edges point away from the user;
    /// `weight` is the similarity of the edge's head node to the candidate.
    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph explanation {{");
        let _ = writeln!(out, "  label=\"{} -> {} ({})\";", self.user, self.candidate, self.tower);
        let mut nodes: BTreeSet<(String, &str)> = BTreeSet::new();
        nodes.insert((self.user.clone(), "user"));
        nodes.insert((self.candidate.clone(), "candidate"));
        let mut edges: BTreeMap<(String, String), f64> = BTreeMap::new();
        for p in &self.paths {
            let mut prev = self.user.clone();
            for s in &p.slots {
                nodes.insert((s.node.clone(), s.kind));
                edges.insert((prev.clone(), s.node.clone()), s.sim);
                prev = s.node.clone();
            }
        }
        for (name, kind) in &nodes {
            let _ = writeln!(out, "  \"{name}\" [kind=\"{kind}\"];");
        }
        for ((a, b), w) in &edges {
            let _ = writeln!(out, "  \"{a}\" -> \"{b}\" [weight=\"{w:.6}\"];");
        }
        out.push_str("}\n");
        out
    }
}

/// One analyzed test pair: the truth, its rank, and a sampled negative.
#[derive(Debug, Clone)]
pub struct AnalyzedPair {
    pub truth: u32,
    pub rank: usize,
    pub positive: Explained,
    /// `None` when the user has no candidate besides their truths.
    pub negative: Option<Explained>,
}

/// Everything recorded for one user: the evaluation pool, its motifs and
/// the analyzed pairs.
#[derive(Debug, Clone)]
pub struct UserAnalysis {
    pub user: u32,
    pub pool: PreparedPool,
    pub motifs: Vec<MotifInstance>,
    pub pairs: Vec<AnalyzedPair>,
}

impl UserAnalysis {
    pub fn explained(&self) -> impl Iterator<Item = (Group, &Explained)> {
        self.pairs
            .iter()
            .flat_map(|p| std::iter::once((Group::Positive, &p.positive)).chain(p.negative.as_ref().map(|n| (Group::Negative, n))))
    }
}

fn analyze_task(scorer: &Scorer, task: &UserTask, key: EvalKey, top_rank: usize) -> UserAnalysis {
    let pool = pool_for(scorer, key, 0, task.user);
    let mode = scorer.model.eval_mode();
    let user = task.user as usize;
    let mut scored = Vec::with_capacity(task.candidates.len());
    let mut truths = Vec::new();
    for &j in &task.candidates {
        let mut rng = draw_stream(key, 0, task.user, j);
        if task.truths.binary_search(&j).is_ok() {
            let e = scorer.explain(user, &pool, j as usize, mode, &mut rng);
            scored.push((j, e.scores.g));
            truths.push(e);
        } else {
            scored.push((j, scorer.score(user, &pool, j as usize, mode, &mut rng)));
        }
    }
    let others: Vec<u32> = task.candidates.iter().copied().filter(|j| task.truths.binary_search(j).is_err()).collect();
    let mut pairs = Vec::new();
    for positive in truths {
        let truth = positive.candidate as u32;
        let rank = rank_against(&scored, truth, positive.scores.g);
        if rank > top_rank {
            continue;
        }
        let negative = others
            .choose(&mut stream(key.seed, Purpose::Analysis, &[key.salt, task.user as u64, truth as u64]))
            .map(|&j| scorer.explain(user, &pool, j as usize, mode, &mut draw_stream(key, 0, task.user, j)));
        pairs.push(AnalyzedPair { truth, rank, positive, negative });
    }
    let motifs = if pairs.is_empty() { Vec::new() } else { find_motifs(&pool.pool, &scorer.model.graph) };
    UserAnalysis { user: task.user, pool, motifs, pairs }
}

/// Explains every held-out pair whose truth ranks within `cfg.top_rank`,
/// together with one sampled negative per pair. Users are processed in
/// task order and the result is cut after `cfg.max_pairs` pairs.
pub fn analyze(model: &Model, tasks: &[UserTask], cfg: &AnalysisConfig, key: EvalKey, threads: usize) -> Result<Vec<UserAnalysis>> {
    let scorer = model.scorer();
    let mut out = Vec::new();
    let mut budget = if cfg.max_pairs == 0 { usize::MAX } else { cfg.max_pairs };
    for chunk in tasks.chunks(threads.max(1) * 16) {
        for mut ua in map_tasks(chunk, threads, |t| analyze_task(&scorer, t, key, cfg.top_rank))? {
            if budget == 0 {
                return Ok(out);
            }
            ua.pairs.truncate(budget);
            budget -= ua.pairs.len();
            if !ua.pairs.is_empty() {
                out.push(ua);
            }
        }
    }
    Ok(out)
}

/// Detection and similarity statistics over analyzed users.
pub fn collect_stats(analyses: &[UserAnalysis], rule: TriangleRule) -> MotifStats {
    let mut stats = MotifStats::default();
    for ua in analyses {
        for (group, e) in ua.explained() {
            for tower in Tower::BOTH {
                let detail = e.detail(tower);
                let mut kept = vec![false; ua.pool.len()];
                detail.explanation.kept.iter().for_each(|&t| kept[t] = true);
                stats.record(tower, group, &ua.pool.pool, &ua.motifs, &kept, &detail.view.probs, rule);
            }
        }
    }
    stats
}
