//! Acceptance suite: one line per criterion, `PASS`, `FAIL` or `NOT RUN`.
//! Exits nonzero when any criterion fails.
//!
//! Criteria that need the LastFM dataset run only when `SOREX_LASTFM_DIR`
//! points at a directory holding `user_artists.dat` and `user_friends.dat`.

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sorex::analysis::{find_motifs, MotifKind};
use sorex::config::{EgoPathConfig, ModelConfig, Precision, RunConfig, TowerConfig};
use sorex::egopath::{enumerate_ego_paths, path_similarity, rescale, sample_walks, EgoPath, SamplingMode, WalkPool};
use sorex::evaluation::{evaluate, fidelity, test_tasks, EvalKey, EvalMode, MetricsDocument};
use sorex::graph::{load_dataset, preprocess, split, toy_a, JointGraph, NodeRef, PreparedData};
use sorex::model::Model;
use sorex::synthetic::{planted_data, random_graph, PlantedConfig};
use sorex::tensor::Matrix;
use sorex::towers::{encode, Operators, Tower};
use sorex::training::forward::{forward, BatchInput, PairSpec};
use sorex::training::{friend_triples, train};

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn f64_model(graph: JointGraph, d: usize, n_w: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        tower: TowerConfig { d, precision: Precision::F64, init_scale: 0.5, ..Default::default() },
        egopath: EgoPathConfig { k: 2, n_w, ..Default::default() },
    };
    Model::init(cfg, Arc::new(graph), seed)
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale > 1e-6 {
        (a - b).abs() / scale
    } else {
        (a - b).abs()
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let model = f64_model(toy_a(), 4, 4, 5);
    let g = model.graph.clone();
    let scorer = model.scorer();
    let mut r = rng(17);
    let mut pools = Vec::new();
    let mut pairs = Vec::new();
    let mut triples = Vec::new();
    for u in 0..g.num_users() {
        pools.push(scorer.pool(u, &mut r));
        let pi = pools.len() - 1;
        for &pos in g.items_of(u) {
            pairs.push(PairSpec { user: u, item: pos as usize, pool: pi });
            let p = pairs.len() - 1;
            for j in (0..g.num_items()).filter(|&j| !g.has_interaction(u, j)) {
                pairs.push(PairSpec { user: u, item: j, pool: pi });
                triples.push((p, pairs.len() - 1));
            }
        }
    }
    let noise: Vec<[Vec<f64>; 2]> = pairs
        .iter()
        .map(|p| {
            let n = pools[p.pool].len();
            [(0..n).map(|_| r.gen::<f64>()).collect(), (0..n).map(|_| r.gen::<f64>()).collect()]
        })
        .collect();
    let friends = friend_triples(&g, 3, 0);
    let input = BatchInput { pools: &pools, pairs, noise, mode: SamplingMode::Relaxed { tau: 0.7 }, triples, friends };
    let (gamma, lambda) = (0.5, 0.01);
    drop(scorer);

    let fp = forward(&model, gamma, lambda, &input);
    let grads = fp.tape.backward(fp.total).expect("backward");
    let analytic = [grads.get(fp.er).expect("er grad").clone(), grads.get(fp.es).expect("es grad").clone()];
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (which, table) in analytic.iter().enumerate() {
        for idx in 0..table.data().len() {
            let loss_at = |delta: f64| {
                let mut m = Model::new(model.config.clone(), model.graph.clone(), model.emb.clone());
                let t = if which == 0 { &mut m.emb.interaction } else { &mut m.emb.social };
                t.data_mut()[idx] += delta;
                forward(&m, gamma, lambda, &input).breakdown.total
            };
            let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
            worst = worst.max(rel_err(table.data()[idx], fd));
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst < 1e-4 && secs < 60.0, format!("{checked} parameters, max relative error {worst:.2e}, {secs:.1}s"))
}

/// Dense `D^{-1/2} A D^{-1/2}` with identity rows for isolated nodes.
fn dense_sym_norm(adj: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = adj.len();
    let deg: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        if deg[i] == 0.0 {
            out[i][i] = 1.0;
            continue;
        }
        for j in 0..n {
            if adj[i][j] != 0.0 {
                out[i][j] = adj[i][j] / (deg[i] * deg[j]).sqrt();
            }
        }
    }
    out
}

fn dense_mul(a: &[Vec<f64>], x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            let mut out = vec![0.0; x[0].len()];
            for (j, &w) in row.iter().enumerate() {
                if w != 0.0 {
                    for (o, v) in out.iter_mut().zip(&x[j]) {
                        *o += w * v;
                    }
                }
            }
            out
        })
        .collect()
}

fn dense_layer_mean(a: &[Vec<f64>], x: &[Vec<f64>], layers: usize) -> Vec<Vec<f64>> {
    let mut acc = x.to_vec();
    let mut cur = x.to_vec();
    for _ in 0..layers {
        cur = dense_mul(a, &cur);
        for (ra, rc) in acc.iter_mut().zip(&cur) {
            for (p, q) in ra.iter_mut().zip(rc) {
                *p += q;
            }
        }
    }
    let s = 1.0 / (layers + 1) as f64;
    acc.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

fn rows(m: &Matrix, range: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    range.map(|r| m.row(r).to_vec()).collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
}

fn propagation_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(23);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let m = r.gen_range(2..25);
        let n = r.gen_range(1..25);
        let g = random_graph(m, n, r.gen_range(0.05..0.4), r.gen_range(0.05..0.4), &mut r);
        let influence = case % 2 == 0;
        let transfer = case % 3 != 0;
        let cfg = TowerConfig {
            d: 5,
            k1: 1 + case % 3,
            k2: 1 + (case + 1) % 3,
            social_influence: influence,
            item_transfer: transfer,
            ..Default::default()
        };
        let emb = sorex::towers::init_embeddings(m, n, 5, case as u64, 0.3);
        let state = encode(&Operators::new(&g, &cfg), &emb);
        let nn = m + n;

        let mut a = vec![vec![0.0; nn]; nn];
        for u in 0..m {
            for &v in g.items_of(u) {
                a[u][m + v as usize] = 1.0;
                a[m + v as usize][u] = 1.0;
            }
        }
        let er = rows(&emb.interaction, 0..nn);
        let want_r = dense_layer_mean(&dense_sym_norm(&a), &er, cfg.k1);
        worst = worst.max(max_diff(&want_r, &rows(&state.interaction, 0..nn)));

        let mut s = vec![vec![0.0; m]; m];
        for q in 0..m {
            for &i in g.friends_of(q) {
                s[q][i as usize] = 1.0;
            }
        }
        let op = if influence {
            let mut w = vec![vec![0.0; m]; m];
            for q in 0..m {
                let friends: Vec<usize> = (0..m).filter(|&i| s[q][i] != 0.0).collect();
                if friends.is_empty() {
                    w[q][q] = 1.0;
                    continue;
                }
                let phi = |i: usize| {
                    let (a, b): (BTreeSet<u32>, BTreeSet<u32>) =
                        (g.items_of(i).iter().copied().collect(), g.items_of(q).iter().copied().collect());
                    let union = a.union(&b).count();
                    if union == 0 {
                        0.0
                    } else {
                        (a.intersection(&b).count() as f64 / union as f64).sqrt()
                    }
                };
                let z: f64 = friends.iter().map(|&i| phi(i).exp()).sum();
                for &i in &friends {
                    w[q][i] = phi(i).exp() / z;
                }
            }
            w
        } else {
            dense_sym_norm(&s)
        };
        let es = rows(&emb.social, 0..m);
        let hs = dense_layer_mean(&op, &es, cfg.k2);
        worst = worst.max(max_diff(&hs, &rows(&state.social, 0..m)));
        let mut nodes = hs.clone();
        for j in 0..n {
            let users = g.users_of(j);
            if transfer && !users.is_empty() {
                let mut acc = vec![0.0; 5];
                for &u in users {
                    for (x, y) in acc.iter_mut().zip(&hs[u as usize]) {
                        *x += y / users.len() as f64;
                    }
                }
                nodes.push(acc);
            } else {
                nodes.push(emb.social.row(m + j).to_vec());
            }
        }
        worst = worst.max(max_diff(&nodes, &rows(&state.social_nodes, 0..nn)));
    }
    verdict(worst < 1e-6, format!("20 graphs, max abs error {worst:.2e}, {:.1}s", start.elapsed().as_secs_f64()))
}

fn walk_distribution() -> Outcome {
    let start = Instant::now();
    let mut r = rng(29);
    let mut cases = vec![(toy_a(), 0usize, 2usize)];
    while cases.len() < 6 {
        let m = r.gen_range(3..11);
        let n = r.gen_range(2..10);
        let g = random_graph(m, n, 0.3, 0.3, &mut r);
        let source = r.gen_range(0..m);
        if g.joint_degree(NodeRef::User(source as u32)) > 0 {
            let k = 2 + cases.len() % 2;
            cases.push((g, source, k));
        }
    }
    let walks = 100_000;
    let mut worst: f64 = 0.0;
    for (g, source, k) in &cases {
        let exact = enumerate_ego_paths(g, *source, *k, 1 << 22).expect("enumerable");
        let pool = sample_walks(g, *source, *k, walks, &mut r).expect("walkable");
        let mut counts: BTreeMap<EgoPath, f64> = BTreeMap::new();
        for p in pool.paths {
            *counts.entry(p).or_default() += 1.0 / walks as f64;
        }
        let mut tv = 0.0;
        for (p, prob) in &exact {
            tv += (counts.remove(p).unwrap_or(0.0) - prob).abs();
        }
        tv += counts.values().sum::<f64>();
        worst = worst.max(tv / 2.0);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst < 0.02 && secs < 60.0, format!("6 graphs x 1e5 walks, max TV {worst:.4}, {secs:.1}s"))
}

fn probability_validity() -> Outcome {
    let mut r = rng(31);
    let mut draws = 0;
    let mut bad = Vec::new();
    while draws < 10_000 {
        let m = r.gen_range(2..9);
        let n = r.gen_range(1..8);
        let g = random_graph(m, n, 0.4, 0.4, &mut r);
        let mut model = f64_model(g, 3 + draws % 4, 6, r.gen());
        model.config.egopath.k = 2 + draws % 2;
        model.config.egopath.k_minus_one_divisor = draws % 3 == 0;
        let scorer = model.scorer();
        for _ in 0..100 {
            let user = r.gen_range(0..m);
            let cand = r.gen_range(0..n);
            let pp = scorer.pool(user, &mut r);
            let e = scorer.explain(user, &pp, cand, SamplingMode::Hard, &mut r);
            for tower in Tower::BOTH {
                let d = e.detail(tower);
                for (t, path) in pp.paths().iter().enumerate() {
                    let ps = path_similarity(scorer.context(tower), path, cand, model.config.egopath.k_minus_one_divisor);
                    if !(-1.0..=1.0).contains(&ps) || !(0.0..=1.0).contains(&rescale(ps)) || !(0.0..=1.0).contains(&d.view.probs[t]) {
                        bad.push(format!("p*={ps}"));
                    }
                }
                for hop in d.attention.hops.iter().filter(|h| !h.is_empty()) {
                    let s: f64 = hop.iter().map(|a| a.alpha).sum();
                    if (s - 1.0).abs() > 1e-6 {
                        bad.push(format!("attention sum {s}"));
                    }
                }
            }
            draws += 1;
        }
    }
    verdict(bad.is_empty(), format!("{draws} draws, {} violations {:?}", bad.len(), bad.iter().take(3).collect::<Vec<_>>()))
}

fn brute_force_motifs(g: &JointGraph, source: usize) -> (usize, usize) {
    let s = NodeRef::User(source as u32);
    let nodes: Vec<NodeRef> = (0..g.num_nodes()).map(|i| g.node(i)).filter(|&q| q != s).collect();
    let (mut tri, mut quad) = (0, 0);
    for (i, &a) in nodes.iter().enumerate() {
        for &b in &nodes[i + 1..] {
            if g.adjacent(s, a) && g.adjacent(s, b) {
                tri += usize::from(g.adjacent(a, b));
                quad += nodes.iter().filter(|&&x| x != a && x != b && g.adjacent(a, x) && g.adjacent(b, x)).count();
            }
        }
    }
    (tri, quad)
}

fn motif_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(37);
    let mut mismatches = Vec::new();
    let mut totals = (0, 0);
    let mut graphs = 0;
    while graphs < 10 {
        let m = r.gen_range(3..10);
        let n = r.gen_range(2..10);
        let g = random_graph(m, n, 0.35, 0.35, &mut r);
        let source = r.gen_range(0..m);
        let Ok(paths) = enumerate_ego_paths(&g, source, 2, 1 << 20) else { continue };
        let pool = WalkPool { source: source as u32, k: 2, paths: paths.into_iter().map(|(p, _)| p).collect() };
        let motifs = find_motifs(&pool, &g);
        let tri = motifs.iter().filter(|x| x.kind == MotifKind::Triangle).count();
        let got = (tri, motifs.len() - tri);
        let want = brute_force_motifs(&g, source);
        if got != want {
            mismatches.push((got, want));
        }
        totals.0 += want.0;
        totals.1 += want.1;
        graphs += 1;
    }
    verdict(
        mismatches.is_empty(),
        format!(
            "10 graphs, {} triangles and {} quadrilaterals, mismatches {mismatches:?}, {:.2}s",
            totals.0,
            totals.1,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn lastfm_dir() -> Option<PathBuf> {
    std::env::var_os("SOREX_LASTFM_DIR").map(PathBuf::from)
}

fn lastfm_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..Default::default() };
    cfg.data.name = "lastfm".into();
    if let Ok(t) = std::env::var("SOREX_THREADS") {
        cfg.threads = t.parse().unwrap_or(1);
    }
    cfg
}

fn lastfm_data(dir: &std::path::Path, cfg: &RunConfig) -> sorex::Result<PreparedData> {
    let raw = load_dataset(&dir.join("user_artists.dat"), &dir.join("user_friends.dat"), cfg.data.rating_threshold)?;
    let pre = preprocess(&raw, cfg.data.min_interactions)?;
    let [a, b, c] = cfg.data.ratios;
    let split = split(&pre.graph, (a, b, c), cfg.seed)?;
    Ok(PreparedData { graph: pre.graph, split, user_ids: pre.user_ids, item_ids: pre.item_ids })
}

fn lastfm_reproduction() -> Outcome {
    let Some(dir) = lastfm_dir() else {
        return Outcome::NotRun("SOREX_LASTFM_DIR not set; dataset unavailable offline".into());
    };
    let cfg = lastfm_config(0);
    let run = || -> sorex::Result<(f64, f64)> {
        let data = lastfm_data(&dir, &cfg)?;
        let outcome = train(&cfg, &data, |_| {})?;
        let rep = evaluate(&outcome.model, &data, EvalMode::Test, 5, 10, cfg.train.val_negatives, cfg.seed, cfg.threads)?;
        Ok((rep.hr, rep.ndcg))
    };
    match run() {
        Ok((hr, ndcg)) => verdict(hr >= 0.180 && ndcg >= 0.103, format!("test HR@10 {hr:.4} NDCG@10 {ndcg:.4}")),
        Err(e) => Outcome::Fail(format!("error: {e}")),
    }
}

fn ablation_sanity() -> Outcome {
    let Some(dir) = lastfm_dir() else {
        return Outcome::NotRun("SOREX_LASTFM_DIR not set; dataset unavailable offline".into());
    };
    let run = |seed: u64, tweak: &dyn Fn(&mut RunConfig)| -> sorex::Result<f64> {
        let mut cfg = lastfm_config(seed);
        tweak(&mut cfg);
        let data = lastfm_data(&dir, &cfg)?;
        let outcome = train(&cfg, &data, |_| {})?;
        let rep = evaluate(&outcome.model, &data, EvalMode::Validation, 5, 10, cfg.train.val_negatives, cfg.seed, cfg.threads)?;
        Ok(rep.ndcg)
    };
    let variants: [(&str, &dyn Fn(&mut RunConfig)); 3] =
        [("full", &|_| {}), ("gamma0", &|c| c.train.gamma = 0.0), ("no_reaggregation", &|c| c.egopath.reaggregation = false)];
    let mut means = Vec::new();
    let mut full_sd = 0.0;
    for (name, tweak) in variants {
        let mut xs = Vec::new();
        for seed in 0..3 {
            match run(seed, tweak) {
                Ok(x) => xs.push(x),
                Err(e) => return Outcome::Fail(format!("{name} seed {seed}: {e}")),
            }
        }
        let mean = xs.iter().sum::<f64>() / 3.0;
        if name == "full" {
            full_sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        }
        means.push((name, mean));
    }
    let full = means[0].1;
    let ok = means[1..].iter().all(|(_, m)| *m <= full + full_sd);
    verdict(ok, format!("validation NDCG@10 means {means:?}, full sd {full_sd:.4}"))
}

fn small_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..Default::default() };
    cfg.data.name = "planted".into();
    cfg.model.d = 16;
    cfg.egopath.n_w = 20;
    cfg.train.epochs = 12;
    cfg.train.batch_size = 64;
    cfg.train.lr = 0.01;
    cfg.train.val_negatives = 20;
    cfg.train.patience = 100;
    cfg
}

fn fidelity_direction() -> Outcome {
    let start = Instant::now();
    let cfg = small_run_config(2);
    let data = match planted_data(&PlantedConfig { users: 120, items: 60, ..Default::default() }, cfg.seed, (0.8, 0.1, 0.1)) {
        Ok(d) => d,
        Err(e) => return Outcome::Fail(format!("data: {e}")),
    };
    let outcome = match train(&cfg, &data, |_| {}) {
        Ok(o) => o,
        Err(e) => return Outcome::Fail(format!("train: {e}")),
    };
    let tasks = test_tasks(&outcome.model.graph, &data.split.test);
    match fidelity(&outcome.model, &tasks, 5, 10, None, EvalKey { seed: cfg.seed, salt: 0 }, 1) {
        Ok(f) => verdict(
            f.trials >= 100 && f.explanation_pct > f.random_pct,
            format!(
                "trained planted model, {} trials, explanation {:.2}% vs random {:.2}%, {:.1}s",
                f.trials,
                f.explanation_pct,
                f.random_pct,
                start.elapsed().as_secs_f64()
            ),
        ),
        Err(e) => Outcome::Fail(format!("fidelity: {e}")),
    }
}

fn determinism() -> Outcome {
    let run = || -> sorex::Result<(Vec<u8>, String)> {
        let mut cfg = small_run_config(4);
        cfg.train.epochs = 3;
        cfg.threads = 1;
        let data = planted_data(&PlantedConfig::default(), cfg.seed, (0.8, 0.1, 0.1))?;
        let outcome = train(&cfg, &data, |_| {})?;
        let bytes = outcome.checkpoint(cfg.model_digest()).to_bytes();
        let rep = evaluate(&outcome.model, &data, EvalMode::Test, 2, 10, cfg.train.val_negatives, cfg.seed, 1)?;
        Ok((bytes, MetricsDocument::new("planted", EvalMode::Test, &rep).to_json()))
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => {
            verdict(a == b, format!("checkpoint {} bytes, identical {}; metrics JSON identical {}", a.0.len(), a.0 == b.0, a.1 == b.1))
        }
        (Err(e), _) | (_, Err(e)) => Outcome::Fail(format!("error: {e}")),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("propagation oracle", propagation_oracle),
        ("walk-sampler distribution", walk_distribution),
        ("probability validity", probability_validity),
        ("motif oracle", motif_oracle),
        ("LastFM desk-scale reproduction", lastfm_reproduction),
        ("fidelity direction", fidelity_direction),
        ("ablation sanity", ablation_sanity),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let line = match check() {
            Outcome::Pass(d) => format!("PASS    {name}: {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                format!("FAIL    {name}: {d}")
            }
            Outcome::NotRun(d) => format!("NOT RUN {name}: {d}"),
        };
        println!("{line}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
