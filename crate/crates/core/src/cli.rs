//! Command-line pipelines. Every command reads the resolved configuration
//! and writes its artifacts under `out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use crate::analysis::{analyze, collect_stats, ExplanationDoc, UserAnalysis};
use crate::config::{hex, RunConfig};
use crate::error::{Result, SorexError};
use crate::evaluation::{evaluate, fidelity, test_tasks, EvalKey, EvalMode, MetricsDocument};
use crate::graph::{load_dataset, preprocess, read_cache, split, write_cache, PreparedData};
use crate::model::Model;
use crate::synthetic::{planted, write_tsv, PlantedConfig};
use crate::towers::Tower;
use crate::training::checkpoint::Checkpoint;
use crate::training::{train, EpochLog};

pub const GRAPH_FILE: &str = "graph.srxg";
pub const CHECKPOINT_FILE: &str = "model.srxc";
pub const CONFIG_FILE: &str = "config.toml";
pub const DIGEST_FILE: &str = "digest.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const STATS_FILE: &str = "motif_stats.tsv";
pub const FIDELITY_FILE: &str = "fidelity.json";
pub const EXPLANATION_DIR: &str = "explanations";

#[derive(Debug, Parser)]
#[command(name = "sorex", version, about = "Self-explainable social recommendation")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory for every artifact.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Per-key override, repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Test,
    Validation,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-community dataset as TSV files.
    Synth {
        #[arg(long, value_name = "DIR")]
        dir: PathBuf,
        #[arg(long, default_value_t = 60)]
        users: usize,
        #[arg(long, default_value_t = 40)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        communities: usize,
    },
    /// Load, filter and split the dataset into the graph cache.
    Prepare,
    /// Train and write the checkpoint and epoch log.
    Train {
        /// Shorthand for `--set train.gamma=X`.
        #[arg(long)]
        gamma: Option<f64>,
        /// Shorthand for `--set train.epochs=N`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Rank held-out items and write the metrics JSON.
    Evaluate {
        #[arg(long, value_enum, default_value = "test")]
        mode: ModeArg,
        /// Shorthand for `--set eval.passes=N`.
        #[arg(long)]
        passes: Option<usize>,
    },
    /// Export explanation JSON and DOT files for analyzed test pairs.
    Explain {
        /// Shorthand for `--set analysis.max_pairs=N`.
        #[arg(long)]
        max_pairs: Option<usize>,
    },
    /// Write motif detection and similarity statistics.
    Analyze {
        #[arg(long)]
        max_pairs: Option<usize>,
    },
    /// Measure the ranking drop from withholding explanations.
    Fidelity {
        #[arg(long)]
        passes: Option<usize>,
    },
}

impl Command {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{key}={v}"));
            }
        };
        match self {
            Command::Train { gamma, epochs } => {
                push("train.gamma", gamma.map(|g| format!("{g:?}")));
                push("train.epochs", epochs.map(|e| e.to_string()));
            }
            Command::Evaluate { passes, .. } | Command::Fidelity { passes } => push("eval.passes", passes.map(|p| p.to_string())),
            Command::Explain { max_pairs } | Command::Analyze { max_pairs } => push("analysis.max_pairs", max_pairs.map(|p| p.to_string())),
            _ => {}
        }
        out
    }
}

/// Resolves the configuration: file, then `--set` and command shorthands,
/// then `--seed`, `--out` and `SOREX_THREADS`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(cli.command.overrides());
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Ok(t) = std::env::var("SOREX_THREADS") {
        cfg.threads = t.trim().parse().map_err(|_| SorexError::Config(format!("SOREX_THREADS={t:?} is not a count")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| SorexError::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| SorexError::io(path, e))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(SorexError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing; run `{hint}` first"))))
    }
}

fn write_run_config(cfg: &RunConfig) -> Result<()> {
    write(&cfg.out.join(CONFIG_FILE), cfg.to_toml())?;
    write(&cfg.out.join(DIGEST_FILE), format!("model {}\nfull {}\n", hex(&cfg.model_digest()), hex(&cfg.full_digest())))
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let raw = load_dataset(&cfg.data.interactions, &cfg.data.social, cfg.data.rating_threshold)?;
    let pre = preprocess(&raw, cfg.data.min_interactions)?;
    let [tr, va, te] = cfg.data.ratios;
    let split = split(&pre.graph, (tr, va, te), cfg.seed)?;
    Ok(PreparedData { graph: pre.graph, split, user_ids: pre.user_ids, item_ids: pre.item_ids })
}

fn load_data(cfg: &RunConfig) -> Result<PreparedData> {
    let path = cfg.out.join(GRAPH_FILE);
    require(&path, "sorex prepare")?;
    let data = read_cache(&path)?;
    if data.split.seed != cfg.seed {
        return Err(SorexError::Config(format!(
            "graph cache was split with seed {}, config has seed {}; rerun prepare",
            data.split.seed, cfg.seed
        )));
    }
    Ok(data)
}

fn load_model(cfg: &RunConfig, data: &PreparedData) -> Result<Model> {
    let path = cfg.out.join(CHECKPOINT_FILE);
    require(&path, "sorex train")?;
    let ckpt = Checkpoint::load(&path, &cfg.model_digest())?;
    if ckpt.m != data.graph.num_users() || ckpt.n != data.graph.num_items() {
        return Err(SorexError::Format("checkpoint shape does not match the graph cache".into()));
    }
    Ok(Model::new(cfg.model_config(), Arc::new(data.train_graph()), ckpt.emb))
}

fn analyzed(cfg: &RunConfig, model: &Model, data: &PreparedData) -> Result<Vec<UserAnalysis>> {
    let tasks = test_tasks(&model.graph, &data.split.test);
    analyze(model, &tasks, &cfg.analysis, EvalKey { seed: cfg.seed, salt: 0 }, cfg.threads)
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Command::Synth { dir, users, items, communities } = &cli.command {
        let pc = PlantedConfig { users: *users, items: *items, communities: *communities, ..Default::default() };
        let (inter, social) = planted(&pc, cli.seed.unwrap_or(0))?;
        write_tsv(dir, &inter, &social)?;
        println!("wrote {} interactions and {} social edges to {}", inter.len(), social.len(), dir.display());
        return Ok(());
    }
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synth { .. } => unreachable!("handled above"),
        Command::Prepare => {
            let data = prepare_data(&cfg)?;
            write_run_config(&cfg)?;
            write_cache(&cfg.out.join(GRAPH_FILE), &data)?;
            let s = &data.split;
            println!(
                "users {} items {} interactions {} social {} | train {} valid {} test {}",
                data.graph.num_users(),
                data.graph.num_items(),
                data.graph.num_interactions(),
                data.graph.num_social(),
                s.train.len(),
                s.valid.len(),
                s.test.len()
            );
        }
        Command::Train { .. } => {
            let data = load_data(&cfg)?;
            write_run_config(&cfg)?;
            let mut log = String::from(EpochLog::TSV_HEADER);
            log.push('\n');
            let outcome = train(&cfg, &data, |e| eprintln!("epoch {} loss {:.4} val_ndcg {:?}", e.epoch, e.loss.total, e.val_ndcg))?;
            for e in &outcome.log {
                log.push_str(&e.tsv_line());
                log.push('\n');
            }
            write(&cfg.out.join(TRAIN_LOG_FILE), log)?;
            outcome.checkpoint(cfg.model_digest()).save(&cfg.out.join(CHECKPOINT_FILE))?;
            if let Some(reason) = &outcome.aborted {
                return Err(SorexError::NonFinite(format!("training aborted ({reason}); best parameters saved")));
            }
            println!("best epoch {} val_ndcg {:?}", outcome.best_epoch, outcome.best_val_ndcg);
        }
        Command::Evaluate { mode, .. } => {
            let data = load_data(&cfg)?;
            let model = load_model(&cfg, &data)?;
            let mode = match mode {
                ModeArg::Test => EvalMode::Test,
                ModeArg::Validation => EvalMode::Validation,
            };
            let report = evaluate(&model, &data, mode, cfg.eval.passes, cfg.eval.top_k, cfg.train.val_negatives, cfg.seed, cfg.threads)?;
            let doc = MetricsDocument::new(&cfg.data.name, mode, &report);
            let path = cfg.out.join(format!("metrics_{}.json", mode.as_str()));
            write(&path, doc.to_json())?;
            println!("HR@{k} {:.4} NDCG@{k} {:.4} -> {}", report.hr, report.ndcg, path.display(), k = report.k);
        }
        Command::Fidelity { .. } => {
            let data = load_data(&cfg)?;
            let model = load_model(&cfg, &data)?;
            let report =
                evaluate(&model, &data, EvalMode::Test, cfg.eval.passes, cfg.eval.top_k, cfg.train.val_negatives, cfg.seed, cfg.threads)?;
            let tasks = test_tasks(&model.graph, &data.split.test);
            let key = EvalKey { seed: cfg.seed, salt: 0 };
            let f = fidelity(&model, &tasks, cfg.eval.passes, cfg.eval.top_k, cfg.eval.fidelity_top_rank, key, cfg.threads)?;
            let doc = MetricsDocument::new(&cfg.data.name, EvalMode::Test, &report).with_fidelity(&f);
            write(&cfg.out.join(FIDELITY_FILE), doc.to_json())?;
            println!("fidelity {:.2}% random {:.2}% over {} trials", f.explanation_pct, f.random_pct, f.trials);
        }
        Command::Explain { .. } => {
            let data = load_data(&cfg)?;
            let model = load_model(&cfg, &data)?;
            let dir = cfg.out.join(EXPLANATION_DIR);
            let mut files = 0;
            for ua in analyzed(&cfg, &model, &data)? {
                for (group, e) in ua.explained() {
                    for tower in Tower::BOTH {
                        let doc = ExplanationDoc::build(ua.user as usize, &ua.pool, e, tower, &ua.motifs, cfg.analysis.triangle_rule);
                        let stem = format!("{}_{}_{}_{}", doc.user, doc.candidate, group.as_str(), tower.as_str());
                        write(&dir.join(format!("{stem}.json")), doc.to_json())?;
                        write(&dir.join(format!("{stem}.dot")), doc.to_dot())?;
                        files += 2;
                    }
                }
            }
            println!("wrote {files} files to {}", dir.display());
        }
        Command::Analyze { .. } => {
            let data = load_data(&cfg)?;
            let model = load_model(&cfg, &data)?;
            let analyses = analyzed(&cfg, &model, &data)?;
            let stats = collect_stats(&analyses, cfg.analysis.triangle_rule);
            let path = cfg.out.join(STATS_FILE);
            write(&path, stats.to_tsv(&cfg.data.name))?;
            let pairs: usize = analyses.iter().map(|u| u.pairs.len()).sum();
            println!("{pairs} pairs analyzed -> {}", path.display());
        }
    }
    Ok(())
}
