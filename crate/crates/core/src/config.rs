//! Run configuration: a TOML file with one section per subsystem plus
//! `--set section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SorexError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters are rounded to `f32` after every update, so checkpoints
    /// store them exactly.
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub name: String,
    pub interactions: PathBuf,
    pub social: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rating_threshold: Option<f64>,
    pub min_interactions: usize,
    pub ratios: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            name: "dataset".into(),
            interactions: PathBuf::from("interactions.tsv"),
            social: PathBuf::from("social.tsv"),
            rating_threshold: None,
            min_interactions: 2,
            ratios: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TowerConfig {
    pub d: usize,
    pub k1: usize,
    pub k2: usize,
    /// Jaccard-based social influence weights; off means LightGCN
    /// symmetric normalization on the social graph.
    pub social_influence: bool,
    /// Off drops the social tower's contribution to the fused score.
    pub social_tower: bool,
    /// Items in the social tower are represented by the mean of their
    /// interactors' encoded states; off uses the item ID embedding.
    pub item_transfer: bool,
    pub init_scale: f64,
    pub precision: Precision,
}

impl Default for TowerConfig {
    fn default() -> Self {
        TowerConfig {
            d: 64,
            k1: 2,
            k2: 2,
            social_influence: true,
            social_tower: true,
            item_transfer: true,
            init_scale: 0.1,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EgoPathConfig {
    pub k: usize,
    pub n_w: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Divide path similarity by `k - 1` instead of `k`.
    pub k_minus_one_divisor: bool,
    /// Keep the `topk` most similar paths instead of Bernoulli sampling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topk: Option<usize>,
    pub reaggregation: bool,
    /// Divide by `1 + nonempty hops` instead of `k + 1`.
    pub renorm_empty: bool,
}

impl Default for EgoPathConfig {
    fn default() -> Self {
        EgoPathConfig {
            k: 2,
            n_w: 100,
            tau_start: 1.0,
            tau_end: 0.3,
            k_minus_one_divisor: false,
            topk: None,
            reaggregation: true,
            renorm_empty: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub train_negatives: usize,
    pub val_negatives: usize,
    pub epochs: usize,
    pub patience: usize,
    pub val_passes: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.5,
            lambda: 0.001,
            lr: 0.001,
            batch_size: 512,
            train_negatives: 10,
            val_negatives: 1000,
            epochs: 500,
            patience: 10,
            val_passes: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub top_k: usize,
    pub passes: usize,
    /// Restrict fidelity to pairs whose truth ranks within `top_rank`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fidelity_top_rank: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { top_k: 10, passes: 5, fidelity_top_rank: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriangleRule {
    /// Detected when at least one realizing path is kept.
    Any,
    /// Detected only when every realizing path is kept.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub top_rank: usize,
    pub triangle_rule: TriangleRule,
    /// Cap on analyzed test pairs; 0 means all.
    pub max_pairs: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { top_rank: 5, triangle_rule: TriangleRule::Any, max_pairs: 0 }
    }
}

/// Everything the model needs to compute scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub tower: TowerConfig,
    pub egopath: EgoPathConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: TowerConfig,
    pub egopath: EgoPathConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            model: TowerConfig::default(),
            egopath: EgoPathConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

impl RunConfig {
    /// Parses TOML text and applies `section.key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| SorexError::Config(e.to_string()))?;
        for ov in overrides {
            let (key, value) = ov.split_once('=').ok_or_else(|| SorexError::Config(format!("override {ov:?} is not key=value")))?;
            let parts: Vec<&str> = key.trim().split('.').collect();
            let (last, sections) = parts.split_last().expect("split yields at least one part");
            let mut cursor = &mut table;
            for section in sections {
                let entry = cursor.entry(section.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
                cursor = entry.as_table_mut().ok_or_else(|| SorexError::Config(format!("{section} is not a section")))?;
            }
            cursor.insert(last.to_string(), parse_value(value.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| SorexError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| SorexError::io(p, e))?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Some(p) = path {
            let base = p.parent().unwrap_or(Path::new("."));
            cfg.data.interactions = resolve(base, &cfg.data.interactions);
            cfg.data.social = resolve(base, &cfg.data.social);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { tower: self.model.clone(), egopath: self.egopath.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SorexError::Config(m.to_owned()));
        if self.model.d == 0 {
            return bad("model.d must be >= 1");
        }
        if self.model.k1 == 0 || self.model.k2 == 0 {
            return bad("model.k1 and model.k2 must be >= 1");
        }
        if self.model.init_scale <= 0.0 {
            return bad("model.init_scale must be > 0");
        }
        if self.egopath.k < 2 {
            return bad("egopath.k must be >= 2");
        }
        if self.egopath.n_w == 0 {
            return bad("egopath.n_w must be >= 1");
        }
        if !(self.egopath.tau_start > 0.0 && self.egopath.tau_end > 0.0) {
            return bad("egopath temperatures must be > 0");
        }
        if self.train.gamma < 0.0 || self.train.lambda < 0.0 || self.train.lr <= 0.0 {
            return bad("train.gamma and train.lambda must be >= 0, train.lr > 0");
        }
        if self.train.batch_size == 0 || self.train.train_negatives == 0 {
            return bad("train.batch_size and train.train_negatives must be >= 1");
        }
        if self.eval.top_k == 0 || self.eval.passes == 0 {
            return bad("eval.top_k and eval.passes must be >= 1");
        }
        Ok(())
    }

    /// Digest of every setting that influences a trained model.
    pub fn model_digest(&self) -> [u8; 32] {
        #[derive(Serialize)]
        struct Keyed<'a> {
            seed: u64,
            rating_threshold: Option<f64>,
            min_interactions: usize,
            ratios: [f64; 3],
            model: &'a TowerConfig,
            egopath: &'a EgoPathConfig,
            train: &'a TrainConfig,
        }
        let keyed = Keyed {
            seed: self.seed,
            rating_threshold: self.data.rating_threshold,
            min_interactions: self.data.min_interactions,
            ratios: self.data.ratios,
            model: &self.model,
            egopath: &self.egopath,
            train: &self.train,
        };
        Sha256::digest(serde_json::to_vec(&keyed).expect("serializable")).into()
    }

    /// Digest of the full resolved configuration, minus the output
    /// directory and thread count, which never change results.
    pub fn full_digest(&self) -> [u8; 32] {
        let keyed = RunConfig { out: PathBuf::new(), threads: 1, ..self.clone() };
        Sha256::digest(serde_json::to_vec(&keyed).expect("serializable")).into()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_settings() {
        let c = RunConfig::default();
        assert_eq!(c.model.d, 64);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.lambda, 0.001);
        assert_eq!(c.train.train_negatives, 10);
        assert_eq!(c.train.val_negatives, 1000);
        assert_eq!(c.eval.passes, 5);
        assert_eq!(c.eval.top_k, 10);
        assert_eq!(c.data.ratios, [0.8, 0.1, 0.1]);
    }

    #[test]
    fn overrides_apply_and_change_digest() {
        let base = RunConfig::from_toml_str("seed = 3\n[train]\ngamma = 0.2\n", &[]).unwrap();
        assert_eq!(base.seed, 3);
        assert_eq!(base.train.gamma, 0.2);
        let over = RunConfig::from_toml_str("seed = 3\n[train]\ngamma = 0.2\n", &["train.gamma=0".into()]).unwrap();
        assert_eq!(over.train.gamma, 0.0);
        assert_ne!(base.model_digest(), over.model_digest());
        let named = RunConfig::from_toml_str("", &["data.name=lastfm".into(), "egopath.topk=5".into()]).unwrap();
        assert_eq!(named.data.name, "lastfm");
        assert_eq!(named.egopath.topk, Some(5));
    }

    #[test]
    fn eval_settings_do_not_touch_model_digest() {
        let a = RunConfig::default();
        let b = RunConfig::from_toml_str("", &["eval.passes=2".into()]).unwrap();
        assert_eq!(a.model_digest(), b.model_digest());
        assert_ne!(a.full_digest(), b.full_digest());
        let c = RunConfig::from_toml_str("threads = 4\nout = \"elsewhere\"\n", &[]).unwrap();
        assert_eq!(a.full_digest(), c.full_digest());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::from_toml_str("[train]\ngama = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml_str("", &["egopath.k=1".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["nonsense".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::from_toml_str("", &["data.rating_threshold=4".into()]).unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(c, back);
    }
}
