//! Seeded synthetic data: small random graphs for property checks and a
//! planted-community dataset with learnable structure.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Result, SorexError};
use crate::graph::{split, JointGraph, PreparedData};
use crate::rng::{stream, Purpose};

/// Erdős–Rényi style joint graph: each user–item pair and each user pair
/// is an edge independently with the given probability.
pub fn random_graph<R: Rng + ?Sized>(m: usize, n: usize, p_interact: f64, p_social: f64, rng: &mut R) -> JointGraph {
    let mut inter = Vec::new();
    for u in 0..m as u32 {
        for v in 0..n as u32 {
            if rng.gen::<f64>() < p_interact {
                inter.push((u, v));
            }
        }
    }
    let mut social = Vec::new();
    for a in 0..m as u32 {
        for b in a + 1..m as u32 {
            if rng.gen::<f64>() < p_social {
                social.push((a, b));
            }
        }
    }
    JointGraph::from_edges(m, n, &inter, &social)
}

/// Users and items split into communities. Users mostly interact with and
/// befriend members of their own community.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub users: usize,
    pub items: usize,
    pub communities: usize,
    /// Interactions per user.
    pub per_user: usize,
    /// Probability that an interaction stays inside the user's community.
    pub p_in: f64,
    /// Friends per user.
    pub friends: usize,
    pub friend_p_in: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig { users: 60, items: 40, communities: 4, per_user: 8, p_in: 0.9, friends: 3, friend_p_in: 0.9 }
    }
}

fn pick<R: Rng + ?Sized>(rng: &mut R, total: usize, groups: usize, group: usize, inside: bool) -> usize {
    loop {
        let x = rng.gen_range(0..total);
        if (x % groups == group) == inside {
            return x;
        }
    }
}

pub type EdgeList = Vec<(u32, u32)>;

/// Interaction and social edge lists; node `x` belongs to community
/// `x % communities`.
pub fn planted(cfg: &PlantedConfig, seed: u64) -> Result<(EdgeList, EdgeList)> {
    let c = cfg.communities;
    let per_community = |total: usize| total / c.max(1);
    if c < 2 || per_community(cfg.items) < cfg.per_user || per_community(cfg.users) <= cfg.friends {
        return Err(SorexError::Config("planted graph needs >= 2 communities, each larger than per-user degrees".into()));
    }
    let mut rng = stream(seed, Purpose::Init, &[u64::MAX]);
    let mut inter = Vec::new();
    let mut social = Vec::new();
    for u in 0..cfg.users {
        let g = u % c;
        let mut items = Vec::new();
        while items.len() < cfg.per_user {
            let inside = rng.gen::<f64>() < cfg.p_in;
            let v = pick(&mut rng, cfg.items, c, g, inside);
            if !items.contains(&v) {
                items.push(v);
            }
        }
        inter.extend(items.into_iter().map(|v| (u as u32, v as u32)));
        for _ in 0..cfg.friends {
            let inside = rng.gen::<f64>() < cfg.friend_p_in;
            let f = pick(&mut rng, cfg.users, c, g, inside);
            if f != u {
                social.push((u as u32, f as u32));
            }
        }
    }
    Ok((inter, social))
}

/// Graph and split ready for training, with numeric string ids.
pub fn planted_data(cfg: &PlantedConfig, seed: u64, ratios: (f64, f64, f64)) -> Result<PreparedData> {
    let (inter, social) = planted(cfg, seed)?;
    let graph = JointGraph::from_edges(cfg.users, cfg.items, &inter, &social);
    let split = split(&graph, ratios, seed)?;
    Ok(PreparedData {
        graph,
        split,
        user_ids: (0..cfg.users).map(|i| format!("u{i}")).collect(),
        item_ids: (0..cfg.items).map(|i| format!("i{i}")).collect(),
    })
}

/// Writes `interactions.tsv` and `social.tsv` in the loader's format.
pub fn write_tsv(dir: &Path, inter: &[(u32, u32)], social: &[(u32, u32)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SorexError::io(dir, e))?;
    let body = |edges: &[(u32, u32)], a: char, b: char| edges.iter().map(|(x, y)| format!("{a}{x}\t{b}{y}\n")).collect::<String>();
    for (name, text) in [("interactions.tsv", body(inter, 'u', 'i')), ("social.tsv", body(social, 'u', 'u'))] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| SorexError::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_graph_is_valid_and_seeded() {
        let a = random_graph(6, 5, 0.4, 0.3, &mut stream(1, Purpose::Init, &[]));
        let b = random_graph(6, 5, 0.4, 0.3, &mut stream(1, Purpose::Init, &[]));
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(random_graph(4, 3, 1.0, 1.0, &mut stream(1, Purpose::Init, &[])).num_interactions(), 12);
    }

    #[test]
    fn planted_structure() {
        let cfg = PlantedConfig::default();
        let (inter, social) = planted(&cfg, 3).unwrap();
        assert_eq!(inter.len(), cfg.users * cfg.per_user);
        let inside = inter.iter().filter(|(u, v)| *u as usize % 4 == *v as usize % 4).count() as f64 / inter.len() as f64;
        assert!(inside > 0.8, "{inside}");
        assert!(social.iter().all(|(a, b)| a != b));
        assert_eq!(planted(&cfg, 3).unwrap(), (inter, social));
        assert!(planted(&PlantedConfig { communities: 1, ..cfg }, 3).is_err());
    }

    #[test]
    fn tsv_round_trip_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let (inter, social) = planted(&PlantedConfig::default(), 1).unwrap();
        write_tsv(dir.path(), &inter, &social).unwrap();
        let raw = crate::graph::load_dataset(&dir.path().join("interactions.tsv"), &dir.path().join("social.tsv"), None).unwrap();
        assert_eq!(raw.interactions.len(), inter.len());
        assert_eq!(raw.social.len(), social.len());
    }
}
