use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, SorexError};

/// Edge lists as read from disk, with dense indices assigned in order of
/// first appearance.
#[derive(Debug, Clone, Default)]
pub struct RawDataset {
    pub interactions: Vec<(u32, u32)>,
    pub social: Vec<(u32, u32)>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Users that only appear in the social file.
    pub social_only_users: Vec<u32>,
    /// Interaction lines dropped by the rating threshold.
    pub dropped_by_rating: usize,
}

#[derive(Default)]
struct IdMap {
    index: HashMap<String, u32>,
    ids: Vec<String>,
}

impl IdMap {
    fn get_or_insert(&mut self, id: &str) -> (u32, bool) {
        if let Some(&i) = self.index.get(id) {
            return (i, false);
        }
        let i = self.ids.len() as u32;
        self.index.insert(id.to_owned(), i);
        self.ids.push(id.to_owned());
        (i, true)
    }
}

fn looks_like_header(fields: &[&str]) -> bool {
    fields.first().is_some_and(|f| f.to_ascii_lowercase().starts_with("user"))
}

/// Non-empty, non-comment lines with their 1-based line numbers; a leading
/// header line (first field starting with `user`) is skipped.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    let mut first = true;
    text.lines().enumerate().filter_map(move |(i, line)| {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            return None;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let was_first = std::mem::replace(&mut first, false);
        if was_first && looks_like_header(&fields) {
            return None;
        }
        Some((i + 1, fields))
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SorexError::io(path, e))
}

/// Reads `user<TAB>item[<TAB>rating]` and `user<TAB>user` files.
///
/// With `rating_threshold`, interaction lines carrying a rating below it are
/// dropped; lines without a rating column are kept.
pub fn load_dataset(interaction_path: &Path, social_path: &Path, rating_threshold: Option<f64>) -> Result<RawDataset> {
    let mut users = IdMap::default();
    let mut items = IdMap::default();
    let mut out = RawDataset::default();

    let text = read(interaction_path)?;
    for (line, fields) in data_lines(&text) {
        let parse_err = |message: String| SorexError::Parse { path: interaction_path.to_path_buf(), line, message };
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err("expected user<TAB>item[<TAB>rating]".into()));
        }
        if fields.len() > 2 {
            let rating: f64 = fields[2].parse().map_err(|_| parse_err(format!("rating {:?} is not a number", fields[2])))?;
            if rating_threshold.is_some_and(|t| rating < t) {
                out.dropped_by_rating += 1;
                continue;
            }
        }
        let (u, _) = users.get_or_insert(fields[0]);
        let (v, _) = items.get_or_insert(fields[1]);
        out.interactions.push((u, v));
    }

    let text = read(social_path)?;
    for (line, fields) in data_lines(&text) {
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(SorexError::Parse { path: social_path.to_path_buf(), line, message: "expected user<TAB>user".into() });
        }
        let (a, new_a) = users.get_or_insert(fields[0]);
        let (b, new_b) = users.get_or_insert(fields[1]);
        if new_a {
            out.social_only_users.push(a);
        }
        if new_b {
            out.social_only_users.push(b);
        }
        out.social.push((a, b));
    }

    out.user_ids = users.ids;
    out.item_ids = items.ids;
    Ok(out)
}
