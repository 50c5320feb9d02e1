//! Interaction logs, k-core filtering, leave-one-out splits and samplers.

mod interactions;
mod kcore;
mod sampling;
mod split;
mod store;
mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use interactions::{load_interactions, load_interactions_with, Column, Format, LoadOptions};
pub use kcore::k_core_filter;
pub use sampling::{mask_history, sample_excluding, sample_logic_negatives, MAX_LOGIC_NEGATIVES};
pub use split::{build_splits, build_splits_with, DatasetStats, SplitOptions, TrainPrefixes};
pub use store::{read_split, write_split};
pub use synthetic::{generate_synthetic, ConjunctiveRule, SyntheticRule, SyntheticSpec};

/// Dense id reserved for padding.
pub const PAD: usize = 0;

/// One (user, item, timestamp) event.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user_id: impl Into<String>, item_id: impl Into<String>, timestamp: i64) -> Self {
        Interaction {
            user_id: user_id.into(),
            item_id: item_id.into(),
            timestamp,
        }
    }
}

/// A left-padded history window and the item that followed it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceExample {
    pub user: usize,
    /// Length `max_len`, left-padded with [`PAD`].
    pub history: Vec<usize>,
    pub target: usize,
    pub history_len: usize,
}

impl SequenceExample {
    /// Builds an example from the chronological prefix, keeping its last
    /// `max_len` items.
    pub fn from_prefix(user: usize, prefix: &[usize], target: usize, max_len: usize) -> Self {
        let start = prefix.len().saturating_sub(max_len);
        let kept = &prefix[start..];
        let mut history = vec![PAD; max_len - kept.len()];
        history.extend_from_slice(kept);
        SequenceExample {
            user,
            history,
            target,
            history_len: kept.len(),
        }
    }

    /// Non-padding history items in chronological order.
    pub fn items(&self) -> impl Iterator<Item = usize> + '_ {
        self.history.iter().copied().filter(|&i| i != PAD)
    }

    pub fn max_len(&self) -> usize {
        self.history.len()
    }
}

/// Bidirectional raw-string to dense-integer map. Dense ids start at `base`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    base: usize,
    raw: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new(base: usize) -> Self {
        IdMap {
            base,
            raw: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_raw(base: usize, raw: Vec<String>) -> Self {
        let index = raw
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i + base))
            .collect();
        IdMap { base, raw, index }
    }

    /// Returns the dense id for `raw`, assigning the next one if unseen.
    pub fn intern(&mut self, raw: &str) -> usize {
        if let Some(&id) = self.index.get(raw) {
            return id;
        }
        let id = self.raw.len() + self.base;
        self.raw.push(raw.to_owned());
        self.index.insert(raw.to_owned(), id);
        id
    }

    pub fn dense(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, dense: usize) -> Option<&str> {
        dense
            .checked_sub(self.base)
            .and_then(|i| self.raw.get(i))
            .map(String::as_str)
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str)> {
        self.raw
            .iter()
            .enumerate()
            .map(move |(i, r)| (i + self.base, r.as_str()))
    }

    /// SHA-256 over the ordered raw ids.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.base.to_le_bytes());
        for r in &self.raw {
            h.update(r.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Leave-one-out train/valid/test examples plus the id maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub item_count: usize,
    pub user_count: usize,
    pub max_len: usize,
    pub train: Vec<SequenceExample>,
    pub valid: Vec<SequenceExample>,
    pub test: Vec<SequenceExample>,
    pub users: IdMap,
    pub items: IdMap,
    /// Users excluded for having fewer than three interactions.
    pub dropped_users: usize,
}

impl DatasetSplit {
    pub fn item_fingerprint(&self) -> String {
        self.items.fingerprint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_is_truncated_and_left_padded() {
        let ex = SequenceExample::from_prefix(0, &[1, 2, 3], 4, 5);
        assert_eq!(ex.history, vec![0, 0, 1, 2, 3]);
        assert_eq!(ex.history_len, 3);
        let ex = SequenceExample::from_prefix(0, &[1, 2, 3, 4, 5, 6], 7, 4);
        assert_eq!(ex.history, vec![3, 4, 5, 6]);
        assert_eq!(ex.history_len, 4);
    }

    #[test]
    fn id_map_round_trips() {
        let mut m = IdMap::new(1);
        assert_eq!(m.intern("a"), 1);
        assert_eq!(m.intern("b"), 2);
        assert_eq!(m.intern("a"), 1);
        assert_eq!(m.raw(2), Some("b"));
        assert_eq!(m.raw(0), None);
        assert_eq!(m.dense("b"), Some(2));
        let rebuilt = IdMap::from_raw(1, vec!["a".into(), "b".into()]);
        assert_eq!(rebuilt.fingerprint(), m.fingerprint());
        assert_eq!(rebuilt.dense("a"), Some(1));
    }
}
