use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, IdMap, Interaction, SequenceExample};

/// Which prefixes of a user's training region become train examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPrefixes {
    /// One example per target position 2..=L-2.
    #[default]
    All,
    /// Only the example targeting position L-2.
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub max_len: usize,
    pub train_prefixes: TrainPrefixes,
}

impl SplitOptions {
    pub fn new(max_len: usize) -> Self {
        SplitOptions {
            max_len,
            train_prefixes: TrainPrefixes::All,
        }
    }
}

pub fn build_splits(interactions: &[Interaction], max_len: usize) -> DatasetSplit {
    build_splits_with(interactions, &SplitOptions::new(max_len))
}

/// Leave-one-out split: per user the last item is the test target, the
/// penultimate one the validation target, and earlier positions train.
/// Events are ordered by timestamp with ties kept in input order.
pub fn build_splits_with(interactions: &[Interaction], opts: &SplitOptions) -> DatasetSplit {
    assert!(opts.max_len >= 1, "max_len must be positive");

    let mut order: Vec<&str> = Vec::new();
    let mut by_user: HashMap<&str, Vec<(i64, usize)>> = HashMap::new();
    for (pos, row) in interactions.iter().enumerate() {
        by_user
            .entry(row.user_id.as_str())
            .or_insert_with(|| {
                order.push(row.user_id.as_str());
                Vec::new()
            })
            .push((row.timestamp, pos));
    }

    let mut dropped = 0;
    let mut kept_users: Vec<(&str, Vec<usize>)> = Vec::new();
    for user in order {
        let mut events = by_user.remove(user).unwrap();
        if events.len() < 3 {
            dropped += 1;
            continue;
        }
        // (timestamp, file position) is unique, so this is a total order
        events.sort_unstable();
        kept_users.push((user, events.into_iter().map(|(_, p)| p).collect()));
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} users with fewer than 3 interactions");
    }

    // dense item ids follow first appearance in input order among kept users
    let mut keep_row = vec![false; interactions.len()];
    for (_, rows) in &kept_users {
        for &p in rows {
            keep_row[p] = true;
        }
    }
    let mut items = IdMap::new(1);
    for (row, keep) in interactions.iter().zip(&keep_row) {
        if *keep {
            items.intern(&row.item_id);
        }
    }

    let mut users = IdMap::new(0);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (raw_user, rows) in &kept_users {
        let uid = users.intern(raw_user);
        let seq: Vec<usize> = rows
            .iter()
            .map(|&p| items.dense(&interactions[p].item_id).unwrap())
            .collect();
        let n = seq.len();
        let ml = opts.max_len;
        test.push(SequenceExample::from_prefix(uid, &seq[..n - 1], seq[n - 1], ml));
        valid.push(SequenceExample::from_prefix(uid, &seq[..n - 2], seq[n - 2], ml));
        let first_target = match opts.train_prefixes {
            TrainPrefixes::All => 1,
            TrainPrefixes::Last => n - 3,
        };
        // 0-based target index t has history seq[..t]
        for t in first_target.max(1)..=n - 3 {
            train.push(SequenceExample::from_prefix(uid, &seq[..t], seq[t], ml));
        }
    }

    DatasetSplit {
        item_count: items.len(),
        user_count: users.len(),
        max_len: opts.max_len,
        train,
        valid,
        test,
        users,
        items,
        dropped_users: dropped,
    }
}

/// Corpus statistics in the layout of a dataset summary table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_length: f64,
    pub sparsity: f64,
}

impl DatasetStats {
    pub fn from_interactions(interactions: &[Interaction]) -> Self {
        let users: std::collections::HashSet<&str> =
            interactions.iter().map(|r| r.user_id.as_str()).collect();
        let items: std::collections::HashSet<&str> =
            interactions.iter().map(|r| r.item_id.as_str()).collect();
        let (u, i, n) = (users.len(), items.len(), interactions.len());
        let avg_length = if u == 0 { 0.0 } else { n as f64 / u as f64 };
        let sparsity = if u == 0 || i == 0 {
            1.0
        } else {
            1.0 - n as f64 / (u as f64 * i as f64)
        };
        DatasetStats {
            users: u,
            items: i,
            interactions: n,
            avg_length,
            sparsity,
        }
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Users\tItems\tRatings\tAvg. Len.\tSparsity")?;
        write!(
            f,
            "{}\t{}\t{}\t{:.1}\t{:.2}%",
            self.users,
            self.items,
            self.interactions,
            self.avg_length,
            self.sparsity * 100.0
        )
    }
}
