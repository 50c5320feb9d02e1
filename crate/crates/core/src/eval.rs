//! Full-rank evaluation, metric reports and run comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SequenceExample, PAD};
use crate::error::{Error, Result};
use crate::model::SrplrModel;

/// 1-based rank of `target` (an index into `scores`). Items scoring strictly
/// higher rank ahead, and so do equal-scoring items with a smaller index.
/// Indices flagged in `excluded` are skipped.
pub fn rank_of(scores: &[f64], target: usize, excluded: Option<&[bool]>) -> usize {
    let t = scores[target];
    let mut ahead = 0;
    for (j, &s) in scores.iter().enumerate() {
        if j == target || excluded.is_some_and(|e| e[j]) {
            continue;
        }
        if s > t || (s == t && j < target) {
            ahead += 1;
        }
    }
    ahead + 1
}

pub fn hit_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Settings that must agree for two reports to be comparable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub ks: Vec<usize>,
    pub exclude_history: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            ks: vec![5, 10],
            exclude_history: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub examples: usize,
    pub hit: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

/// Mean HIT@K / NDCG@K over precomputed 1-based ranks.
pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> SplitMetrics {
    let n = ranks.len().max(1) as f64;
    let mut m = SplitMetrics {
        examples: ranks.len(),
        ..Default::default()
    };
    for &k in ks {
        m.hit.insert(k, ranks.iter().map(|&r| hit_at(r, k)).sum::<f64>() / n);
        m.ndcg.insert(k, ranks.iter().map(|&r| ndcg_at(r, k)).sum::<f64>() / n);
    }
    m
}

/// Ranks each example's target among all items (padding excluded).
pub fn rank_examples(
    model: &SrplrModel,
    examples: &[SequenceExample],
    protocol: &EvalProtocol,
    batch_size: usize,
) -> Result<Vec<usize>> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation split has no examples".into()));
    }
    let n_items = model.item_count();
    let chunks: Vec<Result<Vec<usize>>> = examples
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let refs: Vec<&SequenceExample> = chunk.iter().collect();
            let scores = model.score_batch(&refs)?;
            let mut ranks = Vec::with_capacity(chunk.len());
            for (r, ex) in chunk.iter().enumerate() {
                if ex.target == PAD || ex.target > n_items {
                    return Err(Error::IdOutOfRange {
                        id: ex.target,
                        max: n_items,
                    });
                }
                let excluded = protocol.exclude_history.then(|| {
                    let mut e = vec![false; n_items];
                    for i in ex.items() {
                        e[i - 1] = true;
                    }
                    e
                });
                ranks.push(rank_of(scores.row(r), ex.target - 1, excluded.as_deref()));
            }
            Ok(ranks)
        })
        .collect();
    let mut out = Vec::with_capacity(examples.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn evaluate_full_rank(
    model: &SrplrModel,
    examples: &[SequenceExample],
    protocol: &EvalProtocol,
    batch_size: usize,
) -> Result<SplitMetrics> {
    let ranks = rank_examples(model, examples, protocol, batch_size)?;
    Ok(metrics_from_ranks(&ranks, &protocol.ks))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub wall_clock_secs: f64,
    pub protocol: EvalProtocol,
    pub splits: BTreeMap<String, SplitMetrics>,
}

impl MetricsReport {
    pub fn get(&self, split: &str, metric: Metric, k: usize) -> Option<f64> {
        let s = self.splits.get(split)?;
        match metric {
            Metric::Hit => s.hit.get(&k).copied(),
            Metric::Ndcg => s.ndcg.get(&k).copied(),
        }
    }

    /// `key = value` records, one per line.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("label", self.label.clone());
        put("config_hash", self.config_hash.clone());
        put("seed", self.seed.to_string());
        put("epoch", self.epoch.to_string());
        put("wall_clock_secs", format!("{:.3}", self.wall_clock_secs));
        put(
            "ks",
            self.protocol.ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
        );
        put("exclude_history", self.protocol.exclude_history.to_string());
        for (split, m) in &self.splits {
            put(&format!("{split}.examples"), m.examples.to_string());
            for (k, v) in &m.hit {
                put(&format!("{split}.hit@{k}"), format!("{v:.6}"));
            }
            for (k, v) in &m.ndcg {
                put(&format!("{split}.ndcg@{k}"), format!("{v:.6}"));
            }
        }
        out
    }

    /// Tab-separated table: split, metric, k, value.
    pub fn to_table(&self) -> String {
        let mut out = String::from("label\tsplit\tmetric\tk\tvalue\n");
        for (split, m) in &self.splits {
            for (name, map) in [("hit", &m.hit), ("ndcg", &m.ndcg)] {
                for (k, v) in map {
                    out.push_str(&format!("{}\t{split}\t{name}\t{k}\t{v:.6}\n", self.label));
                }
            }
        }
        out
    }

    /// Writes `metrics.txt`, `metrics.tsv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        write("metrics.txt", self.to_records())?;
        write("metrics.tsv", self.to_table())?;
        write(
            "metrics.json",
            serde_json::to_string_pretty(self).map_err(|e| Error::Invalid(e.to_string()))?,
        )
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join("metrics.json");
        let body = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&body).map_err(|e| Error::Parse {
            path: p,
            line: 0,
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Hit,
    Ndcg,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Hit => "HIT",
            Metric::Ndcg => "NDCG",
        })
    }
}

/// Relative change `(b − a) / a`; `None` when the baseline is zero.
pub fn relative_improvement(a: f64, b: f64) -> Option<f64> {
    if a == 0.0 {
        None
    } else {
        Some((b - a) / a)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    /// `(metric, k, value, improvement over the first report)`.
    pub cells: Vec<(Metric, usize, f64, Option<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub split: String,
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

pub const NOT_APPLICABLE: &str = "N/A";

pub fn format_improvement(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{:+.2}%", 100.0 * v),
        None => NOT_APPLICABLE.to_string(),
    }
}

/// Compares every report against the first on `split`.
pub fn compare_runs(reports: &[MetricsReport], split: &str) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Protocol("comparison needs at least two reports".into()));
    }
    let base = &reports[0];
    for r in &reports[1..] {
        if r.protocol != base.protocol {
            return Err(Error::Protocol(format!(
                "report '{}' was evaluated with {:?}, '{}' with {:?}",
                r.label, r.protocol, base.label, base.protocol
            )));
        }
    }
    let mut rows = Vec::new();
    for r in reports {
        let mut cells = Vec::new();
        for metric in [Metric::Hit, Metric::Ndcg] {
            for &k in &base.protocol.ks {
                let a = base
                    .get(split, metric, k)
                    .ok_or_else(|| Error::Protocol(format!("'{}' has no {split} {metric}@{k}", base.label)))?;
                let b = r
                    .get(split, metric, k)
                    .ok_or_else(|| Error::Protocol(format!("'{}' has no {split} {metric}@{k}", r.label)))?;
                cells.push((metric, k, b, relative_improvement(a, b)));
            }
        }
        rows.push(ComparisonRow {
            label: r.label.clone(),
            cells,
        });
    }
    Ok(Comparison {
        split: split.to_string(),
        baseline: base.label.clone(),
        rows,
    })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run")?;
        if let Some(first) = self.rows.first() {
            for (m, k, _, _) in &first.cells {
                write!(f, "\t{m}@{k}\timpro.")?;
            }
        }
        writeln!(f)?;
        for row in &self.rows {
            write!(f, "{}", row.label)?;
            for (_, _, v, imp) in &row.cells {
                write!(f, "\t{v:.4}\t{}", format_improvement(*imp))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
