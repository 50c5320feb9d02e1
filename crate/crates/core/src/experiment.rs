//! End-to-end drivers behind the command line: preprocess, run, sweep, ablate.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::data::{
    build_splits_with, k_core_filter, load_interactions_with, write_split, DatasetSplit, DatasetStats, LoadOptions,
    SplitOptions, MAX_LOGIC_NEGATIVES,
};
use crate::error::{Error, Result};
use crate::eval::{compare_runs, evaluate_full_rank, Comparison, MetricsReport};
use crate::model::{ModelVariant, SrplrModel};
use crate::train::{format_epoch_log, train, CheckpointSink};

const EVAL_BATCH: usize = 512;

/// Creates `dir` for exclusive use: refuses a non-empty directory unless `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: PathBuf, body: &str) -> Result<()> {
    fs::write(&path, body).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct PreprocessOptions {
    pub load: LoadOptions,
    pub k: usize,
    pub split: SplitOptions,
}

/// Load, k-core filter, split and write. Nothing is written when the input
/// yields no usable interactions.
pub fn preprocess(raw: &Path, opts: &PreprocessOptions, out: &Path, force: bool) -> Result<(DatasetStats, DatasetSplit)> {
    if opts.k == 0 {
        return Err(Error::Config {
            field: "k".into(),
            message: "must be positive".into(),
        });
    }
    let rows = load_interactions_with(raw, &opts.load)?;
    if rows.is_empty() {
        return Err(Error::Empty(format!("{} contains no interactions", raw.display())));
    }
    let filtered = k_core_filter(&rows, opts.k);
    if filtered.is_empty() {
        return Err(Error::Empty(format!("nothing survives {}-core filtering", opts.k)));
    }
    let stats = DatasetStats::from_interactions(&filtered);
    let split = build_splits_with(&filtered, &opts.split);
    if split.test.is_empty() {
        return Err(Error::Empty("no user has the three interactions a split needs".into()));
    }
    prepare_output_dir(out, force)?;
    write_split(out, &split)?;
    write_file(out.join("stats.txt"), &format!("{stats}\n"))?;
    Ok((stats, split))
}

/// Trains and evaluates one configuration, writing every artifact into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, split: &DatasetSplit, out: &Path, force: bool) -> Result<MetricsReport> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let hash = cfg.hash();
    prepare_output_dir(out, force)?;
    write_file(out.join("config.toml"), &cfg.to_toml())?;

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SrplrModel::new(cfg.model(split.item_count), &mut rng)?;
    let tc = cfg.train();
    let sink = CheckpointSink {
        dir: out.to_path_buf(),
        item_fingerprint: split.item_fingerprint(),
        config_hash: Some(hash.clone()),
    };
    let outcome = train(&mut model, split, &tc, Some(&sink));
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            write_file(out.join("error.txt"), &format!("{e}\n"))?;
            return Err(e);
        }
    };
    write_file(
        out.join("epoch_log.tsv"),
        &format!("# config_hash = {hash}\n{}", format_epoch_log(&outcome.log)),
    )?;
    model.save(&out.join("model.json"), &split.item_fingerprint(), Some(&hash))?;

    let protocol = tc.protocol();
    let mut splits = BTreeMap::new();
    for (name, examples) in [("valid", &split.valid), ("test", &split.test)] {
        if !examples.is_empty() {
            splits.insert(name.to_string(), evaluate_full_rank(&model, examples, &protocol, EVAL_BATCH)?);
        }
    }
    let report = MetricsReport {
        label: cfg.variant().label(),
        config_hash: hash,
        seed: cfg.seed,
        epoch: outcome.best_epoch.unwrap_or(cfg.epochs),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        protocol,
        splits,
    };
    report.write(out)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    LogicNegatives,
    MaskR,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::LogicNegatives => "logic_negatives",
            SweepAxis::MaskR => "mask_r",
        }
    }

    /// Range check for one axis value.
    pub fn check(self, v: f64) -> Result<()> {
        let ok = match self {
            SweepAxis::Lambda | SweepAxis::MaskR => (0.0..=1.0).contains(&v),
            SweepAxis::LogicNegatives => v.fract() == 0.0 && (0.0..=MAX_LOGIC_NEGATIVES as f64).contains(&v),
        };
        if ok {
            Ok(())
        } else {
            let range = match self {
                SweepAxis::LogicNegatives => format!("an integer in 0..={MAX_LOGIC_NEGATIVES}"),
                _ => "in [0, 1]".to_string(),
            };
            Err(Error::Config {
                field: self.name().into(),
                message: format!("sweep value {v} must be {range}"),
            })
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig, v: f64) {
        match self {
            SweepAxis::Lambda => cfg.lambda = v,
            SweepAxis::LogicNegatives => cfg.logic_negatives = v as usize,
            SweepAxis::MaskR => cfg.mask_r = v,
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "logic_negatives" | "negatives" => Ok(SweepAxis::LogicNegatives),
            "mask_r" | "mask" => Ok(SweepAxis::MaskR),
            other => Err(Error::Invalid(format!(
                "unknown sweep axis '{other}' (lambda, logic_negatives, mask_r)"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn value_dir(axis: SweepAxis, v: f64) -> String {
    format!("{}_{v}", axis.name())
}

/// One finished member of a sweep or ablation.
#[derive(Debug)]
pub struct MemberResult {
    pub name: String,
    pub dir: PathBuf,
    pub report: Result<MetricsReport>,
}

pub fn sweep_summary(axis: SweepAxis, values: &[f64], members: &[MemberResult]) -> String {
    let ks: Vec<usize> = members
        .iter()
        .find_map(|m| m.report.as_ref().ok())
        .map(|r| r.protocol.ks.clone())
        .unwrap_or_default();
    let mut out = axis.name().to_string();
    for split in ["valid", "test"] {
        for k in &ks {
            out.push_str(&format!("\t{split}_hit@{k}\t{split}_ndcg@{k}"));
        }
    }
    out.push('\n');
    for (v, m) in values.iter().zip(members) {
        out.push_str(&v.to_string());
        match &m.report {
            Ok(r) => {
                for split in ["valid", "test"] {
                    for &k in &ks {
                        let cell = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.6}"));
                        out.push_str(&format!(
                            "\t{}\t{}",
                            cell(r.get(split, crate::eval::Metric::Hit, k)),
                            cell(r.get(split, crate::eval::Metric::Ndcg, k))
                        ));
                    }
                }
            }
            Err(e) => out.push_str(&format!("\tERROR: {e}")),
        }
        out.push('\n');
    }
    out
}

/// Runs one experiment per axis value, sharing the seed, in parallel.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    axis: SweepAxis,
    values: &[f64],
    out: &Path,
    force: bool,
) -> Result<Vec<MemberResult>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Invalid("sweep needs at least one value".into()));
    }
    for &v in values {
        axis.check(v)?;
    }
    let mut dirs: Vec<String> = values.iter().map(|&v| value_dir(axis, v)).collect();
    dirs.sort();
    if let Some(w) = dirs.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Invalid(format!("sweep values map to the same output directory {}", w[0])));
    }
    prepare_output_dir(out, force)?;
    let members: Vec<MemberResult> = values
        .par_iter()
        .map(|&v| {
            let mut c = cfg.clone();
            axis.apply(&mut c, v);
            let dir = out.join(value_dir(axis, v));
            c.output_dir = dir.display().to_string();
            let report = run_experiment(&c, split, &dir, force);
            MemberResult {
                name: format!("{}={v}", axis.name()),
                dir,
                report,
            }
        })
        .collect();
    write_file(out.join("summary.tsv"), &sweep_summary(axis, values, &members))?;
    Ok(members)
}

/// The full model and the three single-component ablations.
pub fn ablation_variants(base: &ModelVariant) -> Vec<(&'static str, ModelVariant)> {
    let full = ModelVariant {
        use_attention: true,
        use_negation: true,
        use_feature: true,
        use_logic: true,
        lambda: base.lambda,
    };
    vec![
        ("full", full.clone()),
        (
            "wo_att",
            ModelVariant {
                use_attention: false,
                ..full.clone()
            },
        ),
        (
            "wo_neg_oper",
            ModelVariant {
                use_negation: false,
                ..full.clone()
            },
        ),
        (
            "wo_feat",
            ModelVariant {
                use_feature: false,
                ..full
            },
        ),
    ]
}

/// Runs the four ablation members with a shared seed. A failing member is
/// recorded and the others still run.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    out: &Path,
    force: bool,
) -> Result<(Vec<MemberResult>, Option<Comparison>)> {
    cfg.validate()?;
    prepare_output_dir(out, force)?;
    let members: Vec<MemberResult> = ablation_variants(&cfg.variant())
        .into_iter()
        .map(|(slug, v)| {
            let mut c = cfg.clone();
            c.set_variant(&v);
            let dir = out.join(slug);
            c.output_dir = dir.display().to_string();
            let report = run_experiment(&c, split, &dir, force);
            if let Err(e) = &report {
                log::error!("ablation member {} failed: {e}", v.label());
            }
            MemberResult {
                name: v.label(),
                dir,
                report,
            }
        })
        .collect();
    let ok: Vec<MetricsReport> = members.iter().filter_map(|m| m.report.as_ref().ok().cloned()).collect();
    let comparison = if ok.len() >= 2 && ok[0].label == "full" {
        let c = compare_runs(&ok, "test")?;
        write_file(out.join("comparison.tsv"), &c.to_string())?;
        Some(c)
    } else {
        None
    };
    Ok((members, comparison))
}
