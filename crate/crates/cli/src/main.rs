use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use srplr_core::config::{resolve_path, DATA_ROOT_ENV};
use srplr_core::data::{Column, Format, LoadOptions, SplitOptions, TrainPrefixes};
use srplr_core::experiment::{preprocess, run_ablation, run_experiment, run_sweep, MemberResult, PreprocessOptions, SweepAxis};
use srplr_core::{Error, ExperimentConfig, Result};

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "srplr", version, about = "Sequential recommendation with probabilistic logical reasoning")]
struct Cli {
    /// Directory that relative dataset and raw-file paths are resolved against.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// k-core filter a raw interaction file and write a leave-one-out split.
    Preprocess(PreprocessArgs),
    /// Train and evaluate one configuration.
    Run(RunArgs),
    /// One run per value of a single hyperparameter, sharing the seed.
    Sweep(SweepArgs),
    /// The full model and its three single-component ablations.
    Ablate(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Tsv,
    Csv,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Raw `(user, item, timestamp)` file.
    raw: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 50)]
    max_len: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Tsv)]
    format: FormatArg,
    /// Single-byte delimiter overriding the format's default.
    #[arg(long)]
    delimiter: Option<char>,
    /// The first row is a header.
    #[arg(long)]
    header: bool,
    /// Column index or header name.
    #[arg(long, default_value = "0")]
    user_col: String,
    #[arg(long, default_value = "1")]
    item_col: String,
    #[arg(long, default_value = "2")]
    time_col: String,
    /// Use row order instead of a timestamp column.
    #[arg(long, conflicts_with = "time_col")]
    no_time: bool,
    /// Train only on each user's longest prefix instead of every prefix.
    #[arg(long)]
    last_prefix_only: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// lambda, logic_negatives or mask_r.
    #[arg(long)]
    axis: SweepAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

fn column(s: &str) -> Column {
    s.parse().map(Column::Index).unwrap_or_else(|_| Column::Name(s.to_string()))
}

fn load_config(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.display().to_string();
    }
    cfg.validate()?;
    let out = PathBuf::from(&cfg.output_dir);
    Ok((cfg, out))
}

fn print_members(members: &[MemberResult]) -> bool {
    let mut ok = true;
    for m in members {
        match &m.report {
            Ok(r) => println!("{}\t{}\t{}", m.name, m.dir.display(), headline(r)),
            Err(e) => {
                ok = false;
                println!("{}\t{}\tERROR: {e}", m.name, m.dir.display());
            }
        }
    }
    ok
}

fn headline(r: &srplr_core::MetricsReport) -> String {
    use srplr_core::eval::Metric;
    r.protocol
        .ks
        .iter()
        .flat_map(|&k| {
            [Metric::Hit, Metric::Ndcg].map(|m| {
                let v = r.get("test", m, k).map_or("NA".into(), |v| format!("{v:.4}"));
                format!("test_{m}@{k}={v}")
            })
        })
        .collect::<Vec<_>>()
        .join("\t")
}

fn execute(cli: Cli) -> Result<()> {
    let root = cli.data_root.as_deref();
    match cli.command {
        Command::Preprocess(a) => {
            let delimiter = match a.delimiter {
                None => None,
                Some(c) if c.is_ascii() => Some(c as u8),
                Some(c) => return Err(Error::Invalid(format!("delimiter '{c}' is not a single byte"))),
            };
            let opts = PreprocessOptions {
                load: LoadOptions {
                    format: match a.format {
                        FormatArg::Tsv => Format::Tsv,
                        FormatArg::Csv => Format::Csv,
                    },
                    delimiter,
                    has_header: a.header,
                    user_col: column(&a.user_col),
                    item_col: column(&a.item_col),
                    time_col: (!a.no_time).then(|| column(&a.time_col)),
                },
                k: a.k,
                split: SplitOptions {
                    max_len: a.max_len,
                    train_prefixes: if a.last_prefix_only {
                        TrainPrefixes::Last
                    } else {
                        TrainPrefixes::All
                    },
                },
            };
            let raw = resolve_path(&a.raw.to_string_lossy(), root);
            let (stats, split) = preprocess(&raw, &opts, &a.out, a.force)?;
            println!("{stats}");
            println!(
                "wrote {} train / {} valid / {} test examples to {}",
                split.train.len(),
                split.valid.len(),
                split.test.len(),
                a.out.display()
            );
        }
        Command::Run(a) => {
            let (cfg, out) = load_config(&a)?;
            let split = cfg.load_dataset(root)?;
            let report = run_experiment(&cfg, &split, &out, a.force)?;
            print!("{}", report.to_table());
            println!("artifacts in {}", out.display());
        }
        Command::Sweep(a) => {
            let (cfg, out) = load_config(&a.run)?;
            let split = cfg.load_dataset(root)?;
            let members = run_sweep(&cfg, &split, a.axis, &a.values, &out, a.run.force)?;
            let ok = print_members(&members);
            println!("summary in {}", Path::new(&out).join("summary.tsv").display());
            if !ok {
                return Err(Error::Runtime("at least one sweep member failed".into()));
            }
        }
        Command::Ablate(a) => {
            let (cfg, out) = load_config(&a)?;
            let split = cfg.load_dataset(root)?;
            let (members, comparison) = run_ablation(&cfg, &split, &out, a.force)?;
            let ok = print_members(&members);
            if let Some(c) = comparison {
                print!("{c}");
            }
            if !ok {
                return Err(Error::Runtime("at least one ablation member failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
