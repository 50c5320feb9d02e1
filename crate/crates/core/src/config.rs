//! Flat experiment configuration, its resolved echo and dataset resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    build_splits_with, generate_synthetic, read_split, DatasetSplit, SplitOptions, SyntheticRule, SyntheticSpec,
    TrainPrefixes,
};
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::logic::{ClampBounds, ClampMode, Projection, MAX_SHAPE};
use crate::model::{LogicLossForm, ModelConfig, ModelVariant, RecLossForm};
use crate::train::TrainConfig;

/// Environment variable naming the directory that relative dataset paths are resolved against.
pub const DATA_ROOT_ENV: &str = "SRPLR_DATA_ROOT";

pub const SYNTHETIC_PREFIX: &str = "synthetic:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// A preprocessed split directory, or `synthetic:markov`,
    /// `synthetic:markov-onehot` or `synthetic:conjunctive`.
    pub dataset: String,
    pub synthetic_users: usize,
    pub synthetic_items: usize,
    pub synthetic_seed: u64,
    /// Train prefixes for synthetic corpora (split directories fix their own).
    pub train_prefixes: TrainPrefixes,

    pub backbone: EncoderKind,
    pub dim: usize,
    /// Defaults to 1 for gru and 2 for self_attention.
    pub layers: Option<usize>,
    pub heads: usize,
    pub dropout: f64,
    pub max_len: usize,

    pub use_attention: bool,
    pub use_negation: bool,
    pub use_feature: bool,
    pub use_logic: bool,
    pub lambda: f64,
    pub logic_loss_form: LogicLossForm,
    pub rec_loss_form: RecLossForm,
    pub clamp_mode: ClampMode,
    pub clamp_min: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub logic_negatives: usize,
    pub mask_r: f64,
    pub seed: u64,
    pub eval_ks: Vec<usize>,
    pub exclude_history: bool,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub keep_best_valid: bool,
    pub grad_clip: Option<f64>,

    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let v = ModelVariant::default();
        ExperimentConfig {
            dataset: "synthetic:markov".into(),
            synthetic_users: 50,
            synthetic_items: 20,
            synthetic_seed: 0,
            train_prefixes: TrainPrefixes::All,
            backbone: EncoderKind::SelfAttention,
            dim: 64,
            layers: None,
            heads: 2,
            dropout: 0.5,
            max_len: 50,
            use_attention: v.use_attention,
            use_negation: v.use_negation,
            use_feature: v.use_feature,
            use_logic: v.use_logic,
            lambda: v.lambda,
            logic_loss_form: LogicLossForm::default(),
            rec_loss_form: RecLossForm::default(),
            clamp_mode: ClampMode::default(),
            clamp_min: ClampBounds::default().lo,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            logic_negatives: t.logic_negatives,
            mask_r: t.mask_r,
            seed: t.seed,
            eval_ks: t.eval_ks,
            exclude_history: t.exclude_history,
            eval_every: t.eval_every,
            checkpoint_every: t.checkpoint_every,
            keep_best_valid: t.keep_best_valid,
            grad_clip: t.grad_clip,
            output_dir: "runs/default".into(),
        }
    }
}

fn parse_error(e: toml::de::Error) -> Error {
    Error::ConfigParse(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(parse_error)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::ConfigParse(m) => Error::ConfigParse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills every optional field with its effective value.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if c.layers.is_none() {
            c.layers = Some(match c.backbone {
                EncoderKind::Gru => 1,
                EncoderKind::SelfAttention => 2,
            });
        }
        c
    }

    /// SHA-256 of the resolved TOML echo.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.resolved().to_toml().as_bytes()))
    }

    pub fn variant(&self) -> ModelVariant {
        ModelVariant {
            use_attention: self.use_attention,
            use_negation: self.use_negation,
            use_feature: self.use_feature,
            use_logic: self.use_logic,
            lambda: self.lambda,
        }
    }

    pub fn set_variant(&mut self, v: &ModelVariant) {
        self.use_attention = v.use_attention;
        self.use_negation = v.use_negation;
        self.use_feature = v.use_feature;
        self.use_logic = v.use_logic;
        self.lambda = v.lambda;
    }

    pub fn encoder(&self) -> EncoderConfig {
        let r = self.resolved();
        EncoderConfig {
            kind: r.backbone,
            layers: r.layers.expect("resolved"),
            heads: r.heads,
            hidden_size: r.dim,
            dropout: r.dropout,
            max_len: r.max_len,
        }
    }

    pub fn model(&self, item_count: usize) -> ModelConfig {
        ModelConfig {
            item_count,
            encoder: self.encoder(),
            variant: self.variant(),
            projection: Projection {
                bounds: ClampBounds {
                    lo: self.clamp_min,
                    hi: MAX_SHAPE,
                },
                mode: self.clamp_mode,
            },
            logic_loss: self.logic_loss_form,
            rec_loss: self.rec_loss_form,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            logic_negatives: self.logic_negatives,
            mask_r: self.mask_r,
            seed: self.seed,
            eval_ks: self.eval_ks.clone(),
            exclude_history: self.exclude_history,
            eval_every: self.eval_every,
            checkpoint_every: self.checkpoint_every,
            keep_best_valid: self.keep_best_valid,
            grad_clip: self.grad_clip,
        }
    }

    /// Checks every field without touching the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.dataset.trim().is_empty() {
            return Err(Error::Config {
                field: "dataset".into(),
                message: "must name a split directory or a synthetic corpus".into(),
            });
        }
        if let Some(kind) = self.dataset.strip_prefix(SYNTHETIC_PREFIX) {
            synthetic_rule(kind)?;
            if self.synthetic_users < 5 || self.synthetic_items < 5 {
                return Err(Error::Config {
                    field: "synthetic_items".into(),
                    message: "synthetic corpora need at least 5 users and 5 items".into(),
                });
            }
        }
        if !(self.clamp_min > 0.0 && self.clamp_min < 1.0) {
            return Err(Error::Config {
                field: "clamp_min".into(),
                message: format!("{} is outside (0, 1)", self.clamp_min),
            });
        }
        if self.output_dir.trim().is_empty() {
            return Err(Error::Config {
                field: "output_dir".into(),
                message: "must not be empty".into(),
            });
        }
        self.encoder().validate()?;
        self.variant().validate()?;
        self.train().validate()
    }

    /// Loads or generates the dataset. Relative paths are resolved against
    /// `data_root` when given.
    pub fn load_dataset(&self, data_root: Option<&Path>) -> Result<DatasetSplit> {
        if let Some(kind) = self.dataset.strip_prefix(SYNTHETIC_PREFIX) {
            let (rule, onehot) = synthetic_rule(kind)?;
            let mut spec = SyntheticSpec::new(self.synthetic_users, self.synthetic_items, rule, self.synthetic_seed);
            spec.deterministic_transitions = onehot;
            let opts = SplitOptions {
                max_len: self.max_len,
                train_prefixes: self.train_prefixes,
            };
            return Ok(build_splits_with(&generate_synthetic(&spec), &opts));
        }
        let split = read_split(&resolve_path(&self.dataset, data_root))?;
        if split.max_len != self.max_len {
            return Err(Error::Config {
                field: "max_len".into(),
                message: format!("dataset was built with max_len {}, config says {}", split.max_len, self.max_len),
            });
        }
        Ok(split)
    }
}

fn synthetic_rule(kind: &str) -> Result<(SyntheticRule, bool)> {
    match kind {
        "markov" => Ok((SyntheticRule::Markov, false)),
        "markov-onehot" => Ok((SyntheticRule::Markov, true)),
        "conjunctive" => Ok((SyntheticRule::Conjunctive, false)),
        other => Err(Error::Config {
            field: "dataset".into(),
            message: format!("unknown synthetic corpus '{other}' (markov, markov-onehot, conjunctive)"),
        }),
    }
}

pub fn resolve_path(p: &str, data_root: Option<&Path>) -> PathBuf {
    let path = PathBuf::from(p);
    match data_root {
        Some(root) if path.is_relative() => root.join(path),
        _ => path,
    }
}

/// The data root from the environment, if set.
pub fn data_root_from_env() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).filter(|s| !s.is_empty()).map(PathBuf::from)
}
