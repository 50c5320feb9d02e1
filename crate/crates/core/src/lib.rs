pub mod autograd;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod logic;
pub mod model;
pub mod special;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub use config::ExperimentConfig;
pub use data::{DatasetSplit, DatasetStats, Interaction, SequenceExample};
pub use encoder::{EncoderConfig, EncoderKind};
pub use eval::{Comparison, EvalProtocol, MetricsReport, SplitMetrics};
pub use model::{ModelConfig, ModelVariant, SrplrModel};
pub use train::TrainConfig;
