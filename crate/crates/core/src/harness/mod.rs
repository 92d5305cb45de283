//! Synthetic corpora, configuration, checkpoints and experiment drivers.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod report;
pub mod run;

pub use checkpoint::{Checkpoint, CheckpointMeta, ModelSpec};
pub use config::{DataConfig, Preset, RunConfig, Seeds, ServeConfig};
pub use corpus::{Corpus, CorpusSpec, SourceSpec};
pub use report::{Report, ServeSummary};
