//! Block-parallel drafting with rank-guided draft trees, lossless tree
//! verification, drafter training and online drafter adaptation, at toy scale.

pub mod adapt;
pub mod error;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod training;
pub mod tree;
pub mod verify;

pub use adapt::{Action, AdaptConfig, Bandit, BanditConfig, CostModel};
pub use error::{Error, Result};
pub use harness::{Checkpoint, Corpus, CorpusSpec, RunConfig};
pub use models::{Bucket, DrafterConfig, DrafterModel, TargetConfig, TargetModel};
pub use numerics::{AttentionMask, Rng, Tape, Tensor, Var};
pub use training::{DrafterTrainer, TrainConfig};
pub use tree::{BranchMap, DraftTree, TreeConfig};
pub use verify::{DecodeConfig, DecodeMode, Metrics, SpecDecoder};
