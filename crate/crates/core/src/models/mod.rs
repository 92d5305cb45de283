//! The toy target transformer and the block drafter with its rank head.

mod drafter;
mod layers;
mod params;
mod summary;
mod target;

pub use drafter::{
    independent_starts_mask, BlockTape, DraftBlockOutput, DraftStart, DrafterConfig, DrafterModel, TapeStart,
};
pub use layers::{bind_cache, DecoderLayer, KvCache, LayerKv, LayerNorm, Linear, PastKv};
pub use params::{Bound, ParamGroup, ParamId, ParamSet};
pub use summary::{
    rank_of, ranked_tokens, summarize_distribution, Bucket, DistributionSummary, LOGPROB_FLOOR, SUMMARY_DIM,
};
pub use target::{TargetConfig, TargetFeatures, TargetModel, TargetOutput, TargetTapeOutput};
