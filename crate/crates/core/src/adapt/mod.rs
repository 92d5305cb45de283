//! Serving-time drafter adaptation: a verifier-derived signal drives a
//! cost-aware skip/head/full bandit whose updates train a second drafter
//! copy that is swapped in at verification windows.

mod bandit;
mod serve;
mod update;

pub use bandit::{
    measure_throughput, Action, Bandit, BanditConfig, BanditRecord, ClosedInterval, CostModel, Fire, Phase,
    QueryOutcome, QueryStats, UniformSource, revise_value, strictly_decreasing,
};
pub use serve::{serve_sim, AdaptConfig, ServeOutcome, ServeRecord, TwoCopyDrafter};
pub use update::{
    action_trains, adapt_loss, apply_update, rejected_position_tape, AdaptLoss, RejectionSample, UpdateConfig,
    UpdateReport,
};
