//! Run configuration as TOML with explicit keys; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{CorpusSpec, SourceSpec};
use crate::adapt::AdaptConfig;
use crate::models::{DrafterConfig, TargetConfig};
use crate::training::{TargetTrainConfig, TrainConfig};
use crate::verify::DecodeConfig;
use crate::{ensure, Error, Result};

/// Sizes of the generated data sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Target training sequences drawn from each source.
    pub target_sequences: usize,
    /// Drafter rollouts, all prompted from source 0.
    pub rollouts: usize,
    /// Tokens generated per rollout.
    pub rollout_len: usize,
    pub eval_prompts: usize,
    /// Source the decode command draws prompts from.
    pub eval_source: usize,
    /// Tokens generated per decode or serving query.
    pub max_new: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { target_sequences: 200, rollouts: 150, rollout_len: 64, eval_prompts: 500, eval_source: 0, max_new: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    pub queries: usize,
    pub adapt: AdaptConfig,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { queries: 100, adapt: AdaptConfig::default() }
    }
}

/// Seeds of the independent random streams of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub target_init: u64,
    pub drafter_init: u64,
    pub decode: u64,
    pub serve: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 1, target_init: 1, drafter_init: 5, decode: 0, serve: 7 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Seeds,
    pub corpus: CorpusSpec,
    pub data: DataConfig,
    pub target: TargetConfig,
    pub target_train: TargetTrainConfig,
    pub drafter: DrafterConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub serve: ServeConfig,
}


#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Published hyperparameters unchanged.
    Full,
    /// Step counts and learning rates sized for a single CPU core.
    Desk,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self::default(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Toy-scale overrides: a corpus mixing near-deterministic and ambiguous
    /// contexts, larger learning rates, fewer optimizer steps and update
    /// buffers sized for a 100-query stream.
    pub fn desk() -> Self {
        let mut c = Self::default();
        let profiles = vec![vec![0.97, 0.03], vec![0.35, 0.3, 0.2, 0.15]];
        let source = |base, seed| SourceSpec { base, span: 32, groups: 4, profiles: profiles.clone(), seed };
        c.corpus.sources = vec![source(0, 101), source(32, 202)];
        c.target_train.steps = 800;
        c.train.lr = 2e-3;
        c.train.steps = 1000;
        c.serve.adapt.update.lr = 2e-3;
        c.serve.adapt.bandit.head_threshold = 2;
        c.serve.adapt.bandit.full_threshold = 2;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        self.drafter.validate()?;
        self.train.validate()?;
        self.decode.tree.validate()?;
        self.serve.adapt.bandit.validate()?;
        self.serve.adapt.costs.validate()?;
        ensure!(self.drafter.vocab == self.target.vocab, "drafter and target vocabularies differ");
        ensure!(self.drafter.d_model == self.target.d_model, "the drafter shares the target's embeddings");
        ensure!(self.drafter.target_d_model == self.target.d_model, "drafter.target_d_model must match the target");
        ensure!(self.corpus.vocab == self.target.vocab, "corpus and model vocabularies differ");
        ensure!(self.data.eval_source < self.corpus.sources.len(), "eval_source {} does not exist", self.data.eval_source);
        let longest = self.corpus.seq_len.max(self.corpus.prompt_len + self.data.max_new.max(self.data.rollout_len));
        ensure!(longest <= self.target.max_positions, "sequences of {longest} tokens exceed max_positions");
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}
