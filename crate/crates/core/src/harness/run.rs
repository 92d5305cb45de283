//! End-to-end experiment steps shared by the CLI, the benches and the
//! acceptance tests. Every step is a pure function of its inputs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::corpus::Corpus;
use crate::adapt::{serve_sim, AdaptConfig, ServeOutcome};
use crate::models::{DrafterModel, TargetModel};
use crate::numerics::Rng;
use crate::training::{train_target, DrafterTrainer, LossRecord, Rollout, TargetLossRecord};
use crate::verify::{DecodeConfig, Metrics, SpecDecoder};
use crate::Result;

const SEQ_STREAM: u64 = 0;
const ROLLOUT_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const SERVE_STREAM: u64 = 3;

fn derive(seed: u64, stream: u64) -> u64 {
    seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Trains a fresh target on sequences from every source.
pub fn fit_target(cfg: &RunConfig, on_record: impl FnMut(&TargetLossRecord)) -> Result<(TargetModel, Vec<TargetLossRecord>)> {
    cfg.validate()?;
    let corpus = Corpus::new(cfg.corpus.clone())?;
    let seed = derive(cfg.seeds.data, SEQ_STREAM);
    let mut seqs = Vec::new();
    for s in 0..corpus.sources.len() {
        seqs.extend(corpus.sequences(s, cfg.data.target_sequences, seed)?);
    }
    let mut target = TargetModel::new(cfg.target.clone(), cfg.seeds.target_init)?;
    let records = train_target(&mut target, &seqs, &cfg.target_train, on_record)?;
    Ok((target, records))
}

/// Greedy target continuations of source-0 prompts.
pub fn make_rollouts(cfg: &RunConfig, target: &TargetModel) -> Result<Vec<Rollout>> {
    let corpus = Corpus::new(cfg.corpus.clone())?;
    let prompts = corpus.prompts(0, cfg.data.rollouts, derive(cfg.seeds.data, ROLLOUT_STREAM))?;
    prompts.iter().map(|p| Rollout::generate(target, p, cfg.data.rollout_len)).collect()
}

/// Trains a fresh drafter against `target` on `rollouts`.
pub fn fit_drafter(
    cfg: &RunConfig,
    target: &TargetModel,
    rollouts: &[Rollout],
    on_record: impl FnMut(&LossRecord),
) -> Result<(DrafterModel, Vec<LossRecord>)> {
    cfg.validate()?;
    let mut drafter = DrafterModel::new(cfg.drafter.clone(), target, cfg.seeds.drafter_init)?;
    let mut trainer = DrafterTrainer::new(&drafter, cfg.train.clone())?;
    let records = trainer.train(&mut drafter, rollouts, on_record)?;
    Ok((drafter, records))
}

/// Held-out prompts from `source`, disjoint in seed from training data.
pub fn eval_prompts(cfg: &RunConfig, source: usize, n: usize) -> Result<Vec<Vec<usize>>> {
    Corpus::new(cfg.corpus.clone())?.prompts(source, n, derive(cfg.seeds.data, EVAL_STREAM))
}

/// The serving stream with its source switch.
pub fn serve_stream(cfg: &RunConfig) -> Result<Vec<(usize, Vec<usize>)>> {
    Corpus::new(cfg.corpus.clone())?.shifted_stream(cfg.serve.queries, derive(cfg.seeds.data, SERVE_STREAM))
}

/// Decode result of one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub prompt: usize,
    pub tokens: Vec<usize>,
    pub committed: u64,
    pub verifier_calls: u64,
    pub drafter_calls: u64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRun {
    pub prompts: Vec<PromptResult>,
    pub metrics: Metrics,
}

/// Speculative decoding of every prompt; prompt `i` uses RNG stream `i`.
pub fn decode_prompts(
    target: &TargetModel,
    drafter: &DrafterModel,
    config: &DecodeConfig,
    prompts: &[Vec<usize>],
    max_new: usize,
    seed: u64,
) -> Result<DecodeRun> {
    let dec = SpecDecoder::new(target, drafter, config)?;
    let mut metrics = Metrics::new(config.tree.max_blocks, drafter.block_size());
    let mut out = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let mut rng = Rng::new(seed, i as u64);
        let r = dec.generate(p, max_new, &mut rng)?;
        metrics.merge(&r.metrics);
        out.push(PromptResult {
            prompt: i,
            committed: r.metrics.committed,
            verifier_calls: r.metrics.verifier_calls,
            drafter_calls: r.metrics.drafter_calls,
            tau: r.metrics.tau(),
            tokens: r.tokens,
        });
    }
    Ok(DecodeRun { prompts: out, metrics })
}

/// Serving simulation over the configured stream; `adapt` false freezes
/// the drafter.
pub fn serve(cfg: &RunConfig, target: &TargetModel, drafter: &DrafterModel, adapt: bool) -> Result<ServeOutcome> {
    let stream = serve_stream(cfg)?;
    let config = AdaptConfig { enabled: adapt, ..cfg.serve.adapt.clone() };
    serve_sim(target, drafter, &cfg.decode, &config, &stream, cfg.data.max_new, cfg.seeds.serve)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// One line of a decode metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeLine {
    Prompt(PromptResult),
    Summary { prompts: usize, metrics: Metrics },
}

impl DecodeRun {
    pub fn lines(&self) -> Vec<DecodeLine> {
        let mut out: Vec<DecodeLine> = self.prompts.iter().cloned().map(DecodeLine::Prompt).collect();
        out.push(DecodeLine::Summary { prompts: self.prompts.len(), metrics: self.metrics.clone() });
        out
    }
}
