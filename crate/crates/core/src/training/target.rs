use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig, CosineSchedule};
use crate::models::{Bound, TargetModel};
use crate::numerics::{AttentionMask, Rng, Tape, Tensor, Var};
use crate::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Tokens per training window.
    pub window: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub adam: AdamWConfig,
    pub seed: u64,
}

impl Default for TargetTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            window: 96,
            lr: 3e-3,
            warmup_frac: 0.05,
            adam: AdamWConfig { clip_norm: 1.0, ..AdamWConfig::default() },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetLossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Mean next-token cross-entropy over all windows, each run causally from
/// position 0.
pub fn next_token_loss(tape: &mut Tape, bound: &Bound, target: &TargetModel, windows: &[Vec<usize>]) -> Result<Var> {
    ensure!(!windows.is_empty(), "no training windows");
    let v = target.vocab();
    let total: usize = windows.iter().map(|w| w.len().saturating_sub(1)).sum();
    ensure!(total > 0, "windows need at least two tokens");
    let past = vec![None; target.layers.len()];
    let mut terms = Vec::with_capacity(windows.len());
    for w in windows.iter().filter(|w| w.len() >= 2) {
        let n = w.len() - 1;
        let pos: Vec<usize> = (0..n).collect();
        let mask = Arc::new(AttentionMask::causal(n, 0));
        let out = target.forward_tape(tape, bound, &w[..n], &pos, &past, &mask)?;
        let lp = tape.log_softmax(out.logits)?;
        let mut weights = vec![0.0; n * v];
        for (r, &y) in w[1..].iter().enumerate() {
            weights[r * v + y] = 1.0 / total as f64;
        }
        let wv = tape.constant(Tensor::new(vec![n, v], weights)?);
        let prod = tape.mul(lp, wv)?;
        terms.push(tape.sum(prod));
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    Ok(tape.scale(sum, -1.0))
}

fn sample_window(rng: &mut Rng, corpus: &[Vec<usize>], window: usize) -> Vec<usize> {
    let seq = &corpus[rng.below(corpus.len())];
    if seq.len() <= window {
        return seq.clone();
    }
    let start = rng.below(seq.len() - window + 1);
    seq[start..start + window].to_vec()
}

/// Trains every target parameter on random windows of `corpus`.
pub fn train_target(
    target: &mut TargetModel,
    corpus: &[Vec<usize>],
    config: &TargetTrainConfig,
    mut on_record: impl FnMut(&TargetLossRecord),
) -> Result<Vec<TargetLossRecord>> {
    ensure!(corpus.iter().any(|s| s.len() >= 2), "corpus has no sequence of two or more tokens");
    ensure!(config.window <= target.config.max_positions + 1, "window exceeds max_positions");
    let corpus: Vec<Vec<usize>> = corpus.iter().filter(|s| s.len() >= 2).cloned().collect();
    let schedule = CosineSchedule { base_lr: config.lr, total_steps: config.steps, warmup_frac: config.warmup_frac };
    let mut opt = AdamW::new(&target.params, config.adam);
    let mut rng = Rng::new(config.seed, 0x7467_7472);
    let mut records = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let windows: Vec<Vec<usize>> =
            (0..config.batch_size).map(|_| sample_window(&mut rng, &corpus, config.window)).collect();
        let mut tape = Tape::new();
        let bound = target.params.bind(&mut tape, |_| true);
        let loss = next_token_loss(&mut tape, &bound, target, &windows)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("target loss is {value} at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let grads = bound.collect_grads(&target.params, &grads);
        let lr = schedule.lr(step);
        let info = opt.step(&mut target.params, &grads, lr, |_| true)?;
        let record = TargetLossRecord { step, lr, loss: value, grad_norm: info.grad_norm };
        on_record(&record);
        records.push(record);
    }
    Ok(records)
}
