//! Valid-prefix curriculum training of the drafter and its rank head, and
//! plain next-token training of the toy target.

mod data;
mod optim;
mod target;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use data::{prepare_batch, sample_cut, sample_example, ExampleSpec, PreparedBatch, Rollout};
pub use optim::{AdamW, AdamWConfig, CosineSchedule, StepInfo};
pub use target::{next_token_loss, train_target, TargetLossRecord, TargetTrainConfig};

use crate::models::{
    rank_of, summarize_distribution, Bucket, DrafterModel, ParamGroup, PastKv, TapeStart, SUMMARY_DIM,
};
use crate::numerics::{AttentionMask, Rng, Tape, Tensor, Var};
use crate::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_frac: f64,
    pub adam: AdamWConfig,
    /// First step at which the rank loss is added.
    pub rank_enable_step: usize,
    /// Blocks chained per example.
    pub train_blocks: usize,
    /// Emulated committed history blocks in front of each example.
    pub history_blocks: usize,
    /// Mask the draft loss after the first wrong greedy prediction.
    pub valid_prefix: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            steps: 1000,
            batch_size: 16,
            warmup_frac: 0.015,
            adam: AdamWConfig::default(),
            rank_enable_step: 200,
            train_blocks: 2,
            history_blocks: 2,
            valid_prefix: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.train_blocks >= 1, "train_blocks must be at least 1");
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(self.lr >= 0.0, "learning rate must be non-negative");
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule { base_lr: self.lr, total_steps: self.steps, warmup_frac: self.warmup_frac }
    }
}

/// `m_1 = 1`, `m_{k+1} = m_k · 1[argmax_k = y*_k]`.
pub fn compute_mask(argmaxes: &[usize], targets: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(argmaxes.len());
    let mut m = 1.0;
    for (a, y) in argmaxes.iter().zip(targets) {
        out.push(m);
        if a != y {
            m = 0.0;
        }
    }
    out
}

/// Rank bucket of `target` under `scores` (logits or probabilities).
pub fn rank_label(scores: &[f64], target: usize) -> Bucket {
    Bucket::from_rank(rank_of(scores, target))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Masked soft cross-entropy per block position. `logits` and `targets`
/// are `B*K x V`, rows example-major; `mask` has one entry per row. Each
/// position's term is normalized by its own mask count, and a position with
/// no surviving rows contributes exactly zero. Returns the summed loss and
/// the per-position values.
pub fn draft_loss(tape: &mut Tape, logits: Var, targets: &Tensor, mask: &[f64], block_size: usize) -> Result<(Var, Vec<f64>)> {
    let shape = tape.value(logits).shape().to_vec();
    ensure!(shape == targets.shape(), "logits {:?} and targets {:?} differ", shape, targets.shape());
    let (n, v) = (shape[0], shape[1]);
    ensure!(mask.len() == n && n % block_size == 0, "mask length {} does not fit {n} rows", mask.len());
    let mut counts = vec![0.0; block_size];
    for (r, &m) in mask.iter().enumerate() {
        counts[r % block_size] += m;
    }
    let lp = tape.log_softmax(logits)?;
    let lpv = tape.value(lp).data().to_vec();
    let mut w = vec![0.0; n * v];
    let mut per_k = vec![0.0; block_size];
    for r in 0..n {
        let k = r % block_size;
        if mask[r] == 0.0 || counts[k] == 0.0 {
            continue;
        }
        let scale = mask[r] / counts[k];
        for c in 0..v {
            let wi = targets.data()[r * v + c] * scale;
            w[r * v + c] = wi;
            if wi != 0.0 {
                per_k[k] -= wi * lpv[r * v + c];
            }
        }
    }
    let wv = tape.constant(Tensor::new(vec![n, v], w)?);
    let prod = tape.mul(lp, wv)?;
    let s = tape.sum(prod);
    Ok((tape.scale(s, -1.0), per_k))
}

/// Masked 4-way cross-entropy, averaged over rows with mask 1.
pub fn rank_loss(tape: &mut Tape, bucket_logits: Var, labels: &[Bucket], mask: &[f64]) -> Result<(Var, f64)> {
    let n = tape.value(bucket_logits).rows();
    ensure!(labels.len() == n && mask.len() == n, "rank labels/mask do not match {n} rows");
    let count: f64 = mask.iter().sum();
    let lp = tape.log_softmax(bucket_logits)?;
    let mut w = vec![0.0; n * 4];
    let mut value = 0.0;
    if count > 0.0 {
        for r in 0..n {
            let c = labels[r].index();
            w[r * 4 + c] = mask[r] / count;
            value -= w[r * 4 + c] * tape.value(lp).data()[r * 4 + c];
        }
    }
    let wv = tape.constant(Tensor::new(vec![n, 4], w)?);
    let prod = tape.mul(lp, wv)?;
    let s = tape.sum(prod);
    Ok((tape.scale(s, -1.0), value))
}

/// Quantities derived from forward values (masks, rank labels, rank-head
/// inputs). Supplying them from a base pass freezes them, which makes the
/// objective smooth for finite-difference checks.
#[derive(Clone, Debug, PartialEq)]
pub struct Derived {
    pub masks: Vec<Vec<f64>>,
    pub rank_labels: Vec<Vec<Bucket>>,
    /// Per block: detached hidden states and distribution summaries.
    pub rank_inputs: Vec<(Tensor, Tensor)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossFlags {
    pub valid_prefix: bool,
    pub rank: bool,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    /// `[block][k]` draft loss values.
    pub draft: Vec<Vec<f64>>,
    /// Per block rank loss values (0 when disabled).
    pub rank: Vec<f64>,
    /// Per block draft logits, `B*K x vocab`.
    pub logits: Vec<Tensor>,
    pub derived: Derived,
}

/// Attention mask of block `b` for the batch: each example sees its own
/// history rows, the path slots of its earlier blocks and its own causal
/// block.
fn batch_mask(batch: &PreparedBatch, b: usize) -> AttentionMask {
    let k = batch.block_size;
    let n = batch.len() * k;
    let hist = batch.history.len();
    let keys = hist + b * n + n;
    let mut mask = AttentionMask::new(n, keys);
    for (i, spec) in batch.specs.iter().enumerate() {
        for q in 0..k {
            let row = i * k + q;
            for j in batch.history_ranges[i].clone() {
                mask.set(row, j, true);
            }
            for (prev, &cut) in spec.cuts.iter().enumerate().take(b) {
                for j in 0..cut {
                    mask.set(row, hist + prev * n + i * k + j, true);
                }
            }
            for j in 0..=q {
                mask.set(row, hist + b * n + i * k + j, true);
            }
        }
    }
    mask
}

/// Builds the full drafter objective on `tape`:
/// Σ_blocks Σ_k draft_k (+ Σ_blocks rank when enabled).
pub fn drafter_loss(
    tape: &mut Tape,
    bound: &crate::models::Bound,
    drafter: &DrafterModel,
    batch: &PreparedBatch,
    flags: LossFlags,
    frozen: Option<&Derived>,
) -> Result<LossOutput> {
    let k = batch.block_size;
    ensure!(k == drafter.block_size(), "batch block size differs from the drafter's");
    let n_layers = drafter.layers.len();
    let hist: Vec<Option<(Var, Var)>> = (0..n_layers)
        .map(|l| {
            (!batch.history.is_empty()).then(|| {
                let layer = batch.history.layer(l);
                (tape.constant(layer.k.clone()), tape.constant(layer.v.clone()))
            })
        })
        .collect();
    let feats = tape.constant(batch.features.clone());
    let mut cond = drafter.condition_tape(tape, bound, feats)?;
    let mut block_kv: Vec<Vec<(Var, Var)>> = Vec::new();
    let mut derived = Derived { masks: Vec::new(), rank_labels: Vec::new(), rank_inputs: Vec::new() };
    let mut terms = Vec::new();
    let mut draft = Vec::new();
    let mut rank = Vec::new();
    let mut block_logits = Vec::new();
    for b in 0..batch.n_blocks {
        // `cond` holds one condition row per example for the current block.
        let starts: Vec<TapeStart> = batch.starts[b]
            .iter()
            .enumerate()
            .map(|(i, &(token, pos))| tape.select_rows(cond, &[i]).map(|condition| TapeStart { condition, token, pos }))
            .collect::<Result<_>>()?;
        let mut past = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut ks = Vec::new();
            let mut vs = Vec::new();
            if let Some((hk, hv)) = hist[l] {
                ks.push(hk);
                vs.push(hv);
            }
            for kv in &block_kv {
                ks.push(kv[l].0);
                vs.push(kv[l].1);
            }
            past.push(match ks.len() {
                0 => None,
                1 => Some(PastKv { k: ks[0], v: vs[0] }),
                _ => Some(PastKv { k: tape.concat_rows(&ks)?, v: tape.concat_rows(&vs)? }),
            });
        }
        let mask = Arc::new(batch_mask(batch, b));
        let out = drafter.block_forward_tape(tape, bound, &starts, &past, &mask)?;
        let logits_v = tape.value(out.logits).clone();
        let n = logits_v.rows();
        let labels = &batch.labels[b];

        let mask_b = match frozen {
            Some(d) => d.masks[b].clone(),
            None if flags.valid_prefix => {
                let arg: Vec<usize> = (0..n).map(|r| argmax(logits_v.row_slice(r))).collect();
                arg.chunks(k).zip(labels.chunks(k)).flat_map(|(a, y)| compute_mask(a, y)).collect()
            }
            None => vec![1.0; n],
        };
        let (dl, per_k) = draft_loss(tape, out.logits, &batch.targets[b], &mask_b, k)?;
        terms.push(dl);
        draft.push(per_k);

        if flags.rank {
            let (lab, inputs) = match frozen {
                Some(d) => (d.rank_labels[b].clone(), d.rank_inputs[b].clone()),
                None => {
                    let lab: Vec<Bucket> =
                        (0..n).map(|r| rank_label(logits_v.row_slice(r), labels[r])).collect();
                    let psi: Vec<f64> =
                        (0..n).flat_map(|r| summarize_distribution(logits_v.row_slice(r)).values).collect();
                    let h = tape.value(out.hidden).clone();
                    (lab, (h, Tensor::new(vec![n, SUMMARY_DIM], psi)?))
                }
            };
            let hv = tape.constant(inputs.0.clone());
            let pv = tape.constant(inputs.1.clone());
            let rl = drafter.rank_logits_tape(tape, bound, hv, pv)?;
            let (rloss, rval) = rank_loss(tape, rl, &lab, &mask_b)?;
            terms.push(rloss);
            rank.push(rval);
            derived.rank_labels.push(lab);
            derived.rank_inputs.push(inputs);
        } else {
            rank.push(0.0);
        }
        derived.masks.push(mask_b);
        block_logits.push(logits_v);

        if b + 1 < batch.n_blocks {
            let rows: Vec<usize> =
                batch.specs.iter().enumerate().map(|(i, s)| i * k + s.cuts[b] - 1).collect();
            cond = tape.select_rows(out.hidden, &rows)?;
            block_kv.push(out.kv.clone());
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(LossOutput { total, draft, rank, logits: block_logits, derived })
}

/// One line-delimited record per drafter training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    /// Draft loss per block position, summed over blocks.
    pub draft: Vec<f64>,
    pub rank: f64,
    /// Fraction of rows with mask 1 per block position.
    pub survival: Vec<f64>,
    pub grad_norm: f64,
}

/// Stateful drafter trainer: optimizer moments, step counter and example
/// sampler.
#[derive(Clone, Debug)]
pub struct DrafterTrainer {
    pub config: TrainConfig,
    opt: AdamW,
    step: usize,
    rng: Rng,
}

impl DrafterTrainer {
    pub fn new(drafter: &DrafterModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = Rng::new(config.seed, 0x7472_6169);
        Ok(Self { opt: AdamW::new(&drafter.params, config.adam), step: 0, rng, config })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn sample_specs(&mut self, drafter: &DrafterModel, rollouts: &[Rollout]) -> Result<Vec<ExampleSpec>> {
        let c = &self.config;
        (0..c.batch_size)
            .map(|_| sample_example(&mut self.rng, rollouts, drafter.block_size(), c.train_blocks, c.history_blocks))
            .collect()
    }

    pub fn flags(&self) -> LossFlags {
        LossFlags { valid_prefix: self.config.valid_prefix, rank: self.step >= self.config.rank_enable_step }
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn train_step(&mut self, drafter: &mut DrafterModel, rollouts: &[Rollout]) -> Result<LossRecord> {
        let specs = self.sample_specs(drafter, rollouts)?;
        let batch = prepare_batch(drafter, rollouts, &specs)?;
        self.step_on(drafter, &batch)
    }

    /// One optimizer step on a prepared batch.
    pub fn step_on(&mut self, drafter: &mut DrafterModel, batch: &PreparedBatch) -> Result<LossRecord> {
        let flags = self.flags();
        let mut tape = Tape::new();
        let trainable = |g: ParamGroup| g != ParamGroup::Frozen;
        let bound = drafter.params.bind(&mut tape, trainable);
        let out = drafter_loss(&mut tape, &bound, drafter, batch, flags, None)?;
        let total = tape.value(out.total).data()[0];
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("drafter loss is {total} at step {}", self.step)));
        }
        let grads = tape.backward(out.total)?;
        let grads = bound.collect_grads(&drafter.params, &grads);
        let lr = self.config.schedule().lr(self.step);
        let info = self.opt.step(&mut drafter.params, &grads, lr, trainable)?;
        let k = batch.block_size;
        let mut draft = vec![0.0; k];
        let mut survival = vec![0.0; k];
        for (b, per_k) in out.draft.iter().enumerate() {
            for j in 0..k {
                draft[j] += per_k[j];
                let rows: Vec<f64> = out.derived.masks[b].iter().skip(j).step_by(k).copied().collect();
                survival[j] += rows.iter().sum::<f64>() / rows.len() as f64 / batch.n_blocks as f64;
            }
        }
        let record = LossRecord {
            step: self.step,
            lr,
            total,
            draft,
            rank: out.rank.iter().sum(),
            survival,
            grad_norm: info.grad_norm,
        };
        self.step += 1;
        Ok(record)
    }

    /// Runs the configured number of steps, reporting each record.
    pub fn train(
        &mut self,
        drafter: &mut DrafterModel,
        rollouts: &[Rollout],
        mut on_record: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        let mut out = Vec::new();
        while self.step < self.config.steps {
            let r = self.train_step(drafter, rollouts)?;
            on_record(&r);
            out.push(r);
        }
        Ok(out)
    }
}

/// Rank-head accuracy on block-1 positions that survive the valid-prefix
/// mask, against the majority-class baseline of the same labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEval {
    pub n: usize,
    pub accuracy: f64,
    pub majority_accuracy: f64,
    pub label_counts: [usize; 4],
}

pub fn evaluate_rank_head(drafter: &DrafterModel, batch: &PreparedBatch) -> Result<RankEval> {
    let mut tape = Tape::new();
    let bound = drafter.params.bind_frozen(&mut tape);
    let flags = LossFlags { valid_prefix: true, rank: true };
    let out = drafter_loss(&mut tape, &bound, drafter, batch, flags, None)?;
    let (h, psi) = &out.derived.rank_inputs[0];
    let mask = &out.derived.masks[0];
    let labels = &out.derived.rank_labels[0];
    let mut counts = [0usize; 4];
    let mut correct = 0;
    let mut n = 0;
    for r in 0..mask.len() {
        if mask[r] == 0.0 {
            continue;
        }
        let summary = crate::models::DistributionSummary { values: psi.row_slice(r).try_into().expect("summary width") };
        let pred = drafter.predict_bucket(h.row_slice(r), &summary)?;
        counts[labels[r].index()] += 1;
        correct += usize::from(pred == labels[r]);
        n += 1;
    }
    ensure!(n > 0, "no surviving positions to evaluate");
    let majority = *counts.iter().max().expect("four buckets");
    Ok(RankEval {
        n,
        accuracy: correct as f64 / n as f64,
        majority_accuracy: majority as f64 / n as f64,
        label_counts: counts,
    })
}
