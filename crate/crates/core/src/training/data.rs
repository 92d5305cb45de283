use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::models::{independent_starts_mask, DraftStart, DrafterModel, KvCache, TargetFeatures, TargetModel};
use crate::numerics::{softmax_slice, Rng, Tensor};
use crate::verify::vanilla_greedy;
use crate::{ensure, Result};

/// A target-greedy continuation of a prompt with the target's next-token
/// distribution and hidden taps at every position.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    pub prompt_len: usize,
    /// `n x vocab`; row `i` is the distribution of token `i + 1`.
    pub probs: Tensor,
    pub taps: [Tensor; 3],
}

impl Rollout {
    /// Extends `prompt` greedily by `gen_len` tokens and records the teacher.
    pub fn generate(target: &TargetModel, prompt: &[usize], gen_len: usize) -> Result<Self> {
        let mut tokens = prompt.to_vec();
        tokens.extend(vanilla_greedy(target, prompt, gen_len)?);
        Self::from_tokens(target, tokens, prompt.len())
    }

    pub fn from_tokens(target: &TargetModel, tokens: Vec<usize>, prompt_len: usize) -> Result<Self> {
        ensure!(prompt_len >= 1 && prompt_len <= tokens.len(), "prompt length {prompt_len} out of range");
        let out = target.forward_sequence(&tokens)?;
        let v = target.vocab();
        let mut probs = Vec::with_capacity(tokens.len() * v);
        for r in 0..tokens.len() {
            probs.extend(softmax_slice(out.logits.row_slice(r)));
        }
        Ok(Self { probs: Tensor::new(vec![tokens.len(), v], probs)?, taps: out.taps, tokens, prompt_len })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn features(&self, pos: usize) -> TargetFeatures {
        TargetFeatures {
            low: self.taps[0].row_slice(pos).to_vec(),
            mid: self.taps[1].row_slice(pos).to_vec(),
            top: self.taps[2].row_slice(pos).to_vec(),
        }
    }

    fn features_row(&self, pos: usize) -> Vec<f64> {
        self.features(pos).concat()
    }
}

/// One training example: a block rooted at `t`, the cut positions that
/// chain later blocks, and the accepted lengths of emulated history blocks
/// (oldest first).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleSpec {
    pub seq: usize,
    pub t: usize,
    pub cuts: Vec<usize>,
    pub history: Vec<usize>,
}

impl ExampleSpec {
    /// Root positions of the history blocks, oldest first.
    pub fn history_roots(&self) -> Vec<usize> {
        let mut roots = Vec::with_capacity(self.history.len());
        let mut cur = self.t;
        for &a in self.history.iter().rev() {
            cur -= a + 1;
            roots.push(cur);
        }
        roots.reverse();
        roots
    }
}

/// Uniform cut position in `1..=k`.
pub fn sample_cut(rng: &mut Rng, k: usize) -> usize {
    1 + rng.below(k)
}

/// Draws one example from the rollouts. Roots never precede the first
/// generated position, matching decoding where the prompt has no drafter
/// keys.
pub fn sample_example(
    rng: &mut Rng,
    rollouts: &[Rollout],
    block_size: usize,
    n_blocks: usize,
    history_blocks: usize,
) -> Result<ExampleSpec> {
    let span = n_blocks * block_size;
    let usable: Vec<usize> = (0..rollouts.len()).filter(|&i| rollouts[i].len() > rollouts[i].prompt_len + span).collect();
    ensure!(!usable.is_empty(), "no rollout is long enough for {n_blocks} blocks of {block_size}");
    let seq = usable[rng.below(usable.len())];
    let r = &rollouts[seq];
    let lo = r.prompt_len;
    let hi = r.len() - 1 - span;
    let t = lo + rng.below(hi - lo + 1);
    let cuts = (1..n_blocks).map(|_| sample_cut(rng, block_size)).collect();
    let mut history = Vec::new();
    let mut cur = t;
    for _ in 0..history_blocks {
        let a = sample_cut(rng, block_size);
        if cur < lo + a + 1 {
            break;
        }
        cur -= a + 1;
        history.push(a);
    }
    history.reverse();
    Ok(ExampleSpec { seq, t, cuts, history })
}

/// Everything the drafter loss needs for a batch, precomputed.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub block_size: usize,
    pub n_blocks: usize,
    pub specs: Vec<ExampleSpec>,
    /// `B x 3d_target` features at each root's previous position.
    pub features: Tensor,
    /// Per block, per example: start token and position.
    pub starts: Vec<Vec<(usize, usize)>>,
    /// Per block: teacher distributions, `B*K x vocab`.
    pub targets: Vec<Tensor>,
    /// Per block: greedy target tokens, `B*K`.
    pub labels: Vec<Vec<usize>>,
    /// Emulated committed drafter keys of every example, concatenated.
    pub history: KvCache,
    pub history_ranges: Vec<Range<usize>>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Offset of block `b` (0-based) from the example's root.
    pub fn offset(&self, example: usize, b: usize) -> usize {
        self.specs[example].cuts[..b].iter().sum()
    }
}

/// Resolves specs against rollouts and runs the history blocks with the
/// drafter's current weights.
pub fn prepare_batch(drafter: &DrafterModel, rollouts: &[Rollout], specs: &[ExampleSpec]) -> Result<PreparedBatch> {
    ensure!(!specs.is_empty(), "empty batch");
    let k = drafter.block_size();
    let n_blocks = specs[0].cuts.len() + 1;
    let v = drafter.config.vocab;
    let mut features = Vec::new();
    let mut starts = vec![Vec::with_capacity(specs.len()); n_blocks];
    let mut targets = vec![Vec::with_capacity(specs.len() * k * v); n_blocks];
    let mut labels = vec![Vec::with_capacity(specs.len() * k); n_blocks];
    let mut history = drafter.empty_cache();
    let mut history_ranges = Vec::with_capacity(specs.len());
    for spec in specs {
        ensure!(spec.cuts.len() + 1 == n_blocks, "examples chain different numbers of blocks");
        ensure!(spec.cuts.iter().all(|&c| c >= 1 && c <= k), "cut out of range 1..={k}");
        let r = rollouts.get(spec.seq).ok_or_else(|| crate::Error::Contract(format!("no rollout {}", spec.seq)))?;
        let span: usize = spec.cuts.iter().sum::<usize>() + k;
        ensure!(spec.t >= 1 && spec.t + span < r.len(), "example root {} does not fit its rollout", spec.t);
        features.extend(r.features_row(spec.t - 1));
        let mut off = 0;
        for b in 0..n_blocks {
            let root = spec.t + off;
            starts[b].push((r.tokens[root], root));
            for j in 1..=k {
                targets[b].extend_from_slice(r.probs.row_slice(root + j - 1));
                labels[b].push(r.tokens[root + j]);
            }
            if b + 1 < n_blocks {
                off += spec.cuts[b];
            }
        }
        let begin = history.len();
        let mut own = drafter.empty_cache();
        for (root, &a) in spec.history_roots().iter().zip(&spec.history) {
            ensure!(*root >= 1, "history root must have a previous position");
            let start = DraftStart {
                condition: drafter.build_condition(&r.features(root - 1))?,
                token: r.tokens[*root],
                pos: *root,
            };
            let mask = Arc::new(independent_starts_mask(own.len(), 1, k));
            let out = drafter.block_forward(&[start], &own, &mask)?;
            own.append_rows(&out.kv, &(0..a).collect::<Vec<_>>())?;
        }
        history = history.concat(&own)?;
        history_ranges.push(begin..history.len());
    }
    let b = specs.len();
    Ok(PreparedBatch {
        block_size: k,
        n_blocks,
        specs: specs.to_vec(),
        features: Tensor::new(vec![b, features.len() / b], features)?,
        starts,
        targets: targets.into_iter().map(|t| Tensor::new(vec![b * k, v], t)).collect::<Result<_>>()?,
        labels,
        history,
        history_ranges,
    })
}
