use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::layers::{bind_cache, DecoderLayer, KvCache, LayerKv, LayerNorm, Linear, PastKv};
use super::params::{Bound, ParamGroup, ParamId, ParamSet};
use super::summary::{summarize_distribution, Bucket, DistributionSummary, SUMMARY_DIM};
use super::target::{TargetFeatures, TargetModel};
use crate::numerics::{softmax_slice, AttentionMask, Rng, Tape, Tensor, Var};
use crate::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrafterConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Positions per block (K).
    pub block_size: usize,
    pub max_positions: usize,
    /// Hidden size of the target whose features feed the condition.
    pub target_d_model: usize,
    pub rank_hidden: usize,
    /// Whether the layer-wise shift is applied. `false` is the ablation.
    pub shift: bool,
}

impl Default for DrafterConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            block_size: 4,
            max_positions: 160,
            target_d_model: 32,
            rank_hidden: 32,
            shift: true,
        }
    }
}

impl DrafterConfig {
    /// Mirrors the per-layer architecture of `target`.
    pub fn for_target(target: &TargetModel, block_size: usize) -> Self {
        let t = &target.config;
        Self {
            vocab: t.vocab,
            d_model: t.d_model,
            n_layers: 2,
            n_heads: t.n_heads,
            d_ff: t.d_ff,
            block_size,
            max_positions: t.max_positions,
            target_d_model: t.d_model,
            rank_hidden: 32,
            shift: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.block_size >= 1, "block size must be at least 1");
        ensure!(self.n_layers >= 1, "drafter needs at least one layer");
        ensure!(self.n_heads > 0 && self.d_model.is_multiple_of(self.n_heads), "d_model must divide into heads");
        ensure!(self.vocab >= 2, "vocab must be at least 2");
        Ok(())
    }
}

/// One starting point of a block: condition vector, the token at the start
/// and that token's position id. Block position `k` gets id `pos + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftStart {
    pub condition: Vec<f64>,
    pub token: usize,
    pub pos: usize,
}

/// Tape-level start used by training.
#[derive(Clone, Copy, Debug)]
pub struct TapeStart {
    pub condition: Var,
    pub token: usize,
    pub pos: usize,
}

#[derive(Clone, Debug)]
pub struct BlockTape {
    /// `S*K x vocab`, rows ordered start-major.
    pub logits: Var,
    /// Last-layer states `h^(L)`, `S*K x d`.
    pub hidden: Var,
    pub kv: Vec<(Var, Var)>,
}

/// Everything one drafter forward produces for its starts.
#[derive(Clone, Debug)]
pub struct DraftBlockOutput {
    pub n_starts: usize,
    pub block_size: usize,
    /// `S*K x vocab`
    pub logits: Tensor,
    /// `S*K x d`
    pub hidden: Tensor,
    pub kv: KvCache,
    pub summaries: Vec<DistributionSummary>,
    /// `S*K x 4`
    pub bucket_logits: Tensor,
    pub buckets: Vec<Bucket>,
}

impl DraftBlockOutput {
    /// Row of start `s` at 1-based block position `k`.
    pub fn row(&self, s: usize, k: usize) -> usize {
        s * self.block_size + (k - 1)
    }

    pub fn logits_row(&self, row: usize) -> &[f64] {
        self.logits.row_slice(row)
    }

    pub fn hidden_row(&self, row: usize) -> &[f64] {
        self.hidden.row_slice(row)
    }

    /// Draft distribution of a row at `temperature` (1.0 for the raw model).
    pub fn probs(&self, row: usize, temperature: f64) -> Vec<f64> {
        let l = self.logits.row_slice(row);
        if temperature == 1.0 {
            softmax_slice(l)
        } else {
            let scaled: Vec<f64> = l.iter().map(|x| x / temperature).collect();
            softmax_slice(&scaled)
        }
    }
}

/// Block-parallel drafter with position queries, layer-wise shift, lm head
/// and rank head.
#[derive(Clone, Debug)]
pub struct DrafterModel {
    pub config: DrafterConfig,
    pub params: ParamSet,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub w_cond: Linear,
    pub w_fuse: Linear,
    pub queries: ParamId,
    pub shifts: Vec<Linear>,
    pub layers: Vec<DecoderLayer>,
    pub ln_f: LayerNorm,
    pub lm_head: Linear,
    pub rank_fc1: Linear,
    pub rank_fc2: Linear,
}

impl DrafterModel {
    /// Fresh drafter whose token and position embeddings are copies of the
    /// target's and stay frozen.
    pub fn new(config: DrafterConfig, target: &TargetModel, seed: u64) -> Result<Self> {
        ensure!(
            config.vocab == target.config.vocab
                && config.d_model == target.config.d_model
                && config.target_d_model == target.config.d_model,
            "drafter dimensions do not match the target"
        );
        ensure!(config.max_positions <= target.config.max_positions, "drafter max_positions exceeds target's");
        let mut model = Self::layout(config, seed)?;
        let tok = target.params.get(target.tok_emb).clone();
        *model.params.get_mut(model.tok_emb) = tok;
        let pos = target.params.get(target.pos_emb);
        let d = model.config.d_model;
        let rows = model.config.max_positions;
        *model.params.get_mut(model.pos_emb) = Tensor::new(vec![rows, d], pos.data()[..rows * d].to_vec())?;
        Ok(model)
    }

    /// The parameter layout with random initialization and zero embeddings.
    pub fn layout(config: DrafterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed, 0x6472_6166);
        let mut p = ParamSet::new();
        let d = config.d_model;
        let tok_emb = p.add("tok_emb", ParamGroup::Frozen, Tensor::zeros(&[config.vocab, d]));
        let pos_emb = p.add("pos_emb", ParamGroup::Frozen, Tensor::zeros(&[config.max_positions, d]));
        let trunk = ParamGroup::Trunk;
        let w_cond = Linear::new(&mut p, "w_cond", trunk, 3 * config.target_d_model, d, &mut rng);
        let w_fuse = Linear::new(&mut p, "w_fuse", trunk, 3 * d, d, &mut rng);
        let queries = p.add_normal("queries", trunk, &[config.block_size, d], 1.0, &mut rng);
        let mut shifts = Vec::new();
        let mut layers = Vec::new();
        for l in 0..config.n_layers {
            // Starts as [I | 0]: the identity on the position's own state.
            let w = p.add(format!("shift{l}.w"), trunk, shift_identity(d));
            let b = p.add(format!("shift{l}.b"), trunk, Tensor::zeros(&[1, d]));
            shifts.push(Linear { w, b, fan_in: 2 * d, fan_out: d });
            layers.push(DecoderLayer::new(&mut p, &format!("layer{l}"), trunk, d, config.n_heads, config.d_ff, &mut rng));
        }
        let ln_f = LayerNorm::new(&mut p, "ln_f", trunk, d);
        let lm_head = Linear::new(&mut p, "lm_head", ParamGroup::LmHead, d, config.vocab, &mut rng);
        let rank_fc1 = Linear::new(&mut p, "rank_fc1", ParamGroup::RankHead, d + SUMMARY_DIM, config.rank_hidden, &mut rng);
        let rank_fc2 = Linear::new(&mut p, "rank_fc2", ParamGroup::RankHead, config.rank_hidden, 4, &mut rng);
        Ok(Self {
            config,
            params: p,
            tok_emb,
            pos_emb,
            w_cond,
            w_fuse,
            queries,
            shifts,
            layers,
            ln_f,
            lm_head,
            rank_fc1,
            rank_fc2,
        })
    }

    pub fn from_params(config: DrafterConfig, params: &ParamSet) -> Result<Self> {
        let mut model = Self::layout(config, 0)?;
        ensure!(model.params.len() == params.len(), "parameter count mismatch");
        for (_, name, _, t) in params.iter() {
            model.params.assign(name, t.clone())?;
        }
        Ok(model)
    }

    pub fn block_size(&self) -> usize {
        self.config.block_size
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn empty_cache(&self) -> KvCache {
        KvCache::new(self.layers.len(), self.config.d_model)
    }

    /// `c = W_cond [h_low, h_mid, h_top]` on the tape; `features` is `n x 3d_t`.
    pub fn condition_tape(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        self.w_cond.forward(tape, bound, features)
    }

    pub fn build_condition(&self, f: &TargetFeatures) -> Result<Vec<f64>> {
        let width = 3 * self.config.target_d_model;
        let cat = f.concat();
        ensure!(cat.len() == width, "features have {} values, expected {width}", cat.len());
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::row(&cat));
        let c = self.condition_tape(&mut tape, &bound, x)?;
        Ok(tape.value(c).data().to_vec())
    }

    /// Fused per-position inputs (before the position embedding) for all
    /// starts, rows start-major. `conditions` is `S x d`.
    fn fuse_tape(&self, tape: &mut Tape, bound: &Bound, conditions: Var, tokens: &[usize]) -> Result<Var> {
        let k = self.config.block_size;
        let s = tokens.len();
        let start_rows: Vec<usize> = (0..s * k).map(|r| r / k).collect();
        let q_rows: Vec<usize> = (0..s * k).map(|r| r % k).collect();
        let c = tape.layer_norm(conditions)?;
        let c = tape.select_rows(c, &start_rows)?;
        let e = tape.select_rows(bound.var(self.tok_emb), tokens)?;
        let e = tape.layer_norm(e)?;
        let e = tape.select_rows(e, &start_rows)?;
        let q = tape.layer_norm(bound.var(self.queries))?;
        let q = tape.select_rows(q, &q_rows)?;
        let cat = tape.concat_cols(&[c, e, q])?;
        self.w_fuse.forward(tape, bound, cat)
    }

    /// `W_fuse [norm(c), norm(embed(tok)), norm(q_k)]` for 1-based `k`.
    pub fn fuse(&self, c: &[f64], tok: usize, k: usize) -> Result<Vec<f64>> {
        ensure!(k >= 1 && k <= self.config.block_size, "block position {k} out of range 1..={}", self.config.block_size);
        ensure!(c.len() == self.config.d_model, "condition has {} values, expected {}", c.len(), self.config.d_model);
        ensure!(tok < self.config.vocab, "token {tok} out of range");
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let cv = tape.constant(Tensor::row(c));
        let h = self.fuse_tape(&mut tape, &bound, cv, &[tok])?;
        Ok(tape.value(h).row_slice(k - 1).to_vec())
    }

    fn shift_tape(&self, tape: &mut Tape, bound: &Bound, layer: usize, x: Var, n_rows: usize) -> Result<Var> {
        let k = self.config.block_size;
        let prev: Vec<usize> = (0..n_rows).map(|r| if r % k == 0 { r } else { r - 1 }).collect();
        let xp = tape.select_rows(x, &prev)?;
        let cat = tape.concat_cols(&[x, xp])?;
        self.shifts[layer].forward(tape, bound, cat)
    }

    /// Differentiable block forward for all `starts` batched together.
    /// `past[l]` holds the keys/values visible before this block's own rows;
    /// `mask` is `S*K x (past + S*K)`.
    pub fn block_forward_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        starts: &[TapeStart],
        past: &[Option<PastKv>],
        mask: &Arc<AttentionMask>,
    ) -> Result<BlockTape> {
        ensure!(!starts.is_empty(), "block forward needs at least one start");
        ensure!(past.len() == self.layers.len(), "expected {} past entries", self.layers.len());
        let k = self.config.block_size;
        let n = starts.len() * k;
        let tokens: Vec<usize> = starts.iter().map(|s| s.token).collect();
        for &t in &tokens {
            ensure!(t < self.config.vocab, "token {t} out of range for vocab {}", self.config.vocab);
        }
        let mut pos = Vec::with_capacity(n);
        for s in starts {
            for j in 1..=k {
                ensure!(s.pos + j < self.config.max_positions, "position {} beyond max_positions", s.pos + j);
                pos.push(s.pos + j);
            }
        }
        let conds: Vec<Var> = starts.iter().map(|s| s.condition).collect();
        let conds = if conds.len() == 1 { conds[0] } else { tape.concat_rows(&conds)? };
        let fused = self.fuse_tape(tape, bound, conds, &tokens)?;
        let p = tape.select_rows(bound.var(self.pos_emb), &pos)?;
        let mut x = tape.add(fused, p)?;
        let mut kv = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            if self.config.shift {
                x = self.shift_tape(tape, bound, l, x, n)?;
            }
            let out = layer.forward(tape, bound, x, past[l], mask)?;
            x = out.hidden;
            kv.push((out.k, out.v));
        }
        let h = self.ln_f.forward(tape, bound, x)?;
        let logits = self.lm_head.forward(tape, bound, h)?;
        Ok(BlockTape { logits, hidden: x, kv })
    }

    /// Rank-head logits from hidden states and summaries already detached
    /// from the trunk (`n x d` and `n x 15`).
    pub fn rank_logits_tape(&self, tape: &mut Tape, bound: &Bound, hidden: Var, summary: Var) -> Result<Var> {
        let x = tape.concat_cols(&[hidden, summary])?;
        let h = self.rank_fc1.forward(tape, bound, x)?;
        let h = tape.gelu(h);
        self.rank_fc2.forward(tape, bound, h)
    }

    /// Inference block forward.
    pub fn block_forward(
        &self,
        starts: &[DraftStart],
        past: &KvCache,
        mask: &Arc<AttentionMask>,
    ) -> Result<DraftBlockOutput> {
        ensure!(!starts.is_empty(), "block forward needs at least one start");
        let d = self.config.d_model;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let mut tape_starts = Vec::with_capacity(starts.len());
        for s in starts {
            ensure!(s.condition.len() == d, "condition has {} values, expected {d}", s.condition.len());
            let c = tape.constant(Tensor::row(&s.condition));
            tape_starts.push(TapeStart { condition: c, token: s.token, pos: s.pos });
        }
        let past_vars = bind_cache(&mut tape, past);
        let out = self.block_forward_tape(&mut tape, &bound, &tape_starts, &past_vars, mask)?;
        let logits = tape.value(out.logits).clone();
        let hidden = tape.value(out.hidden).clone();
        let n = logits.rows();
        let summaries: Vec<DistributionSummary> = (0..n).map(|r| summarize_distribution(logits.row_slice(r))).collect();
        let psi: Vec<f64> = summaries.iter().flat_map(|s| s.values).collect();
        let psi = tape.constant(Tensor::new(vec![n, SUMMARY_DIM], psi)?);
        let h_sg = tape.stop_gradient(out.hidden);
        let rl = self.rank_logits_tape(&mut tape, &bound, h_sg, psi)?;
        let bucket_logits = tape.value(rl).clone();
        let buckets = (0..n).map(|r| Bucket::argmax(bucket_logits.row_slice(r))).collect();
        let layers = out
            .kv
            .iter()
            .map(|&(k, v)| LayerKv { k: tape.value(k).clone(), v: tape.value(v).clone() })
            .collect();
        Ok(DraftBlockOutput {
            n_starts: starts.len(),
            block_size: self.config.block_size,
            logits,
            hidden,
            kv: KvCache::from_layers(layers)?,
            summaries,
            bucket_logits,
            buckets,
        })
    }

    /// Rank-head bucket for a detached hidden state and summary.
    pub fn predict_bucket(&self, hidden: &[f64], summary: &DistributionSummary) -> Result<Bucket> {
        Ok(Bucket::argmax(&self.rank_logits(hidden, summary)?))
    }

    pub fn rank_logits(&self, hidden: &[f64], summary: &DistributionSummary) -> Result<Vec<f64>> {
        ensure!(hidden.len() == self.config.d_model, "hidden state has {} values", hidden.len());
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let h = tape.constant(Tensor::row(hidden));
        let s = tape.constant(Tensor::row(&summary.values));
        let l = self.rank_logits_tape(&mut tape, &bound, h, s)?;
        Ok(tape.value(l).data().to_vec())
    }
}

fn shift_identity(d: usize) -> Tensor {
    let mut data = vec![0.0; 2 * d * d];
    for i in 0..d {
        data[i * d + i] = 1.0;
    }
    Tensor::new(vec![2 * d, d], data).expect("shape matches")
}

/// Causal mask for a batch of independent starts with no preceding keys
/// other than `prefix` fully visible ones.
pub fn independent_starts_mask(prefix: usize, n_starts: usize, block_size: usize) -> AttentionMask {
    let n = n_starts * block_size;
    AttentionMask::from_fn(n, prefix + n, |i, j| {
        if j < prefix {
            return true;
        }
        let j = j - prefix;
        j / block_size == i / block_size && j <= i
    })
}
