use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::layers::{bind_cache, DecoderLayer, KvCache, LayerKv, LayerNorm, Linear};
use super::params::{Bound, ParamGroup, ParamId, ParamSet};
use crate::numerics::{AttentionMask, Rng, Tape, Tensor, Var};
use crate::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    /// 1-based layer indices whose outputs form the low/mid/top features.
    pub taps: [usize; 3],
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { vocab: 64, d_model: 32, n_layers: 4, n_heads: 4, d_ff: 128, max_positions: 160, taps: [1, 2, 4] }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.vocab >= 2, "vocab must be at least 2");
        ensure!(self.n_heads > 0 && self.d_model.is_multiple_of(self.n_heads), "d_model must divide into heads");
        ensure!(self.n_layers > 0, "target needs at least one layer");
        ensure!(
            self.taps.iter().all(|&t| t >= 1 && t <= self.n_layers),
            "tap layers {:?} out of range 1..={}",
            self.taps,
            self.n_layers
        );
        ensure!(self.max_positions > 0, "max_positions must be positive");
        Ok(())
    }
}

/// Low/mid/top hidden states of the target at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetFeatures {
    pub low: Vec<f64>,
    pub mid: Vec<f64>,
    pub top: Vec<f64>,
}

impl TargetFeatures {
    pub fn concat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.low.len() * 3);
        out.extend_from_slice(&self.low);
        out.extend_from_slice(&self.mid);
        out.extend_from_slice(&self.top);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.concat().iter().all(|v| v.is_finite())
    }
}

/// The frozen toy target: learned absolute positions, pre-norm decoder
/// layers, final layer norm and an output projection.
#[derive(Clone, Debug)]
pub struct TargetModel {
    pub config: TargetConfig,
    pub params: ParamSet,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

/// Tape handles produced by [`TargetModel::forward_tape`].
#[derive(Clone, Debug)]
pub struct TargetTapeOutput {
    pub logits: Var,
    pub taps: [Var; 3],
    pub kv: Vec<(Var, Var)>,
}

/// Concrete values from an inference forward.
#[derive(Clone, Debug)]
pub struct TargetOutput {
    /// `rows x vocab`
    pub logits: Tensor,
    /// low/mid/top hidden states, each `rows x d_model`
    pub taps: [Tensor; 3],
    /// Keys/values of the processed rows.
    pub kv: KvCache,
}

impl TargetOutput {
    pub fn features(&self, row: usize) -> TargetFeatures {
        TargetFeatures {
            low: self.taps[0].row_slice(row).to_vec(),
            mid: self.taps[1].row_slice(row).to_vec(),
            top: self.taps[2].row_slice(row).to_vec(),
        }
    }
}

impl TargetModel {
    pub fn new(config: TargetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed, 0x7461_7267);
        let mut params = ParamSet::new();
        let g = ParamGroup::Trunk;
        let d = config.d_model;
        let tok_emb = params.add_normal("tok_emb", g, &[config.vocab, d], 1.0, &mut rng);
        let pos_emb = params.add_normal("pos_emb", g, &[config.max_positions, d], 0.1, &mut rng);
        let layers = (0..config.n_layers)
            .map(|l| DecoderLayer::new(&mut params, &format!("layer{l}"), g, d, config.n_heads, config.d_ff, &mut rng))
            .collect();
        let ln_f = LayerNorm::new(&mut params, "ln_f", g, d);
        let head = Linear::new(&mut params, "head", g, d, config.vocab, &mut rng);
        Ok(Self { config, params, tok_emb, pos_emb, layers, ln_f, head })
    }

    /// Rebuilds the layout for `config` and fills it from `params`.
    pub fn from_params(config: TargetConfig, params: &ParamSet) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        for (_, name, _, t) in params.iter() {
            model.params.assign(name, t.clone())?;
        }
        ensure!(model.params.len() == params.len(), "parameter count mismatch");
        Ok(model)
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    /// Differentiable forward. `past` supplies per-layer cached keys/values
    /// visible in addition to the new rows; `mask` covers `past + new` keys.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[usize],
        pos_ids: &[usize],
        past: &[Option<super::layers::PastKv>],
        mask: &Arc<AttentionMask>,
    ) -> Result<TargetTapeOutput> {
        ensure!(!tokens.is_empty(), "target forward needs at least one token");
        ensure!(tokens.len() == pos_ids.len(), "tokens and position ids differ in length");
        ensure!(past.len() == self.layers.len(), "expected {} past entries", self.layers.len());
        for &t in tokens {
            ensure!(t < self.config.vocab, "token {t} out of range for vocab {}", self.config.vocab);
        }
        for &p in pos_ids {
            ensure!(p < self.config.max_positions, "position {p} beyond max_positions {}", self.config.max_positions);
        }
        let emb = tape.select_rows(bound.var(self.tok_emb), tokens)?;
        let pos = tape.select_rows(bound.var(self.pos_emb), pos_ids)?;
        let mut x = tape.add(emb, pos)?;
        let mut kv = Vec::with_capacity(self.layers.len());
        let mut outs = Vec::with_capacity(self.layers.len());
        for (layer, p) in self.layers.iter().zip(past) {
            let out = layer.forward(tape, bound, x, *p, mask)?;
            x = out.hidden;
            kv.push((out.k, out.v));
            outs.push(x);
        }
        let taps = self.config.taps.map(|t| outs[t - 1]);
        let h = self.ln_f.forward(tape, bound, x)?;
        let logits = self.head.forward(tape, bound, h)?;
        Ok(TargetTapeOutput { logits, taps, kv })
    }

    /// Inference forward of `tokens` at `pos_ids`, attending to `cache` and
    /// to each other under `mask` (`tokens.len() x (cache.len() + tokens.len())`).
    pub fn forward(
        &self,
        tokens: &[usize],
        pos_ids: &[usize],
        cache: &KvCache,
        mask: &Arc<AttentionMask>,
    ) -> Result<TargetOutput> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let past = bind_cache(&mut tape, cache);
        let out = self.forward_tape(&mut tape, &bound, tokens, pos_ids, &past, mask)?;
        let logits = tape.value(out.logits).clone();
        let taps = out.taps.map(|v| tape.value(v).clone());
        let layers = out
            .kv
            .iter()
            .map(|&(k, v)| LayerKv { k: tape.value(k).clone(), v: tape.value(v).clone() })
            .collect();
        Ok(TargetOutput { logits, taps, kv: KvCache::from_layers(layers)? })
    }

    pub fn empty_cache(&self) -> KvCache {
        KvCache::new(self.layers.len(), self.config.d_model)
    }

    /// Causal forward over a full sequence starting at position 0.
    pub fn forward_sequence(&self, tokens: &[usize]) -> Result<TargetOutput> {
        let pos: Vec<usize> = (0..tokens.len()).collect();
        let mask = Arc::new(AttentionMask::causal(tokens.len(), 0));
        self.forward(tokens, &pos, &self.empty_cache(), &mask)
    }

    /// Processes `tokens` appended after `cache` with ordinary causal
    /// attention; returns the output and the extended cache.
    pub fn extend(&self, cache: &KvCache, tokens: &[usize]) -> Result<(TargetOutput, KvCache)> {
        let start = cache.len();
        let pos: Vec<usize> = (start..start + tokens.len()).collect();
        let mask = Arc::new(AttentionMask::causal(tokens.len(), start));
        let out = self.forward(tokens, &pos, cache, &mask)?;
        let extended = cache.concat(&out.kv)?;
        Ok((out, extended))
    }
}
