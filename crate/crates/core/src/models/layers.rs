use std::sync::Arc;

use super::params::{Bound, ParamGroup, ParamId, ParamSet};
use crate::numerics::{AttentionMask, Rng, Tape, Tensor, Var};
use crate::{ensure, Result};

/// Affine map `x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = params.add_normal(format!("{name}.w"), group, &[fan_in, fan_out], std, rng);
        let b = params.add(format!("{name}.b"), group, Tensor::zeros(&[1, fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.w))?;
        tape.add_row(y, bound.var(self.b))
    }
}

/// Layer normalization followed by a learned per-feature gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gain = params.add(format!("{name}.gain"), group, Tensor::full(&[1, dim], 1.0));
        let bias = params.add(format!("{name}.bias"), group, Tensor::zeros(&[1, dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = tape.mul_row(n, bound.var(self.gain))?;
        tape.add_row(g, bound.var(self.bias))
    }
}

/// Keys and values of one attention layer, one row per cached position.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub k: Tensor,
    pub v: Tensor,
}

/// Per-layer key/value rows for a sequence of positions.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerKv>,
    width: usize,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, width: usize) -> Self {
        let layers = (0..n_layers)
            .map(|_| LayerKv { k: Tensor::zeros(&[0, width]), v: Tensor::zeros(&[0, width]) })
            .collect();
        Self { layers, width, len: 0 }
    }

    pub fn from_layers(layers: Vec<LayerKv>) -> Result<Self> {
        ensure!(!layers.is_empty(), "kv cache needs at least one layer");
        let width = layers[0].k.cols();
        let len = layers[0].k.rows();
        for l in &layers {
            ensure!(
                l.k.cols() == width && l.v.cols() == width && l.k.rows() == len && l.v.rows() == len,
                "inconsistent kv layer shapes"
            );
        }
        Ok(Self { layers, width, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerKv {
        &self.layers[l]
    }

    /// Appends the given rows of `src` (same layer count and width) in order.
    pub fn append_rows(&mut self, src: &KvCache, rows: &[usize]) -> Result<()> {
        ensure!(
            src.layers.len() == self.layers.len() && src.width == self.width,
            "kv cache layouts differ"
        );
        if rows.is_empty() {
            return Ok(());
        }
        for (dst, s) in self.layers.iter_mut().zip(&src.layers) {
            for (dt, st) in [(&mut dst.k, &s.k), (&mut dst.v, &s.v)] {
                let mut data = std::mem::replace(dt, Tensor::zeros(&[0, 0])).into_vec();
                for &r in rows {
                    ensure!(r < src.len, "kv row {r} out of range for {} rows", src.len);
                    data.extend_from_slice(st.row_slice(r));
                }
                *dt = Tensor::new(vec![self.len + rows.len(), self.width], data)?;
            }
        }
        self.len += rows.len();
        Ok(())
    }

    /// Concatenation `self ++ other` as a new cache.
    pub fn concat(&self, other: &KvCache) -> Result<KvCache> {
        let mut out = self.clone();
        let rows: Vec<usize> = (0..other.len).collect();
        out.append_rows(other, &rows)?;
        Ok(out)
    }

    /// Keeps only the first `len` rows.
    pub fn truncate(&mut self, len: usize) -> Result<()> {
        ensure!(len <= self.len, "cannot truncate {} rows to {len}", self.len);
        for l in &mut self.layers {
            for t in [&mut l.k, &mut l.v] {
                let mut data = std::mem::replace(t, Tensor::zeros(&[0, 0])).into_vec();
                data.truncate(len * self.width);
                *t = Tensor::new(vec![len, self.width], data)?;
            }
        }
        self.len = len;
        Ok(())
    }
}

/// Tape handles for the keys/values a layer may attend to in addition to
/// the rows of the current forward.
#[derive(Clone, Copy, Debug)]
pub struct PastKv {
    pub k: Var,
    pub v: Var,
}

/// Places a cache on the tape as constants, one [`PastKv`] per layer.
/// Returns `None` entries for an empty cache.
pub fn bind_cache(tape: &mut Tape, cache: &KvCache) -> Vec<Option<PastKv>> {
    (0..cache.n_layers())
        .map(|l| {
            if cache.is_empty() {
                None
            } else {
                let layer = cache.layer(l);
                Some(PastKv { k: tape.constant(layer.k.clone()), v: tape.constant(layer.v.clone()) })
            }
        })
        .collect()
}

/// Pre-norm transformer decoder layer: multi-head attention then a GELU MLP,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_attn: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_mlp: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

/// Output of one decoder layer forward.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub hidden: Var,
    pub k: Var,
    pub v: Var,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        group: ParamGroup,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(params, &format!("{name}.ln_attn"), group, d_model),
            wq: Linear::new(params, &format!("{name}.wq"), group, d_model, d_model, rng),
            wk: Linear::new(params, &format!("{name}.wk"), group, d_model, d_model, rng),
            wv: Linear::new(params, &format!("{name}.wv"), group, d_model, d_model, rng),
            wo: Linear::new(params, &format!("{name}.wo"), group, d_model, d_model, rng),
            ln_mlp: LayerNorm::new(params, &format!("{name}.ln_mlp"), group, d_model),
            fc1: Linear::new(params, &format!("{name}.fc1"), group, d_model, d_ff, rng),
            fc2: Linear::new(params, &format!("{name}.fc2"), group, d_ff, d_model, rng),
            n_heads,
            d_model,
        }
    }

    /// Runs the layer over the rows of `x`. Keys are `past` rows followed by
    /// the rows of `x`; `mask` is `rows(x) x (rows(past) + rows(x))`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        past: Option<PastKv>,
        mask: &Arc<AttentionMask>,
    ) -> Result<LayerOutput> {
        let h = self.ln_attn.forward(tape, bound, x)?;
        let q = self.wq.forward(tape, bound, h)?;
        let k = self.wk.forward(tape, bound, h)?;
        let v = self.wv.forward(tape, bound, h)?;
        let (keys, values) = match past {
            Some(p) => (tape.concat_rows(&[p.k, k])?, tape.concat_rows(&[p.v, v])?),
            None => (k, v),
        };
        let dh = self.d_model / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for head in 0..self.n_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(keys, head * dh, dh)?;
            let vh = tape.slice_cols(values, head * dh, dh)?;
            heads.push(tape.masked_attention(qh, kh, vh, mask, scale)?);
        }
        let attn = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let attn = self.wo.forward(tape, bound, attn)?;
        let x1 = tape.add(x, attn)?;
        let h2 = self.ln_mlp.forward(tape, bound, x1)?;
        let f = self.fc1.forward(tape, bound, h2)?;
        let f = tape.gelu(f);
        let f = self.fc2.forward(tape, bound, f)?;
        let hidden = tape.add(x1, f)?;
        Ok(LayerOutput { hidden, k, v })
    }
}
