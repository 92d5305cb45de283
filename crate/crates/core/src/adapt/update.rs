use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::Action;
use crate::models::{
    bind_cache, independent_starts_mask, rank_of, summarize_distribution, Bound, Bucket, DrafterModel, KvCache,
    ParamGroup, PastKv, TapeStart, TargetFeatures, SUMMARY_DIM,
};
use crate::numerics::{softmax_slice, Tape, Tensor, Var};
use crate::training::{AdamW, AdamWConfig};
use crate::tree::DraftTree;
use crate::verify::{Iteration, Rejection};
use crate::{ensure, Error, Result};

/// Everything needed to re-run the drafter at one rejected position under
/// new weights.
#[derive(Clone, Debug)]
pub struct RejectionSample {
    pub features: TargetFeatures,
    pub root_token: usize,
    pub root_pos: usize,
    /// Committed drafter keys the tree was drafted against.
    pub prefix: Arc<KvCache>,
    /// For each block after the first: the start's position in the previous
    /// block (1-based) and its token.
    pub hops: Vec<(usize, usize)>,
    /// Rejected position within the last block (1-based).
    pub k: usize,
    /// Target distribution at the rejected position.
    pub target_probs: Vec<f64>,
    pub target_token: usize,
}

impl RejectionSample {
    pub fn from_iteration(it: &Iteration, rej: &Rejection, prefix: Arc<KvCache>, temperature: f64) -> Self {
        Self::from_slot(it, rej.slot, rej.node, rej.token, prefix, temperature)
    }

    /// Sample for drafter slot `slot`, with the target distribution read
    /// from the verifier row of tree node `target_node`.
    pub fn from_slot(
        it: &Iteration,
        slot: usize,
        target_node: usize,
        target_token: usize,
        prefix: Arc<KvCache>,
        temperature: f64,
    ) -> Self {
        let tree = &it.tree;
        let sl = tree.slot(slot);
        let mut hops = Vec::new();
        let mut start = sl.start;
        while start != DraftTree::ROOT {
            let n = tree.node(start);
            hops.push((n.k, n.token));
            start = tree.slot(n.slot.expect("non-root node has a slot")).start;
        }
        hops.reverse();
        let row = it.target.logits.row_slice(target_node);
        let target_probs = if temperature == 1.0 {
            softmax_slice(row)
        } else {
            softmax_slice(&row.iter().map(|x| x / temperature).collect::<Vec<_>>())
        };
        Self {
            features: it.features.clone(),
            root_token: it.root_token,
            root_pos: it.root_pos,
            prefix,
            hops,
            k: sl.k,
            target_probs,
            target_token,
        }
    }
}

/// Re-runs the drafter along the sample's block chain and returns the
/// logits and hidden row of the rejected position.
pub fn rejected_position_tape(tape: &mut Tape, bound: &Bound, drafter: &DrafterModel, s: &RejectionSample) -> Result<(Var, Var)> {
    let k = drafter.block_size();
    ensure!(s.k >= 1 && s.k <= k, "rejected position {} out of range", s.k);
    let mut past: Vec<Option<PastKv>> = bind_cache(tape, &s.prefix);
    let feats = tape.constant(Tensor::row(&s.features.concat()));
    let mut cond = drafter.condition_tape(tape, bound, feats)?;
    let (mut token, mut pos) = (s.root_token, s.root_pos);
    let mut past_len = s.prefix.len();
    let mut hops = s.hops.iter();
    loop {
        let mask = Arc::new(independent_starts_mask(past_len, 1, k));
        let out = drafter.block_forward_tape(tape, bound, &[TapeStart { condition: cond, token, pos }], &past, &mask)?;
        let Some(&(hop_k, hop_token)) = hops.next() else {
            let logits = tape.select_rows(out.logits, &[s.k - 1])?;
            let hidden = tape.select_rows(out.hidden, &[s.k - 1])?;
            return Ok((logits, hidden));
        };
        ensure!(hop_k >= 1 && hop_k <= k, "hop position {hop_k} out of range");
        let rows: Vec<usize> = (0..hop_k).collect();
        for (l, p) in past.iter_mut().enumerate() {
            let (kk, vv) = out.kv[l];
            let nk = tape.select_rows(kk, &rows)?;
            let nv = tape.select_rows(vv, &rows)?;
            *p = Some(match *p {
                Some(old) => PastKv { k: tape.concat_rows(&[old.k, nk])?, v: tape.concat_rows(&[old.v, nv])? },
                None => PastKv { k: nk, v: nv },
            });
        }
        past_len += hop_k;
        cond = tape.select_rows(out.hidden, &[hop_k - 1])?;
        token = hop_token;
        pos += hop_k;
    }
}

/// Values of the adaptation objective's parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptLoss {
    /// Mean forward KL from the target to the drafter.
    pub distill: f64,
    /// Mean `KL(p_theta || p_theta0)`.
    pub anchor: f64,
    pub rank: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateConfig {
    pub lr: f64,
    pub kl_weight: f64,
    pub rank_weight: f64,
    pub adam: AdamWConfig,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self { lr: 5e-5, kl_weight: 0.01, rank_weight: 1.0, adam: AdamWConfig::default() }
    }
}

/// Parameter groups an action may change.
pub fn action_trains(action: Action, group: ParamGroup) -> bool {
    match action {
        Action::Skip => false,
        Action::Head => matches!(group, ParamGroup::LmHead | ParamGroup::RankHead),
        Action::Full => group != ParamGroup::Frozen,
    }
}

/// Builds the adaptation objective on `tape` for `drafter` bound by
/// `bound`, anchored to `reference`.
pub fn adapt_loss(
    tape: &mut Tape,
    bound: &Bound,
    drafter: &DrafterModel,
    reference: &DrafterModel,
    samples: &[RejectionSample],
    config: &UpdateConfig,
) -> Result<(Var, AdaptLoss)> {
    ensure!(!samples.is_empty(), "no rejected positions to adapt on");
    let n = samples.len() as f64;
    let v = drafter.config.vocab;
    let mut distill_terms = Vec::new();
    let mut anchor_terms = Vec::new();
    let mut rank_terms = Vec::new();
    let mut parts = AdaptLoss::default();
    let mut neg_entropy = 0.0;
    for s in samples {
        ensure!(s.target_probs.len() == v, "target distribution has {} entries", s.target_probs.len());
        let mut ref_tape = Tape::new();
        let ref_bound = reference.params.bind_frozen(&mut ref_tape);
        let (ref_logits, _) = rejected_position_tape(&mut ref_tape, &ref_bound, reference, s)?;
        let ref_lp = ref_tape.log_softmax(ref_logits)?;
        let ref_lp = ref_tape.value(ref_lp).data().to_vec();

        let (logits, hidden) = rejected_position_tape(tape, bound, drafter, s)?;
        let lp = tape.log_softmax(logits)?;
        let lp_val = tape.value(lp).data().to_vec();

        // Forward KL: sum p* (log p* - log p).
        let entropy_part: f64 = s.target_probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum();
        neg_entropy += entropy_part;
        let w = tape.constant(Tensor::row(&s.target_probs.iter().map(|p| -p / n).collect::<Vec<_>>()));
        let cross = tape.mul(lp, w)?;
        distill_terms.push(tape.sum(cross));
        parts.distill += (entropy_part - s.target_probs.iter().zip(&lp_val).map(|(p, l)| p * l).sum::<f64>()) / n;

        // Anchor: sum p (log p - log p0).
        let p = tape.softmax(logits, 1)?;
        let r = tape.constant(Tensor::row(&ref_lp));
        let diff = tape.sub(lp, r)?;
        let prod = tape.mul(p, diff)?;
        let sum = tape.sum(prod);
        anchor_terms.push(tape.scale(sum, config.kl_weight / n));
        parts.anchor += lp_val.iter().zip(&ref_lp).map(|(l, r)| l.exp() * (l - r)).sum::<f64>() / n;

        if config.rank_weight != 0.0 {
            let logits_val = tape.value(logits).data().to_vec();
            let label = Bucket::from_rank(rank_of(&logits_val, s.target_token));
            let h = tape.value(hidden).clone();
            let psi = summarize_distribution(&logits_val).values;
            let hv = tape.constant(h);
            let pv = tape.constant(Tensor::new(vec![1, SUMMARY_DIM], psi.to_vec())?);
            let rl = drafter.rank_logits_tape(tape, bound, hv, pv)?;
            let rlp = tape.log_softmax(rl)?;
            let mut onehot = vec![0.0; 4];
            onehot[label.index()] = -config.rank_weight / n;
            parts.rank -= tape.value(rlp).data()[label.index()] / n;
            let ov = tape.constant(Tensor::row(&onehot));
            let prod = tape.mul(rlp, ov)?;
            rank_terms.push(tape.sum(prod));
        }
    }
    let mut terms = distill_terms;
    terms.extend(anchor_terms);
    terms.extend(rank_terms);
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    // The tape omits the constant target entropy of the forward KL.
    parts.total = tape.value(total).data()[0] + neg_entropy / n;
    Ok((total, parts))
}

/// Outcome of one update attempt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub action: Action,
    pub samples: usize,
    pub loss: Option<AdaptLoss>,
    pub grad_norm: Option<f64>,
    /// Set when the update was dropped for a non-finite loss or gradient.
    pub discarded: bool,
}

/// One optimizer step on `drafter` for `action`. A non-finite loss or
/// gradient leaves the drafter untouched and marks the update discarded.
pub fn apply_update(
    drafter: &mut DrafterModel,
    opt: &mut AdamW,
    action: Action,
    samples: &[RejectionSample],
    reference: &DrafterModel,
    config: &UpdateConfig,
) -> Result<UpdateReport> {
    ensure!(action != Action::Skip, "skip is not an update");
    let mut report = UpdateReport { action, samples: samples.len(), loss: None, grad_norm: None, discarded: false };
    if samples.is_empty() {
        return Ok(report);
    }
    let mut tape = Tape::new();
    let trainable = |g| action_trains(action, g);
    let bound = drafter.params.bind(&mut tape, trainable);
    let (loss, parts) = adapt_loss(&mut tape, &bound, drafter, reference, samples, config)?;
    if !tape.value(loss).data()[0].is_finite() {
        report.discarded = true;
        return Ok(report);
    }
    report.loss = Some(parts);
    let grads = tape.backward(loss)?;
    let grads = bound.collect_grads(&drafter.params, &grads);
    match opt.step(&mut drafter.params, &grads, config.lr, trainable) {
        Ok(info) => report.grad_norm = Some(info.grad_norm),
        Err(Error::NonFinite(_)) => report.discarded = true,
        Err(e) => return Err(e),
    }
    Ok(report)
}
