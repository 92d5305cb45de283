use serde::{Deserialize, Serialize};

use crate::numerics::log_softmax_slice;

/// Number of features in a [`DistributionSummary`].
pub const SUMMARY_DIM: usize = 15;
const TOP_N: usize = 10;
const GAP_RANKS: [usize; 3] = [2, 3, 5];
/// Log-probabilities are floored here so that features stay finite.
pub const LOGPROB_FLOOR: f64 = -23.025_850_929_940_457; // ln(1e-10)

/// Coarse rank class of the target token within a draft distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    /// rank 1
    B0,
    /// ranks 2..=4
    B1,
    /// ranks 5..=10
    B2,
    /// rank above 10
    B3,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [Bucket::B0, Bucket::B1, Bucket::B2, Bucket::B3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Bucket> {
        Self::ALL.get(i).copied()
    }

    /// Bucket of a 1-based rank.
    pub fn from_rank(rank: usize) -> Bucket {
        match rank {
            0 | 1 => Bucket::B0,
            2..=4 => Bucket::B1,
            5..=10 => Bucket::B2,
            _ => Bucket::B3,
        }
    }

    /// Argmax over bucket scores, ties resolved toward the lower bucket.
    pub fn argmax(scores: &[f64]) -> Bucket {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate().take(4) {
            if s > scores[best] {
                best = i;
            }
        }
        Bucket::ALL[best]
    }
}

/// Token ids ordered by descending score, ties by ascending id.
pub fn ranked_tokens(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// 1-based rank of `token` under `scores`, ties broken by ascending id.
pub fn rank_of(scores: &[f64], token: usize) -> usize {
    let s = scores[token];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(v, &x)| x > s || (x == s && v < token))
        .count()
}

/// Fixed-size shape summary of a draft distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistributionSummary {
    pub values: [f64; SUMMARY_DIM],
}

impl DistributionSummary {
    pub fn top_logprobs(&self) -> &[f64] {
        &self.values[..TOP_N]
    }

    /// Logit gaps between the top token and the rank-2, -3 and -5 tokens.
    pub fn gaps(&self) -> &[f64] {
        &self.values[TOP_N..TOP_N + 3]
    }

    pub fn top1_prob(&self) -> f64 {
        self.values[TOP_N + 3]
    }

    pub fn entropy(&self) -> f64 {
        self.values[TOP_N + 4]
    }
}

/// Summarizes the distribution `softmax(logits)`.
///
/// When the vocabulary has fewer than ten tokens the log-probability profile
/// is padded with the floor, and gaps refer to the last available rank.
pub fn summarize_distribution(logits: &[f64]) -> DistributionSummary {
    let order = ranked_tokens(logits);
    let logp = log_softmax_slice(logits);
    let mut values = [0.0; SUMMARY_DIM];
    for (i, slot) in values.iter_mut().take(TOP_N).enumerate() {
        *slot = order.get(i).map_or(LOGPROB_FLOOR, |&t| logp[t].max(LOGPROB_FLOOR));
    }
    let top = logits[order[0]];
    for (j, &r) in GAP_RANKS.iter().enumerate() {
        let r = r.min(order.len());
        values[TOP_N + j] = top - logits[order[r - 1]];
    }
    values[TOP_N + 3] = logp[order[0]].exp();
    let neg_entropy: f64 = logp
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p > 0.0 {
                p * lp
            } else {
                0.0
            }
        })
        .sum();
    values[TOP_N + 4] = (-neg_entropy).max(0.0);
    DistributionSummary { values }
}
