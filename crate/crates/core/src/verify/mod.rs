//! Target-side tree verification, acceptance metrics and the speculative
//! decoding loop.

mod decode;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use decode::{
    vanilla_greedy, vanilla_sample, DecodeConfig, DecodeMode, DecodeOutput, Iteration, Session, SpecDecoder,
};

use crate::models::{KvCache, TargetModel, TargetOutput};
use crate::numerics::{softmax_slice, Rng, Tensor};
use crate::tree::DraftTree;
use crate::{ensure, Result};

/// Runs the target once over every tree node (root first) after `cache`.
pub fn target_tree_forward(target: &TargetModel, cache: &KvCache, tree: &DraftTree) -> Result<TargetOutput> {
    let mask = Arc::new(tree.target_mask(cache.len()));
    target.forward(&tree.tokens(), &tree.pos_ids(), cache, &mask)
}

/// The drafted position where verification stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Rejection {
    /// Deepest accepted node (or the root).
    pub node: usize,
    /// Slot whose distribution proposed the rejected continuation.
    pub slot: usize,
    /// Token the target committed there.
    pub token: usize,
    /// Draft probability of `token` at `slot`.
    pub draft_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyResult {
    /// Accepted nodes, root-adjacent first.
    pub path: Vec<usize>,
    pub bonus: usize,
    /// Per tree node, whether it lies on the accepted path.
    pub accepted: Vec<bool>,
    pub rejection: Option<Rejection>,
}

impl VerifyResult {
    /// Deepest accepted node, or the root.
    pub fn last(&self) -> usize {
        self.path.last().copied().unwrap_or(DraftTree::ROOT)
    }

    /// Tokens this call commits: the accepted path, then the bonus.
    pub fn committed(&self, tree: &DraftTree) -> Vec<usize> {
        let mut out: Vec<usize> = self.path.iter().map(|&n| tree.node(n).token).collect();
        out.push(self.bonus);
        out
    }

    fn from_path(tree: &DraftTree, path: Vec<usize>, bonus: usize, temperature: f64) -> Self {
        let mut accepted = vec![false; tree.nodes().len()];
        for &n in &path {
            accepted[n] = true;
        }
        let node = path.last().copied().unwrap_or(DraftTree::ROOT);
        let rejection = preferred_child(tree, node).map(|c| {
            let slot = tree.node(c).slot.expect("non-root node has a slot");
            let q = tree.slot(slot).probs(temperature);
            Rejection { node, slot, token: bonus, draft_prob: q[bonus] }
        });
        Self { path, bonus, accepted, rejection }
    }
}

/// First child continuing the node's own block, else the first child.
fn preferred_child(tree: &DraftTree, id: usize) -> Option<usize> {
    let n = tree.node(id);
    n.children.iter().copied().find(|&c| tree.node(c).block == n.block).or_else(|| n.children.first().copied())
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

/// Greedy verification: descend while a child carries the target's argmax.
/// When several children match, the one leading to the longest accepted
/// path wins, ties to the earliest inserted.
pub fn verify_greedy(tree: &DraftTree, target_logits: &Tensor) -> Result<VerifyResult> {
    let n = tree.nodes().len();
    ensure!(target_logits.rows() == n, "expected {n} target rows, got {}", target_logits.rows());
    let best: Vec<usize> = (0..n).map(|i| argmax(target_logits.row_slice(i))).collect();
    let mut depth = vec![0usize; n];
    for i in (0..n).rev() {
        depth[i] = tree
            .node(i)
            .children
            .iter()
            .filter(|&&c| tree.node(c).token == best[i])
            .map(|&c| depth[c] + 1)
            .max()
            .unwrap_or(0);
    }
    let mut path = Vec::new();
    let mut cur = DraftTree::ROOT;
    while depth[cur] > 0 {
        let next = tree
            .node(cur)
            .children
            .iter()
            .copied()
            .find(|&c| tree.node(c).token == best[cur] && depth[c] + 1 == depth[cur])
            .expect("a child realizes the best depth");
        path.push(next);
        cur = next;
    }
    Ok(VerifyResult::from_path(tree, path, best[cur], 1.0))
}

/// Multi-candidate speculative sampling over the tree. Children are tried
/// in insertion order, each against its own slot's draft distribution,
/// with the residual updated after every rejection.
pub fn verify_sample(tree: &DraftTree, target_logits: &Tensor, temperature: f64, rng: &mut Rng) -> Result<VerifyResult> {
    ensure!(temperature > 0.0, "sampling temperature must be positive, got {temperature}");
    let n = tree.nodes().len();
    ensure!(target_logits.rows() == n, "expected {n} target rows, got {}", target_logits.rows());
    let mut path = Vec::new();
    let mut cur = DraftTree::ROOT;
    loop {
        let scaled: Vec<f64> = target_logits.row_slice(cur).iter().map(|x| x / temperature).collect();
        let mut r = softmax_slice(&scaled);
        let mut next = None;
        for &c in &tree.node(cur).children {
            let node = tree.node(c);
            let q = tree.slot(node.slot.expect("non-root node has a slot")).probs(temperature);
            let x = node.token;
            if q[x] > 0.0 && rng.uniform() * q[x] < r[x] {
                next = Some(c);
                break;
            }
            let mut resid: Vec<f64> = r.iter().zip(&q).map(|(a, b)| (a - b).max(0.0)).collect();
            let z: f64 = resid.iter().sum();
            if z > 0.0 {
                resid.iter_mut().for_each(|v| *v /= z);
                r = resid;
            }
        }
        match next {
            Some(c) => {
                path.push(c);
                cur = c;
            }
            None => {
                let bonus = rng.categorical(&r).expect("residual has mass");
                return Ok(VerifyResult::from_path(tree, path, bonus, temperature));
            }
        }
    }
}

/// Verifier-derived signal: Σ (1 − r) over rejected positions.
pub fn compute_signal<'a>(rejections: impl IntoIterator<Item = &'a Rejection>) -> f64 {
    rejections.into_iter().map(|r| 1.0 - r.draft_prob).sum()
}

/// Match / total counter pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub matched: u64,
    pub total: u64,
}

impl Counter {
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.matched as f64 / self.total as f64)
    }
}

/// Running acceptance statistics over verifier calls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub verifier_calls: u64,
    pub committed: u64,
    pub drafter_calls: u64,
    pub target_calls: u64,
    pub tree_nodes: u64,
    /// α_k counters, k = 1..=M·K.
    pub alpha: Vec<Counter>,
    /// α_{m,j} counters indexed `[m-1][j-1]`.
    pub block_alpha: Vec<Vec<Counter>>,
}

impl Metrics {
    pub fn new(max_blocks: usize, block_size: usize) -> Self {
        Self {
            verifier_calls: 0,
            committed: 0,
            drafter_calls: 0,
            target_calls: 0,
            tree_nodes: 0,
            alpha: vec![Counter::default(); max_blocks * block_size],
            block_alpha: vec![vec![Counter::default(); block_size]; max_blocks],
        }
    }

    /// Mean committed tokens per verifier call.
    pub fn tau(&self) -> f64 {
        if self.verifier_calls == 0 {
            0.0
        } else {
            self.committed as f64 / self.verifier_calls as f64
        }
    }

    /// Analytic drafter share of forward time.
    pub fn drafter_time_share(&self, t_target: f64, t_drafter: f64) -> f64 {
        let d = self.drafter_calls as f64 * t_drafter;
        let total = d + self.target_calls as f64 * t_target;
        if total > 0.0 {
            d / total
        } else {
            0.0
        }
    }

    pub fn merge(&mut self, o: &Metrics) {
        self.verifier_calls += o.verifier_calls;
        self.committed += o.committed;
        self.drafter_calls += o.drafter_calls;
        self.target_calls += o.target_calls;
        self.tree_nodes += o.tree_nodes;
        for (a, b) in self.alpha.iter_mut().zip(&o.alpha) {
            a.matched += b.matched;
            a.total += b.total;
        }
        for (ra, rb) in self.block_alpha.iter_mut().zip(&o.block_alpha) {
            for (a, b) in ra.iter_mut().zip(rb) {
                a.matched += b.matched;
                a.total += b.total;
            }
        }
    }

    /// Updates the conditional acceptance counters from one greedy call.
    ///
    /// α_k follows the accepted path. α_{m,j} walks each block's own chain,
    /// and a block m ≥ 2 is only counted when it starts from the last
    /// position of a fully accepted block m − 1.
    pub fn update_alpha(&mut self, tree: &DraftTree, result: &VerifyResult, target_logits: &Tensor) {
        let n_acc = result.path.len();
        for k in 0..n_acc.min(self.alpha.len()) {
            self.alpha[k].matched += 1;
            self.alpha[k].total += 1;
        }
        if n_acc < self.alpha.len() && !tree.node(result.last()).children.is_empty() {
            self.alpha[n_acc].total += 1;
        }

        let k_max = tree.block_size();
        let mut cur = DraftTree::ROOT;
        for m in 1..=self.block_alpha.len() {
            let mut full = true;
            for j in 1..=k_max {
                let kids: Vec<usize> = tree
                    .node(cur)
                    .children
                    .iter()
                    .copied()
                    .filter(|&c| tree.node(c).block == m && tree.node(c).k == j)
                    .collect();
                if kids.is_empty() {
                    full = false;
                    break;
                }
                self.block_alpha[m - 1][j - 1].total += 1;
                let want = argmax(target_logits.row_slice(cur));
                match kids.iter().find(|&&c| tree.node(c).token == want) {
                    Some(&c) => {
                        self.block_alpha[m - 1][j - 1].matched += 1;
                        cur = c;
                    }
                    None => {
                        full = false;
                        break;
                    }
                }
            }
            if !full {
                break;
            }
        }
    }
}

/// One line-delimited record per verifier call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub iteration: u64,
    pub accepted: usize,
    pub bonus: usize,
    pub tree_nodes: usize,
    pub drafter_calls: u64,
    pub tau: f64,
}
