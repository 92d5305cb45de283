//! Draft trees: bucket-driven branching, next-block start selection,
//! cross-block attention masks and the node budget.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::models::{ranked_tokens, Bucket, DraftBlockOutput, DraftStart, KvCache};
use crate::numerics::{log_softmax_slice, softmax_slice, AttentionMask, Rng};
use crate::{ensure, Result};

/// Sibling count per rank bucket; width 0 gives up on that position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BranchMap {
    pub widths: [usize; 4],
}

impl BranchMap {
    pub const fn new(widths: [usize; 4]) -> Self {
        Self { widths }
    }

    /// Same width for every bucket.
    pub const fn uniform(k: usize) -> Self {
        Self { widths: [k; 4] }
    }

    pub fn width(&self, bucket: Bucket) -> usize {
        self.widths[bucket.index()]
    }
}

impl Default for BranchMap {
    fn default() -> Self {
        Self::new([2, 4, 10, 0])
    }
}

/// How [`DraftTree::enforce_budget`] picks the next leaf to drop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimRule {
    /// Lowest cumulative log-prob first, then deepest, then highest token id.
    LowestLogprob,
    /// Latest block first, then deepest, then highest sample index. Never
    /// looks at token values, which keeps tree sampling lossless.
    Structural,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    pub branch_map: BranchMap,
    /// Maximum number of blocks per iteration (M).
    pub max_blocks: usize,
    /// Maximum number of next-block starts (S_max).
    pub max_starts: usize,
    /// Maximum number of non-root nodes.
    pub budget: usize,
    /// Buckets whose greedy-chain nodes may start the next block.
    pub start_buckets: [bool; 4],
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            branch_map: BranchMap::default(),
            max_blocks: 2,
            max_starts: 3,
            budget: 60,
            start_buckets: [true, true, false, false],
        }
    }
}

impl TreeConfig {
    /// Fixed width `k` everywhere, any chain node may start a block.
    pub fn uniform(k: usize) -> Self {
        Self { branch_map: BranchMap::uniform(k), start_buckets: [true; 4], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.max_blocks >= 1, "max_blocks must be at least 1");
        ensure!(self.budget >= 1, "budget must be at least 1");
        Ok(())
    }
}

/// One draft-tree node. The root (index 0) is the last committed token.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub token: usize,
    pub parent: Option<usize>,
    /// 1-based block, 0 for the root.
    pub block: usize,
    /// 1-based in-block index, 0 for the root.
    pub k: usize,
    pub pos: usize,
    /// Draft log-probability of `token` at its slot.
    pub logprob: f64,
    pub cum_logprob: f64,
    /// Rank-head bucket of the node's slot.
    pub bucket: Bucket,
    /// Drafter slot that proposed this node.
    pub slot: Option<usize>,
    /// Rank of this node among its siblings from the same slot (0 = greedy).
    pub sample: usize,
    pub is_start: bool,
    pub children: Vec<usize>,
}

impl TreeNode {
    /// Greedy-chain node: top-1 (or first sample) of its slot.
    pub fn on_chain(&self) -> bool {
        self.slot.is_some() && self.sample == 0
    }
}

/// One row of a drafter block forward.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftSlot {
    pub block: usize,
    /// Tree node the block was started from.
    pub start: usize,
    pub k: usize,
    pub pos: usize,
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
    pub bucket: Bucket,
}

impl DraftSlot {
    pub fn probs(&self, temperature: f64) -> Vec<f64> {
        if temperature == 1.0 {
            softmax_slice(&self.logits)
        } else {
            let scaled: Vec<f64> = self.logits.iter().map(|x| x / temperature).collect();
            softmax_slice(&scaled)
        }
    }
}

/// How siblings are proposed at each slot.
#[derive(Debug)]
pub enum Proposal<'a> {
    /// Top-b tokens of the draft distribution.
    TopK,
    /// b i.i.d. samples of the temperature-scaled draft distribution.
    Sample { temperature: f64, rng: &'a mut Rng },
}

/// Draft tree of one decoding iteration.
#[derive(Clone, Debug)]
pub struct DraftTree {
    nodes: Vec<TreeNode>,
    slots: Vec<DraftSlot>,
    /// Drafter keys/values, one row per slot.
    kv: KvCache,
    block_size: usize,
    /// Start nodes of every block expanded so far.
    block_starts: Vec<Vec<usize>>,
}

impl DraftTree {
    /// A tree holding only the root.
    pub fn new(root_token: usize, root_pos: usize, block_size: usize, kv_layers: usize, kv_width: usize) -> Self {
        let root = TreeNode {
            token: root_token,
            parent: None,
            block: 0,
            k: 0,
            pos: root_pos,
            logprob: 0.0,
            cum_logprob: 0.0,
            bucket: Bucket::B0,
            slot: None,
            sample: 0,
            is_start: false,
            children: Vec::new(),
        };
        Self {
            nodes: vec![root],
            slots: Vec::new(),
            kv: KvCache::new(kv_layers, kv_width),
            block_size,
            block_starts: Vec::new(),
        }
    }

    pub const ROOT: usize = 0;

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    /// Number of non-root nodes.
    pub fn len(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn slots(&self) -> &[DraftSlot] {
        &self.slots
    }

    pub fn slot(&self, id: usize) -> &DraftSlot {
        &self.slots[id]
    }

    pub fn kv(&self) -> &KvCache {
        &self.kv
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Blocks expanded so far.
    pub fn blocks(&self) -> usize {
        self.block_starts.len()
    }

    pub fn block_starts(&self, block: usize) -> &[usize] {
        &self.block_starts[block - 1]
    }

    pub fn depth(&self, id: usize) -> usize {
        self.nodes[id].pos - self.nodes[0].pos
    }

    /// Nodes from the root's child down to `id`.
    pub fn path(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            out.push(cur);
            cur = p;
        }
        out.reverse();
        out
    }

    /// Slots of the nodes on the path to `id`, in path order.
    pub fn path_slots(&self, id: usize) -> Vec<usize> {
        self.path(id).iter().filter_map(|&n| self.nodes[n].slot).collect()
    }

    pub fn is_ancestor(&self, anc: usize, id: usize) -> bool {
        let mut cur = Some(id);
        while let Some(c) = cur {
            if c == anc {
                return true;
            }
            cur = self.nodes[c].parent;
        }
        false
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.token).collect()
    }

    pub fn pos_ids(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.pos).collect()
    }

    pub fn max_depth(&self) -> usize {
        (0..self.nodes.len()).map(|i| self.depth(i)).max().unwrap_or(0)
    }

    /// Drafter inputs for the given start nodes of the next block. `root_condition`
    /// conditions a start at the root; other starts use their slot's hidden state.
    pub fn draft_starts(&self, starts: &[usize], root_condition: &[f64]) -> Vec<DraftStart> {
        starts
            .iter()
            .map(|&s| {
                let n = &self.nodes[s];
                let condition = match n.slot {
                    Some(slot) => self.slots[slot].hidden.clone(),
                    None => root_condition.to_vec(),
                };
                DraftStart { condition, token: n.token, pos: n.pos }
            })
            .collect()
    }

    /// Attention mask for the next block forward from `starts`. Keys are the
    /// `prefix_len` committed drafter rows, then every slot of earlier blocks,
    /// then the new block's own rows.
    pub fn build_attention_mask(&self, prefix_len: usize, starts: &[usize]) -> AttentionMask {
        let k = self.block_size;
        let n_prev = self.slots.len();
        let n = starts.len() * k;
        let mut mask = AttentionMask::new(n, prefix_len + n_prev + n);
        for (si, &s) in starts.iter().enumerate() {
            let visible = self.path_slots(s);
            for q in 0..k {
                let row = si * k + q;
                for j in 0..prefix_len {
                    mask.set(row, j, true);
                }
                for &slot in &visible {
                    mask.set(row, prefix_len + slot, true);
                }
                for j in 0..=q {
                    mask.set(row, prefix_len + n_prev + si * k + j, true);
                }
            }
        }
        mask
    }

    /// Attention mask for the target's tree forward over every node
    /// (root first) after `prefix_len` cached positions.
    pub fn target_mask(&self, prefix_len: usize) -> AttentionMask {
        let n = self.nodes.len();
        let mut mask = AttentionMask::new(n, prefix_len + n);
        for i in 0..n {
            for j in 0..prefix_len {
                mask.set(i, j, true);
            }
            let mut cur = Some(i);
            while let Some(c) = cur {
                mask.set(i, prefix_len + c, true);
                cur = self.nodes[c].parent;
            }
        }
        mask
    }

    /// Recomputes every position id as parent id + 1.
    pub fn assign_position_ids(&mut self) {
        for i in 1..self.nodes.len() {
            let p = self.nodes[i].parent.expect("non-root node has a parent");
            self.nodes[i].pos = self.nodes[p].pos + 1;
        }
    }

    /// Adds one block: records the forward's slots and attaches, for every
    /// start and block position, `width(bucket)` siblings under the greedy
    /// node of the previous position. Returns the new node ids.
    pub fn expand_block(
        &mut self,
        starts: &[usize],
        out: &DraftBlockOutput,
        map: &BranchMap,
        proposal: &mut Proposal<'_>,
    ) -> Result<Vec<usize>> {
        ensure!(out.n_starts == starts.len(), "block output has {} starts, expected {}", out.n_starts, starts.len());
        ensure!(out.block_size == self.block_size, "block size mismatch");
        for &s in starts {
            ensure!(s < self.nodes.len(), "start {s} is not a tree node");
        }
        let block = self.block_starts.len() + 1;
        let base = self.slots.len();
        let k_max = self.block_size;
        for (si, &s) in starts.iter().enumerate() {
            for k in 1..=k_max {
                let row = out.row(si, k);
                self.slots.push(DraftSlot {
                    block,
                    start: s,
                    k,
                    pos: self.nodes[s].pos + k,
                    logits: out.logits_row(row).to_vec(),
                    hidden: out.hidden_row(row).to_vec(),
                    bucket: out.buckets[row],
                });
            }
        }
        let rows: Vec<usize> = (0..out.kv.len()).collect();
        self.kv.append_rows(&out.kv, &rows)?;

        let mut added = Vec::new();
        for (si, &s) in starts.iter().enumerate() {
            self.nodes[s].is_start = true;
            let mut parent = s;
            for k in 1..=k_max {
                let slot = base + si * k_max + (k - 1);
                let bucket = self.slots[slot].bucket;
                let width = map.width(bucket);
                if width == 0 {
                    break;
                }
                let logits = &self.slots[slot].logits;
                let picks: Vec<(usize, f64)> = match proposal {
                    Proposal::TopK => {
                        let logp = log_softmax_slice(logits);
                        ranked_tokens(logits).into_iter().take(width).map(|t| (t, logp[t])).collect()
                    }
                    Proposal::Sample { temperature, rng } => {
                        ensure!(*temperature > 0.0, "sampling temperature must be positive");
                        let q = self.slots[slot].probs(*temperature);
                        let mut v = Vec::with_capacity(width);
                        for _ in 0..width {
                            let t = rng.categorical(&q).expect("draft distribution has mass");
                            v.push((t, q[t].ln()));
                        }
                        v
                    }
                };
                let mut chain = parent;
                for (i, (token, logprob)) in picks.into_iter().enumerate() {
                    let id = self.nodes.len();
                    let p = &self.nodes[parent];
                    let node = TreeNode {
                        token,
                        parent: Some(parent),
                        block,
                        k,
                        pos: p.pos + 1,
                        logprob,
                        cum_logprob: p.cum_logprob + logprob,
                        bucket,
                        slot: Some(slot),
                        sample: i,
                        is_start: false,
                        children: Vec::new(),
                    };
                    self.nodes.push(node);
                    self.nodes[parent].children.push(id);
                    added.push(id);
                    if i == 0 {
                        chain = id;
                    }
                }
                parent = chain;
            }
        }
        self.block_starts.push(starts.to_vec());
        Ok(added)
    }

    /// Greedy-chain nodes of `block` whose bucket is eligible, best
    /// `max_starts` by cumulative log-prob (ties: shallower first).
    pub fn select_next_starts(&self, block: usize, max_starts: usize, eligible: &[bool; 4]) -> Vec<usize> {
        let mut cands: Vec<usize> = (1..self.nodes.len())
            .filter(|&i| {
                let n = &self.nodes[i];
                n.block == block && n.on_chain() && eligible[n.bucket.index()]
            })
            .collect();
        cands.sort_by(|&a, &b| {
            let (na, nb) = (&self.nodes[a], &self.nodes[b]);
            nb.cum_logprob.total_cmp(&na.cum_logprob).then(na.pos.cmp(&nb.pos)).then(a.cmp(&b))
        });
        cands.truncate(max_starts);
        cands
    }

    /// Drops leaves until at most `budget` non-root nodes remain and
    /// returns how many were removed. Node ids are compacted afterwards.
    pub fn enforce_budget(&mut self, budget: usize, rule: TrimRule) -> usize {
        let excess = self.len().saturating_sub(budget);
        if excess == 0 {
            return 0;
        }
        let mut alive = vec![true; self.nodes.len()];
        let mut n_children: Vec<usize> = self.nodes.iter().map(|n| n.children.len()).collect();
        let mut heap: BinaryHeap<TrimKey> =
            (1..self.nodes.len()).filter(|&i| n_children[i] == 0).map(|i| self.trim_key(i, rule)).collect();
        for _ in 0..excess {
            let victim = heap.pop().expect("a non-root leaf exists while over budget").id;
            alive[victim] = false;
            let p = self.nodes[victim].parent.expect("root is never trimmed");
            n_children[p] -= 1;
            if p != Self::ROOT && n_children[p] == 0 {
                heap.push(self.trim_key(p, rule));
            }
        }
        self.compact(&alive);
        excess
    }

    fn trim_key(&self, id: usize, rule: TrimRule) -> TrimKey {
        let n = &self.nodes[id];
        let depth = n.pos - self.nodes[0].pos;
        TrimKey { rule, cum_logprob: n.cum_logprob, block: n.block, depth, token: n.token, sample: n.sample, id }
    }

    fn compact(&mut self, alive: &[bool]) {
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut next = 0;
        for (i, &a) in alive.iter().enumerate() {
            if a {
                remap[i] = next;
                next += 1;
            }
        }
        let old = std::mem::take(&mut self.nodes);
        for (i, mut n) in old.into_iter().enumerate() {
            if !alive[i] {
                continue;
            }
            n.parent = n.parent.map(|p| remap[p]);
            n.children = n.children.iter().filter(|&&c| alive[c]).map(|&c| remap[c]).collect();
            self.nodes.push(n);
        }
        for starts in &mut self.block_starts {
            starts.retain(|&s| alive[s]);
            for s in starts.iter_mut() {
                *s = remap[*s];
            }
        }
    }

    /// Structural invariants: parent links, position ids, child lists and
    /// slot references.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.nodes[0].parent.is_none(), "root has a parent");
        for (i, n) in self.nodes.iter().enumerate().skip(1) {
            let p = n.parent.ok_or_else(|| crate::Error::Contract(format!("node {i} has no parent")))?;
            ensure!(p < i, "node {i} precedes its parent {p}");
            ensure!(n.pos == self.nodes[p].pos + 1, "node {i} position id is not parent + 1");
            ensure!(self.nodes[p].children.contains(&i), "node {i} missing from its parent's children");
            let slot = n.slot.ok_or_else(|| crate::Error::Contract(format!("node {i} has no slot")))?;
            ensure!(slot < self.slots.len(), "node {i} references missing slot {slot}");
            ensure!(self.slots[slot].pos == n.pos, "node {i} position differs from its slot");
        }
        for (i, n) in self.nodes.iter().enumerate() {
            for &c in &n.children {
                ensure!(self.nodes[c].parent == Some(i), "child {c} does not point back to {i}");
            }
        }
        Ok(())
    }

    /// One line per node: `id parent token block k pos bucket logprob`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map_or("-".to_string(), |p| p.to_string());
            let _ = writeln!(
                s,
                "{i} {parent} {} {} {} {} b{} {:.6}",
                n.token,
                n.block,
                n.k,
                n.pos,
                n.bucket.index(),
                n.logprob
            );
        }
        s
    }
}

/// Heap entry whose maximum is the next leaf to drop.
#[derive(Clone, Copy, Debug)]
struct TrimKey {
    rule: TrimRule,
    cum_logprob: f64,
    block: usize,
    depth: usize,
    token: usize,
    sample: usize,
    id: usize,
}

impl Ord for TrimKey {
    fn cmp(&self, o: &Self) -> Ordering {
        let primary = match self.rule {
            TrimRule::LowestLogprob => o
                .cum_logprob
                .total_cmp(&self.cum_logprob)
                .then(self.depth.cmp(&o.depth))
                .then(self.token.cmp(&o.token)),
            TrimRule::Structural => {
                self.block.cmp(&o.block).then(self.depth.cmp(&o.depth)).then(self.sample.cmp(&o.sample))
            }
        };
        primary.then(self.id.cmp(&o.id))
    }
}

impl PartialOrd for TrimKey {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl PartialEq for TrimKey {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}

impl Eq for TrimKey {}

#[cfg(test)]
mod tests;
