use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{target_tree_forward, verify_greedy, verify_sample, CallRecord, Metrics, VerifyResult};
use crate::models::{DrafterModel, KvCache, TargetFeatures, TargetModel, TargetOutput};
use crate::numerics::{softmax_slice, AttentionMask, Rng};
use crate::tree::{DraftTree, Proposal, TreeConfig, TrimRule};
use crate::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub tree: TreeConfig,
    pub mode: DecodeMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { tree: TreeConfig::default(), mode: DecodeMode::Greedy }
    }
}

impl DecodeConfig {
    fn trim_rule(&self) -> TrimRule {
        match self.mode {
            DecodeMode::Greedy => TrimRule::LowestLogprob,
            DecodeMode::Sample { .. } => TrimRule::Structural,
        }
    }
}

/// Everything one speculative iteration saw and decided.
#[derive(Clone, Debug)]
pub struct Iteration {
    pub tree: DraftTree,
    pub target: TargetOutput,
    pub result: VerifyResult,
    /// Target features and root used to condition the first block.
    pub features: TargetFeatures,
    pub root_token: usize,
    pub root_pos: usize,
    /// Committed drafter cache the tree was drafted against.
    pub draft_prefix: KvCache,
}

impl Iteration {
    pub fn committed(&self) -> Vec<usize> {
        self.result.committed(&self.tree)
    }
}

/// Per-sequence decoding state. The last committed token (the root) has
/// not been run through the target yet; the target cache covers every
/// position before it.
#[derive(Clone, Debug)]
pub struct Session {
    tokens: Vec<usize>,
    prompt_len: usize,
    target_cache: KvCache,
    features: TargetFeatures,
    draft_cache: KvCache,
    pub metrics: Metrics,
}

impl Session {
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Tokens after the prompt.
    pub fn generated(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }

    pub fn root_pos(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn draft_cache(&self) -> &KvCache {
        &self.draft_cache
    }

    pub fn target_cache(&self) -> &KvCache {
        &self.target_cache
    }

    pub fn features(&self) -> &TargetFeatures {
        &self.features
    }
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// Generated tokens, truncated to the requested length.
    pub tokens: Vec<usize>,
    pub metrics: Metrics,
    pub calls: Vec<CallRecord>,
}

/// Speculative decoder over a target and a drafter.
#[derive(Clone, Copy, Debug)]
pub struct SpecDecoder<'a> {
    pub target: &'a TargetModel,
    pub drafter: &'a DrafterModel,
    pub config: &'a DecodeConfig,
}

impl<'a> SpecDecoder<'a> {
    pub fn new(target: &'a TargetModel, drafter: &'a DrafterModel, config: &'a DecodeConfig) -> Result<Self> {
        config.tree.validate()?;
        ensure!(drafter.config.vocab == target.config.vocab, "drafter and target vocabularies differ");
        ensure!(drafter.config.target_d_model == target.config.d_model, "drafter expects a different target width");
        if let DecodeMode::Sample { temperature } = config.mode {
            ensure!(temperature > 0.0, "sampling temperature must be positive");
        }
        Ok(Self { target, drafter, config })
    }

    /// Longest sequence (prompt + generated) an iteration can still extend.
    pub fn max_len(&self) -> usize {
        let depth = self.config.tree.max_blocks * self.drafter.block_size();
        self.target.config.max_positions.min(self.drafter.config.max_positions).saturating_sub(depth)
    }

    /// Runs the prompt through the target and picks the first token.
    pub fn prefill(&self, prompt: &[usize], rng: &mut Rng) -> Result<Session> {
        ensure!(!prompt.is_empty(), "prompt must not be empty");
        ensure!(prompt.len() < self.max_len(), "prompt of {} tokens leaves no room to decode", prompt.len());
        let (out, cache) = self.target.extend(&self.target.empty_cache(), prompt)?;
        let last = prompt.len() - 1;
        let first = pick(out.logits.row_slice(last), self.config.mode, rng);
        let mut tokens = prompt.to_vec();
        tokens.push(first);
        Ok(Session {
            tokens,
            prompt_len: prompt.len(),
            target_cache: cache,
            features: out.features(last),
            draft_cache: self.drafter.empty_cache(),
            metrics: Metrics::new(self.config.tree.max_blocks, self.drafter.block_size()),
        })
    }

    /// Builds the draft tree for the session's current root.
    pub fn draft(&self, session: &Session, rng: &mut Rng) -> Result<(DraftTree, u64)> {
        let cfg = &self.config.tree;
        let root_pos = session.root_pos();
        ensure!(root_pos < self.max_len(), "sequence of {} tokens reached the position limit", root_pos + 1);
        let condition = self.drafter.build_condition(&session.features)?;
        let mut tree = DraftTree::new(
            *session.tokens.last().expect("session holds a root"),
            root_pos,
            self.drafter.block_size(),
            self.drafter.layers.len(),
            self.drafter.d_model(),
        );
        let mut proposal = match self.config.mode {
            DecodeMode::Greedy => Proposal::TopK,
            DecodeMode::Sample { temperature } => Proposal::Sample { temperature, rng },
        };
        let mut starts = vec![DraftTree::ROOT];
        let mut calls = 0;
        for m in 1..=cfg.max_blocks {
            let mask = Arc::new(tree.build_attention_mask(session.draft_cache.len(), &starts));
            let past = session.draft_cache.concat(tree.kv())?;
            let out = self.drafter.block_forward(&tree.draft_starts(&starts, &condition), &past, &mask)?;
            calls += 1;
            tree.expand_block(&starts, &out, &cfg.branch_map, &mut proposal)?;
            tree.enforce_budget(cfg.budget, self.config.trim_rule());
            if m == cfg.max_blocks {
                break;
            }
            starts = tree.select_next_starts(m, cfg.max_starts, &cfg.start_buckets);
            if starts.is_empty() {
                break;
            }
        }
        Ok((tree, calls))
    }

    /// One draft / verify / commit iteration.
    pub fn step(&self, session: &mut Session, rng: &mut Rng) -> Result<Iteration> {
        let (tree, drafter_calls) = self.draft(session, rng)?;
        let target = target_tree_forward(self.target, &session.target_cache, &tree)?;
        let result = match self.config.mode {
            DecodeMode::Greedy => verify_greedy(&tree, &target.logits)?,
            DecodeMode::Sample { temperature } => verify_sample(&tree, &target.logits, temperature, rng)?,
        };
        let iteration = Iteration {
            features: session.features.clone(),
            root_token: tree.root().token,
            root_pos: tree.root().pos,
            draft_prefix: session.draft_cache.clone(),
            tree,
            target,
            result,
        };
        self.commit(session, &iteration, drafter_calls)?;
        Ok(iteration)
    }

    fn commit(&self, session: &mut Session, it: &Iteration, drafter_calls: u64) -> Result<()> {
        let (tree, res) = (&it.tree, &it.result);
        let mut rows = vec![DraftTree::ROOT];
        rows.extend_from_slice(&res.path);
        session.target_cache.append_rows(&it.target.kv, &rows)?;
        let slots: Vec<usize> = res.path.iter().map(|&n| tree.node(n).slot.expect("path node has a slot")).collect();
        session.draft_cache.append_rows(tree.kv(), &slots)?;
        session.features = it.target.features(res.last());
        let committed = res.committed(tree);
        session.tokens.extend_from_slice(&committed);

        let m = &mut session.metrics;
        m.verifier_calls += 1;
        m.target_calls += 1;
        m.drafter_calls += drafter_calls;
        m.committed += committed.len() as u64;
        m.tree_nodes += tree.len() as u64;
        if self.config.mode == DecodeMode::Greedy {
            m.update_alpha(tree, res, &it.target.logits);
        }
        Ok(())
    }

    /// Generates `max_new` tokens after `prompt`.
    pub fn generate(&self, prompt: &[usize], max_new: usize, rng: &mut Rng) -> Result<DecodeOutput> {
        ensure!(
            prompt.len() + max_new <= self.max_len(),
            "prompt {} + {max_new} new tokens exceeds the decodable length {}",
            prompt.len(),
            self.max_len()
        );
        let mut session = self.prefill(prompt, rng)?;
        let mut calls = Vec::new();
        while session.generated().len() < max_new {
            let it = self.step(&mut session, rng)?;
            let m = &session.metrics;
            calls.push(CallRecord {
                iteration: m.verifier_calls,
                accepted: it.result.path.len(),
                bonus: it.result.bonus,
                tree_nodes: it.tree.len(),
                drafter_calls: m.drafter_calls,
                tau: m.tau(),
            });
        }
        let mut tokens = session.generated().to_vec();
        tokens.truncate(max_new);
        Ok(DecodeOutput { tokens, metrics: session.metrics, calls })
    }
}

fn pick(logits: &[f64], mode: DecodeMode, rng: &mut Rng) -> usize {
    match mode {
        DecodeMode::Greedy => greedy_token(logits),
        DecodeMode::Sample { temperature } => {
            let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
            rng.categorical(&softmax_slice(&scaled)).expect("softmax has mass")
        }
    }
}

fn greedy_token(logits: &[f64]) -> usize {
    super::argmax(logits)
}

/// Plain autoregressive greedy decoding, one target forward per token.
pub fn vanilla_greedy(target: &TargetModel, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
    let mut rng = Rng::new(0, 0);
    vanilla(target, prompt, max_new, DecodeMode::Greedy, &mut rng)
}

/// Plain autoregressive sampling at `temperature`.
pub fn vanilla_sample(
    target: &TargetModel,
    prompt: &[usize],
    max_new: usize,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    ensure!(temperature > 0.0, "sampling temperature must be positive");
    vanilla(target, prompt, max_new, DecodeMode::Sample { temperature }, rng)
}

fn vanilla(target: &TargetModel, prompt: &[usize], max_new: usize, mode: DecodeMode, rng: &mut Rng) -> Result<Vec<usize>> {
    ensure!(!prompt.is_empty(), "prompt must not be empty");
    ensure!(prompt.len() + max_new <= target.config.max_positions, "sequence exceeds max_positions");
    let (mut out, mut cache) = target.extend(&target.empty_cache(), prompt)?;
    let mut row = prompt.len() - 1;
    let mut generated = Vec::with_capacity(max_new);
    while generated.len() < max_new {
        let t = pick(out.logits.row_slice(row), mode, rng);
        generated.push(t);
        if generated.len() == max_new {
            break;
        }
        let pos = cache.len();
        let mask = Arc::new(AttentionMask::causal(1, pos));
        out = target.forward(&[t], &[pos], &cache, &mask)?;
        cache = cache.concat(&out.kv)?;
        row = 0;
    }
    Ok(generated)
}
