use std::sync::Arc;

use super::*;
use crate::models::{DrafterConfig, DrafterModel, LayerKv, TargetConfig, TargetModel};
use crate::numerics::Tensor;

const V: usize = 16;

/// Synthetic block output with random logits and the given buckets.
fn fake_output(n_starts: usize, k: usize, buckets: &[Bucket], seed: u64) -> DraftBlockOutput {
    let n = n_starts * k;
    assert_eq!(buckets.len(), n);
    let mut rng = Rng::new(seed, 1);
    let logits: Vec<f64> = (0..n * V).map(|_| rng.normal() * 2.0).collect();
    let hidden: Vec<f64> = (0..n * 4).map(|_| rng.normal()).collect();
    let layers = (0..2)
        .map(|_| LayerKv {
            k: Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.normal()).collect()).unwrap(),
            v: Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.normal()).collect()).unwrap(),
        })
        .collect();
    DraftBlockOutput {
        n_starts,
        block_size: k,
        logits: Tensor::new(vec![n, V], logits).unwrap(),
        hidden: Tensor::new(vec![n, 4], hidden).unwrap(),
        kv: KvCache::from_layers(layers).unwrap(),
        summaries: Vec::new(),
        bucket_logits: Tensor::zeros(&[n, 4]),
        buckets: buckets.to_vec(),
    }
}

fn new_tree(root_pos: usize, k: usize) -> DraftTree {
    DraftTree::new(3, root_pos, k, 2, 4)
}

fn child_counts_by_k(tree: &DraftTree, block: usize, k_max: usize) -> Vec<usize> {
    (1..=k_max).map(|k| tree.nodes().iter().filter(|n| n.block == block && n.k == k).count()).collect()
}

#[test]
fn branch_width_lookups() {
    let m = BranchMap::new([2, 4, 10, 0]);
    assert_eq!(m.width(Bucket::B2), 10);
    assert_eq!(m.width(Bucket::B3), 0);
    assert_eq!(BranchMap::new([2, 4, 6, 4]).width(Bucket::B3), 4);
}

#[test]
fn unit_widths_give_a_single_chain() {
    let mut tree = new_tree(5, 4);
    let out = fake_output(1, 4, &[Bucket::B0, Bucket::B2, Bucket::B1, Bucket::B3], 1);
    tree.expand_block(&[0], &out, &BranchMap::uniform(1), &mut Proposal::TopK).unwrap();
    assert_eq!(tree.len(), 4);
    for i in 1..=4 {
        assert_eq!(tree.node(i).parent, Some(i - 1));
        assert_eq!(tree.node(i).pos, 5 + i);
        assert_eq!(tree.node(i).token, ranked_tokens(out.logits_row(i - 1))[0]);
    }
    tree.validate().unwrap();
}

#[test]
fn zero_width_cuts_the_chain() {
    let mut tree = new_tree(0, 4);
    let out = fake_output(1, 4, &[Bucket::B0, Bucket::B3, Bucket::B0, Bucket::B0], 2);
    tree.expand_block(&[0], &out, &BranchMap::new([1, 1, 1, 0]), &mut Proposal::TopK).unwrap();
    assert_eq!(tree.len(), 1);
    assert_eq!(tree.node(1).k, 1);
}

#[test]
fn recorded_buckets_give_hand_traced_sibling_counts() {
    let mut tree = new_tree(0, 4);
    let out = fake_output(1, 4, &[Bucket::B0, Bucket::B0, Bucket::B1, Bucket::B3], 3);
    tree.expand_block(&[0], &out, &BranchMap::new([2, 4, 10, 0]), &mut Proposal::TopK).unwrap();
    assert_eq!(child_counts_by_k(&tree, 1, 4), vec![2, 2, 4, 0]);
    // Every sibling group hangs under the top-1 node of the previous position.
    for n in tree.nodes().iter().skip(1) {
        let p = tree.node(n.parent.unwrap());
        assert!(p.parent.is_none() || p.sample == 0);
        let ranked = ranked_tokens(&tree.slot(n.slot.unwrap()).logits);
        assert_eq!(n.token, ranked[n.sample]);
    }
    tree.validate().unwrap();
}

#[test]
fn sampled_proposals_are_draws_from_the_slot_distribution() {
    let out = fake_output(1, 1, &[Bucket::B0], 4);
    let q = out.probs(0, 0.7);
    let mut counts = [0usize; V];
    let mut rng = Rng::new(5, 0);
    let trials = 4000;
    for _ in 0..trials {
        let mut tree = new_tree(0, 1);
        let mut prop = Proposal::Sample { temperature: 0.7, rng: &mut rng };
        tree.expand_block(&[0], &out, &BranchMap::uniform(3), &mut prop).unwrap();
        assert_eq!(tree.len(), 3);
        for n in tree.nodes().iter().skip(1) {
            counts[n.token] += 1;
            assert!((n.logprob - q[n.token].ln()).abs() < 1e-12);
        }
    }
    let total = (3 * trials) as f64;
    let tv: f64 = counts.iter().zip(&q).map(|(&c, &p)| (c as f64 / total - p).abs()).sum::<f64>() / 2.0;
    assert!(tv < 0.03, "tv {tv}");
}

fn chain_tree_with_buckets(buckets: &[Bucket]) -> DraftTree {
    let k = buckets.len();
    let mut tree = new_tree(0, k);
    let out = fake_output(1, k, buckets, 6);
    tree.expand_block(&[0], &out, &BranchMap::uniform(2), &mut Proposal::TopK).unwrap();
    tree
}

#[test]
fn start_selection_rules() {
    let eligible = [true, true, false, false];
    let tree = chain_tree_with_buckets(&[Bucket::B3; 4]);
    assert!(tree.select_next_starts(1, 3, &eligible).is_empty());

    let tree = chain_tree_with_buckets(&[Bucket::B3, Bucket::B1, Bucket::B3, Bucket::B2]);
    let s = tree.select_next_starts(1, 3, &eligible);
    assert_eq!(s.len(), 1);
    assert_eq!(tree.node(s[0]).k, 2);
    assert!(tree.node(s[0]).on_chain());

    let tree = chain_tree_with_buckets(&[Bucket::B0, Bucket::B1, Bucket::B0, Bucket::B1, Bucket::B0]);
    let s = tree.select_next_starts(1, 3, &eligible);
    let mut oracle: Vec<usize> = (1..tree.nodes().len()).filter(|&i| tree.node(i).sample == 0).collect();
    assert_eq!(oracle.len(), 5);
    oracle.sort_by(|&a, &b| tree.node(b).cum_logprob.partial_cmp(&tree.node(a).cum_logprob).unwrap());
    assert_eq!(s, oracle[..3].to_vec());
}

#[test]
fn figure_style_mask_and_position_ids() {
    // Prefix t1, t2 at ids 0, 1; the root is t2; block 1 fills ids 2..5;
    // block 2 branches from the id-3 node.
    let mut tree = DraftTree::new(7, 1, 4, 2, 4);
    let out1 = fake_output(1, 4, &[Bucket::B0; 4], 7);
    tree.expand_block(&[0], &out1, &BranchMap::uniform(1), &mut Proposal::TopK).unwrap();
    assert_eq!(tree.pos_ids(), vec![1, 2, 3, 4, 5]);
    let start = 2;
    assert_eq!(tree.node(start).pos, 3);
    let prefix = 2;
    let mask = tree.build_attention_mask(prefix, &[start]);
    assert_eq!((mask.queries(), mask.keys()), (4, prefix + 4 + 4));
    let row0: Vec<bool> = mask.row(0).to_vec();
    assert_eq!(row0, vec![true, true, true, true, false, false, true, false, false, false]);
    for q in 0..4 {
        for j in 0..4 {
            assert_eq!(mask.get(q, prefix + 4 + j), j <= q);
        }
    }
    let out2 = fake_output(1, 4, &[Bucket::B0; 4], 8);
    tree.expand_block(&[start], &out2, &BranchMap::uniform(1), &mut Proposal::TopK).unwrap();
    let block2: Vec<usize> = tree.nodes().iter().filter(|n| n.block == 2).map(|n| n.pos).collect();
    assert_eq!(block2, vec![4, 5, 6, 7]);
    tree.validate().unwrap();
}

#[test]
fn single_start_mask_is_prefix_plus_causal() {
    let tree = new_tree(3, 4);
    let mask = tree.build_attention_mask(3, &[0]);
    let want = AttentionMask::causal(4, 3);
    assert_eq!(mask, want);
}

#[test]
fn two_starts_do_not_see_each_other() {
    let mut tree = new_tree(0, 4);
    let out = fake_output(1, 4, &[Bucket::B0; 4], 9);
    tree.expand_block(&[0], &out, &BranchMap::uniform(2), &mut Proposal::TopK).unwrap();
    let starts = tree.select_next_starts(1, 2, &[true; 4]);
    assert_eq!(starts.len(), 2);
    let mask = tree.build_attention_mask(0, &starts);
    let own = 4;
    for q in 0..8 {
        for j in 0..8 {
            let same = q / 4 == j / 4;
            assert_eq!(mask.get(q, own + j), same && j <= q);
        }
        let s = starts[q / 4];
        for slot in 0..4 {
            assert_eq!(mask.get(q, slot), slot < tree.node(s).k);
        }
    }
    mask.validate().unwrap();
}

#[test]
fn siblings_share_position_ids_and_reassignment_is_stable() {
    let mut tree = new_tree(10, 3);
    let out = fake_output(1, 3, &[Bucket::B1; 3], 10);
    tree.expand_block(&[0], &out, &BranchMap::new([1, 3, 1, 1]), &mut Proposal::TopK).unwrap();
    for n in tree.nodes().iter().skip(1) {
        assert_eq!(n.pos, 10 + n.k);
    }
    let before = tree.pos_ids();
    tree.assign_position_ids();
    assert_eq!(tree.pos_ids(), before);
}

#[test]
fn target_mask_is_ancestry() {
    let mut tree = new_tree(0, 3);
    let out = fake_output(1, 3, &[Bucket::B1; 3], 11);
    tree.expand_block(&[0], &out, &BranchMap::uniform(2), &mut Proposal::TopK).unwrap();
    let m = tree.target_mask(5);
    for i in 0..tree.nodes().len() {
        for j in 0..5 {
            assert!(m.get(i, j));
        }
        for j in 0..tree.nodes().len() {
            assert_eq!(m.get(i, 5 + j), tree.is_ancestor(j, i));
        }
    }
}

/// Grows a random multi-block tree with random buckets.
fn random_tree(seed: u64, k: usize, blocks: usize, map: BranchMap) -> DraftTree {
    let mut rng = Rng::new(seed, 2);
    let mut tree = new_tree(0, k);
    let mut starts = vec![0];
    for b in 1..=blocks {
        let buckets: Vec<Bucket> =
            (0..starts.len() * k).map(|_| Bucket::from_index(rng.below(4)).unwrap()).collect();
        let out = fake_output(starts.len(), k, &buckets, seed * 31 + b as u64);
        tree.expand_block(&starts, &out, &map, &mut Proposal::TopK).unwrap();
        starts = tree.select_next_starts(b, 3, &[true, true, true, false]);
        if starts.is_empty() {
            break;
        }
    }
    tree
}

/// Repeatedly scans for the worst leaf, as in the rule's definition.
fn brute_force_trim(tree: &DraftTree, budget: usize, rule: TrimRule) -> Vec<(usize, usize, usize)> {
    let nodes = tree.nodes();
    let mut alive = vec![true; nodes.len()];
    let count = |alive: &[bool]| alive.iter().skip(1).filter(|&&a| a).count();
    while count(&alive) > budget {
        let leaves: Vec<usize> = (1..nodes.len())
            .filter(|&i| alive[i] && !nodes[i].children.iter().any(|&c| alive[c]))
            .collect();
        let worst = *leaves
            .iter()
            .max_by(|&&a, &&b| {
                let (na, nb) = (&nodes[a], &nodes[b]);
                let ord = match rule {
                    TrimRule::LowestLogprob => nb
                        .cum_logprob
                        .partial_cmp(&na.cum_logprob)
                        .unwrap()
                        .then(na.pos.cmp(&nb.pos))
                        .then(na.token.cmp(&nb.token)),
                    TrimRule::Structural => {
                        na.block.cmp(&nb.block).then(na.pos.cmp(&nb.pos)).then(na.sample.cmp(&nb.sample))
                    }
                };
                ord.then(a.cmp(&b))
            })
            .unwrap();
        alive[worst] = false;
    }
    (0..nodes.len()).filter(|&i| alive[i]).map(|i| (nodes[i].slot.unwrap_or(usize::MAX), nodes[i].token, nodes[i].sample)).collect()
}

fn signature(tree: &DraftTree) -> Vec<(usize, usize, usize)> {
    tree.nodes().iter().map(|n| (n.slot.unwrap_or(usize::MAX), n.token, n.sample)).collect()
}

#[test]
fn budget_small_tree_untouched_and_one_over_drops_one() {
    let mut tree = chain_tree_with_buckets(&[Bucket::B0; 5]);
    assert_eq!(tree.len(), 10);
    let before = signature(&tree);
    assert_eq!(tree.enforce_budget(60, TrimRule::LowestLogprob), 0);
    assert_eq!(signature(&tree), before);

    let mut big = random_tree(3, 4, 2, BranchMap::new([4, 6, 10, 0]));
    while big.len() <= 61 {
        big = random_tree(big.len() as u64 + 100, 4, 2, BranchMap::new([6, 8, 10, 0]));
    }
    let target_len = big.len() - 1;
    let want = brute_force_trim(&big, target_len, TrimRule::LowestLogprob);
    assert_eq!(big.enforce_budget(target_len, TrimRule::LowestLogprob), 1);
    assert_eq!(signature(&big), want);
}

#[test]
fn budget_matches_brute_force_on_random_trees() {
    for seed in 0..40 {
        for rule in [TrimRule::LowestLogprob, TrimRule::Structural] {
            let tree = random_tree(seed, 4, 3, BranchMap::new([3, 4, 6, 0]));
            for budget in [1, 5, 17, 30] {
                let mut t = tree.clone();
                let want = brute_force_trim(&tree, budget, rule);
                t.enforce_budget(budget, rule);
                assert!(t.len() <= budget);
                assert_eq!(signature(&t), want, "seed {seed} budget {budget} {rule:?}");
                t.validate().unwrap();
                for &s in t.block_starts.iter().flatten() {
                    assert!(s < t.nodes().len());
                }
            }
        }
    }
}

#[test]
fn random_trees_keep_invariants() {
    for seed in 0..50 {
        let blocks = 1 + (seed as usize % 3);
        let mut tree = random_tree(seed, 4, blocks, BranchMap::new([2, 4, 10, 0]));
        tree.enforce_budget(60, TrimRule::LowestLogprob);
        tree.validate().unwrap();
        assert!(tree.len() <= 60);
        assert!(tree.max_depth() <= blocks * 4);
        for i in 1..tree.nodes().len() {
            let path = tree.path(i);
            for w in path.windows(2) {
                assert_eq!(tree.node(w[1]).pos, tree.node(w[0]).pos + 1);
            }
        }
        tree.target_mask(3).validate().unwrap();
    }
}

#[test]
fn unit_map_single_start_is_one_chain() {
    for seed in 0..10 {
        let mut rng = Rng::new(seed, 3);
        let mut tree = new_tree(0, 4);
        let mut starts = vec![0];
        for b in 1..=3 {
            let buckets: Vec<Bucket> = (0..4).map(|_| Bucket::from_index(rng.below(2)).unwrap()).collect();
            let out = fake_output(1, 4, &buckets, seed + b as u64);
            tree.expand_block(&starts, &out, &BranchMap::uniform(1), &mut Proposal::TopK).unwrap();
            starts = tree.select_next_starts(b, 1, &[true, true, false, false]);
            if starts.is_empty() {
                break;
            }
        }
        assert!(tree.max_depth() <= 12);
        // A chain may fork only where a start gets both a block continuation
        // and a new block; with a unit map and one start per block every
        // node has at most two children and every depth at most two nodes.
        for i in 0..tree.nodes().len() {
            assert!(tree.node(i).children.len() <= 2);
        }
    }
}

#[test]
fn dump_golden() {
    let mut tree = DraftTree::new(5, 2, 2, 1, 1);
    let layers = vec![LayerKv { k: Tensor::zeros(&[2, 1]), v: Tensor::zeros(&[2, 1]) }];
    let out = DraftBlockOutput {
        n_starts: 1,
        block_size: 2,
        logits: Tensor::new(vec![2, 4], vec![2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 3.0]).unwrap(),
        hidden: Tensor::zeros(&[2, 1]),
        kv: KvCache::from_layers(layers).unwrap(),
        summaries: Vec::new(),
        bucket_logits: Tensor::zeros(&[2, 4]),
        buckets: vec![Bucket::B1, Bucket::B0],
    };
    tree.expand_block(&[0], &out, &BranchMap::new([1, 2, 0, 0]), &mut Proposal::TopK).unwrap();
    let l0 = log_softmax_slice(&[2.0, 0.0, 1.0, 0.0]);
    let l1 = log_softmax_slice(&[0.0, 0.0, 0.0, 3.0]);
    let want = format!(
        "0 - 5 0 0 2 b0 0.000000\n1 0 0 1 1 3 b1 {:.6}\n2 0 2 1 1 3 b1 {:.6}\n3 1 3 1 2 4 b0 {:.6}\n",
        l0[0], l0[2], l1[3]
    );
    assert_eq!(tree.dump(), want);
    assert_eq!(
        tree.dump(),
        "0 - 5 0 0 2 b0 0.000000\n1 0 0 1 1 3 b1 -0.493812\n2 0 2 1 1 3 b1 -1.493812\n3 1 3 1 2 4 b0 -0.139206\n"
    );
}

fn tiny_models(seed: u64) -> (TargetModel, DrafterModel) {
    let cfg = TargetConfig { vocab: 12, d_model: 8, n_layers: 4, n_heads: 2, d_ff: 16, max_positions: 48, taps: [1, 2, 4] };
    let target = TargetModel::new(cfg, seed).unwrap();
    let mut dcfg = DrafterConfig::for_target(&target, 4);
    dcfg.rank_hidden = 6;
    let mut drafter = DrafterModel::new(dcfg, &target, seed + 1).unwrap();
    let mut rng = Rng::new(seed, 4);
    let ids: Vec<_> = drafter.params.ids().collect();
    for id in ids {
        if drafter.params.group(id) != crate::models::ParamGroup::Frozen {
            for v in drafter.params.get_mut(id).data_mut() {
                *v += 0.2 * rng.normal();
            }
        }
    }
    (target, drafter)
}

#[test]
fn batched_block_two_matches_per_path_recompute() {
    let (_, drafter) = tiny_models(12);
    let k = 4;
    let mut rng = Rng::new(13, 0);
    for trial in 0..5 {
        // Committed drafter prefix of 3 rows from an earlier forward.
        let pre = drafter
            .block_forward(
                &[DraftStart { condition: (0..8).map(|_| rng.normal()).collect(), token: 1, pos: 0 }],
                &drafter.empty_cache(),
                &Arc::new(crate::models::independent_starts_mask(0, 1, k)),
            )
            .unwrap();
        let mut prefix = drafter.empty_cache();
        prefix.append_rows(&pre.kv, &[0, 1, 2]).unwrap();
        let root_cond: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let mut tree = DraftTree::new(rng.below(12), 4, k, drafter.layers.len(), 8);
        let m1 = Arc::new(tree.build_attention_mask(prefix.len(), &[0]));
        let b1 = drafter.block_forward(&tree.draft_starts(&[0], &root_cond), &prefix, &m1).unwrap();
        tree.expand_block(&[0], &b1, &BranchMap::new([2, 3, 2, 1]), &mut Proposal::TopK).unwrap();
        let starts = tree.select_next_starts(1, 3, &[true; 4]);
        assert!(!starts.is_empty(), "trial {trial}");
        let m2 = Arc::new(tree.build_attention_mask(prefix.len(), &starts));
        let past = prefix.concat(tree.kv()).unwrap();
        let b2 = drafter.block_forward(&tree.draft_starts(&starts, &root_cond), &past, &m2).unwrap();
        for (si, &s) in starts.iter().enumerate() {
            let mut path_past = prefix.clone();
            path_past.append_rows(tree.kv(), &tree.path_slots(s)).unwrap();
            let single_mask = Arc::new(crate::models::independent_starts_mask(path_past.len(), 1, k));
            let single =
                drafter.block_forward(&tree.draft_starts(&[s], &root_cond), &path_past, &single_mask).unwrap();
            for j in 1..=k {
                let r = b2.row(si, j);
                let d = b2
                    .logits_row(r)
                    .iter()
                    .zip(single.logits_row(j - 1))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(d < 1e-9);
            }
        }
    }
}
