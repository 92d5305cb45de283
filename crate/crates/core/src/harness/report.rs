//! Summary tables: accepted length, drafter time share and per-position
//! acceptance rates.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapt::{CostModel, ServeRecord};
use crate::verify::Metrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub verifier_calls: u64,
    pub committed: u64,
    pub tau: f64,
    pub nodes_per_call: f64,
    pub drafter_calls_per_call: f64,
    /// Drafter share of forward time under the cost model, in percent.
    pub drafter_time_pct: f64,
    /// Acceptance rate at tree depth `k`, index `k-1`.
    pub alpha: Vec<Option<f64>>,
    /// Acceptance rate at block `m`, in-block position `j`.
    pub block_alpha: Vec<Vec<Option<f64>>>,
}

impl Report {
    pub fn from_metrics(m: &Metrics, costs: &CostModel) -> Self {
        let calls = m.verifier_calls.max(1) as f64;
        Self {
            verifier_calls: m.verifier_calls,
            committed: m.committed,
            tau: m.tau(),
            nodes_per_call: m.tree_nodes as f64 / calls,
            drafter_calls_per_call: m.drafter_calls as f64 / calls,
            drafter_time_pct: 100.0 * m.drafter_time_share(costs.t_target, costs.t_drafter),
            alpha: m.alpha.iter().map(|c| c.rate()).collect(),
            block_alpha: m.block_alpha.iter().map(|b| b.iter().map(|c| c.rate()).collect()).collect(),
        }
    }

    pub fn to_table(&self) -> String {
        let cell = |r: &Option<f64>| r.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let mut s = String::new();
        let _ = writeln!(s, "| calls | committed | tau | nodes/call | T_D% |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {:.1} | {:.1} |",
            self.verifier_calls, self.committed, self.tau, self.nodes_per_call, self.drafter_time_pct
        );
        s.push('\n');
        let head: Vec<String> = (1..=self.alpha.len()).map(|k| format!("a_{k}")).collect();
        let _ = writeln!(s, "| {} |", head.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(head.len()));
        let _ = writeln!(s, "| {} |", self.alpha.iter().map(cell).collect::<Vec<_>>().join(" | "));
        s.push('\n');
        let k = self.block_alpha.first().map_or(0, Vec::len);
        let head: Vec<String> = (1..=k).map(|j| format!("j={j}")).collect();
        let _ = writeln!(s, "| block | {} |", head.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(k));
        for (m, row) in self.block_alpha.iter().enumerate() {
            let _ = writeln!(s, "| m={} | {} |", m + 1, row.iter().map(cell).collect::<Vec<_>>().join(" | "));
        }
        s
    }
}

/// Serving summary: accepted length before and after the source switch
/// and what the bandit did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServeSummary {
    pub queries: usize,
    pub shift_at: usize,
    pub tau_pre: f64,
    pub tau_post: f64,
    pub head_updates: usize,
    pub full_updates: usize,
    pub discarded: usize,
    pub rollbacks: usize,
}

impl ServeSummary {
    pub fn new(records: &[ServeRecord], shift_at: usize) -> Self {
        let tau = |rs: &[ServeRecord]| {
            let c: u64 = rs.iter().map(|r| r.committed).sum();
            let v: u64 = rs.iter().map(|r| r.verifier_calls).sum();
            if v == 0 {
                0.0
            } else {
                c as f64 / v as f64
            }
        };
        let split = shift_at.min(records.len());
        let updates = records.iter().filter_map(|r| r.update.as_ref());
        Self {
            queries: records.len(),
            shift_at,
            tau_pre: tau(&records[..split]),
            tau_post: tau(&records[split..]),
            head_updates: updates.clone().filter(|u| u.action == crate::adapt::Action::Head).count(),
            full_updates: updates.clone().filter(|u| u.action == crate::adapt::Action::Full).count(),
            discarded: updates.filter(|u| u.discarded).count(),
            rollbacks: records.iter().filter(|r| r.bandit.rollback).count(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| queries | shift at | tau pre | tau post | head | full | discarded | rollbacks |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {:.3} | {} | {} | {} | {} |",
            self.queries,
            self.shift_at,
            self.tau_pre,
            self.tau_post,
            self.head_updates,
            self.full_updates,
            self.discarded,
            self.rollbacks
        );
        s
    }
}
