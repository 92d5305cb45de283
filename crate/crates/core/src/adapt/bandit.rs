use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;
use crate::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Skip,
    Head,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    ColdStart,
    Steady,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditConfig {
    /// EWMA step for the action values.
    pub alpha: f64,
    /// Intervals whose trigger signal is below this do not revise values.
    pub s_min: f64,
    pub warmup_queries: usize,
    pub cold_start_events: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Queries after an update during which nothing is buffered.
    pub block_queries: usize,
    /// Measurement interval length in queries.
    pub interval: usize,
    pub head_threshold: usize,
    pub full_threshold: usize,
    /// Closed intervals inspected by the rollback rule.
    pub rollback_window: usize,
    /// EWMA step of the per-query throughput baseline.
    pub baseline_decay: f64,
    pub v_init: f64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            alpha: 0.10,
            s_min: 5.0,
            warmup_queries: 10,
            cold_start_events: 8,
            eps_start: 0.30,
            eps_end: 0.10,
            block_queries: 2,
            interval: 8,
            head_threshold: 8,
            full_threshold: 8,
            rollback_window: 3,
            baseline_decay: 0.10,
            v_init: 0.0,
        }
    }
}

impl BanditConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha > 0.0 && self.alpha <= 1.0, "alpha must be in (0, 1]");
        ensure!(self.baseline_decay > 0.0 && self.baseline_decay <= 1.0, "baseline_decay must be in (0, 1]");
        ensure!(self.interval >= 1, "interval must be at least one query");
        ensure!(self.head_threshold >= 1 && self.full_threshold >= 1, "buffer thresholds must be positive");
        ensure!(self.rollback_window >= 2, "rollback window needs at least two intervals");
        ensure!((0.0..=1.0).contains(&self.eps_start) && (0.0..=1.0).contains(&self.eps_end), "epsilon must be a probability");
        Ok(())
    }

    /// Exploration rate for the `event`-th cold-start decision, linear from
    /// `eps_start` at the first event to `eps_end` at the last.
    pub fn epsilon(&self, event: usize) -> f64 {
        if self.cold_start_events <= 1 {
            return self.eps_start;
        }
        let f = (event.min(self.cold_start_events - 1)) as f64 / (self.cold_start_events - 1) as f64;
        self.eps_start + (self.eps_end - self.eps_start) * f
    }
}

/// Analytic costs in units of one target forward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub t_target: f64,
    pub t_drafter: f64,
    pub head_update: f64,
    pub full_update: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { t_target: 1.0, t_drafter: 0.1, head_update: 0.5, full_update: 4.0 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.t_target > 0.0 && self.t_drafter > 0.0 && self.full_update > 0.0, "forward and full-update costs must be positive");
        ensure!(self.head_update >= 0.0, "head-update cost must be non-negative");
        Ok(())
    }

    pub fn update_cost(&self, action: Action) -> f64 {
        match action {
            Action::Skip => 0.0,
            Action::Head => self.head_update,
            Action::Full => self.full_update,
        }
    }
}

/// Work done while serving one or more queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryStats {
    pub committed: u64,
    pub verifier_calls: u64,
    pub target_calls: u64,
    pub drafter_calls: u64,
}

impl QueryStats {
    pub fn add(&mut self, o: &QueryStats) {
        self.committed += o.committed;
        self.verifier_calls += o.verifier_calls;
        self.target_calls += o.target_calls;
        self.drafter_calls += o.drafter_calls;
    }

    /// Accepted length: committed tokens per verifier call.
    pub fn tau(&self) -> f64 {
        if self.verifier_calls == 0 {
            0.0
        } else {
            self.committed as f64 / self.verifier_calls as f64
        }
    }
}

/// Committed tokens per unit of modeled time, update costs included.
pub fn measure_throughput(costs: &CostModel, stats: &QueryStats, update_cost: f64) -> f64 {
    let time = stats.target_calls as f64 * costs.t_target + stats.drafter_calls as f64 * costs.t_drafter + update_cost;
    if time > 0.0 {
        stats.committed as f64 / time
    } else {
        0.0
    }
}

/// EWMA revision of an action value after an interval with observed gain
/// `delta`; intervals triggered by a weak signal leave it unchanged.
pub fn revise_value(v: f64, alpha: f64, s_min: f64, delta: f64, s_trig: f64) -> f64 {
    if s_trig < s_min {
        v
    } else {
        (1.0 - alpha) * v + alpha * (delta / s_trig)
    }
}

pub fn strictly_decreasing(taus: &[f64]) -> bool {
    taus.windows(2).all(|w| w[1] < w[0])
}

/// Source of uniform draws for exploration; scripted in tests.
pub trait UniformSource {
    fn uniform(&mut self) -> f64;
}

impl UniformSource for Rng {
    fn uniform(&mut self) -> f64 {
        Rng::uniform(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct OpenInterval {
    action: Action,
    s_trig: f64,
    remaining: usize,
    stats: QueryStats,
    update_cost: f64,
    baseline: f64,
}

/// An update the serving loop must run now.
#[derive(Clone, Debug, PartialEq)]
pub struct Fire<P> {
    pub action: Action,
    pub s_trig: f64,
    pub payloads: Vec<P>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedInterval {
    pub action: Action,
    pub s_trig: f64,
    pub throughput: f64,
    pub baseline: f64,
    pub delta: f64,
    pub tau: f64,
    /// Whether the action value was revised (`s_trig >= s_min`).
    pub revised: bool,
}

/// Bandit-side part of one event-log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditRecord {
    pub query: usize,
    pub s: f64,
    pub phase: Phase,
    pub action: Action,
    pub explored: bool,
    pub blocked: bool,
    pub head_buffer: usize,
    pub full_buffer: usize,
    pub fired: Option<Action>,
    pub closed: Option<ClosedInterval>,
    pub v_head: f64,
    pub v_full: f64,
    pub baseline: f64,
    pub rollback: bool,
    pub last_good: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome<P> {
    pub record: BanditRecord,
    pub fire: Option<Fire<P>>,
}

/// Cost-aware skip/head/full selector with buffered updates, measurement
/// intervals and the accepted-length rollback rule.
#[derive(Clone, Debug)]
pub struct Bandit<P> {
    pub config: BanditConfig,
    pub costs: CostModel,
    pub v_head: f64,
    pub v_full: f64,
    queries: usize,
    events: usize,
    block_left: usize,
    interval: Option<OpenInterval>,
    head_buf: Vec<P>,
    full_buf: Vec<P>,
    window: VecDeque<f64>,
    baseline: Option<f64>,
}

impl<P> Bandit<P> {
    pub fn new(config: BanditConfig, costs: CostModel) -> Result<Self> {
        config.validate()?;
        costs.validate()?;
        Ok(Self {
            v_head: config.v_init,
            v_full: config.v_init,
            config,
            costs,
            queries: 0,
            events: 0,
            block_left: 0,
            interval: None,
            head_buf: Vec::new(),
            full_buf: Vec::new(),
            window: VecDeque::new(),
            baseline: None,
        })
    }

    pub fn phase(&self) -> Phase {
        if self.queries < self.config.warmup_queries {
            Phase::Warmup
        } else if self.events < self.config.cold_start_events {
            Phase::ColdStart
        } else {
            Phase::Steady
        }
    }

    pub fn events(&self) -> usize {
        self.events
    }

    pub fn interval_open(&self) -> bool {
        self.interval.is_some()
    }

    pub fn buffer_len(&self, action: Action) -> usize {
        match action {
            Action::Skip => 0,
            Action::Head => self.head_buf.len(),
            Action::Full => self.full_buf.len(),
        }
    }

    /// Greedy choice: the larger predicted gain `s * v`, head on ties, skip
    /// when neither is positive.
    pub fn greedy(&self, s: f64) -> Action {
        let (h, f) = (s * self.v_head, s * self.v_full);
        if h <= 0.0 && f <= 0.0 {
            Action::Skip
        } else if h >= f {
            Action::Head
        } else {
            Action::Full
        }
    }

    fn close(&mut self, iv: OpenInterval) -> (ClosedInterval, bool, bool) {
        let throughput = measure_throughput(&self.costs, &iv.stats, iv.update_cost);
        let delta = throughput - iv.baseline;
        let revised = iv.s_trig >= self.config.s_min;
        let (alpha, s_min) = (self.config.alpha, self.config.s_min);
        let v = match iv.action {
            Action::Head => &mut self.v_head,
            Action::Full => &mut self.v_full,
            Action::Skip => unreachable!("skip never opens an interval"),
        };
        *v = revise_value(*v, alpha, s_min, delta, iv.s_trig);
        let tau = iv.stats.tau();
        self.window.push_back(tau);
        while self.window.len() > self.config.rollback_window {
            self.window.pop_front();
        }
        let full = self.window.len() == self.config.rollback_window;
        let decreasing = full && strictly_decreasing(self.window.make_contiguous());
        let mut good = false;
        if decreasing {
            self.v_head = self.config.v_init;
            self.v_full = self.config.v_init;
            self.window.clear();
        } else {
            good = self.window.iter().all(|&t| tau >= t);
        }
        let closed = ClosedInterval { action: iv.action, s_trig: iv.s_trig, throughput, baseline: iv.baseline, delta, tau, revised };
        (closed, decreasing, good)
    }

    /// Processes the end of one query: measurement bookkeeping, the action
    /// choice for this query's signal `s`, buffering and update firing.
    pub fn on_query(&mut self, s: f64, stats: &QueryStats, payload: P, draws: &mut impl UniformSource) -> QueryOutcome<P> {
        let query = self.queries;
        let phase = self.phase();
        self.queries += 1;

        let tp = measure_throughput(&self.costs, stats, 0.0);
        let d = self.config.baseline_decay;
        let baseline = self.baseline.map_or(tp, |b| (1.0 - d) * b + d * tp);
        self.baseline = Some(baseline);

        let mut closed = None;
        let (mut rollback, mut last_good) = (false, false);
        if let Some(iv) = self.interval.as_mut() {
            iv.stats.add(stats);
            iv.remaining -= 1;
            if iv.remaining == 0 {
                let iv = self.interval.take().expect("interval is open");
                let (c, r, g) = self.close(iv);
                closed = Some(c);
                rollback = r;
                last_good = g;
            }
        }

        let mut explored = false;
        let mut blocked = false;
        let action = if phase == Phase::Warmup {
            Action::Skip
        } else if self.block_left > 0 {
            self.block_left -= 1;
            blocked = true;
            Action::Skip
        } else if phase == Phase::ColdStart && draws.uniform() < self.config.epsilon(self.events) {
            explored = true;
            if draws.uniform() < 0.5 {
                Action::Head
            } else {
                Action::Full
            }
        } else {
            self.greedy(s)
        };

        let mut fire = None;
        if action != Action::Skip {
            let (buf, threshold) = match action {
                Action::Head => (&mut self.head_buf, self.config.head_threshold),
                _ => (&mut self.full_buf, self.config.full_threshold),
            };
            buf.push(payload);
            if buf.len() >= threshold && self.interval.is_none() {
                let payloads = std::mem::take(buf);
                self.interval = Some(OpenInterval {
                    action,
                    s_trig: s,
                    remaining: self.config.interval,
                    stats: QueryStats::default(),
                    update_cost: self.costs.update_cost(action),
                    baseline,
                });
                self.block_left = self.config.block_queries;
                self.events += 1;
                fire = Some(Fire { action, s_trig: s, payloads });
            }
        }

        let record = BanditRecord {
            query,
            s,
            phase,
            action,
            explored,
            blocked,
            head_buffer: self.head_buf.len(),
            full_buffer: self.full_buf.len(),
            fired: fire.as_ref().map(|f| f.action),
            closed,
            v_head: self.v_head,
            v_full: self.v_full,
            baseline,
            rollback,
            last_good,
        };
        QueryOutcome { record, fire }
    }
}
