use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    apply_update, Action, Bandit, BanditConfig, BanditRecord, CostModel, QueryStats, RejectionSample, UpdateConfig,
    UpdateReport,
};
use crate::models::{DrafterModel, TargetModel};
use crate::numerics::Rng;
use crate::training::AdamW;
use crate::verify::{compute_signal, DecodeConfig, DecodeMode, SpecDecoder};
use crate::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    /// `false` serves the pre-deployment drafter unchanged.
    pub enabled: bool,
    pub bandit: BanditConfig,
    pub costs: CostModel,
    pub update: UpdateConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { enabled: true, bandit: BanditConfig::default(), costs: CostModel::default(), update: UpdateConfig::default() }
    }
}

/// Serving copy, training copy, immutable reference and last good weights.
#[derive(Clone, Debug)]
pub struct TwoCopyDrafter {
    inf: DrafterModel,
    train: DrafterModel,
    reference: DrafterModel,
    last_good: DrafterModel,
    pending_sync: bool,
}

impl TwoCopyDrafter {
    pub fn new(drafter: &DrafterModel) -> Self {
        Self {
            inf: drafter.clone(),
            train: drafter.clone(),
            reference: drafter.clone(),
            last_good: drafter.clone(),
            pending_sync: false,
        }
    }

    pub fn inference(&self) -> &DrafterModel {
        &self.inf
    }

    pub fn training(&self) -> &DrafterModel {
        &self.train
    }

    pub fn reference(&self) -> &DrafterModel {
        &self.reference
    }

    pub fn pending_sync(&self) -> bool {
        self.pending_sync
    }

    /// Replaces the serving copy wholesale when an update is waiting.
    pub fn sync(&mut self) -> bool {
        if self.pending_sync {
            self.inf = self.train.clone();
            self.pending_sync = false;
            return true;
        }
        false
    }

    pub fn mark_good(&mut self) {
        self.last_good = self.inf.clone();
    }

    pub fn rollback(&mut self) {
        self.inf = self.last_good.clone();
        self.train = self.last_good.clone();
        self.pending_sync = false;
    }

    /// Runs one update on the training copy and schedules a sync.
    pub fn update(&mut self, opt: &mut AdamW, action: Action, samples: &[RejectionSample], config: &UpdateConfig) -> Result<UpdateReport> {
        let report = apply_update(&mut self.train, opt, action, samples, &self.reference, config)?;
        if !report.discarded && report.loss.is_some() {
            self.pending_sync = true;
        }
        Ok(report)
    }
}

/// One line of the serving event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServeRecord {
    pub source: usize,
    pub committed: u64,
    pub verifier_calls: u64,
    pub tau: f64,
    pub rejections: usize,
    pub synced: bool,
    pub bandit: BanditRecord,
    pub update: Option<UpdateReport>,
}

#[derive(Clone, Debug)]
pub struct ServeOutcome {
    pub records: Vec<ServeRecord>,
    pub drafter: TwoCopyDrafter,
}

impl ServeOutcome {
    /// Accepted length over queries from `from` onwards.
    pub fn tau_from(&self, from: usize) -> f64 {
        let mut s = QueryStats::default();
        for r in self.records.iter().skip(from) {
            s.committed += r.committed;
            s.verifier_calls += r.verifier_calls;
        }
        s.tau()
    }
}

/// Streams queries through speculative decoding with serving-time
/// adaptation. Updates run between queries on the training copy; the
/// serving copy picks them up during the next query's first verification.
pub fn serve_sim(
    target: &TargetModel,
    drafter: &DrafterModel,
    decode: &DecodeConfig,
    config: &AdaptConfig,
    stream: &[(usize, Vec<usize>)],
    max_new: usize,
    seed: u64,
) -> Result<ServeOutcome> {
    let mut copies = TwoCopyDrafter::new(drafter);
    let mut bandit: Bandit<Vec<RejectionSample>> = Bandit::new(config.bandit.clone(), config.costs)?;
    let mut opt = AdamW::new(&drafter.params, config.update.adam);
    let mut explore = Rng::new(seed, 0x6578_706c);
    let temperature = match decode.mode {
        DecodeMode::Greedy => 1.0,
        DecodeMode::Sample { temperature } => temperature,
    };
    let mut records = Vec::with_capacity(stream.len());
    for (q, (source, prompt)) in stream.iter().enumerate() {
        let mut rng = Rng::new(seed, q as u64);
        let dec = SpecDecoder::new(target, copies.inference(), decode)?;
        ensure!(prompt.len() + max_new <= dec.max_len(), "query {q} does not fit the decodable length");
        let mut session = dec.prefill(prompt, &mut rng)?;
        let mut samples = Vec::new();
        let mut signal = 0.0;
        let mut synced = false;
        while session.generated().len() < max_new {
            let dec = SpecDecoder::new(target, copies.inference(), decode)?;
            let it = dec.step(&mut session, &mut rng)?;
            if let Some(rej) = &it.result.rejection {
                signal += compute_signal(std::iter::once(rej));
                let prefix = Arc::new(it.draft_prefix.clone());
                samples.push(RejectionSample::from_iteration(&it, rej, prefix, temperature));
            }
            // The verify window just completed is when weights sync.
            synced |= copies.sync();
        }
        let m = &session.metrics;
        let stats = QueryStats {
            committed: m.committed,
            verifier_calls: m.verifier_calls,
            target_calls: m.target_calls,
            drafter_calls: m.drafter_calls,
        };
        let rejections = samples.len();
        let (bandit_record, update) = if config.enabled {
            let out = bandit.on_query(signal, &stats, samples, &mut explore);
            if out.record.rollback {
                copies.rollback();
            } else if out.record.last_good {
                copies.mark_good();
            }
            let update = match out.fire {
                Some(fire) => {
                    let batch: Vec<RejectionSample> = fire.payloads.into_iter().flatten().collect();
                    Some(copies.update(&mut opt, fire.action, &batch, &config.update)?)
                }
                None => None,
            };
            (out.record, update)
        } else {
            (frozen_record(q, signal), None)
        };
        records.push(ServeRecord {
            source: *source,
            committed: stats.committed,
            verifier_calls: stats.verifier_calls,
            tau: stats.tau(),
            rejections,
            synced,
            bandit: bandit_record,
            update,
        });
    }
    Ok(ServeOutcome { records, drafter: copies })
}

fn frozen_record(query: usize, s: f64) -> BanditRecord {
    BanditRecord {
        query,
        s,
        phase: super::Phase::Warmup,
        action: Action::Skip,
        explored: false,
        blocked: false,
        head_buffer: 0,
        full_buffer: 0,
        fired: None,
        closed: None,
        v_head: 0.0,
        v_full: 0.0,
        baseline: 0.0,
        rollback: false,
        last_good: false,
    }
}
