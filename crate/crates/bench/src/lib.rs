//! Shared fixtures for the benchmarks: untrained default-size models and
//! corpus prompts.

use specblock::harness::run;
use specblock::training::Rollout;
use specblock::{DrafterModel, Result, RunConfig, TargetModel};

pub struct Fixture {
    pub config: RunConfig,
    pub target: TargetModel,
    pub drafter: DrafterModel,
    pub prompts: Vec<Vec<usize>>,
}

impl Fixture {
    pub fn new(prompts: usize) -> Result<Self> {
        let config = RunConfig::desk();
        let target = TargetModel::new(config.target.clone(), config.seeds.target_init)?;
        let drafter = DrafterModel::new(config.drafter.clone(), &target, config.seeds.drafter_init)?;
        let prompts = run::eval_prompts(&config, 0, prompts)?;
        Ok(Self { config, target, drafter, prompts })
    }

    pub fn rollouts(&self, n: usize) -> Result<Vec<Rollout>> {
        self.prompts.iter().take(n).map(|p| Rollout::generate(&self.target, p, self.config.data.rollout_len)).collect()
    }
}
