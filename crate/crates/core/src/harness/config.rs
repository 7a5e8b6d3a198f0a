use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::SacConfig;
use crate::envs::TaskId;
use crate::error::{Error, Result};
use crate::feedback::{SelectionRule, SelectorConfig};
use crate::reward::RewardConfig;
use crate::vle::AdapterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Roved,
    PebbleOracleOnly,
    VleOnly,
    RovedRandomSelect,
    RovedNoInvdyn,
    RovedFrozenVle,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Roved,
        Method::PebbleOracleOnly,
        Method::VleOnly,
        Method::RovedRandomSelect,
        Method::RovedNoInvdyn,
        Method::RovedFrozenVle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Roved => "roved",
            Method::PebbleOracleOnly => "pebble_oracle_only",
            Method::VleOnly => "vle_only",
            Method::RovedRandomSelect => "roved_random_select",
            Method::RovedNoInvdyn => "roved_no_invdyn",
            Method::RovedFrozenVle => "roved_frozen_vle",
        }
    }

    pub fn uses_vle(self) -> bool {
        self != Method::PebbleOracleOnly
    }

    pub fn uses_oracle(self) -> bool {
        self != Method::VleOnly
    }

    /// Whether VLE labels go through the KL partition.
    pub fn filters(self) -> bool {
        matches!(self, Method::Roved | Method::RovedNoInvdyn | Method::RovedFrozenVle)
    }

    /// Whether the adapters are trained.
    pub fn finetunes(self) -> bool {
        matches!(self, Method::Roved | Method::RovedNoInvdyn | Method::RovedRandomSelect)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSampling {
    #[default]
    Uniform,
    /// Keep the pairs with the highest ensemble disagreement from a larger pool.
    Disagreement,
}

/// Base value set a config file starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full desk-scale networks and training lengths.
    #[default]
    Desk,
    /// Smaller networks and shorter runs, sized for a single CPU core.
    Compact,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "compact" => Ok(Profile::Compact),
            _ => Err(Error::Config(format!("unknown profile {s:?}"))),
        }
    }
}

/// Every tunable of one experiment. Flat so that a config file is a plain
/// key-value document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskId,
    pub method: Method,
    /// Distinguishes variants of one task and method in file names and summaries.
    pub tag: String,
    pub seeds: Vec<u64>,

    pub oracle_budget: usize,
    pub total_pref_budget: usize,
    pub total_steps: usize,
    pub random_steps: usize,
    pub unsup_steps: usize,
    pub feedback_every: usize,
    pub pairs_per_round: usize,
    pub segment_len: usize,
    pub init_oracle: usize,
    /// Metrics row cadence in env steps; a final row is always written.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Stop all feedback once the oracle budget is spent.
    pub strict_stop: bool,
    pub pair_sampling: PairSampling,
    /// Candidate pool size as a multiple of `pairs_per_round` for disagreement sampling.
    pub disagreement_pool: usize,
    /// Compare single observations instead of segments.
    pub single_step_segments: bool,
    /// How many recent transitions feed the inverse-dynamics term.
    pub finetune_window: usize,
    pub reset_critics_after_unsup: bool,

    pub gap: f64,
    pub gap_seed: u64,
    pub tie_eps_vle: f64,
    pub tie_eps_oracle: f64,

    pub reward_hidden: Vec<usize>,
    pub reward_members: usize,
    pub reward_lr: f64,
    pub reward_batch: usize,
    pub reward_train_steps: usize,

    pub sac_hidden: Vec<usize>,
    pub sac_lr: f64,
    pub sac_temperature_lr: f64,
    pub sac_initial_temperature: f64,
    pub sac_learn_temperature: bool,
    pub sac_discount: f64,
    pub sac_polyak: f64,
    pub sac_batch: usize,
    pub sac_updates_per_step: usize,
    pub replay_capacity: usize,
    pub entropy_k: usize,

    pub adapter_hidden: usize,
    pub invdyn_hidden: usize,
    pub adapter_lr: f64,
    pub lambda_inv: f64,
    pub adapter_steps: usize,
    pub adapter_pref_batch: usize,
    pub adapter_transition_batch: usize,

    pub selector_alpha: f64,
    pub selector_beta_min: f64,
    pub selector_beta_max: f64,
    pub selector_beta_decay: f64,
    pub selector_tau_upper: f64,
    pub selector_initial_rho: f64,
    pub selection_rule: SelectionRule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let sac = SacConfig::default();
        let reward = RewardConfig::default();
        let adapter = AdapterConfig::default();
        let selector = SelectorConfig::default();
        let desk = RunConfig {
            task: TaskId::Reach,
            method: Method::Roved,
            tag: String::new(),
            seeds: vec![0, 1, 2, 3, 4],
            oracle_budget: 600,
            total_pref_budget: 3000,
            total_steps: 30_000,
            random_steps: 100,
            unsup_steps: 500,
            feedback_every: 300,
            pairs_per_round: 128,
            segment_len: 50,
            init_oracle: 25,
            eval_every: 3000,
            eval_episodes: 20,
            strict_stop: false,
            pair_sampling: PairSampling::Uniform,
            disagreement_pool: 4,
            single_step_segments: false,
            finetune_window: 3000,
            reset_critics_after_unsup: true,
            gap: 0.5,
            gap_seed: 1,
            tie_eps_vle: adapter.tie_eps,
            tie_eps_oracle: 1e-6,
            reward_hidden: reward.hidden,
            reward_members: reward.members,
            reward_lr: reward.learning_rate,
            reward_batch: reward.batch_size,
            reward_train_steps: reward.train_steps,
            sac_hidden: sac.hidden,
            sac_lr: sac.learning_rate,
            sac_temperature_lr: sac.temperature_learning_rate,
            sac_initial_temperature: sac.initial_temperature,
            sac_learn_temperature: sac.learn_temperature,
            sac_discount: sac.discount,
            sac_polyak: sac.polyak,
            sac_batch: sac.batch_size,
            sac_updates_per_step: sac.updates_per_step,
            replay_capacity: sac.replay_capacity,
            entropy_k: sac.entropy_k,
            adapter_hidden: adapter.hidden,
            invdyn_hidden: adapter.invdyn_hidden,
            adapter_lr: adapter.learning_rate,
            lambda_inv: adapter.lambda_inv,
            adapter_steps: adapter.steps_per_round,
            adapter_pref_batch: adapter.pref_batch,
            adapter_transition_batch: adapter.transition_batch,
            selector_alpha: selector.alpha,
            selector_beta_min: selector.beta_min,
            selector_beta_max: selector.beta_max,
            selector_beta_decay: selector.beta_decay,
            selector_tau_upper: selector.tau_upper,
            selector_initial_rho: selector.initial_rho,
            selection_rule: SelectionRule::Uniform,
        };
        match profile {
            Profile::Desk => desk,
            Profile::Compact => RunConfig {
                total_steps: 9_000,
                reward_hidden: vec![32, 32],
                reward_lr: 1e-3,
                reward_batch: 32,
                reward_train_steps: 40,
                sac_hidden: vec![64, 64],
                sac_lr: 1e-3,
                sac_temperature_lr: 1e-3,
                sac_batch: 128,
                replay_capacity: 100_000,
                adapter_hidden: 64,
                invdyn_hidden: 32,
                adapter_lr: 1e-3,
                adapter_steps: 20,
                adapter_pref_batch: 16,
                adapter_transition_batch: 64,
                ..desk
            },
        }
    }

    /// Parses a flat TOML document. An optional `profile` key picks the base
    /// values; every other key overrides one field and unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match table.remove("profile") {
            None => Profile::Desk,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
        };
        let mut merged = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        for (key, value) in table {
            if !merged.contains_key(&key) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            merged.insert(key, value);
        }
        let config: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let episode_length = crate::envs::TaskSpec::new(self.task).episode_length;
        if self.feedback_every < self.segment_len {
            return fail(format!("feedback_every {} < segment_len {}", self.feedback_every, self.segment_len));
        }
        if self.method.uses_oracle() && self.init_oracle > self.oracle_budget {
            return fail(format!("init_oracle {} > oracle_budget {}", self.init_oracle, self.oracle_budget));
        }
        if self.segment_len == 0 || self.segment_len > episode_length {
            return fail(format!("segment_len must be in 1..={episode_length}"));
        }
        if self.pairs_per_round == 0 || self.feedback_every == 0 || self.eval_every == 0 {
            return fail("pairs_per_round, feedback_every and eval_every must be positive".into());
        }
        if self.random_steps + self.unsup_steps < self.segment_len {
            return fail("pre-training steps must cover at least one segment".into());
        }
        if self.total_steps <= self.random_steps + self.unsup_steps {
            return fail("total_steps must exceed random_steps + unsup_steps".into());
        }
        if !(0.0..=1.0).contains(&self.gap) {
            return fail(format!("gap {} outside [0, 1]", self.gap));
        }
        if self.tie_eps_vle < 0.0 || self.tie_eps_oracle < 0.0 {
            return fail("tie tolerances must be non-negative".into());
        }
        if self.reward_members == 0 || self.reward_batch == 0 || self.sac_batch == 0 {
            return fail("reward_members, reward_batch and sac_batch must be positive".into());
        }
        if self.sac_hidden.is_empty() || self.reward_hidden.is_empty() {
            return fail("hidden layer lists must be non-empty".into());
        }
        if self.sac_hidden.contains(&0) || self.reward_hidden.contains(&0) || self.adapter_hidden == 0 || self.invdyn_hidden == 0 {
            return fail("hidden widths must be positive".into());
        }
        if self.entropy_k == 0 || self.disagreement_pool == 0 {
            return fail("entropy_k and disagreement_pool must be positive".into());
        }
        let positive = |x: f64| x > 0.0;
        if !positive(self.selector_alpha) || self.selector_beta_min > self.selector_beta_max || !positive(self.selector_initial_rho) {
            return fail("selector parameters out of range".into());
        }
        if !self.tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.') {
            return fail(format!("tag {:?} may only contain ASCII letters, digits, '-' and '.'", self.tag));
        }
        if self.replay_capacity < self.total_steps.min(self.feedback_every) {
            return fail("replay_capacity too small".into());
        }
        Ok(())
    }

    /// Length of compared segments after the single-step override.
    pub fn effective_segment_len(&self) -> usize {
        if self.single_step_segments {
            1
        } else {
            self.segment_len
        }
    }

    /// First env step trained with the learned reward.
    pub fn learned_start(&self) -> usize {
        self.random_steps + self.unsup_steps
    }

    pub fn sac_config(&self) -> SacConfig {
        SacConfig {
            hidden: self.sac_hidden.clone(),
            learning_rate: self.sac_lr,
            temperature_learning_rate: self.sac_temperature_lr,
            initial_temperature: self.sac_initial_temperature,
            learn_temperature: self.sac_learn_temperature,
            discount: self.sac_discount,
            polyak: self.sac_polyak,
            batch_size: self.sac_batch,
            replay_capacity: self.replay_capacity,
            updates_per_step: self.sac_updates_per_step,
            entropy_k: self.entropy_k,
        }
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            hidden: self.reward_hidden.clone(),
            members: self.reward_members,
            learning_rate: self.reward_lr,
            batch_size: self.reward_batch,
            train_steps: self.reward_train_steps,
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            hidden: self.adapter_hidden,
            invdyn_hidden: self.invdyn_hidden,
            learning_rate: self.adapter_lr,
            lambda_inv: if self.method == Method::RovedNoInvdyn { 0.0 } else { self.lambda_inv },
            steps_per_round: self.adapter_steps,
            pref_batch: self.adapter_pref_batch,
            transition_batch: self.adapter_transition_batch,
            tie_eps: self.tie_eps_vle,
        }
    }

    pub fn selector_config(&self) -> SelectorConfig {
        SelectorConfig {
            alpha: self.selector_alpha,
            beta_min: self.selector_beta_min,
            beta_max: self.selector_beta_max,
            beta_decay: self.selector_beta_decay,
            tau_upper: self.selector_tau_upper,
            initial_rho: self.selector_initial_rho,
        }
    }

    /// File stem shared by every artifact of one run.
    pub fn run_stem(&self, seed: u64) -> String {
        format!("{}_s{}", self.series_name(), seed)
    }

    /// `task_method` plus the tag when one is set.
    pub fn series_name(&self) -> String {
        if self.tag.is_empty() {
            format!("{}_{}", self.task, self.method)
        } else {
            format!("{}_{}_{}", self.task, self.method, self.tag)
        }
    }
}
