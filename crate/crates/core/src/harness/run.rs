use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Method, PairSampling, RunConfig};
use super::metrics::{write_csv, CsvSink, MetricsRow, RoundRecord, TimingRow};
use super::{fnv1a, stream_seed};
use crate::agent::{Agent, ReplayBuffer, RewardSource};
use crate::envs::{audit, segment_true_return, AccessCounts, Env, EnvState, RewardAccess, Transition, STATE_DIM};
use crate::error::{Error, Result};
use crate::feedback::{oracle_label, partition, select_for_oracle, BudgetLedger, SelectorState};
use crate::reward::{Label, LabeledPreference, Provenance, RewardEnsemble, Segment};
use crate::vle::{label_from_returns, AdapterHeader, AdapterStack, BaseEncoders, FinetuneOptions, VleView, EMBED_DIM};

const STREAM_ENV: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_AGENT: u64 = 3;
const STREAM_REWARD: u64 = 4;
const STREAM_ADAPTER: u64 = 5;
const STREAM_PAIRS: u64 = 6;
const STREAM_SELECT: u64 = 7;
const STREAM_BATCH: u64 = 8;
const REWARD_DIAGNOSTIC_WINDOW: usize = 5000;

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics_path: PathBuf,
    pub rounds_path: PathBuf,
    pub timing_path: PathBuf,
    /// Adapter checkpoint written at the end of runs that fine-tune.
    pub adapter_path: Option<PathBuf>,
    pub rows: Vec<MetricsRow>,
    pub rounds: Vec<RoundRecord>,
    /// Oracle queries counted at the call sites, independently of the ledger.
    pub oracle_calls: usize,
    pub ledger_used: usize,
    pub audit: AccessCounts,
    pub skipped_updates: u64,
}

impl RunOutcome {
    pub fn final_row(&self) -> &MetricsRow {
        self.rows.last().expect("a run writes at least one row")
    }

    pub fn final_success(&self) -> f64 {
        self.final_row().eval_success_rate
    }
}

/// Options that change what a run records but never what it learns.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Score every VLE label against ground truth in the round records.
    /// These reads are tagged as evaluation.
    pub label_diagnostics: bool,
}

/// Runs one experiment; writes `<stem>.csv`, `<stem>.rounds.csv` and
/// `<stem>.timing.csv` into `out_dir`.
pub fn run_experiment(config: &RunConfig, seed: u64, out_dir: &Path) -> Result<RunOutcome> {
    run_with_options(config, seed, out_dir, &RunOptions::default())
}

pub fn run_with_options(config: &RunConfig, seed: u64, out_dir: &Path, options: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    Runner::new(config, seed, None, options.clone())?.run(out_dir, config.run_stem(seed))
}

/// Same as [`run_experiment`] but the adapters start from a checkpoint. The
/// checkpoint is loaded and checked before any environment step.
pub fn run_transfer(source_adapter: &Path, config: &RunConfig, seed: u64, out_dir: &Path) -> Result<RunOutcome> {
    config.validate()?;
    if !config.method.uses_vle() {
        return Err(Error::Config(format!("method {} has no adapters to transfer", config.method)));
    }
    let bytes = std::fs::read(source_adapter)?;
    let name = source_adapter.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let identity = format!("{name}#{:016x}", fnv1a(&bytes));
    let header = AdapterHeader { gap_seed: config.gap_seed, gap: config.gap, embed_dim: EMBED_DIM, action_dim: crate::envs::ACTION_DIM };
    let adapters = AdapterStack::decode(&bytes, &header, config.adapter_lr, stream_seed(seed, STREAM_ADAPTER))?;
    let stem = format!("{}_transfer_s{}", config.series_name(), seed);
    Runner::new(config, seed, Some((adapters, identity)), RunOptions::default())?.run(out_dir, stem)
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    seed: u64,
    options: RunOptions,
    env: Env,
    agent: Agent,
    replay: ReplayBuffer,
    ensemble: RewardEnsemble,
    encoders: Option<BaseEncoders>,
    adapters: Option<AdapterStack>,
    adapter_source: String,
    selector: SelectorState,
    ledger: BudgetLedger,
    dataset: Vec<LabeledPreference>,
    oracle_set: Vec<LabeledPreference>,
    pair_rng: ChaCha8Rng,
    select_rng: ChaCha8Rng,
    batch_rng: ChaCha8Rng,
    oracle_calls: usize,
    vle_labels_used: usize,
    rounds: Vec<RoundRecord>,
    /// Index into `rounds` of the latest round that went through the filter.
    last_filtered: Option<usize>,
    learned_ready: bool,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a RunConfig, seed: u64, preloaded: Option<(AdapterStack, String)>, options: RunOptions) -> Result<Self> {
        let env = Env::for_task(cfg.task, cfg.gap_seed);
        let action_dim = env.spec.action_dim;
        let agent = Agent::new(STATE_DIM, action_dim, cfg.sac_config(), stream_seed(seed, STREAM_AGENT))?;
        let replay = ReplayBuffer::new(cfg.replay_capacity)?;
        let ensemble = RewardEnsemble::new(STATE_DIM + action_dim, &cfg.reward_config(), stream_seed(seed, STREAM_REWARD))?;
        let (encoders, adapters, adapter_source) = if cfg.method.uses_vle() {
            let enc = BaseEncoders::new(cfg.gap_seed, cfg.gap)?;
            let (ad, source) = match preloaded {
                Some((ad, source)) => (ad, source),
                None => (
                    AdapterStack::new(&cfg.adapter_config(), action_dim, stream_seed(seed, STREAM_ADAPTER))?,
                    "fresh".to_string(),
                ),
            };
            (Some(enc), Some(ad), source)
        } else {
            (None, None, "none".to_string())
        };
        let oracle_budget = if cfg.method.uses_oracle() { cfg.oracle_budget } else { 0 };
        Ok(Runner {
            cfg,
            seed,
            options,
            env,
            agent,
            replay,
            ensemble,
            encoders,
            adapters,
            adapter_source,
            selector: SelectorState::new(cfg.selector_config())?,
            ledger: BudgetLedger::new(oracle_budget, cfg.pairs_per_round),
            dataset: Vec::new(),
            oracle_set: Vec::new(),
            pair_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_PAIRS)),
            select_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_SELECT)),
            batch_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_BATCH)),
            oracle_calls: 0,
            vle_labels_used: 0,
            rounds: Vec::new(),
            last_filtered: None,
            learned_ready: false,
        })
    }

    fn run(mut self, out_dir: &Path, stem: String) -> Result<RunOutcome> {
        std::fs::create_dir_all(out_dir)?;
        let metrics_path = out_dir.join(format!("{stem}.csv"));
        let rounds_path = out_dir.join(format!("{stem}.rounds.csv"));
        let timing_path = out_dir.join(format!("{stem}.timing.csv"));
        let mut metrics = CsvSink::<MetricsRow>::create(&metrics_path)?;
        let mut timing = CsvSink::<TimingRow>::create(&timing_path)?;
        let clock = Instant::now();
        audit::reset();

        let cfg = self.cfg;
        let learned_start = cfg.learned_start();
        let mut rows = Vec::new();
        let mut episode: u64 = 0;
        let mut state = self.env.reset(stream_seed(self.seed, STREAM_ENV) ^ episode);
        for t in 0..cfg.total_steps {
            let done_steps = t + 1;
            let action = if t < cfg.random_steps {
                self.agent.uniform_action()
            } else {
                self.agent.select_action(&state.to_vector(), true)?
            };
            let transition = self.env.step(&state, &action)?;
            state = transition.next_state;
            let cached = if self.learned_ready { self.ensemble.predict_reward(&transition.state.to_vector(), &transition.action)? } else { 0.0 };
            self.replay.push(transition, episode, cached);
            if self.env.is_terminal(&state) {
                episode += 1;
                state = self.env.reset(stream_seed(self.seed, STREAM_ENV) ^ episode);
            }

            if done_steps > cfg.random_steps {
                let source = if done_steps <= learned_start { RewardSource::StateEntropy } else { RewardSource::Learned };
                self.sac_updates(source)?;
            }

            if done_steps == learned_start {
                if cfg.reset_critics_after_unsup {
                    self.agent.reset_critics()?;
                }
                self.initial_feedback(done_steps)?;
            } else if done_steps > learned_start
                && done_steps < cfg.total_steps
                && (done_steps - learned_start).is_multiple_of(cfg.feedback_every)
                && self.feedback_open()
            {
                self.feedback_round(done_steps)?;
            }

            if done_steps % cfg.eval_every == 0 || done_steps == cfg.total_steps {
                let (success, mean_return) = self.evaluate()?;
                let row = self.metrics_row(done_steps, success, mean_return);
                metrics.push(&row)?;
                timing.push(&TimingRow { env_step: done_steps, wall_seconds: clock.elapsed().as_secs_f64() })?;
                rows.push(row);
            }
        }
        write_csv(&rounds_path, &self.rounds)?;

        let adapter_path = match (&self.encoders, &self.adapters) {
            (Some(enc), Some(ad)) if cfg.method.finetunes() => {
                let p = out_dir.join(format!("{stem}.adapters.bin"));
                ad.save(enc, &p)?;
                Some(p)
            }
            _ => None,
        };

        let audit = audit::snapshot();
        self.check_budget_honesty(&rows, &audit)?;
        Ok(RunOutcome {
            metrics_path,
            rounds_path,
            timing_path,
            adapter_path,
            rows,
            rounds: self.rounds,
            oracle_calls: self.oracle_calls,
            ledger_used: self.ledger.used(),
            audit,
            skipped_updates: self.agent.skipped_updates(),
        })
    }

    /// Ledger, call-site counter and audit counter must agree, and no
    /// ground-truth reward may have been read outside the oracle and evaluation.
    fn check_budget_honesty(&self, rows: &[MetricsRow], audit: &AccessCounts) -> Result<()> {
        let reads_per_query = 2 * self.cfg.effective_segment_len() as u64;
        let final_used = rows.last().map_or(0, |r| r.oracle_used);
        if final_used != self.ledger.used()
            || self.ledger.used() != self.oracle_calls
            || audit.oracle != reads_per_query * self.oracle_calls as u64
        {
            return Err(Error::Invariant(format!(
                "oracle accounting disagrees: metrics {final_used}, ledger {}, calls {}, audited reads {} ({} per query)",
                self.ledger.used(),
                self.oracle_calls,
                audit.oracle,
                reads_per_query
            )));
        }
        if self.ledger.used() > self.ledger.total() {
            return Err(Error::Invariant(format!("ledger used {} exceeds budget {}", self.ledger.used(), self.ledger.total())));
        }
        if audit.leaked() != 0 {
            return Err(Error::Invariant(format!("{} ground-truth reward reads outside oracle and evaluation", audit.leaked())));
        }
        Ok(())
    }

    fn sac_updates(&mut self, source: RewardSource) -> Result<()> {
        let version = if source == RewardSource::Learned { Some(self.ensemble.version()) } else { None };
        for _ in 0..self.cfg.sac_updates_per_step {
            let idx = self.replay.sample_indices(self.cfg.sac_batch, &mut self.batch_rng);
            let batch = self.replay.batch(&idx, source, version, self.cfg.entropy_k)?;
            match self.agent.update(&batch) {
                Ok(_) | Err(Error::NonFiniteLoss(_)) | Err(Error::NonFiniteGradient) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn prefs_used(&self) -> usize {
        self.dataset.len()
    }

    fn feedback_open(&self) -> bool {
        if self.prefs_used() >= self.cfg.total_pref_budget {
            return false;
        }
        let oracle_done = self.ledger.is_exhausted();
        match self.cfg.method {
            Method::PebbleOracleOnly => !oracle_done,
            Method::VleOnly => true,
            _ => !(oracle_done && self.cfg.strict_stop),
        }
    }

    fn vle_view(&self) -> Option<VleView<'_>> {
        let enc = self.encoders.as_ref()?;
        Some(match (&self.adapters, self.cfg.method.finetunes() || self.adapter_source != "fresh") {
            (Some(ad), true) => VleView::Adapted(enc, ad),
            _ => VleView::Raw(enc),
        })
    }

    fn sample_segment(&mut self) -> Result<Arc<Segment>> {
        let len = self.cfg.effective_segment_len();
        self.replay
            .sample_segment(len, &mut self.pair_rng)?
            .map(Arc::new)
            .ok_or_else(|| Error::Invariant("replay holds no episode window long enough for a segment".into()))
    }

    fn sample_pairs(&mut self, n: usize) -> Result<Vec<(Arc<Segment>, Arc<Segment>)>> {
        let pool = match self.cfg.pair_sampling {
            PairSampling::Uniform => n,
            PairSampling::Disagreement if self.learned_ready => n * self.cfg.disagreement_pool,
            PairSampling::Disagreement => n,
        };
        let mut pairs = Vec::with_capacity(pool);
        for _ in 0..pool {
            let a = self.sample_segment()?;
            let b = self.sample_segment()?;
            pairs.push((a, b));
        }
        if pool == n {
            return Ok(pairs);
        }
        let mut spread: Vec<(f64, usize)> = Vec::with_capacity(pool);
        for (i, (a, b)) in pairs.iter().enumerate() {
            let ps = (0..self.ensemble.members().len())
                .map(|m| self.ensemble.preference_prob(m, a, b))
                .collect::<Result<Vec<f64>>>()?;
            spread.push((crate::stats::std_dev(&ps), i));
        }
        spread.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let mut keep: Vec<usize> = spread[..n].iter().map(|&(_, i)| i).collect();
        keep.sort_unstable();
        Ok(keep.into_iter().map(|i| pairs[i].clone()).collect())
    }

    fn ask_oracle(&mut self, seg0: Arc<Segment>, seg1: Arc<Segment>) -> Result<LabeledPreference> {
        let label = oracle_label(&seg0, &seg1, &mut self.ledger, self.cfg.tie_eps_oracle)?;
        self.oracle_calls += 1;
        let pref = LabeledPreference::new(seg0, seg1, label, Provenance::Oracle);
        self.oracle_set.push(pref.clone());
        Ok(pref)
    }

    fn vle_labels(&self, pairs: Vec<(Arc<Segment>, Arc<Segment>)>) -> Result<Vec<LabeledPreference>> {
        let view = self.vle_view().ok_or_else(|| Error::Invariant("method has no embedding model".into()))?;
        let desc = self.env.spec.description_id;
        pairs
            .into_iter()
            .map(|(a, b)| {
                let label = view.label(desc, &a, &b, self.cfg.tie_eps_vle)?;
                Ok(LabeledPreference::new(a, b, label, Provenance::Vle))
            })
            .collect()
    }

    fn true_label(&self, p: &LabeledPreference) -> Label {
        let r0 = segment_true_return(&p.seg0, RewardAccess::Evaluation);
        let r1 = segment_true_return(&p.seg1, RewardAccess::Evaluation);
        label_from_returns(r0, r1, self.cfg.tie_eps_oracle)
    }

    fn accuracy<'p>(&self, prefs: impl Iterator<Item = &'p LabeledPreference>) -> Option<f64> {
        if !self.options.label_diagnostics {
            return None;
        }
        let (mut hit, mut n) = (0usize, 0usize);
        for p in prefs {
            n += 1;
            hit += usize::from(self.true_label(p) == p.label);
        }
        (n > 0).then(|| hit as f64 / n as f64)
    }

    fn reward_spearman(&self) -> Option<f64> {
        if !self.options.label_diagnostics {
            return None;
        }
        let start = self.replay.len().saturating_sub(REWARD_DIAGNOSTIC_WINDOW);
        let learned = &self.replay.learned_rewards()[start..];
        let truth: Vec<f64> = (start..self.replay.len()).map(|i| self.replay.get(i).true_reward.read(RewardAccess::Evaluation)).collect();
        Some(crate::stats::spearman(learned, &truth))
    }

    fn initial_feedback(&mut self, env_step: usize) -> Result<()> {
        if self.cfg.method.uses_oracle() {
            let n = self.cfg.init_oracle.min(self.ledger.remaining());
            let pairs = self.sample_pairs(n)?;
            let mut accepted = Vec::with_capacity(n);
            for (a, b) in pairs {
                accepted.push(self.ask_oracle(a, b)?);
            }
            let record = RoundRecord {
                round: 0,
                env_step,
                pairs: n,
                tau_lower: None,
                tau_upper: None,
                rho: None,
                kl_std: None,
                clean: 0,
                flipped: 0,
                uncertain: 0,
                vle_labels: 0,
                oracle_queries: n,
                ledger_used: self.ledger.used(),
                dataset_size: 0,
                reward_loss: 0.0,
                vle_label_accuracy: None,
                accepted_label_accuracy: self.accuracy(accepted.iter()),
                reward_spearman: None,
            };
            self.finish_round(accepted, record, false)
        } else {
            self.feedback_round(env_step)
        }
    }

    fn feedback_round(&mut self, env_step: usize) -> Result<()> {
        let cfg = self.cfg;
        let mut n = cfg.pairs_per_round.min(cfg.total_pref_budget - self.prefs_used());
        if cfg.method == Method::PebbleOracleOnly {
            n = n.min(self.ledger.remaining());
        }
        if n == 0 {
            return Ok(());
        }
        let pairs = self.sample_pairs(n)?;
        let mut record = RoundRecord {
            round: self.rounds.len(),
            env_step,
            pairs: n,
            tau_lower: None,
            tau_upper: None,
            rho: None,
            kl_std: None,
            clean: 0,
            flipped: 0,
            uncertain: 0,
            vle_labels: 0,
            oracle_queries: 0,
            ledger_used: 0,
            dataset_size: 0,
            reward_loss: 0.0,
            vle_label_accuracy: None,
            accepted_label_accuracy: None,
            reward_spearman: None,
        };
        let mut filtered = false;
        let accepted = match cfg.method {
            Method::PebbleOracleOnly => {
                let mut out = Vec::with_capacity(n);
                for (a, b) in pairs {
                    out.push(self.ask_oracle(a, b)?);
                }
                out
            }
            Method::VleOnly => self.vle_labels(pairs)?,
            Method::RovedRandomSelect => {
                let k = n.min(self.ledger.per_round_cap()).min(self.ledger.remaining());
                let mut chosen = vec![false; n];
                for i in index::sample(&mut self.select_rng, n, k) {
                    chosen[i] = true;
                }
                let (to_oracle, to_vle): (Vec<_>, Vec<_>) = pairs.into_iter().zip(chosen).partition(|(_, c)| *c);
                let mut out = self.vle_labels(to_vle.into_iter().map(|(p, _)| p).collect())?;
                record.vle_label_accuracy = self.accuracy(out.iter());
                for ((a, b), _) in to_oracle {
                    out.push(self.ask_oracle(a, b)?);
                }
                out
            }
            Method::Roved | Method::RovedNoInvdyn | Method::RovedFrozenVle => {
                filtered = true;
                let labeled = self.vle_labels(pairs)?;
                record.vle_label_accuracy = self.accuracy(labeled.iter());
                let part = partition(&mut self.selector, &self.ensemble, labeled)?;
                record.tau_lower = Some(part.tau_lower);
                record.tau_upper = Some(part.tau_upper);
                record.clean = part.clean.len();
                record.flipped = part.flipped.len();
                record.uncertain = part.uncertain.len();
                let (selected, _discarded) = select_for_oracle(part.uncertain, &self.ledger, cfg.selection_rule, &mut self.select_rng);
                let mut out: Vec<LabeledPreference> =
                    part.clean.into_iter().chain(part.flipped).map(|s| s.preference).collect();
                for s in selected {
                    out.push(self.ask_oracle(s.preference.seg0, s.preference.seg1)?);
                }
                out
            }
        };
        record.oracle_queries = accepted.iter().filter(|p| p.provenance == Provenance::Oracle).count();
        record.vle_labels = accepted.len() - record.oracle_queries;
        record.ledger_used = self.ledger.used();
        record.accepted_label_accuracy = self.accuracy(accepted.iter());
        if cfg.method == Method::VleOnly {
            record.vle_label_accuracy = record.accepted_label_accuracy;
        }
        self.finish_round(accepted, record, filtered)
    }

    /// Trains the reward on the cumulative set, updates the selector and the
    /// adapters, then relabels the replay.
    fn finish_round(&mut self, accepted: Vec<LabeledPreference>, mut record: RoundRecord, filtered: bool) -> Result<()> {
        let cfg = self.cfg;
        self.vle_labels_used += accepted.iter().filter(|p| p.provenance != Provenance::Oracle).count();
        self.dataset.extend(accepted.iter().cloned());
        if !self.dataset.is_empty() {
            let losses = self.ensemble.fit(&self.dataset, cfg.reward_train_steps, cfg.reward_batch)?;
            record.reward_loss = losses.last().copied().unwrap_or(0.0);
        }
        if filtered {
            let filtered_losses = if accepted.is_empty() { Vec::new() } else { self.ensemble.per_sample_losses(&accepted)? };
            self.selector.update_rho(&filtered_losses);
            record.rho = Some(self.selector.rho());
            record.kl_std = Some(self.selector.kl_std());
        }
        if cfg.method.finetunes() && !self.oracle_set.is_empty() {
            self.finetune_adapters()?;
        }
        if !self.dataset.is_empty() {
            self.replay.relabel(&self.ensemble)?;
            self.learned_ready = true;
            record.reward_spearman = self.reward_spearman();
        }
        record.dataset_size = self.dataset.len();
        if filtered {
            self.last_filtered = Some(self.rounds.len());
        }
        self.rounds.push(record);
        Ok(())
    }

    fn finetune_adapters(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let window = cfg.finetune_window.min(self.replay.len());
        let start = if self.replay.len() < self.replay.capacity() { self.replay.len() - window } else { 0 };
        let transitions: Vec<&Transition> = (start..self.replay.len()).map(|i| self.replay.get(i)).collect();
        let adapter_cfg = cfg.adapter_config();
        let options = FinetuneOptions::from_config(&adapter_cfg);
        let (Some(enc), Some(ad)) = (&self.encoders, &mut self.adapters) else {
            return Ok(());
        };
        ad.finetune(enc, self.env.spec.description_id, &self.oracle_set, &transitions, &options)?;
        Ok(())
    }

    /// Deterministic-policy episodes on a fixed set of resets.
    fn evaluate(&mut self) -> Result<(f64, f64)> {
        let episodes = self.cfg.eval_episodes;
        if episodes == 0 {
            return Ok((0.0, 0.0));
        }
        let (mut successes, mut total) = (0usize, 0.0);
        for e in 0..episodes as u64 {
            let mut s: EnvState = self.env.reset(stream_seed(self.seed, STREAM_EVAL) ^ e);
            let mut ret = 0.0;
            while !self.env.is_terminal(&s) {
                let a = self.agent.select_action(&s.to_vector(), false)?;
                let t = self.env.step(&s, &a)?;
                ret += t.true_reward.read(RewardAccess::Evaluation);
                s = t.next_state;
            }
            successes += usize::from(s.success_latched);
            total += ret;
        }
        Ok((successes as f64 / episodes as f64, total / episodes as f64))
    }

    fn metrics_row(&self, env_step: usize, success: f64, mean_return: f64) -> MetricsRow {
        let last = self.last_filtered.map(|i| &self.rounds[i]);
        MetricsRow {
            task: self.cfg.task.name().to_string(),
            method: self.cfg.method.name().to_string(),
            tag: self.cfg.tag.clone(),
            seed: self.seed,
            adapter_source: self.adapter_source.clone(),
            env_step,
            eval_success_rate: success,
            mean_episode_true_return: mean_return,
            oracle_used: self.ledger.used(),
            vle_labels_used: self.vle_labels_used,
            pref_labels_used: self.dataset.len(),
            feedback_rounds: self.rounds.len(),
            round: last.map(|r| r.round as u64),
            tau_lower: last.and_then(|r| r.tau_lower),
            tau_upper: last.and_then(|r| r.tau_upper),
            clean: last.map(|r| r.clean),
            flipped: last.map(|r| r.flipped),
            uncertain: last.map(|r| r.uncertain),
            oracle_queries_round: last.map(|r| r.oracle_queries),
            ledger_used: self.ledger.used(),
        }
    }
}
