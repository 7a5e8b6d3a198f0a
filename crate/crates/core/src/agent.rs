//! Soft actor-critic with twin critics, state-entropy pretraining reward and a
//! replay buffer whose learned-reward cache tracks the reward model version.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{RewardAccess, Transition, STATE_DIM};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{ByteReader, ByteWriter, FORMAT_VERSION};
use crate::nn::{Activation, Adam, Gradients, Mlp};
use crate::reward::{RewardEnsemble, Segment};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const AGENT_MAGIC: &[u8; 4] = b"RVAG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub temperature_learning_rate: f64,
    pub initial_temperature: f64,
    /// When false the temperature stays at its initial value.
    pub learn_temperature: bool,
    pub discount: f64,
    pub polyak: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub updates_per_step: usize,
    pub entropy_k: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            hidden: vec![256, 256, 256],
            learning_rate: 1e-4,
            temperature_learning_rate: 1e-4,
            initial_temperature: 0.1,
            learn_temperature: true,
            discount: 0.99,
            polyak: 5e-3,
            batch_size: 256,
            replay_capacity: 1_000_000,
            updates_per_step: 1,
            entropy_k: 5,
        }
    }
}

/// `ln(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Squashed-Gaussian sample drawn from actor outputs with fixed noise.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub actions: Array2<f64>,
    pub log_probs: Array1<f64>,
    std: Array2<f64>,
    /// Whether each raw log-std lay inside the clamp range.
    log_std_free: Array2<bool>,
}

/// Splits actor output rows into mean and clamped log-std and applies `tanh(mean + std * noise)`.
pub fn squash(actor_out: ArrayView2<'_, f64>, noise: ArrayView2<'_, f64>) -> PolicySample {
    let a = actor_out.ncols() / 2;
    let mean = actor_out.slice(s![.., ..a]);
    let raw_log_std = actor_out.slice(s![.., a..]);
    let log_std = raw_log_std.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    let log_std_free = raw_log_std.mapv(|v| (LOG_STD_MIN..=LOG_STD_MAX).contains(&v));
    let std = log_std.mapv(f64::exp);
    let pre_tanh = &mean + &(&std * &noise);
    let actions = pre_tanh.mapv(f64::tanh);
    let n = actor_out.nrows();
    let mut log_probs = Array1::zeros(n);
    for i in 0..n {
        let mut lp = 0.0;
        for j in 0..a {
            let e = noise[[i, j]];
            lp += -0.5 * e * e - log_std[[i, j]] - HALF_LN_2PI - log_one_minus_tanh_sq(pre_tanh[[i, j]]);
        }
        log_probs[i] = lp;
    }
    PolicySample { actions, log_probs, std, log_std_free }
}

/// Gradient with respect to the actor output given `dL/d action` and `dL/d log_prob` per row.
fn squash_backward(sample: &PolicySample, noise: ArrayView2<'_, f64>, d_action: ArrayView2<'_, f64>, d_logp: &Array1<f64>) -> Array2<f64> {
    let (n, a) = sample.actions.dim();
    let mut out = Array2::zeros((n, 2 * a));
    for i in 0..n {
        for j in 0..a {
            let t = sample.actions[[i, j]];
            // d logp / d u = 2 tanh(u); d logp / d log_std (direct) = -1
            let du = d_action[[i, j]] * (1.0 - t * t) + d_logp[i] * 2.0 * t;
            out[[i, j]] = du;
            if sample.log_std_free[[i, j]] {
                out[[i, a + j]] = du * sample.std[[i, j]] * noise[[i, j]] - d_logp[i];
            }
        }
    }
    out
}

/// Sampled training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
}

fn state_action(states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Array2<f64> {
    concatenate(Axis(1), &[states, actions]).expect("same row count")
}

/// Mean squared TD error of one critic against fixed targets, with gradients.
pub fn critic_loss_and_grads(critic: &Mlp, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>, targets: &Array1<f64>) -> Result<(f64, Gradients)> {
    let (q, cache) = critic.forward(state_action(states, actions).view())?;
    let n = targets.len() as f64;
    let diff = &q.column(0) - targets;
    let loss = diff.mapv(|d| d * d).sum() / n;
    let d_q = (diff * (2.0 / n)).insert_axis(Axis(1));
    let (g, _) = critic.backward(&cache, d_q.view())?;
    Ok((loss, g))
}

/// Reparameterized actor objective `mean(α logπ(ã|s) − min(Q1, Q2)(s, ã))` with
/// fixed Gaussian noise; returns the loss, actor gradients and the log-probs.
pub fn actor_loss_and_grads(
    actor: &Mlp,
    critics: [&Mlp; 2],
    states: ArrayView2<'_, f64>,
    noise: ArrayView2<'_, f64>,
    temperature: f64,
) -> Result<(f64, Gradients, Array1<f64>)> {
    let n = states.nrows() as f64;
    let (out, actor_cache) = actor.forward(states)?;
    let sample = squash(out.view(), noise);
    let input = state_action(states, sample.actions.view());
    let (q1, c1) = critics[0].forward(input.view())?;
    let (q2, c2) = critics[1].forward(input.view())?;
    let mut loss = 0.0;
    let mut g1 = Array2::zeros(q1.dim());
    let mut g2 = Array2::zeros(q2.dim());
    for i in 0..states.nrows() {
        let (a, b) = (q1[[i, 0]], q2[[i, 0]]);
        loss += temperature * sample.log_probs[i] - a.min(b);
        if a <= b {
            g1[[i, 0]] = -1.0 / n;
        } else {
            g2[[i, 0]] = -1.0 / n;
        }
    }
    let (_, in1) = critics[0].backward(&c1, g1.view())?;
    let (_, in2) = critics[1].backward(&c2, g2.view())?;
    let s_dim = states.ncols();
    let d_action = &in1.slice(s![.., s_dim..]) + &in2.slice(s![.., s_dim..]);
    let d_logp = Array1::from_elem(states.nrows(), temperature / n);
    let d_out = squash_backward(&sample, noise, d_action.view(), &d_logp);
    let (grads, _) = actor.backward(&actor_cache, d_out.view())?;
    Ok((loss / n, grads, sample.log_probs))
}

/// Temperature objective `α · (−mean logπ − H̄)` with `α = exp(log_temperature)`,
/// and its derivative with respect to `log_temperature`.
pub fn temperature_loss_and_grad(log_temperature: f64, mean_log_prob: f64, target_entropy: f64) -> (f64, f64) {
    let alpha = log_temperature.exp();
    let loss = alpha * (-mean_log_prob - target_entropy);
    (loss, loss)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature: f64,
    pub mean_q: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct Agent {
    config: SacConfig,
    action_dim: usize,
    actor: Mlp,
    critics: [Mlp; 2],
    targets: [Mlp; 2],
    log_temperature: f64,
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    temperature_opt: Adam,
    rng: ChaCha8Rng,
    updates: u64,
    skipped_updates: u64,
}

impl Agent {
    pub fn new(state_dim: usize, action_dim: usize, config: SacConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ac0_a6e7);
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend(&config.hidden);
        actor_sizes.push(2 * action_dim);
        let actor = Mlp::with_rng(&actor_sizes, Activation::Relu, Activation::Identity, &mut rng)?;
        let critics = [Self::fresh_critic(state_dim, action_dim, &config, &mut rng)?, Self::fresh_critic(state_dim, action_dim, &config, &mut rng)?];
        let targets = critics.clone();
        let lr = config.learning_rate;
        Ok(Agent {
            action_dim,
            actor_opt: Adam::for_mlp(lr, &actor),
            critic_opts: [Adam::for_mlp(lr, &critics[0]), Adam::for_mlp(lr, &critics[1])],
            temperature_opt: Adam::new(config.temperature_learning_rate, 1),
            log_temperature: config.initial_temperature.ln(),
            actor,
            critics,
            targets,
            rng,
            updates: 0,
            skipped_updates: 0,
            config,
        })
    }

    fn fresh_critic(state_dim: usize, action_dim: usize, config: &SacConfig, rng: &mut ChaCha8Rng) -> Result<Mlp> {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend(&config.hidden);
        sizes.push(1);
        Mlp::with_rng(&sizes, Activation::Relu, Activation::Identity, rng)
    }

    pub fn config(&self) -> &SacConfig {
        &self.config
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critics(&self) -> &[Mlp; 2] {
        &self.critics
    }

    pub fn targets(&self) -> &[Mlp; 2] {
        &self.targets
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn update_count(&self) -> u64 {
        self.updates
    }

    pub fn skipped_updates(&self) -> u64 {
        self.skipped_updates
    }

    /// Reinitializes both critics, their targets and optimizers.
    pub fn reset_critics(&mut self) -> Result<()> {
        let s = self.actor.input_dim();
        for k in 0..2 {
            self.critics[k] = Self::fresh_critic(s, self.action_dim, &self.config, &mut self.rng)?;
            self.critic_opts[k] = Adam::for_mlp(self.config.learning_rate, &self.critics[k]);
        }
        self.targets = self.critics.clone();
        Ok(())
    }

    /// `tanh(mean)` when deterministic, otherwise a squashed-Gaussian sample.
    pub fn select_action(&mut self, state: &[f64], stochastic: bool) -> Result<Vec<f64>> {
        let out = self.actor.predict_one(state)?;
        let a = self.action_dim;
        if !stochastic {
            return Ok(out[..a].iter().map(|m| m.tanh()).collect());
        }
        let noise: Vec<f64> = (0..a).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        let row = ArrayView2::from_shape((1, 2 * a), &out).expect("row");
        let noise = ArrayView2::from_shape((1, a), &noise).expect("row");
        Ok(squash(row, noise).actions.row(0).to_vec())
    }

    pub fn uniform_action(&mut self) -> Vec<f64> {
        (0..self.action_dim).map(|_| self.rng.random_range(-1.0..1.0)).collect()
    }

    fn noise(&mut self, n: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, self.action_dim), || StandardNormal.sample(&mut self.rng))
    }

    /// Entropy-regularized soft targets `r + γ (min Q_target(s', a') − α logπ(a'|s'))`.
    pub fn soft_targets(&mut self, batch: &Batch) -> Result<Array1<f64>> {
        let noise = self.noise(batch.next_states.nrows());
        self.soft_targets_with_noise(batch, noise.view())
    }

    pub fn soft_targets_with_noise(&self, batch: &Batch, noise: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let out = self.actor.predict(batch.next_states.view())?;
        let sample = squash(out.view(), noise);
        let input = state_action(batch.next_states.view(), sample.actions.view());
        let q1 = self.targets[0].predict(input.view())?;
        let q2 = self.targets[1].predict(input.view())?;
        let alpha = self.temperature();
        Ok(Array1::from_shape_fn(batch.rewards.len(), |i| {
            let v = q1[[i, 0]].min(q2[[i, 0]]) - alpha * sample.log_probs[i];
            batch.rewards[i] + self.config.discount * v
        }))
    }

    /// One critic, actor and temperature step followed by a Polyak target update.
    /// A non-finite loss or gradient skips the whole step and is reported as an error.
    pub fn update(&mut self, batch: &Batch) -> Result<UpdateStats> {
        let targets = self.soft_targets(batch)?;
        let (l1, g1) = critic_loss_and_grads(&self.critics[0], batch.states.view(), batch.actions.view(), &targets)?;
        let (l2, g2) = critic_loss_and_grads(&self.critics[1], batch.states.view(), batch.actions.view(), &targets)?;
        let noise = self.noise(batch.states.nrows());
        let alpha = self.temperature();
        let (actor_loss, ga, log_probs) =
            actor_loss_and_grads(&self.actor, [&self.critics[0], &self.critics[1]], batch.states.view(), noise.view(), alpha)?;
        let finite = [l1, l2, actor_loss].iter().all(|v| v.is_finite()) && g1.is_finite() && g2.is_finite() && ga.is_finite();
        if !finite {
            self.skipped_updates += 1;
            return Err(Error::NonFiniteLoss("sac update"));
        }
        self.critic_opts[0].step_mlp(&mut self.critics[0], &g1)?;
        self.critic_opts[1].step_mlp(&mut self.critics[1], &g2)?;
        self.actor_opt.step_mlp(&mut self.actor, &ga)?;
        let mean_logp = log_probs.mean().unwrap_or(0.0);
        if self.config.learn_temperature {
            let target_entropy = -(self.action_dim as f64);
            let (_, g) = temperature_loss_and_grad(self.log_temperature, mean_logp, target_entropy);
            let mut p = [self.log_temperature];
            self.temperature_opt.step(&mut p, &[g])?;
            self.log_temperature = p[0];
        }
        for k in 0..2 {
            self.targets[k].polyak_from(&self.critics[k], self.config.polyak);
        }
        self.updates += 1;
        Ok(UpdateStats {
            critic_loss: 0.5 * (l1 + l2),
            actor_loss,
            temperature: self.temperature(),
            mean_q: targets.mean().unwrap_or(0.0),
            entropy: -mean_logp,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(AGENT_MAGIC);
        w.u32(FORMAT_VERSION);
        w.f64(self.log_temperature);
        w.u64(self.updates);
        w.mlp(&self.actor);
        for m in self.critics.iter().chain(&self.targets) {
            w.mlp(m);
        }
        w.finish()
    }

    /// Restores networks, temperature and step counter; optimizer moments start fresh.
    pub fn decode(bytes: &[u8], config: SacConfig, seed: u64) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(AGENT_MAGIC)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported agent format version {version}")));
        }
        let log_temperature = r.f64()?;
        let updates = r.u64()?;
        let actor = r.mlp()?;
        let critics = [r.mlp()?, r.mlp()?];
        let targets = [r.mlp()?, r.mlp()?];
        r.finish()?;
        let mut agent = Agent::new(actor.input_dim(), actor.output_dim() / 2, config, seed)?;
        agent.actor_opt = Adam::for_mlp(agent.config.learning_rate, &actor);
        agent.critic_opts = [Adam::for_mlp(agent.config.learning_rate, &critics[0]), Adam::for_mlp(agent.config.learning_rate, &critics[1])];
        agent.actor = actor;
        agent.critics = critics;
        agent.targets = targets;
        agent.log_temperature = log_temperature;
        agent.updates = updates;
        Ok(agent)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, config: SacConfig, seed: u64) -> Result<Self> {
        Self::decode(&std::fs::read(path)?, config, seed)
    }
}

/// Distance from `query` to its k-th nearest neighbour among `states`, the
/// query's own stored copy included; `k` is capped at the population size.
pub fn state_entropy_reward(states: ArrayView2<'_, f64>, query: &[f64], k: usize) -> Result<f64> {
    if states.nrows() == 0 {
        return Err(Error::Invariant("empty state population".into()));
    }
    if states.ncols() != query.len() {
        return Err(Error::DimensionMismatch { expected: states.ncols(), actual: query.len() });
    }
    let k = k.clamp(1, states.nrows());
    let mut d: Vec<f64> = states
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(kth.sqrt())
}

/// Where SAC rewards come from when a batch is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardSource {
    /// Cached learned reward; the cache must match the current model version.
    Learned,
    /// Ground-truth dense reward, for the substrate sanity baseline only.
    GroundTruth,
    /// k-NN state novelty over the replay's next states.
    StateEntropy,
    Zero,
}

/// Ring buffer of transitions with a learned-reward cache.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    transitions: Vec<Transition>,
    episode_ids: Vec<u64>,
    learned: Vec<f64>,
    stamp: Option<u64>,
    /// Total insertions; slot of insertion `i` is `i % capacity`.
    inserted: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer { capacity, transitions: Vec::new(), episode_ids: Vec::new(), learned: Vec::new(), stamp: None, inserted: 0 })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn cache_stamp(&self) -> Option<u64> {
        self.stamp
    }

    /// Insertions carry a zero learned reward until the next relabel.
    pub fn push(&mut self, transition: Transition, episode_id: u64, learned_reward: f64) {
        let slot = self.inserted % self.capacity;
        if self.transitions.len() < self.capacity {
            self.transitions.push(transition);
            self.episode_ids.push(episode_id);
            self.learned.push(learned_reward);
        } else {
            self.transitions[slot] = transition;
            self.episode_ids[slot] = episode_id;
            self.learned[slot] = learned_reward;
        }
        self.inserted += 1;
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.transitions[i]
    }

    pub fn learned_rewards(&self) -> &[f64] {
        &self.learned
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter()
    }

    /// Recomputes every cached reward when the model version differs from the stamp.
    pub fn relabel(&mut self, ensemble: &RewardEnsemble) -> Result<usize> {
        if self.stamp == Some(ensemble.version()) {
            return Ok(0);
        }
        const CHUNK: usize = 4096;
        let a_dim = ensemble.input_dim() - STATE_DIM;
        for start in (0..self.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(self.len());
            let inputs = Array2::from_shape_fn((end - start, STATE_DIM + a_dim), |(i, j)| {
                let t = &self.transitions[start + i];
                if j < STATE_DIM {
                    t.state.to_vector()[j]
                } else {
                    t.action[j - STATE_DIM]
                }
            });
            let r = ensemble.predict_batch(inputs.view())?;
            self.learned[start..end].copy_from_slice(r.as_slice().expect("contiguous"));
        }
        self.stamp = Some(ensemble.version());
        Ok(self.len())
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| rng.random_range(0..self.len())).collect()
    }

    /// Gathers a batch; `ensemble_version` must equal the cache stamp for learned rewards.
    pub fn batch(&self, indices: &[usize], source: RewardSource, ensemble_version: Option<u64>, entropy_k: usize) -> Result<Batch> {
        let n = indices.len();
        let a_dim = self.transitions[indices[0]].action.len();
        let states = Array2::from_shape_fn((n, STATE_DIM), |(i, j)| self.transitions[indices[i]].state.to_vector()[j]);
        let next_states = Array2::from_shape_fn((n, STATE_DIM), |(i, j)| self.transitions[indices[i]].next_state.to_vector()[j]);
        let actions = Array2::from_shape_fn((n, a_dim), |(i, j)| self.transitions[indices[i]].action[j]);
        let rewards = match source {
            RewardSource::Learned => {
                if ensemble_version.is_none() || self.stamp != ensemble_version {
                    return Err(Error::Invariant(format!(
                        "learned-reward cache stamp {:?} does not match model version {:?}",
                        self.stamp, ensemble_version
                    )));
                }
                indices.iter().map(|&i| self.learned[i]).collect()
            }
            RewardSource::GroundTruth => indices.iter().map(|&i| self.transitions[i].true_reward.read(RewardAccess::Training)).collect(),
            RewardSource::StateEntropy => {
                let population = Array2::from_shape_fn((self.len(), STATE_DIM), |(i, j)| self.transitions[i].next_state.to_vector()[j]);
                next_states
                    .rows()
                    .into_iter()
                    .map(|q| state_entropy_reward(population.view(), q.as_slice().expect("row"), entropy_k))
                    .collect::<Result<Array1<f64>>>()?
            }
            RewardSource::Zero => Array1::zeros(n),
        };
        Ok(Batch { states, actions, rewards, next_states })
    }

    /// A random length-`len` window that stays inside one episode and is
    /// contiguous in insertion order; `None` when no episode is long enough.
    pub fn sample_segment<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<Option<Segment>> {
        let oldest = self.inserted.saturating_sub(self.capacity);
        if self.inserted < oldest + len {
            return Ok(None);
        }
        for _ in 0..1000 {
            let start = rng.random_range(oldest..=self.inserted - len);
            let first = start % self.capacity;
            let last = (start + len - 1) % self.capacity;
            if self.episode_ids[first] != self.episode_ids[last] {
                continue;
            }
            let window: Vec<Transition> = (start..start + len).map(|g| self.transitions[g % self.capacity].clone()).collect();
            return Segment::from_transitions(&window, self.episode_ids[first]).map(Some);
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Env, TaskId};
    use crate::nn::gradcheck::{check_flat, DEFAULT_STEP};
    use crate::reward::RewardConfig;

    fn small() -> SacConfig {
        SacConfig { hidden: vec![8, 8], batch_size: 16, ..Default::default() }
    }

    fn fill(buffer: &mut ReplayBuffer, steps: usize, seed: u64) {
        let env = Env::for_task(TaskId::PushToTarget, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = env.reset(seed);
        let mut ep = 0;
        for _ in 0..steps {
            let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = env.step(&s, &a).unwrap();
            s = t.next_state;
            buffer.push(t, ep, 0.0);
            if env.is_terminal(&s) {
                ep += 1;
                s = env.reset(seed + ep);
            }
        }
    }

    #[test]
    fn stable_tanh_correction() {
        for u in [-30.0, -3.0, -0.2, 0.0, 0.7, 4.0, 25.0] {
            let direct = (1.0 - f64::tanh(u).powi(2)).ln();
            if direct.is_finite() && u.abs() < 10.0 {
                assert!((log_one_minus_tanh_sq(u) - direct).abs() < 1e-10);
            }
            assert!(log_one_minus_tanh_sq(u).is_finite());
        }
    }

    #[test]
    fn deterministic_action_repeats_and_in_range() {
        let mut agent = Agent::new(STATE_DIM, 4, small(), 1).unwrap();
        let s = [0.1, -0.2, 0.3, 0.0, 0.5, 0.5, 1.0];
        let a = agent.select_action(&s, false).unwrap();
        assert_eq!(a, agent.select_action(&s, false).unwrap());
        for _ in 0..10_000 {
            assert!(agent.select_action(&s, true).unwrap().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn stochastic_mean_matches_monte_carlo_oracle() {
        let mut agent = Agent::new(STATE_DIM, 4, small(), 2).unwrap();
        let s = [0.3, 0.1, -0.4, 0.2, 0.0, 0.6, 0.0];
        let out = agent.actor.predict_one(&s).unwrap();
        let n = 10_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let a = agent.select_action(&s, true).unwrap();
            for j in 0..4 {
                sum[j] += a[j];
                sq[j] += a[j] * a[j];
            }
        }
        // independent quadrature of E[tanh(m + σ z)]
        for j in 0..4 {
            let m = out[j];
            let sd = out[4 + j].clamp(LOG_STD_MIN, LOG_STD_MAX).exp();
            let mut expect = 0.0;
            let mut mass = 0.0;
            let steps = 4000;
            for k in 0..=steps {
                let z = -8.0 + 16.0 * k as f64 / steps as f64;
                let w = (-0.5 * z * z).exp();
                expect += w * (m + sd * z).tanh();
                mass += w;
            }
            expect /= mass;
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            let band = 3.0 * (var / n as f64).sqrt();
            assert!((mean - expect).abs() <= band, "dim {j}: {mean} vs {expect} ± {band}");
        }
    }

    #[test]
    fn log_prob_matches_density_oracle() {
        // density of a = tanh(u), u ~ N(m, σ²): N(atanh a; m, σ) / (1 − a²)
        let out = Array2::from_shape_vec((1, 2), vec![0.3, -0.5]).unwrap();
        for e in [-1.5, 0.0, 0.8] {
            let noise = Array2::from_elem((1, 1), e);
            let sample = squash(out.view(), noise.view());
            let a: f64 = sample.actions[[0, 0]];
            let sd = (-0.5f64).exp();
            let u = a.atanh();
            let dens = (-0.5 * ((u - 0.3) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt()) / (1.0 - a * a);
            assert!((sample.log_probs[0] - dens.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn sac_losses_pass_gradient_check() {
        let cfg = SacConfig { hidden: vec![6, 5], ..Default::default() };
        let agent = Agent::new(3, 2, cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let states = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
        let actions = Array2::from_shape_simple_fn((5, 2), || rng.random_range(-0.9..0.9));
        let targets = Array1::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0));
        let noise = Array2::from_shape_simple_fn((5, 2), || StandardNormal.sample(&mut rng));

        let (_, g) = critic_loss_and_grads(&agent.critics[0], states.view(), actions.view(), &targets).unwrap();
        let mut probe = agent.critics[0].clone();
        let err = check_flat(
            &agent.critics[0].flat_params(),
            |p| {
                probe.set_flat_params(p).unwrap();
                critic_loss_and_grads(&probe, states.view(), actions.view(), &targets).unwrap().0
            },
            &g.flatten(),
            usize::MAX,
            DEFAULT_STEP,
            0,
        );
        assert!(err <= 1e-4, "critic {err}");

        let critics = [&agent.critics[0], &agent.critics[1]];
        let (_, g, _) = actor_loss_and_grads(&agent.actor, critics, states.view(), noise.view(), 0.3).unwrap();
        let mut probe = agent.actor.clone();
        let err = check_flat(
            &agent.actor.flat_params(),
            |p| {
                probe.set_flat_params(p).unwrap();
                actor_loss_and_grads(&probe, critics, states.view(), noise.view(), 0.3).unwrap().0
            },
            &g.flatten(),
            usize::MAX,
            DEFAULT_STEP,
            0,
        );
        assert!(err <= 1e-4, "actor {err}");
    }

    #[test]
    fn polyak_residual_after_update_is_zero() {
        let mut agent = Agent::new(STATE_DIM, 4, small(), 3).unwrap();
        let mut buffer = ReplayBuffer::new(1000).unwrap();
        fill(&mut buffer, 100, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let idx = buffer.sample_indices(16, &mut rng);
        let batch = buffer.batch(&idx, RewardSource::Zero, None, 5).unwrap();
        let old_targets = agent.targets.clone();
        agent.update(&batch).unwrap();
        let tau = agent.config.polyak;
        for (k, old) in old_targets.iter().enumerate() {
            let t = agent.targets[k].flat_params();
            let o = old.flat_params();
            let c = agent.critics[k].flat_params();
            let mut expected = old.clone();
            expected.polyak_from(&agent.critics[k], tau);
            assert_eq!(t, expected.flat_params());
            let resid: f64 = t.iter().zip(&o).zip(&c).map(|((t, o), c)| (t - (1.0 - tau) * o - tau * c).abs()).fold(0.0, f64::max);
            assert!(resid < 1e-15);
        }
    }

    #[test]
    fn soft_target_uses_twin_minimum() {
        let cfg = SacConfig { hidden: vec![8], initial_temperature: 0.2, ..Default::default() };
        let agent = Agent::new(STATE_DIM, 4, cfg, 4).unwrap();
        let mut buffer = ReplayBuffer::new(1000).unwrap();
        fill(&mut buffer, 50, 2);
        let idx: Vec<usize> = (0..20).collect();
        let mut batch = buffer.batch(&idx, RewardSource::Zero, None, 5).unwrap();
        batch.rewards = Array1::linspace(-1.0, 1.0, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = Array2::from_shape_simple_fn((20, 4), || StandardNormal.sample(&mut rng));
        let y = agent.soft_targets_with_noise(&batch, noise.view()).unwrap();
        let out = agent.actor.predict(batch.next_states.view()).unwrap();
        let sample = squash(out.view(), noise.view());
        let input = state_action(batch.next_states.view(), sample.actions.view());
        let t1 = agent.targets[0].predict(input.view()).unwrap();
        let t2 = agent.targets[1].predict(input.view()).unwrap();
        for i in 0..20 {
            let bonus = -0.2 * sample.log_probs[i];
            let each = [t1[[i, 0]], t2[[i, 0]]].map(|q| batch.rewards[i] + 0.99 * (q + bonus));
            assert!(y[i] <= each[0] + 1e-12 && y[i] <= each[1] + 1e-12);
            assert!((y[i] - each[0].min(each[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_entropy_examples() {
        let line = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
        assert_eq!(state_entropy_reward(line.view(), &[0.0], 1).unwrap(), 0.0);
        assert_eq!(state_entropy_reward(line.view(), &[0.0], 2).unwrap(), 1.0);
        assert_eq!(state_entropy_reward(line.view(), &[0.0], 9).unwrap(), 1.0);
        assert!(state_entropy_reward(Array2::zeros((0, 1)).view(), &[0.0], 1).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = Array2::from_shape_simple_fn((1000, 3), || rng.random_range(-1.0..1.0));
        for q in 0..20 {
            let query = pts.row(q * 37).to_vec();
            let mut brute: Vec<f64> = pts
                .rows()
                .into_iter()
                .map(|r| r.iter().zip(&query).map(|(a, b): (&f64, &f64)| (a - b).powi(2)).sum::<f64>().sqrt())
                .collect();
            brute.sort_by(f64::total_cmp);
            assert_eq!(state_entropy_reward(pts.view(), &query, 5).unwrap(), brute[4]);
        }
    }

    #[test]
    fn relabel_versions_and_values() {
        let mut buffer = ReplayBuffer::new(500).unwrap();
        fill(&mut buffer, 300, 3);
        let cfg = RewardConfig { hidden: vec![8], members: 2, ..Default::default() };
        let ens = RewardEnsemble::new(STATE_DIM + 4, &cfg, 1).unwrap();
        assert_eq!(buffer.relabel(&ens).unwrap(), 300);
        assert_eq!(buffer.relabel(&ens).unwrap(), 0);
        for (i, t) in buffer.iter().enumerate() {
            let want = ens.predict_reward(&t.state.to_vector(), &t.action).unwrap();
            assert!((buffer.learned_rewards()[i] - want).abs() < 1e-12);
        }
        let mut zeros = ens.clone();
        for m in zeros.members_mut() {
            let mut p = vec![0.0; m.param_count()];
            let n = p.len();
            p[n - 1] = 0.25;
            m.set_flat_params(&p).unwrap();
        }
        buffer.relabel(&zeros).unwrap();
        assert!(buffer.learned_rewards().iter().all(|&r| (r - 0.25_f64.tanh()).abs() < 1e-15));
        let idx = vec![0, 1];
        assert!(buffer.batch(&idx, RewardSource::Learned, Some(ens.version()), 5).is_err());
        assert!(buffer.batch(&idx, RewardSource::Learned, Some(zeros.version()), 5).is_ok());
    }

    #[test]
    fn segments_stay_inside_episodes() {
        let mut buffer = ReplayBuffer::new(450).unwrap();
        fill(&mut buffer, 1000, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let seg = buffer.sample_segment(50, &mut rng).unwrap().unwrap();
            assert_eq!(seg.len(), 50);
        }
        assert_eq!(buffer.len(), 450);
    }

    #[test]
    fn checkpoint_round_trip() {
        let agent = Agent::new(STATE_DIM, 4, small(), 5).unwrap();
        let back = Agent::decode(&agent.encode(), small(), 0).unwrap();
        assert_eq!(back.actor.flat_params(), agent.actor.flat_params());
        assert_eq!(back.targets[1].flat_params(), agent.targets[1].flat_params());
        assert_eq!(back.temperature(), agent.temperature());
    }
}
