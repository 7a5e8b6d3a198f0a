//! Learned reward: an ensemble of bounded-output networks fit to segment
//! preferences under the Bradley-Terry model.

use std::path::Path;
use std::sync::Arc;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{GroundTruth, Transition};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{ByteReader, ByteWriter};
use crate::nn::{Activation, Adam, Gradients, Mlp};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// A fixed-length window of one episode.
#[derive(Debug, Clone)]
pub struct Segment {
    state_dim: usize,
    /// Row t is state_t concatenated with action_t.
    inputs: Array2<f64>,
    obs: Array2<f64>,
    true_rewards: Vec<GroundTruth>,
    pub episode_id: u64,
    pub start_step: usize,
}

impl Segment {
    pub fn from_transitions(transitions: &[Transition], episode_id: u64) -> Result<Self> {
        let first = transitions.first().ok_or_else(|| Error::Invariant("empty segment".into()))?;
        for w in transitions.windows(2) {
            if w[1].state.step_index != w[0].state.step_index + 1 {
                return Err(Error::Invariant("segment crosses an episode boundary".into()));
            }
        }
        let state_dim = first.state.to_vector().len();
        let action_dim = first.action.len();
        let obs_dim = first.obs_features.len();
        let h = transitions.len();
        let inputs = Array2::from_shape_fn((h, state_dim + action_dim), |(t, j)| {
            let tr = &transitions[t];
            if j < state_dim {
                tr.state.to_vector()[j]
            } else {
                tr.action[j - state_dim]
            }
        });
        let obs = Array2::from_shape_fn((h, obs_dim), |(t, j)| transitions[t].obs_features[j]);
        Ok(Segment {
            state_dim,
            inputs,
            obs,
            true_rewards: transitions.iter().map(|t| t.true_reward).collect(),
            episode_id,
            start_step: first.state.step_index,
        })
    }

    /// Builds a segment from raw arrays; used by tests and synthetic datasets.
    pub fn from_parts(
        state_dim: usize,
        inputs: Array2<f64>,
        obs: Array2<f64>,
        true_rewards: Vec<f64>,
    ) -> Result<Self> {
        let h = inputs.nrows();
        if h == 0 || obs.nrows() != h || true_rewards.len() != h || inputs.ncols() <= state_dim {
            return Err(Error::Invariant("inconsistent segment parts".into()));
        }
        Ok(Segment {
            state_dim,
            inputs,
            obs,
            true_rewards: true_rewards.into_iter().map(GroundTruth::new).collect(),
            episode_id: 0,
            start_step: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn reward_inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn states(&self) -> ArrayView2<'_, f64> {
        self.inputs.slice(s![.., ..self.state_dim])
    }

    pub fn actions(&self) -> ArrayView2<'_, f64> {
        self.inputs.slice(s![.., self.state_dim..])
    }

    pub fn obs(&self) -> ArrayView2<'_, f64> {
        self.obs.view()
    }

    pub fn true_rewards(&self) -> &[GroundTruth] {
        &self.true_rewards
    }
}

/// Preference label: `First` is (1,0), `Second` is (0,1), `Tie` is (0.5,0.5).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    First,
    Second,
    Tie,
}

impl Label {
    pub fn probs(self) -> [f64; 2] {
        match self {
            Label::First => [1.0, 0.0],
            Label::Second => [0.0, 1.0],
            Label::Tie => [0.5, 0.5],
        }
    }

    /// `1 - y`
    pub fn flipped(self) -> Label {
        match self {
            Label::First => Label::Second,
            Label::Second => Label::First,
            Label::Tie => Label::Tie,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Vle,
    Oracle,
    Flipped,
}

#[derive(Debug, Clone)]
pub struct LabeledPreference {
    pub seg0: Arc<Segment>,
    pub seg1: Arc<Segment>,
    pub label: Label,
    pub provenance: Provenance,
}

impl LabeledPreference {
    pub fn new(seg0: Arc<Segment>, seg1: Arc<Segment>, label: Label, provenance: Provenance) -> Self {
        LabeledPreference { seg0, seg1, label, provenance }
    }
}

/// `P[σ1 ≻ σ0]` from the two segment returns, computed with max-subtraction.
pub fn bt_prob(r0: f64, r1: f64) -> f64 {
    let m = r0.max(r1);
    let e0 = (r0 - m).exp();
    let e1 = (r1 - m).exp();
    e1 / (e0 + e1)
}

/// Cross-entropy of a label against `P[σ1 ≻ σ0] = p1`, with clamped logs.
pub fn cross_entropy(label: Label, p1: f64) -> f64 {
    let [y0, y1] = label.probs();
    let p1c = p1.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let p0c = (1.0 - p1).clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y0 * p0c.ln() + y1 * p1c.ln())
}

/// `d CE / d R1` (and `-d CE / d R0`); zero inside the clamped region.
pub fn cross_entropy_grad_r1(label: Label, p1: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p1) {
        return 0.0;
    }
    p1 - label.probs()[1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub hidden: Vec<usize>,
    pub members: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_steps: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            hidden: vec![256, 256, 256],
            members: 3,
            learning_rate: 3e-4,
            batch_size: 128,
            train_steps: 200,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    /// Mean loss across members at each step.
    pub step_losses: Vec<f64>,
    /// Ensemble-mean cross-entropy of every dataset sample after training.
    pub per_sample_losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RewardEnsemble {
    members: Vec<Mlp>,
    optimizers: Vec<Adam>,
    shufflers: Vec<ChaCha8Rng>,
}

impl RewardEnsemble {
    pub fn new(input_dim: usize, config: &RewardConfig, seed: u64) -> Result<Self> {
        if config.members == 0 {
            return Err(Error::Config("reward ensemble needs at least one member".into()));
        }
        let mut sizes = vec![input_dim];
        sizes.extend(&config.hidden);
        sizes.push(1);
        let members = (0..config.members)
            .map(|i| {
                Mlp::new(&sizes, Activation::LeakyRelu, Activation::Tanh, seed.wrapping_add(1000 * i as u64 + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_members(members, config.learning_rate, seed))
    }

    pub fn from_members(members: Vec<Mlp>, learning_rate: f64, seed: u64) -> Self {
        let optimizers = members.iter().map(|m| Adam::for_mlp(learning_rate, m)).collect();
        let shufflers = (0..members.len())
            .map(|i| ChaCha8Rng::seed_from_u64(seed ^ (0xabcd_0000 + i as u64)))
            .collect();
        RewardEnsemble { members, optimizers, shufflers }
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Mlp] {
        &mut self.members
    }

    /// Changes whenever any member's parameters change; distinct ensembles never share a value.
    pub fn version(&self) -> u64 {
        self.members.iter().map(Mlp::version).max().expect("non-empty")
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    /// Mean member output for one (state, action).
    pub fn predict_reward(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let expected = self.input_dim();
        if state.len() + action.len() != expected {
            return Err(Error::DimensionMismatch { expected, actual: state.len() + action.len() });
        }
        let mut input = state.to_vec();
        input.extend_from_slice(action);
        let row = ArrayView2::from_shape((1, expected), &input).expect("row");
        Ok(self.predict_batch(row)?[0])
    }

    /// Mean member output for each row of `(state ⊕ action)` inputs.
    pub fn predict_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let mut acc = Array1::zeros(inputs.nrows());
        for m in &self.members {
            acc += &m.predict(inputs)?.column(0);
        }
        Ok(acc / self.members.len() as f64)
    }

    /// Per-member segment returns, shape (members, segments).
    fn member_returns(&self, segments: &[&Segment]) -> Result<Array2<f64>> {
        let views: Vec<_> = segments.iter().map(|s| s.reward_inputs()).collect();
        let stacked = concatenate(Axis(0), &views).map_err(|e| Error::Invariant(e.to_string()))?;
        let mut out = Array2::zeros((self.members.len(), segments.len()));
        for (k, m) in self.members.iter().enumerate() {
            let r = m.predict(stacked.view())?;
            let mut row = 0;
            for (i, seg) in segments.iter().enumerate() {
                out[[k, i]] = r.slice(s![row..row + seg.len(), 0]).sum();
                row += seg.len();
            }
        }
        Ok(out)
    }

    /// `P[σ1 ≻ σ0]` under a single member.
    pub fn preference_prob(&self, member: usize, seg0: &Segment, seg1: &Segment) -> Result<f64> {
        check_equal_len(seg0, seg1)?;
        let m = &self.members[member];
        let r0 = m.predict(seg0.reward_inputs())?.sum();
        let r1 = m.predict(seg1.reward_inputs())?.sum();
        Ok(bt_prob(r0, r1))
    }

    /// Member-averaged `P[σ1 ≻ σ0]` for each pair.
    pub fn mean_preference_probs(&self, pairs: &[(&Segment, &Segment)]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        for (a, b) in pairs {
            check_equal_len(a, b)?;
        }
        let segs: Vec<&Segment> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
        let returns = self.member_returns(&segs)?;
        let k = self.members.len() as f64;
        Ok((0..pairs.len())
            .map(|i| {
                (0..self.members.len()).map(|m| bt_prob(returns[[m, 2 * i]], returns[[m, 2 * i + 1]])).sum::<f64>()
                    / k
            })
            .collect())
    }

    /// Mean over members of the ensemble-mean cross-entropy per sample.
    pub fn per_sample_losses(&self, batch: &[LabeledPreference]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; batch.len()];
        for chunk_start in (0..batch.len()).step_by(256) {
            let chunk = &batch[chunk_start..(chunk_start + 256).min(batch.len())];
            let segs: Vec<&Segment> = chunk.iter().flat_map(|p| [&*p.seg0, &*p.seg1]).collect();
            let returns = self.member_returns(&segs)?;
            for (i, p) in chunk.iter().enumerate() {
                let l: f64 = (0..self.members.len())
                    .map(|m| cross_entropy(p.label, bt_prob(returns[[m, 2 * i]], returns[[m, 2 * i + 1]])))
                    .sum();
                out[chunk_start + i] = l / self.members.len() as f64;
            }
        }
        Ok(out)
    }

    /// Mean over batch and members of the preference cross-entropy.
    pub fn preference_loss(&self, batch: &[LabeledPreference]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Invariant("empty preference batch".into()));
        }
        let losses = self.per_sample_losses(batch)?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// [`fit`](Self::fit) followed by per-sample losses over the whole dataset.
    pub fn train(&mut self, dataset: &[LabeledPreference], steps: usize, batch_size: usize) -> Result<TrainStats> {
        let step_losses = self.fit(dataset, steps, batch_size)?;
        let per_sample_losses = self.per_sample_losses(dataset)?;
        Ok(TrainStats { step_losses, per_sample_losses })
    }

    /// Each member trains on its own shuffled batches for `steps` Adam steps.
    /// Returns the member-mean batch loss per step.
    pub fn fit(&mut self, dataset: &[LabeledPreference], steps: usize, batch_size: usize) -> Result<Vec<f64>> {
        if dataset.is_empty() {
            return Err(Error::Invariant("empty preference dataset".into()));
        }
        let batch_size = batch_size.min(dataset.len()).max(1);
        let mut step_losses = vec![0.0; steps];
        for k in 0..self.members.len() {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut self.shufflers[k]);
            let mut cursor = 0;
            for loss_slot in step_losses.iter_mut() {
                if cursor + batch_size > order.len() {
                    order.shuffle(&mut self.shufflers[k]);
                    cursor = 0;
                }
                let batch: Vec<&LabeledPreference> = order[cursor..cursor + batch_size].iter().map(|&i| &dataset[i]).collect();
                cursor += batch_size;
                let (loss, grads) = member_loss_and_grad(&self.members[k], &batch)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss("reward preference loss"));
                }
                self.optimizers[k].step_mlp(&mut self.members[k], &grads)?;
                *loss_slot += loss / self.members.len() as f64;
            }
        }
        Ok(step_losses)
    }

    pub fn write(&self, w: &mut ByteWriter) {
        w.bytes(ENSEMBLE_MAGIC);
        w.u32(self.members.len() as u32);
        for m in &self.members {
            w.mlp(m);
        }
    }

    pub fn read(r: &mut ByteReader<'_>, learning_rate: f64, seed: u64) -> Result<Self> {
        r.expect_magic(ENSEMBLE_MAGIC)?;
        let n = r.u32()? as usize;
        let members = (0..n).map(|_| r.mlp()).collect::<Result<Vec<_>>>()?;
        if members.is_empty() {
            return Err(Error::Checkpoint("ensemble without members".into()));
        }
        Ok(Self::from_members(members, learning_rate, seed))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = ByteWriter::new();
        self.write(&mut w);
        std::fs::write(path, w.finish())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, learning_rate: f64, seed: u64) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = ByteReader::new(&bytes);
        let e = Self::read(&mut r, learning_rate, seed)?;
        r.finish()?;
        Ok(e)
    }
}

const ENSEMBLE_MAGIC: &[u8; 4] = b"RVRE";

fn check_equal_len(a: &Segment, b: &Segment) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), actual: b.len() });
    }
    Ok(())
}

/// Mean cross-entropy of one member over a batch and its parameter gradient.
pub fn member_loss_and_grad(member: &Mlp, batch: &[&LabeledPreference]) -> Result<(f64, Gradients)> {
    let segs: Vec<&Segment> = batch.iter().flat_map(|p| [&*p.seg0, &*p.seg1]).collect();
    for p in batch {
        check_equal_len(&p.seg0, &p.seg1)?;
    }
    let views: Vec<_> = segs.iter().map(|s| s.reward_inputs()).collect();
    let stacked = concatenate(Axis(0), &views).map_err(|e| Error::Invariant(e.to_string()))?;
    let (out, cache) = member.forward(stacked.view())?;
    let b = batch.len() as f64;
    let mut grad_out = Array2::zeros(out.dim());
    let mut loss = 0.0;
    let mut row = 0;
    for p in batch {
        let h = p.seg0.len();
        let r0 = out.slice(s![row..row + h, 0]).sum();
        let r1 = out.slice(s![row + h..row + 2 * h, 0]).sum();
        let p1 = bt_prob(r0, r1);
        loss += cross_entropy(p.label, p1);
        let g1 = cross_entropy_grad_r1(p.label, p1) / b;
        grad_out.slice_mut(s![row..row + h, 0]).fill(-g1);
        grad_out.slice_mut(s![row + h..row + 2 * h, 0]).fill(g1);
        row += 2 * h;
    }
    let (grads, _) = member.backward(&cache, grad_out.view())?;
    Ok((loss / b, grads))
}
