//! Simulated vision-language embedding model.
//!
//! Frozen base encoders map observation features and task descriptions into
//! a shared 64-dimensional space; the cosine between the two is a noisy
//! progress signal. Residual adapters on both sides and an inverse-dynamics
//! head are the only trainable parts.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{EnvState, Env, TaskId, Transition, OBS_DIM, RELEVANT_DIM};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{ByteReader, ByteWriter};
use crate::nn::{Activation, Adam, Gradients, Mlp};
use crate::reward::{bt_prob, cross_entropy, cross_entropy_grad_r1, Label, LabeledPreference, Segment};

pub const EMBED_DIM: usize = 64;
const ENCODER_HIDDEN: usize = 64;
/// Relative norm of the noise added to each description embedding.
const TEXT_NOISE: f64 = 0.2;
/// Solved configurations averaged into each description embedding.
const GOAL_SAMPLES: usize = 32;
const ADAPTER_MAGIC: &[u8; 4] = b"RVAD";

/// Frozen image and text encoders with a domain-gap knob.
#[derive(Debug, Clone)]
pub struct BaseEncoders {
    image: Mlp,
    text: Vec<Array1<f64>>,
    gap: f64,
    gap_seed: u64,
}

impl BaseEncoders {
    /// `gap` in `[0, 1]` scales the distractor half of the encoder input.
    ///
    /// Each description embedding is the mean image embedding of solved
    /// configurations of its task, rendered with pretraining-domain distractor
    /// values, plus a fixed random perturbation.
    pub fn new(gap_seed: u64, gap: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gap) {
            return Err(Error::Config(format!("gap {gap} outside [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(gap_seed ^ 0xe4c0_de00);
        let image = Mlp::with_rng(
            &[OBS_DIM, ENCODER_HIDDEN, EMBED_DIM],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        )?;
        let pretrain_distractors: Vec<f64> =
            (RELEVANT_DIM..OBS_DIM).map(|_| 0.5 * normal(&mut rng)).collect();
        let mut encoders = BaseEncoders { image, text: Vec::new(), gap, gap_seed };
        for task in TaskId::ALL {
            let env = Env::for_task(task, gap_seed);
            let mut goals = Array2::zeros((GOAL_SAMPLES, OBS_DIM));
            for (k, mut row) in goals.rows_mut().into_iter().enumerate() {
                let mut obs = env.render_features(&solved_configuration(task, &env.reset(gap_seed ^ k as u64)));
                for (o, d) in obs[RELEVANT_DIM..].iter_mut().zip(&pretrain_distractors) {
                    *o = gap * d;
                }
                row.assign(&ArrayView1::from(&obs));
            }
            let mut e = encoders.image.predict(goals.view())?.mean_axis(Axis(0)).expect("non-empty");
            let norm = e.dot(&e).sqrt();
            let noise = Array1::from_shape_fn(EMBED_DIM, |_| normal(&mut rng));
            let noise_norm = noise.dot(&noise).sqrt();
            e += &(noise * (TEXT_NOISE * norm / noise_norm));
            encoders.text.push(e);
        }
        Ok(encoders)
    }

    pub fn gap(&self) -> f64 {
        self.gap
    }

    pub fn gap_seed(&self) -> u64 {
        self.gap_seed
    }

    pub fn text_embedding(&self, description_id: usize) -> Result<ArrayView1<'_, f64>> {
        self.text
            .get(description_id)
            .map(|e| e.view())
            .ok_or_else(|| Error::Config(format!("unknown description id {description_id}")))
    }

    /// The frozen image network; its input is the observation with the
    /// distractor columns scaled by `gap`.
    pub fn image_encoder(&self) -> &Mlp {
        &self.image
    }

    fn encoder_input(&self, obs: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut x = obs.to_owned();
        x.slice_mut(s![.., RELEVANT_DIM..]).mapv_inplace(|v| v * self.gap);
        x
    }

    pub fn image_embeddings(&self, obs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if obs.ncols() != OBS_DIM {
            return Err(Error::DimensionMismatch { expected: OBS_DIM, actual: obs.ncols() });
        }
        self.image.predict(self.encoder_input(obs).view())
    }

    /// FNV-1a over every frozen parameter bit pattern.
    pub fn parameter_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        self.image.flat_params().into_iter().for_each(&mut eat);
        self.text.iter().flatten().copied().for_each(&mut eat);
        eat(self.gap);
        h
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Hand and object moved onto the target of a freshly reset episode.
fn solved_configuration(task: TaskId, reset: &EnvState) -> EnvState {
    EnvState {
        hand: reset.target,
        object: reset.target,
        grasp: if task == TaskId::Reach { 0.0 } else { 1.0 },
        step_index: 100,
        success_latched: true,
        ..*reset
    }
}

fn cosine(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64> {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(u.dot(&v) / (nu * nv))
}

/// Cosine reward with the frozen encoders only.
pub fn vle_reward_raw(encoders: &BaseEncoders, description_id: usize, obs: &[f64]) -> Result<f64> {
    let row = ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| Error::Invariant(e.to_string()))?;
    let img = encoders.image_embeddings(row)?;
    cosine(encoders.text_embedding(description_id)?, img.row(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub hidden: usize,
    pub invdyn_hidden: usize,
    pub learning_rate: f64,
    /// Weight of the inverse-dynamics term in the fine-tuning objective.
    pub lambda_inv: f64,
    pub steps_per_round: usize,
    pub pref_batch: usize,
    pub transition_batch: usize,
    pub tie_eps: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            hidden: 256,
            invdyn_hidden: 64,
            learning_rate: 3e-4,
            lambda_inv: 1.0,
            steps_per_round: 100,
            pref_batch: 64,
            transition_batch: 256,
            tie_eps: 1e-6,
        }
    }
}

/// Compatibility header stored with adapter checkpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterHeader {
    pub gap_seed: u64,
    pub gap: f64,
    pub embed_dim: usize,
    pub action_dim: usize,
}

/// Trainable layers: residual text and image adapters plus the inverse-dynamics head.
#[derive(Debug, Clone)]
pub struct AdapterStack {
    text: Mlp,
    image: Mlp,
    invdyn: Mlp,
    opt_text: Adam,
    opt_image: Adam,
    opt_invdyn: Adam,
    rng: ChaCha8Rng,
    learning_rate: f64,
}

/// `x + mlp(x)`, batched.
fn residual_forward(mlp: &Mlp, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, crate::nn::ForwardCache)> {
    let (out, cache) = mlp.forward(x)?;
    Ok((out + x, cache))
}

fn zero_last_layer(mlp: &mut Mlp) {
    let n = mlp.layers().len();
    let mut slices = mlp.param_slices_mut();
    for s in &mut slices[2 * (n - 1)..] {
        s.fill(0.0);
    }
}

impl AdapterStack {
    /// Residual adapters start as exact identities; the inverse-dynamics head is random.
    pub fn new(config: &AdapterConfig, action_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e55);
        let mut text = Mlp::with_rng(&[EMBED_DIM, config.hidden, EMBED_DIM], Activation::Relu, Activation::Identity, &mut rng)?;
        let mut image = Mlp::with_rng(&[EMBED_DIM, config.hidden, EMBED_DIM], Activation::Relu, Activation::Identity, &mut rng)?;
        zero_last_layer(&mut text);
        zero_last_layer(&mut image);
        let invdyn = Mlp::with_rng(
            &[2 * EMBED_DIM, config.invdyn_hidden, action_dim],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        Ok(Self::from_networks(text, image, invdyn, config.learning_rate, rng.random()))
    }

    fn from_networks(text: Mlp, image: Mlp, invdyn: Mlp, learning_rate: f64, seed: u64) -> Self {
        AdapterStack {
            opt_text: Adam::for_mlp(learning_rate, &text),
            opt_image: Adam::for_mlp(learning_rate, &image),
            opt_invdyn: Adam::for_mlp(learning_rate, &invdyn),
            text,
            image,
            invdyn,
            rng: ChaCha8Rng::seed_from_u64(seed),
            learning_rate,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.invdyn.output_dim()
    }

    pub fn text_adapter(&self) -> &Mlp {
        &self.text
    }

    pub fn image_adapter(&self) -> &Mlp {
        &self.image
    }

    pub fn invdyn_head(&self) -> &Mlp {
        &self.invdyn
    }

    pub fn networks_mut(&mut self) -> (&mut Mlp, &mut Mlp, &mut Mlp) {
        (&mut self.text, &mut self.image, &mut self.invdyn)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.text.flat_params();
        p.extend(self.image.flat_params());
        p.extend(self.invdyn.flat_params());
        p
    }

    pub fn adapted_text(&self, encoders: &BaseEncoders, description_id: usize) -> Result<Array1<f64>> {
        let e = encoders.text_embedding(description_id)?.insert_axis(Axis(0));
        let (out, _) = residual_forward(&self.text, e)?;
        Ok(out.row(0).to_owned())
    }

    pub fn adapted_images(&self, encoders: &BaseEncoders, obs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let base = encoders.image_embeddings(obs)?;
        Ok(self.image.predict(base.view())? + &base)
    }

    /// Adapted cosine reward for every observation row.
    pub fn rewards(&self, encoders: &BaseEncoders, description_id: usize, obs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let u = self.adapted_text(encoders, description_id)?;
        let v = self.adapted_images(encoders, obs)?;
        v.rows().into_iter().map(|row| cosine(u.view(), row)).collect::<Result<Vec<_>>>().map(Array1::from)
    }

    pub fn segment_return(&self, encoders: &BaseEncoders, description_id: usize, seg: &Segment) -> Result<f64> {
        Ok(self.rewards(encoders, description_id, seg.obs())?.sum())
    }

    /// Adds the parameter gradients of the mean preference cross-entropy over
    /// `batch` (returns computed from adapted cosines) and returns the loss.
    fn preference_term(
        &self,
        encoders: &BaseEncoders,
        description_id: usize,
        batch: &[&LabeledPreference],
        g_text: &mut Gradients,
        g_image: &mut Gradients,
    ) -> Result<f64> {
        let b = batch.len() as f64;
        let text_in = encoders.text_embedding(description_id)?.insert_axis(Axis(0)).to_owned();
        let (u_out, text_cache) = residual_forward(&self.text, text_in.view())?;
        let u = u_out.row(0).to_owned();
        let nu = u.dot(&u).sqrt();

        let obs_views: Vec<_> = batch.iter().flat_map(|p| [p.seg0.obs(), p.seg1.obs()]).collect();
        let obs = concatenate(Axis(0), &obs_views).map_err(|e| Error::Invariant(e.to_string()))?;
        let base = encoders.image_embeddings(obs.view())?;
        let (v, image_cache) = residual_forward(&self.image, base.view())?;

        let norms: Vec<f64> = v.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        if nu == 0.0 || norms.contains(&0.0) {
            return Err(Error::ZeroNorm);
        }
        let cos: Vec<f64> = v.rows().into_iter().zip(&norms).map(|(r, &nv)| u.dot(&r) / (nu * nv)).collect();

        let mut d_v = Array2::zeros(v.dim());
        let mut d_u = Array1::<f64>::zeros(EMBED_DIM);
        let mut loss = 0.0;
        let mut row = 0;
        for p in batch {
            let h = p.seg0.len();
            let r0: f64 = cos[row..row + h].iter().sum();
            let r1: f64 = cos[row + h..row + 2 * h].iter().sum();
            let p1 = bt_prob(r0, r1);
            loss += cross_entropy(p.label, p1);
            let g1 = cross_entropy_grad_r1(p.label, p1) / b;
            for t in row..row + 2 * h {
                let g = if t < row + h { -g1 } else { g1 };
                if g == 0.0 {
                    continue;
                }
                let vt = v.row(t);
                let nv = norms[t];
                // d cos / d v = u/(|u||v|) - cos v/|v|^2 ; d cos / d u = v/(|u||v|) - cos u/|u|^2
                let mut dvt = d_v.row_mut(t);
                dvt.scaled_add(g / (nu * nv), &u);
                dvt.scaled_add(-g * cos[t] / (nv * nv), &vt);
                d_u.scaled_add(g / (nu * nv), &vt);
                d_u.scaled_add(-g * cos[t] / (nu * nu), &u);
            }
            row += 2 * h;
        }
        let (gi, _) = self.image.backward(&image_cache, d_v.view())?;
        let (gt, _) = self.text.backward(&text_cache, d_u.insert_axis(Axis(0)).view())?;
        g_image.add_assign(&gi);
        g_text.add_assign(&gt);
        Ok(loss / b)
    }

    /// Adds `lambda`-weighted gradients of the mean inverse-dynamics loss and returns the unweighted loss.
    #[allow(clippy::too_many_arguments)]
    fn invdyn_term(
        &self,
        encoders: &BaseEncoders,
        obs: ArrayView2<'_, f64>,
        next_obs: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
        lambda: f64,
        g_image: &mut Gradients,
        g_invdyn: Option<&mut Gradients>,
    ) -> Result<f64> {
        let n = obs.nrows();
        let stacked = concatenate(Axis(0), &[obs, next_obs]).map_err(|e| Error::Invariant(e.to_string()))?;
        let base = encoders.image_embeddings(stacked.view())?;
        let (emb, image_cache) = residual_forward(&self.image, base.view())?;
        let pair = concatenate(Axis(1), &[emb.slice(s![..n, ..]), emb.slice(s![n.., ..])])
            .map_err(|e| Error::Invariant(e.to_string()))?;
        let (pred, f_cache) = self.invdyn.forward(pair.view())?;
        if pred.ncols() != actions.ncols() {
            return Err(Error::DimensionMismatch { expected: pred.ncols(), actual: actions.ncols() });
        }
        let diff = &pred - &actions;
        let loss = diff.mapv(|d| d * d).sum() / n as f64;
        let d_pred = diff * (2.0 * lambda / n as f64);
        let (gf, d_pair) = self.invdyn.backward(&f_cache, d_pred.view())?;
        if let Some(g) = g_invdyn {
            g.add_assign(&gf);
        }
        let d_emb = concatenate(Axis(0), &[d_pair.slice(s![.., ..EMBED_DIM]), d_pair.slice(s![.., EMBED_DIM..])])
            .map_err(|e| Error::Invariant(e.to_string()))?;
        let (gi, _) = self.image.backward(&image_cache, d_emb.view())?;
        g_image.add_assign(&gi);
        Ok(loss)
    }

    /// Combined fine-tuning loss and its gradients (text, image, inverse-dynamics head).
    pub fn finetune_loss_and_grads(
        &self,
        encoders: &BaseEncoders,
        description_id: usize,
        prefs: &[&LabeledPreference],
        transitions: &[&Transition],
        lambda_inv: f64,
    ) -> Result<(FinetuneLoss, [Gradients; 3])> {
        let mut g_text = Gradients::zeros_like(&self.text);
        let mut g_image = Gradients::zeros_like(&self.image);
        let mut g_invdyn = Gradients::zeros_like(&self.invdyn);
        let pref = if prefs.is_empty() {
            0.0
        } else {
            self.preference_term(encoders, description_id, prefs, &mut g_text, &mut g_image)?
        };
        let inv = if transitions.is_empty() || lambda_inv == 0.0 {
            0.0
        } else {
            let (o, o1, a) = stack_transitions(transitions);
            self.invdyn_term(encoders, o.view(), o1.view(), a.view(), lambda_inv, &mut g_image, Some(&mut g_invdyn))?
        };
        Ok((FinetuneLoss { preference: pref, inverse_dynamics: inv, total: pref + lambda_inv * inv }, [g_text, g_image, g_invdyn]))
    }

    pub fn inverse_dynamics_loss(&self, encoders: &BaseEncoders, obs: &[f64], next_obs: &[f64], action: &[f64]) -> Result<f64> {
        let o = ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| Error::Invariant(e.to_string()))?;
        let o1 = ArrayView2::from_shape((1, next_obs.len()), next_obs).map_err(|e| Error::Invariant(e.to_string()))?;
        let a = ArrayView2::from_shape((1, action.len()), action).map_err(|e| Error::Invariant(e.to_string()))?;
        let mut scratch = Gradients::zeros_like(&self.image);
        self.invdyn_term(encoders, o, o1, a, 1.0, &mut scratch, None)
    }

    /// Adapter updates on oracle preferences plus the inverse-dynamics objective.
    /// Base encoders are never touched.
    pub fn finetune(
        &mut self,
        encoders: &BaseEncoders,
        description_id: usize,
        oracle_prefs: &[LabeledPreference],
        transitions: &[&Transition],
        options: &FinetuneOptions,
    ) -> Result<FinetuneStats> {
        let mut stats = FinetuneStats::default();
        let mut order: Vec<usize> = (0..oracle_prefs.len()).collect();
        let mut cursor = order.len();
        for _ in 0..options.steps {
            let prefs: Vec<&LabeledPreference> = if oracle_prefs.is_empty() {
                Vec::new()
            } else {
                let bsz = options.pref_batch.min(oracle_prefs.len()).max(1);
                if cursor + bsz > order.len() {
                    order.shuffle(&mut self.rng);
                    cursor = 0;
                }
                let picked = order[cursor..cursor + bsz].iter().map(|&i| &oracle_prefs[i]).collect();
                cursor += bsz;
                picked
            };
            let trans: Vec<&Transition> = if transitions.is_empty() {
                Vec::new()
            } else {
                (0..options.transition_batch.min(transitions.len()))
                    .map(|_| transitions[self.rng.random_range(0..transitions.len())])
                    .collect()
            };
            if prefs.is_empty() && (trans.is_empty() || options.lambda_inv == 0.0) {
                break;
            }
            let (loss, [gt, gi, gf]) =
                self.finetune_loss_and_grads(encoders, description_id, &prefs, &trans, options.lambda_inv)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss("adapter fine-tuning"));
            }
            if !prefs.is_empty() {
                self.opt_text.step_mlp(&mut self.text, &gt)?;
            }
            self.opt_image.step_mlp(&mut self.image, &gi)?;
            if options.train_invdyn && !trans.is_empty() && options.lambda_inv != 0.0 {
                self.opt_invdyn.step_mlp(&mut self.invdyn, &gf)?;
            }
            stats.preference_losses.push(loss.preference);
            stats.inverse_dynamics_losses.push(loss.inverse_dynamics);
        }
        Ok(stats)
    }

    pub fn header(&self, encoders: &BaseEncoders) -> AdapterHeader {
        AdapterHeader { gap_seed: encoders.gap_seed(), gap: encoders.gap(), embed_dim: EMBED_DIM, action_dim: self.action_dim() }
    }

    pub fn encode(&self, header: &AdapterHeader) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(ADAPTER_MAGIC);
        w.u32(crate::nn::checkpoint::FORMAT_VERSION);
        w.u64(header.gap_seed);
        w.f64(header.gap);
        w.u32(header.embed_dim as u32);
        w.u32(header.action_dim as u32);
        w.mlp(&self.text);
        w.mlp(&self.image);
        w.mlp(&self.invdyn);
        w.finish()
    }

    pub fn save(&self, encoders: &BaseEncoders, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode(&self.header(encoders)))?;
        Ok(())
    }

    /// Decodes a checkpoint and rejects it unless its header equals `expected`.
    pub fn decode(bytes: &[u8], expected: &AdapterHeader, learning_rate: f64, seed: u64) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(ADAPTER_MAGIC)?;
        let version = r.u32()?;
        if version != crate::nn::checkpoint::FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported adapter format version {version}")));
        }
        let header = AdapterHeader {
            gap_seed: r.u64()?,
            gap: r.f64()?,
            embed_dim: r.u32()? as usize,
            action_dim: r.u32()? as usize,
        };
        if header.gap_seed != expected.gap_seed || header.gap.to_bits() != expected.gap.to_bits() {
            return Err(Error::Checkpoint(format!(
                "adapter trained for gap_seed {} / gap {}, expected {} / {}",
                header.gap_seed, header.gap, expected.gap_seed, expected.gap
            )));
        }
        if header.embed_dim != expected.embed_dim || header.action_dim != expected.action_dim {
            return Err(Error::Checkpoint(format!(
                "adapter dims (embed {}, action {}) do not match (embed {}, action {})",
                header.embed_dim, header.action_dim, expected.embed_dim, expected.action_dim
            )));
        }
        let text = r.mlp()?;
        let image = r.mlp()?;
        let invdyn = r.mlp()?;
        r.finish()?;
        let shapes_ok = text.input_dim() == header.embed_dim
            && text.output_dim() == header.embed_dim
            && image.input_dim() == header.embed_dim
            && image.output_dim() == header.embed_dim
            && invdyn.input_dim() == 2 * header.embed_dim
            && invdyn.output_dim() == header.action_dim;
        if !shapes_ok {
            return Err(Error::Checkpoint("adapter network shapes disagree with header".into()));
        }
        Ok(Self::from_networks(text, image, invdyn, learning_rate, seed))
    }

    pub fn load(path: impl AsRef<Path>, expected: &AdapterHeader, learning_rate: f64, seed: u64) -> Result<Self> {
        Self::decode(&std::fs::read(path)?, expected, learning_rate, seed)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }
}

fn stack_transitions(ts: &[&Transition]) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let n = ts.len();
    let a_dim = ts[0].action.len();
    let o = Array2::from_shape_fn((n, OBS_DIM), |(i, j)| ts[i].obs_features[j]);
    let o1 = Array2::from_shape_fn((n, OBS_DIM), |(i, j)| ts[i].next_obs_features[j]);
    let a = Array2::from_shape_fn((n, a_dim), |(i, j)| ts[i].action[j]);
    (o, o1, a)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneLoss {
    pub preference: f64,
    pub inverse_dynamics: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    pub steps: usize,
    pub pref_batch: usize,
    pub transition_batch: usize,
    pub lambda_inv: f64,
    /// When false the inverse-dynamics head stays fixed.
    pub train_invdyn: bool,
}

impl FinetuneOptions {
    pub fn from_config(config: &AdapterConfig) -> Self {
        FinetuneOptions {
            steps: config.steps_per_round,
            pref_batch: config.pref_batch,
            transition_batch: config.transition_batch,
            lambda_inv: config.lambda_inv,
            train_invdyn: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinetuneStats {
    pub preference_losses: Vec<f64>,
    pub inverse_dynamics_losses: Vec<f64>,
}

/// How a label is produced from the embedding model.
#[derive(Debug, Clone, Copy)]
pub enum VleView<'a> {
    /// Frozen encoders only.
    Raw(&'a BaseEncoders),
    Adapted(&'a BaseEncoders, &'a AdapterStack),
}

impl VleView<'_> {
    pub fn rewards(&self, description_id: usize, obs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        match self {
            VleView::Raw(enc) => {
                let u = enc.text_embedding(description_id)?;
                let v = enc.image_embeddings(obs)?;
                v.rows().into_iter().map(|r| cosine(u, r)).collect::<Result<Vec<_>>>().map(Array1::from)
            }
            VleView::Adapted(enc, ad) => ad.rewards(enc, description_id, obs),
        }
    }

    pub fn segment_return(&self, description_id: usize, seg: &Segment) -> Result<f64> {
        Ok(self.rewards(description_id, seg.obs())?.sum())
    }

    /// Labels a pair by comparing summed cosine rewards with a tie tolerance.
    pub fn label(&self, description_id: usize, seg0: &Segment, seg1: &Segment, tie_eps: f64) -> Result<Label> {
        if seg0.len() != seg1.len() {
            return Err(Error::DimensionMismatch { expected: seg0.len(), actual: seg1.len() });
        }
        let r0 = self.segment_return(description_id, seg0)?;
        let r1 = self.segment_return(description_id, seg1)?;
        Ok(label_from_returns(r0, r1, tie_eps))
    }
}

pub fn label_from_returns(r0: f64, r1: f64, tie_eps: f64) -> Label {
    if r1 > r0 + tie_eps {
        Label::Second
    } else if r0 > r1 + tie_eps {
        Label::First
    } else {
        Label::Tie
    }
}

/// Adapted cosine reward for one observation.
pub fn vle_reward(encoders: &BaseEncoders, adapters: &AdapterStack, description_id: usize, obs: &[f64]) -> Result<f64> {
    let row = ArrayView2::from_shape((1, obs.len()), obs).map_err(|e| Error::Invariant(e.to_string()))?;
    Ok(adapters.rewards(encoders, description_id, row)?[0])
}

pub fn vle_label(
    encoders: &BaseEncoders,
    adapters: &AdapterStack,
    description_id: usize,
    seg0: &Segment,
    seg1: &Segment,
    tie_eps: f64,
) -> Result<Label> {
    VleView::Adapted(encoders, adapters).label(description_id, seg0, seg1, tie_eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_flat, DEFAULT_STEP};
    use crate::reward::Provenance;
    use std::sync::Arc;

    fn small_config() -> AdapterConfig {
        AdapterConfig { hidden: 8, invdyn_hidden: 6, ..Default::default() }
    }

    fn random_obs(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, OBS_DIM), |_| rng.random_range(-1.0..1.0))
    }

    fn obs_segment(obs: Array2<f64>) -> Arc<Segment> {
        let h = obs.nrows();
        Arc::new(Segment::from_parts(2, Array2::zeros((h, 3)), obs, vec![0.0; h]).unwrap())
    }

    fn perturbed(mut ad: AdapterStack, seed: u64, scale: f64) -> AdapterStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, i, f) = ad.networks_mut();
        for m in [t, i, f] {
            m.map_params(|v| v + scale * rng.random_range(-1.0..1.0));
        }
        ad
    }

    #[test]
    fn cosine_edge_values() {
        let u = Array1::from(vec![1.0, 2.0, -0.5]);
        assert!((cosine(u.view(), u.view()).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(u.view(), (-&u).view()).unwrap() + 1.0).abs() < 1e-15);
        let w = Array1::from(vec![2.0, -1.0, 0.0]);
        assert_eq!(cosine(u.view(), w.view()).unwrap(), 0.0);
        assert!(matches!(cosine(u.view(), Array1::zeros(3).view()), Err(Error::ZeroNorm)));
    }

    #[test]
    fn identity_adapters_reproduce_raw_reward() {
        let enc = BaseEncoders::new(3, 0.5).unwrap();
        let ad = AdapterStack::new(&small_config(), 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = random_obs(&mut rng, 20);
        for d in 0..4 {
            for row in obs.rows() {
                let o = row.to_vec();
                let raw = vle_reward_raw(&enc, d, &o).unwrap();
                let adapted = vle_reward(&enc, &ad, d, &o).unwrap();
                assert!((raw - adapted).abs() < 1e-12);
                assert!((-1.0..=1.0).contains(&raw));
            }
        }
    }

    #[test]
    fn reward_matches_hand_arithmetic() {
        let enc = BaseEncoders::new(5, 0.3).unwrap();
        let ad = perturbed(AdapterStack::new(&small_config(), 4, 2).unwrap(), 8, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for row in random_obs(&mut rng, 10).rows() {
            let o = row.to_vec();
            let mut x = o.clone();
            for v in &mut x[RELEVANT_DIM..] {
                *v *= 0.3;
            }
            let base = enc.image.predict_one(&x).unwrap();
            let delta = ad.image_adapter().predict_one(&base).unwrap();
            let img: Vec<f64> = base.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let t0 = enc.text_embedding(1).unwrap().to_vec();
            let td = ad.text_adapter().predict_one(&t0).unwrap();
            let txt: Vec<f64> = t0.iter().zip(&td).map(|(a, b)| a + b).collect();
            let dot: f64 = img.iter().zip(&txt).map(|(a, b)| a * b).sum();
            let n1: f64 = img.iter().map(|a| a * a).sum::<f64>().sqrt();
            let n2: f64 = txt.iter().map(|a| a * a).sum::<f64>().sqrt();
            let want = dot / (n1 * n2);
            assert!((vle_reward(&enc, &ad, 1, &o).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn labels_follow_returns() {
        assert_eq!(label_from_returns(1.0, 1.5, 1e-6), Label::Second);
        assert_eq!(label_from_returns(1.5, 1.0, 1e-6), Label::First);
        assert_eq!(label_from_returns(1.0, 1.0 + 1e-9, 1e-6), Label::Tie);
        let enc = BaseEncoders::new(1, 0.5).unwrap();
        let ad = AdapterStack::new(&small_config(), 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seg = obs_segment(random_obs(&mut rng, 7));
        assert_eq!(vle_label(&enc, &ad, 0, &seg, &seg, 1e-6).unwrap(), Label::Tie);
    }

    #[test]
    fn positive_image_scaling_preserves_labels() {
        // scaling the residual output by c > 0 means scaling both terms of x + g(x)
        let enc = BaseEncoders::new(2, 0.5).unwrap();
        let ad = perturbed(AdapterStack::new(&small_config(), 4, 3).unwrap(), 1, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = ad.adapted_text(&enc, 2).unwrap();
        for _ in 0..50 {
            let (a, b) = (random_obs(&mut rng, 5), random_obs(&mut rng, 5));
            let va = ad.adapted_images(&enc, a.view()).unwrap();
            let vb = ad.adapted_images(&enc, b.view()).unwrap();
            let ret = |v: &Array2<f64>, c: f64| -> f64 {
                v.rows().into_iter().map(|r| cosine(u.view(), (&r * c).view()).unwrap()).sum()
            };
            let base = label_from_returns(ret(&va, 1.0), ret(&vb, 1.0), 1e-6);
            for c in [0.01, 3.0, 250.0] {
                assert_eq!(label_from_returns(ret(&va, c), ret(&vb, c), 1e-6), base);
            }
        }
    }

    #[test]
    fn inverse_dynamics_loss_values() {
        let enc = BaseEncoders::new(1, 0.5).unwrap();
        let mut ad = AdapterStack::new(&small_config(), 4, 1).unwrap();
        // zero head predicts 0 plus a bias we control
        let (_, _, f) = ad.networks_mut();
        f.map_params(|_| 0.0);
        let mut p = f.flat_params();
        let n = p.len();
        p[n - 4..].copy_from_slice(&[0.2, -0.1, 0.3, 0.0]);
        f.set_flat_params(&p).unwrap();
        let o = vec![0.1; OBS_DIM];
        let loss = ad.inverse_dynamics_loss(&enc, &o, &o, &[0.2, -0.1, 0.3, 0.0]).unwrap();
        assert_eq!(loss, 0.0);
        let loss = ad.inverse_dynamics_loss(&enc, &o, &o, &[-0.8, -0.1, 0.3, 0.0]).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    fn toy_transitions(rng: &mut ChaCha8Rng, n: usize) -> Vec<Transition> {
        let env = Env::for_task(TaskId::PushToTarget, 1);
        let mut s = env.reset(rng.random());
        (0..n)
            .map(|_| {
                let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let t = env.step(&s, &a).unwrap();
                s = t.next_state;
                t
            })
            .collect()
    }

    #[test]
    fn finetune_gradients_pass_check() {
        let enc = BaseEncoders::new(4, 0.5).unwrap();
        let ad = perturbed(AdapterStack::new(&small_config(), 4, 5).unwrap(), 2, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let prefs: Vec<LabeledPreference> = [Label::First, Label::Second, Label::Tie]
            .into_iter()
            .map(|l| LabeledPreference::new(obs_segment(random_obs(&mut rng, 4)), obs_segment(random_obs(&mut rng, 4)), l, Provenance::Oracle))
            .collect();
        let pref_refs: Vec<&LabeledPreference> = prefs.iter().collect();
        let trans = toy_transitions(&mut rng, 5);
        let trans_refs: Vec<&Transition> = trans.iter().collect();
        let (_, grads) = ad.finetune_loss_and_grads(&enc, 1, &pref_refs, &trans_refs, 0.7).unwrap();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.flatten()).collect();
        let sizes = [ad.text.param_count(), ad.image.param_count(), ad.invdyn.param_count()];
        let mut probe = ad.clone();
        let err = check_flat(
            &ad.flat_params(),
            |p| {
                probe.text.set_flat_params(&p[..sizes[0]]).unwrap();
                probe.image.set_flat_params(&p[sizes[0]..sizes[0] + sizes[1]]).unwrap();
                probe.invdyn.set_flat_params(&p[sizes[0] + sizes[1]..]).unwrap();
                probe.finetune_loss_and_grads(&enc, 1, &pref_refs, &trans_refs, 0.7).unwrap().0.total
            },
            &analytic,
            usize::MAX,
            DEFAULT_STEP,
            0,
        );
        assert!(err <= 1e-4, "{err}");
        assert!(ad.param_count_total() <= 3000);
    }

    #[test]
    fn zero_steps_leave_adapters_unchanged() {
        let enc = BaseEncoders::new(4, 0.5).unwrap();
        let mut ad = AdapterStack::new(&small_config(), 4, 5).unwrap();
        let before = ad.flat_params();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trans = toy_transitions(&mut rng, 10);
        let refs: Vec<&Transition> = trans.iter().collect();
        let opts = FinetuneOptions { steps: 0, pref_batch: 4, transition_batch: 4, lambda_inv: 1.0, train_invdyn: true };
        ad.finetune(&enc, 1, &[], &refs, &opts).unwrap();
        assert_eq!(ad.flat_params(), before);
    }

    #[test]
    fn base_encoders_stay_frozen() {
        let enc = BaseEncoders::new(4, 0.5).unwrap();
        let hash = enc.parameter_hash();
        let mut ad = AdapterStack::new(&small_config(), 4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trans = toy_transitions(&mut rng, 10);
        let refs: Vec<&Transition> = trans.iter().collect();
        let prefs: Vec<LabeledPreference> = (0..4)
            .map(|_| LabeledPreference::new(obs_segment(random_obs(&mut rng, 3)), obs_segment(random_obs(&mut rng, 3)), Label::First, Provenance::Oracle))
            .collect();
        let opts = FinetuneOptions { steps: 5, pref_batch: 2, transition_batch: 4, lambda_inv: 1.0, train_invdyn: true };
        for _ in 0..3 {
            ad.finetune(&enc, 1, &prefs, &refs, &opts).unwrap();
        }
        assert_eq!(enc.parameter_hash(), hash);
        assert_eq!(enc.parameter_hash(), BaseEncoders::new(4, 0.5).unwrap().parameter_hash());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let enc = BaseEncoders::new(4, 0.5).unwrap();
        let ad = perturbed(AdapterStack::new(&small_config(), 4, 5).unwrap(), 1, 0.1);
        let header = ad.header(&enc);
        let bytes = ad.encode(&header);
        let back = AdapterStack::decode(&bytes, &header, 3e-4, 0).unwrap();
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(back.flat_params()), bits(ad.flat_params()));
        let wrong_action = AdapterHeader { action_dim: 3, ..header };
        assert!(AdapterStack::decode(&bytes, &wrong_action, 3e-4, 0).is_err());
        let wrong_gap = AdapterHeader { gap: 0.25, ..header };
        assert!(AdapterStack::decode(&bytes, &wrong_gap, 3e-4, 0).is_err());
        assert!(AdapterStack::decode(&bytes[..bytes.len() / 2], &header, 3e-4, 0).is_err());
    }

    impl AdapterStack {
        fn param_count_total(&self) -> usize {
            self.text.param_count() + self.image.param_count() + self.invdyn.param_count()
        }
    }
}
