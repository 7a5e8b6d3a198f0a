//! Brute-force reimplementations of the labelling and selection formulas,
//! and the gradient-check suite over every training loss. Shared by the
//! command-line self-tests and the test targets.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{actor_loss_and_grads, critic_loss_and_grads, temperature_loss_and_grad};
use crate::envs::{OBS_DIM, RELEVANT_DIM};
use crate::error::Result;
use crate::feedback::{self, partition, Bucket, SelectorConfig, SelectorState};
use crate::nn::gradcheck::{check_flat, DEFAULT_STEP};
use crate::nn::{Activation, Mlp};
use crate::reward::{member_loss_and_grad, Label, LabeledPreference, Provenance, RewardEnsemble, Segment};
use crate::vle::{AdapterConfig, AdapterStack, BaseEncoders, VleView};

/// Absolute tolerance for formula oracles.
pub const FORMULA_TOLERANCE: f64 = 1e-10;
/// Maximum relative error for gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_abs_error: f64,
    /// Discrete disagreements (labels, buckets).
    pub mismatches: usize,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0 && self.max_abs_error <= FORMULA_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    /// Largest single network checked.
    pub max_network_params: usize,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE && self.max_network_params <= 1000
    }
}

mod brute {
    use super::*;

    pub fn act(a: Activation, x: f64) -> f64 {
        match a {
            Activation::Identity => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    0.01 * x
                }
            }
            Activation::Tanh => {
                let e = (2.0 * x).exp();
                if e.is_infinite() {
                    1.0
                } else {
                    (e - 1.0) / (e + 1.0)
                }
            }
        }
    }

    pub fn forward(m: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for layer in m.layers() {
            let w = layer.weights();
            let mut next = Vec::with_capacity(w.nrows());
            for i in 0..w.nrows() {
                let mut z = layer.bias()[i];
                for (j, xj) in a.iter().enumerate() {
                    z += w[[i, j]] * xj;
                }
                next.push(act(layer.activation(), z));
            }
            a = next;
        }
        a
    }

    pub fn label_probs(label: Label) -> [f64; 2] {
        match label {
            Label::First => [1.0, 0.0],
            Label::Second => [0.0, 1.0],
            Label::Tie => [0.5, 0.5],
        }
    }

    #[allow(clippy::manual_clamp)]
    pub fn kl(label: Label, p_first: f64) -> f64 {
        let p = if p_first < 1e-7 {
            1e-7
        } else if p_first > 1.0 - 1e-7 {
            1.0 - 1e-7
        } else {
            p_first
        };
        let q = [p, 1.0 - p];
        let y = label_probs(label);
        let mut d = 0.0;
        for i in 0..2 {
            if y[i] != 0.0 {
                d += y[i] * y[i].ln() - y[i] * q[i].ln();
            }
        }
        d
    }

    pub fn beta(c: &SelectorConfig, round: u64) -> f64 {
        let raw = c.beta_max - c.beta_decay * round as f64;
        if raw < c.beta_min {
            c.beta_min
        } else if raw > c.beta_max {
            c.beta_max
        } else {
            raw
        }
    }

    /// Two-pass population standard deviation.
    pub fn std(xs: &[f64]) -> f64 {
        if xs.len() < 2 {
            return 0.0;
        }
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
    }

    pub fn tau_lower(c: &SelectorConfig, rho: f64, round: u64, kls: &[f64]) -> f64 {
        -rho.ln() + c.alpha * rho + beta(c, round) * std(kls)
    }

    pub fn segment_return(m: &Mlp, seg: &Segment) -> f64 {
        seg.reward_inputs().rows().into_iter().map(|r| forward(m, &r.to_vec())[0]).sum()
    }

    /// `P[σ1 ≻ σ0]` written as a logistic of the return difference.
    pub fn prob_second(m: &Mlp, s0: &Segment, s1: &Segment) -> f64 {
        let d = segment_return(m, s0) - segment_return(m, s1);
        1.0 / (1.0 + d.exp())
    }

    fn cosine(u: &[f64], v: &[f64]) -> f64 {
        let mut uv = 0.0;
        let mut uu = 0.0;
        let mut vv = 0.0;
        for i in 0..u.len() {
            uv += u[i] * v[i];
            uu += u[i] * u[i];
            vv += v[i] * v[i];
        }
        uv / (uu.sqrt() * vv.sqrt())
    }

    fn residual(m: &Mlp, x: &[f64]) -> Vec<f64> {
        forward(m, x).iter().zip(x).map(|(a, b)| a + b).collect()
    }

    pub fn vle_return(enc: &BaseEncoders, ad: &AdapterStack, desc: usize, seg: &Segment) -> f64 {
        let u = residual(ad.text_adapter(), &enc.text_embedding(desc).expect("known id").to_vec());
        let mut total = 0.0;
        for row in seg.obs().rows() {
            let mut x = row.to_vec();
            for v in x.iter_mut().skip(RELEVANT_DIM) {
                *v *= enc.gap();
            }
            let e = forward(enc.image_encoder(), &x);
            total += cosine(&u, &residual(ad.image_adapter(), &e));
        }
        total
    }

    pub fn label(r0: f64, r1: f64, eps: f64) -> Label {
        if r1 - r0 > eps {
            Label::Second
        } else if r0 - r1 > eps {
            Label::First
        } else {
            Label::Tie
        }
    }

    pub fn bucket(d: f64, tl: f64, tu: f64) -> Bucket {
        if d < tl {
            Bucket::Clean
        } else if d > tu && d >= tl {
            Bucket::Flipped
        } else {
            Bucket::Uncertain
        }
    }
}

fn random_label(rng: &mut ChaCha8Rng) -> Label {
    [Label::First, Label::Second, Label::Tie][rng.random_range(0..3)]
}

/// Probability spread over the whole unit interval, dense near both ends.
fn random_probability(rng: &mut ChaCha8Rng) -> f64 {
    let tail = 10f64.powf(-rng.random_range(0.0..10.0));
    match rng.random_range(0..3) {
        0 => tail,
        1 => 1.0 - tail,
        _ => rng.random_range(0.0..=1.0),
    }
}

/// Inputs share a per-segment offset so that returns of distinct segments
/// can differ by far more than per-step noise.
fn reward_segment(rng: &mut ChaCha8Rng, h: usize, scale: f64) -> Arc<Segment> {
    let shift: f64 = rng.random_range(-1.0..1.0);
    let inputs = Array2::from_shape_fn((h, 11), |_| scale * (shift + rng.random_range(-1.0..1.0)));
    let obs = Array2::from_shape_fn((h, OBS_DIM), |_| rng.random_range(-1.0..1.0));
    Arc::new(Segment::from_parts(7, inputs, obs, vec![0.0; h]).expect("consistent parts"))
}

fn perturb(m: &mut Mlp, rng: &mut ChaCha8Rng, scale: f64) {
    m.map_params(|v| v + scale * rng.random_range(-1.0..1.0));
}

/// Runs every formula oracle on `cases` random inputs.
pub fn formula_oracles(cases: usize, seed: u64) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        kl_oracle(cases, &mut rng),
        beta_oracle(cases, &mut rng),
        tau_lower_oracle(cases, &mut rng)?,
        preference_prob_oracle(cases, &mut rng)?,
        vle_label_oracle(cases, &mut rng)?,
        partition_oracle(cases, &mut rng)?,
    ])
}

fn kl_oracle(cases: usize, rng: &mut ChaCha8Rng) -> OracleReport {
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let (y, p) = (random_label(rng), random_probability(rng));
        worst = worst.max((feedback::kl_label(y, p) - brute::kl(y, p)).abs());
    }
    OracleReport { name: "kl_label", cases, max_abs_error: worst, mismatches: 0 }
}

fn random_selector_config(rng: &mut ChaCha8Rng) -> SelectorConfig {
    SelectorConfig {
        alpha: rng.random_range(0.01..=0.5),
        beta_min: rng.random_range(0.0..2.0),
        beta_max: rng.random_range(2.0..5.0),
        beta_decay: rng.random_range(1e-4..0.05),
        ..SelectorConfig::default()
    }
}

/// Compares the state's schedule after `t` rounds with the clamped line.
fn beta_oracle(cases: usize, rng: &mut ChaCha8Rng) -> OracleReport {
    let mut worst = 0.0_f64;
    for i in 0..cases {
        let config = if i % 2 == 0 { SelectorConfig::default() } else { random_selector_config(rng) };
        let rounds = rng.random_range(0..1200u64);
        let mut state = SelectorState::new(config.clone()).expect("valid config");
        for _ in 0..rounds {
            state.update_rho(&[]);
        }
        worst = worst.max((state.beta_t() - brute::beta(&config, rounds)).abs());
        worst = worst.max((feedback::beta_t(&config, rounds) - brute::beta(&config, rounds)).abs());
    }
    OracleReport { name: "beta_t", cases, max_abs_error: worst, mismatches: 0 }
}

/// Drives a selector through random rounds and compares its threshold with
/// a recomputation from the raw history.
fn tau_lower_oracle(cases: usize, rng: &mut ChaCha8Rng) -> Result<OracleReport> {
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let config = random_selector_config(rng);
        let mut state = SelectorState::new(config.clone())?;
        let mut kls = Vec::new();
        let mut rho = config.initial_rho;
        for _ in 0..rng.random_range(0..6) {
            for _ in 0..rng.random_range(0..20) {
                let d = rng.random_range(0.0..8.0);
                state.observe_kl(d);
                kls.push(d);
            }
            let losses: Vec<f64> = (0..rng.random_range(0..5)).map(|_| 10f64.powf(rng.random_range(-3.0..0.8))).collect();
            if let Some(m) = losses.iter().copied().reduce(f64::max) {
                rho = m;
            }
            state.update_rho(&losses);
        }
        let expected = brute::tau_lower(&config, rho, state.round(), &kls);
        worst = worst.max((state.tau_lower()? - expected).abs());
        let direct = feedback::tau_lower(rho, config.alpha, brute::beta(&config, state.round()), brute::std(&kls))?;
        worst = worst.max((direct - expected).abs());
    }
    Ok(OracleReport { name: "tau_lower", cases, max_abs_error: worst, mismatches: 0 })
}

fn random_ensemble(rng: &mut ChaCha8Rng, weight_scale: f64) -> Result<RewardEnsemble> {
    let members = (0..3)
        .map(|_| {
            let mut m = Mlp::with_rng(&[11, 8, 8, 1], Activation::LeakyRelu, Activation::Tanh, rng)?;
            m.map_params(|v| v * weight_scale);
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RewardEnsemble::from_members(members, 1e-3, 0))
}

/// Members are small perturbations of one network, so the ensemble mean can
/// be confident enough to flip labels.
fn agreeing_ensemble(rng: &mut ChaCha8Rng, weight_scale: f64) -> Result<RewardEnsemble> {
    let mut base = Mlp::with_rng(&[11, 8, 8, 1], Activation::LeakyRelu, Activation::Tanh, rng)?;
    base.map_params(|v| v * weight_scale);
    let members = (0..3)
        .map(|_| {
            let mut m = base.clone();
            perturb(&mut m, rng, 0.05);
            m
        })
        .collect();
    Ok(RewardEnsemble::from_members(members, 1e-3, 0))
}

fn preference_prob_oracle(cases: usize, rng: &mut ChaCha8Rng) -> Result<OracleReport> {
    let mut worst = 0.0_f64;
    let mut ensemble = random_ensemble(rng, 1.0)?;
    for i in 0..cases {
        if i % 100 == 0 {
            let scale = rng.random_range(0.5..4.0);
            ensemble = random_ensemble(rng, scale)?;
        }
        let h = rng.random_range(1..=50);
        let s0 = reward_segment(rng, h, 2.0);
        let s1 = reward_segment(rng, h, 2.0);
        let m = rng.random_range(0..3);
        let fast = ensemble.preference_prob(m, &s0, &s1)?;
        worst = worst.max((fast - brute::prob_second(&ensemble.members()[m], &s0, &s1)).abs());
    }
    Ok(OracleReport { name: "preference_prob", cases, max_abs_error: worst, mismatches: 0 })
}

fn vle_label_oracle(cases: usize, rng: &mut ChaCha8Rng) -> Result<OracleReport> {
    let config = AdapterConfig { hidden: 32, ..AdapterConfig::default() };
    let mut setups = Vec::new();
    for k in 0..4u64 {
        let enc = BaseEncoders::new(k + 1, rng.random_range(0.0..=1.0))?;
        let mut ad = AdapterStack::new(&config, 4, k)?;
        if k > 0 {
            let (t, i, _) = ad.networks_mut();
            perturb(t, rng, 0.1);
            perturb(i, rng, 0.1);
        }
        setups.push((enc, ad));
    }
    let (mut worst, mut mismatches) = (0.0_f64, 0);
    for i in 0..cases {
        let (enc, ad) = &setups[i % setups.len()];
        let desc = rng.random_range(0..4);
        let h = rng.random_range(1..=8);
        let s0 = reward_segment(rng, h, 1.0);
        // near-duplicates exercise the tie tolerance
        let s1 = if i % 10 == 0 { s0.clone() } else { reward_segment(rng, h, 1.0) };
        let view = VleView::Adapted(enc, ad);
        let (r0, r1) = (view.segment_return(desc, &s0)?, view.segment_return(desc, &s1)?);
        let (b0, b1) = (brute::vle_return(enc, ad, desc, &s0), brute::vle_return(enc, ad, desc, &s1));
        worst = worst.max((r0 - b0).abs()).max((r1 - b1).abs());
        let eps = 1e-6;
        let fast = crate::vle::vle_label(enc, ad, desc, &s0, &s1, eps)?;
        // labels may only differ when the return gap sits within rounding of the tolerance
        if fast != brute::label(b0, b1, eps) && ((b1 - b0).abs() - eps).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    Ok(OracleReport { name: "vle_label", cases, max_abs_error: worst, mismatches })
}

/// Streams random VLE-labelled batches through `partition` and an
/// independent scorer, comparing buckets, flipped labels, KL scores and the
/// running statistics.
fn partition_oracle(cases: usize, rng: &mut ChaCha8Rng) -> Result<OracleReport> {
    let ensemble = agreeing_ensemble(rng, 3.0)?;
    let config = SelectorConfig::default();
    let mut state = SelectorState::new(config.clone())?;
    let mut history: Vec<f64> = Vec::new();
    let mut rho = config.initial_rho;
    let (mut worst, mut mismatches, mut done) = (0.0_f64, 0, 0);
    while done < cases {
        let n = rng.random_range(1..=40).min(cases - done);
        done += n;
        let batch: Vec<LabeledPreference> = (0..n)
            .map(|_| {
                let h = rng.random_range(5..=40);
                LabeledPreference::new(reward_segment(rng, h, 2.0), reward_segment(rng, h, 2.0), random_label(rng), Provenance::Vle)
            })
            .collect();
        let tl = brute::tau_lower(&config, rho, state.round(), &history);
        let tu = config.tau_upper;
        let mut expected = Vec::with_capacity(n);
        for p in &batch {
            let mean_second =
                ensemble.members().iter().map(|m| brute::prob_second(m, &p.seg0, &p.seg1)).sum::<f64>() / 3.0;
            let d = brute::kl(p.label, 1.0 - mean_second);
            expected.push((Arc::as_ptr(&p.seg0), p.label, d, brute::bucket(d, tl, tu)));
        }
        let part = partition(&mut state, &ensemble, batch)?;
        worst = worst.max((part.tau_lower - tl).abs());
        let buckets = [(Bucket::Clean, &part.clean), (Bucket::Flipped, &part.flipped), (Bucket::Uncertain, &part.uncertain)];
        let mut seen = 0;
        for (bucket, items) in buckets {
            for s in items.iter() {
                seen += 1;
                let Some(e) = expected.iter().find(|e| e.0 == Arc::as_ptr(&s.preference.seg0)) else {
                    mismatches += 1;
                    continue;
                };
                worst = worst.max((s.kl - e.2).abs());
                let label_ok = match bucket {
                    Bucket::Flipped => s.preference.label == flip(e.1) && s.preference.provenance == Provenance::Flipped,
                    _ => s.preference.label == e.1,
                };
                if e.3 != bucket || !label_ok {
                    mismatches += 1;
                }
            }
        }
        mismatches += n.abs_diff(seen);
        history.extend(expected.iter().map(|e| e.2));
        worst = worst.max((state.kl_std() - brute::std(&history)).abs());
        let losses: Vec<f64> = (0..rng.random_range(0..4)).map(|_| rng.random_range(0.01..3.0)).collect();
        if let Some(m) = losses.iter().copied().reduce(f64::max) {
            rho = m;
        }
        state.update_rho(&losses);
    }
    Ok(OracleReport { name: "partition", cases, max_abs_error: worst, mismatches })
}

fn flip(label: Label) -> Label {
    match label {
        Label::First => Label::Second,
        Label::Second => Label::First,
        Label::Tie => Label::Tie,
    }
}

/// Central-difference checks (h = 1e-5, every coordinate) of each training
/// loss on networks of at most 1000 parameters.
pub fn gradient_checks(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // Bradley-Terry cross-entropy for one reward member.
    let mut member = Mlp::with_rng(&[11, 16, 16, 1], Activation::LeakyRelu, Activation::Tanh, &mut rng)?;
    perturb(&mut member, &mut rng, 0.05);
    let prefs: Vec<LabeledPreference> = [Label::First, Label::Second, Label::Tie, Label::First]
        .into_iter()
        .map(|l| LabeledPreference::new(reward_segment(&mut rng, 6, 1.0), reward_segment(&mut rng, 6, 1.0), l, Provenance::Oracle))
        .collect();
    let refs: Vec<&LabeledPreference> = prefs.iter().collect();
    let (_, g) = member_loss_and_grad(&member, &refs)?;
    let mut probe = member.clone();
    let err = check_flat(
        &member.flat_params(),
        |p| {
            probe.set_flat_params(p).expect("same shape");
            member_loss_and_grad(&probe, &refs).expect("valid batch").0
        },
        &g.flatten(),
        usize::MAX,
        DEFAULT_STEP,
        0,
    );
    out.push(GradReport { name: "reward preference cross-entropy", max_network_params: member.param_count(), max_rel_error: err });

    // Adapter objectives: preference cross-entropy on cosine returns, and inverse dynamics.
    let enc = BaseEncoders::new(3, 0.5)?;
    let mut ad = AdapterStack::new(&AdapterConfig { hidden: 4, invdyn_hidden: 4, ..AdapterConfig::default() }, 4, 1)?;
    {
        let (t, i, f) = ad.networks_mut();
        perturb(t, &mut rng, 0.2);
        perturb(i, &mut rng, 0.2);
        perturb(f, &mut rng, 0.05);
    }
    let vle_prefs: Vec<LabeledPreference> = [Label::First, Label::Second, Label::Tie]
        .into_iter()
        .map(|l| LabeledPreference::new(reward_segment(&mut rng, 4, 1.0), reward_segment(&mut rng, 4, 1.0), l, Provenance::Oracle))
        .collect();
    let vle_refs: Vec<&LabeledPreference> = vle_prefs.iter().collect();
    let transitions = random_transitions(&mut rng, 5);
    let trans_refs: Vec<&crate::envs::Transition> = transitions.iter().collect();
    let largest = ad.text_adapter().param_count().max(ad.image_adapter().param_count()).max(ad.invdyn_head().param_count());
    for (name, use_prefs, lambda) in [("adapter preference cross-entropy", true, 0.0), ("inverse-dynamics loss", false, 1.0)] {
        let p_refs: &[&LabeledPreference] = if use_prefs { &vle_refs } else { &[] };
        let t_refs: &[&crate::envs::Transition] = if use_prefs { &[] } else { &trans_refs };
        let (_, grads) = ad.finetune_loss_and_grads(&enc, 1, p_refs, t_refs, lambda)?;
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.flatten()).collect();
        let sizes = [ad.text_adapter().param_count(), ad.image_adapter().param_count()];
        let mut probe = ad.clone();
        let err = check_flat(
            &ad.flat_params(),
            |p| {
                let (t, i, f) = probe.networks_mut();
                t.set_flat_params(&p[..sizes[0]]).expect("shape");
                i.set_flat_params(&p[sizes[0]..sizes[0] + sizes[1]]).expect("shape");
                f.set_flat_params(&p[sizes[0] + sizes[1]..]).expect("shape");
                probe.finetune_loss_and_grads(&enc, 1, p_refs, t_refs, lambda).expect("valid batch").0.total
            },
            &analytic,
            usize::MAX,
            DEFAULT_STEP,
            0,
        );
        out.push(GradReport { name, max_network_params: largest, max_rel_error: err });
    }

    // SAC critic, actor and temperature objectives.
    let critic = Mlp::with_rng(&[11, 8, 8, 1], Activation::Relu, Activation::Identity, &mut rng)?;
    let critic2 = Mlp::with_rng(&[11, 8, 8, 1], Activation::Relu, Activation::Identity, &mut rng)?;
    let actor = Mlp::with_rng(&[7, 8, 8, 8], Activation::Relu, Activation::Identity, &mut rng)?;
    let n = 12;
    let states = Array2::from_shape_fn((n, 7), |_| rng.random_range(-1.0..1.0));
    let actions = Array2::from_shape_fn((n, 4), |_| rng.random_range(-0.99..0.99));
    let targets = ndarray::Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0));
    let noise = Array2::from_shape_fn((n, 4), |_| rng.random_range(-2.0..2.0));

    let (_, g) = critic_loss_and_grads(&critic, states.view(), actions.view(), &targets)?;
    let mut probe = critic.clone();
    let err = check_flat(
        &critic.flat_params(),
        |p| {
            probe.set_flat_params(p).expect("shape");
            critic_loss_and_grads(&probe, states.view(), actions.view(), &targets).expect("valid batch").0
        },
        &g.flatten(),
        usize::MAX,
        DEFAULT_STEP,
        0,
    );
    out.push(GradReport { name: "SAC critic TD loss", max_network_params: critic.param_count(), max_rel_error: err });

    let critics = [&critic, &critic2];
    let (_, g, _) = actor_loss_and_grads(&actor, critics, states.view(), noise.view(), 0.2)?;
    let mut probe = actor.clone();
    let err = check_flat(
        &actor.flat_params(),
        |p| {
            probe.set_flat_params(p).expect("shape");
            actor_loss_and_grads(&probe, critics, states.view(), noise.view(), 0.2).expect("valid batch").0
        },
        &g.flatten(),
        usize::MAX,
        DEFAULT_STEP,
        0,
    );
    out.push(GradReport { name: "SAC actor loss", max_network_params: actor.param_count(), max_rel_error: err });

    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let (log_t, mean_logp) = (rng.random_range(-5.0..1.0), rng.random_range(-6.0..3.0));
        let (_, g) = temperature_loss_and_grad(log_t, mean_logp, -4.0);
        let err = check_flat(&[log_t], |p| temperature_loss_and_grad(p[0], mean_logp, -4.0).0, &[g], 1, DEFAULT_STEP, 0);
        worst = worst.max(err);
    }
    out.push(GradReport { name: "SAC temperature loss", max_network_params: 1, max_rel_error: worst });
    Ok(out)
}

fn random_transitions(rng: &mut ChaCha8Rng, n: usize) -> Vec<crate::envs::Transition> {
    let env = crate::envs::Env::for_task(crate::envs::TaskId::PushToTarget, 1);
    let mut s = env.reset(rng.random());
    (0..n)
        .map(|_| {
            let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = env.step(&s, &a).expect("valid action");
            s = t.next_state;
            t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_kl_matches_spec_values() {
        assert!((brute::kl(Label::First, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((brute::kl(Label::First, 1e-4) - 4.0 * std::f64::consts::LN_10).abs() < 1e-9);
        assert_eq!(brute::kl(Label::Tie, 0.5), 0.0);
    }

    #[test]
    fn partition_oracle_reaches_every_bucket() {
        // the oracle is only meaningful if all three rules fire
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ensemble = agreeing_ensemble(&mut rng, 3.0).unwrap();
        let mut state = SelectorState::new(SelectorConfig::default()).unwrap();
        let batch: Vec<LabeledPreference> = (0..300)
            .map(|_| LabeledPreference::new(reward_segment(&mut rng, 40, 2.0), reward_segment(&mut rng, 40, 2.0), random_label(&mut rng), Provenance::Vle))
            .collect();
        let part = partition(&mut state, &ensemble, batch).unwrap();
        assert!(!part.clean.is_empty() && !part.flipped.is_empty() && !part.uncertain.is_empty(), "{} {} {}", part.clean.len(), part.flipped.len(), part.uncertain.len());
    }

    #[test]
    fn small_oracle_run_passes() {
        for r in formula_oracles(50, 1).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn gradient_suite_passes() {
        for r in gradient_checks(3).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
