//! Data generators shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roved::envs::{segment_true_return, Env, RewardAccess, Transition};
use roved::reward::{LabeledPreference, Provenance, Segment};
use roved::vle::label_from_returns;

pub const SEGMENT_LEN: usize = 50;
pub const EPISODE_LEN: usize = 200;

/// One episode of the scripted controller with uniform action noise of the
/// given amplitude. Amplitude 0 is the expert; around 2 it is nearly random.
pub fn noisy_episode(env: &Env, noise: f64, rng: &mut ChaCha8Rng) -> Vec<Transition> {
    let mut s = env.reset(rng.random());
    let mut out = Vec::with_capacity(EPISODE_LEN);
    for _ in 0..EPISODE_LEN {
        let mut a = env.scripted_action(&s);
        for v in &mut a {
            *v += noise * rng.random_range(-1.0..1.0);
        }
        let t = env.step(&s, &a).expect("valid action");
        s = t.next_state;
        out.push(t);
    }
    out
}

/// Segments of mixed quality: each from its own episode with a random noise level.
pub fn mixed_segments(env: &Env, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Arc<Segment>>, Vec<Transition>) {
    let mut segments = Vec::with_capacity(n);
    let mut transitions = Vec::new();
    for i in 0..n {
        let noise = rng.random_range(0.0..2.0);
        let ep = noisy_episode(env, noise, rng);
        let start = rng.random_range(0..=EPISODE_LEN - SEGMENT_LEN);
        segments.push(Arc::new(Segment::from_transitions(&ep[start..start + SEGMENT_LEN], i as u64).expect("non-empty")));
        transitions.extend(ep.into_iter().step_by(10));
    }
    (segments, transitions)
}

/// Pairs of mixed-quality segments labelled by true returns.
pub fn oracle_pairs(env: &Env, n: usize, rng: &mut ChaCha8Rng) -> (Vec<LabeledPreference>, Vec<Transition>) {
    let (segments, transitions) = mixed_segments(env, 2 * n, rng);
    let prefs = segments
        .chunks(2)
        .map(|c| {
            let r0 = segment_true_return(&c[0], RewardAccess::Oracle);
            let r1 = segment_true_return(&c[1], RewardAccess::Oracle);
            LabeledPreference::new(c[0].clone(), c[1].clone(), label_from_returns(r0, r1, 1e-6), Provenance::Oracle)
        })
        .collect();
    (prefs, transitions)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
