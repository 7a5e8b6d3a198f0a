//! Planar manipulation tasks with a dense ground-truth reward, a latched
//! success predicate and a synthetic observation-feature channel.
//!
//! State vector layout (length [`STATE_DIM`]): hand xy, object xy, target xy, grasp.

use std::cell::Cell;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::Segment;

pub const STATE_DIM: usize = 7;
pub const OBS_DIM: usize = 32;
pub const RELEVANT_DIM: usize = 16;
pub const ACTION_DIM: usize = 4;

/// Hand displacement per unit action per step.
pub const HAND_SPEED: f64 = 0.1;
pub const CONTACT_RADIUS: f64 = 0.15;
pub const HAND_DISTANCE_WEIGHT: f64 = 0.1;
pub const SUCCESS_BONUS: f64 = 1.0;
/// Horizontal track limits for the sliding tasks.
pub const SLIDE_TRACK: (f64, f64) = (-0.8, 0.8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Reach,
    PushToTarget,
    SlideOpen,
    SlideClose,
}

impl TaskId {
    pub const ALL: [TaskId; 4] =
        [TaskId::Reach, TaskId::PushToTarget, TaskId::SlideOpen, TaskId::SlideClose];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Reach => "reach",
            TaskId::PushToTarget => "push_to_target",
            TaskId::SlideOpen => "slide_open",
            TaskId::SlideClose => "slide_close",
        }
    }

    /// Token standing in for the task's language description.
    pub fn description_id(self) -> usize {
        match self {
            TaskId::Reach => 0,
            TaskId::PushToTarget => 1,
            TaskId::SlideOpen => 2,
            TaskId::SlideClose => 3,
        }
    }

    fn is_slide(self) -> bool {
        matches!(self, TaskId::SlideOpen | TaskId::SlideClose)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub action_dim: usize,
    pub episode_length: usize,
    pub success_radius: f64,
    pub description_id: usize,
}

impl TaskSpec {
    pub fn new(task_id: TaskId) -> Self {
        TaskSpec {
            task_id,
            action_dim: ACTION_DIM,
            episode_length: 200,
            success_radius: 0.1,
            description_id: task_id.description_id(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.success_radius.is_nan() || self.success_radius <= 0.0 {
            return Err(Error::Config("success_radius must be positive".into()));
        }
        if self.action_dim < 3 {
            return Err(Error::Config("action_dim must be at least 3 (move xy + grasp)".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Config("episode_length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub hand: [f64; 2],
    pub object: [f64; 2],
    pub target: [f64; 2],
    pub grasp: f64,
    pub step_index: usize,
    /// Set once the object has come within the success radius this episode.
    pub success_latched: bool,
}

impl EnvState {
    pub fn to_vector(&self) -> [f64; STATE_DIM] {
        [
            self.hand[0],
            self.hand[1],
            self.object[0],
            self.object[1],
            self.target[0],
            self.target[1],
            self.grasp,
        ]
    }

    pub fn object_target_distance(&self) -> f64 {
        dist(self.object, self.target)
    }

    pub fn hand_object_distance(&self) -> f64 {
        dist(self.hand, self.object)
    }

    pub fn in_bounds(&self) -> bool {
        [self.hand, self.object, self.target]
            .iter()
            .flatten()
            .all(|v| (-1.0..=1.0).contains(v))
            && (0.0..=1.0).contains(&self.grasp)
    }
}

/// Which part of the system is reading a ground-truth reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardAccess {
    /// The scripted oracle answering a preference query.
    Oracle,
    /// Policy evaluation and reporting.
    Evaluation,
    /// Dense-reward training (only legitimate for the ground-truth baseline).
    Training,
    Other,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AccessCounts {
    pub oracle: u64,
    pub evaluation: u64,
    pub training: u64,
    pub other: u64,
}

impl AccessCounts {
    /// Reads that happened outside the oracle and evaluation.
    pub fn leaked(&self) -> u64 {
        self.training + self.other
    }
}

thread_local! {
    static ACCESS: Cell<AccessCounts> = const { Cell::new(AccessCounts { oracle: 0, evaluation: 0, training: 0, other: 0 }) };
}

/// Per-thread audit of ground-truth reward reads.
pub mod audit {
    use super::{AccessCounts, ACCESS};

    pub fn reset() {
        ACCESS.with(|c| c.set(AccessCounts::default()));
    }

    pub fn snapshot() -> AccessCounts {
        ACCESS.with(|c| c.get())
    }
}

/// A ground-truth reward value whose every read is counted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth(f64);

impl GroundTruth {
    pub(crate) fn new(v: f64) -> Self {
        GroundTruth(v)
    }

    pub fn read(&self, access: RewardAccess) -> f64 {
        ACCESS.with(|c| {
            let mut counts = c.get();
            match access {
                RewardAccess::Oracle => counts.oracle += 1,
                RewardAccess::Evaluation => counts.evaluation += 1,
                RewardAccess::Training => counts.training += 1,
                RewardAccess::Other => counts.other += 1,
            }
            c.set(counts);
        });
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: EnvState,
    pub action: Vec<f64>,
    pub next_state: EnvState,
    pub true_reward: GroundTruth,
    /// Object within the success radius after this step.
    pub success: bool,
    pub obs_features: Vec<f64>,
    pub next_obs_features: Vec<f64>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Dense reward of a state: object-target distance, a small hand-object term
/// and a bonus while the object is within the success radius.
pub fn dense_reward(spec: &TaskSpec, s: &EnvState) -> f64 {
    let d = s.object_target_distance();
    let bonus = if d < spec.success_radius { SUCCESS_BONUS } else { 0.0 };
    -d - HAND_DISTANCE_WEIGHT * s.hand_object_distance() + bonus
}

/// Fixed projections producing the 32-dimensional observation features.
#[derive(Debug, Clone)]
pub struct FeatureRenderer {
    gap_seed: u64,
    relevant_w: Vec<[f64; STATE_DIM]>,
    relevant_phase: Vec<f64>,
    parity_coef: [f64; 4],
    phase_freq: [f64; 4],
    phase_offset: [f64; 4],
    noise_w: Vec<[f64; STATE_DIM]>,
    constants: [f64; 4],
}

/// Angular scale of the relevant projections; keeps each coordinate's
/// quadrature pair on less than half a circle over the arena.
const RELEVANT_SCALE: f64 = 0.9;

impl FeatureRenderer {
    pub fn new(gap_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(gap_seed ^ 0x5eed_f00d);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        // Quadrature pairs over each state coordinate.
        let mut relevant_w: Vec<[f64; STATE_DIM]> = Vec::with_capacity(RELEVANT_DIM);
        let mut relevant_phase = Vec::with_capacity(RELEVANT_DIM);
        for i in 0..STATE_DIM {
            let phase = PI * normal();
            let mut w = [0.0; STATE_DIM];
            w[i] = RELEVANT_SCALE;
            relevant_w.push(w);
            relevant_phase.push(phase);
            relevant_w.push(w);
            relevant_phase.push(phase + 0.5 * PI);
        }
        // One more quadrature pair along a random object-minus-target direction.
        let angle = PI * normal();
        let (c, sn) = (0.5 * RELEVANT_SCALE * angle.cos(), 0.5 * RELEVANT_SCALE * angle.sin());
        let w = [0.0, 0.0, c, sn, -c, -sn, 0.0];
        let phase = PI * normal();
        relevant_w.push(w);
        relevant_phase.push(phase);
        relevant_w.push(w);
        relevant_phase.push(phase + 0.5 * PI);
        let parity_coef = std::array::from_fn(|_| 0.8 * normal());
        let phase_freq = std::array::from_fn(|i| 0.5 + i as f64 * 0.5);
        let phase_offset = std::array::from_fn(|_| PI * normal());
        let noise_w = (0..4).map(|_| std::array::from_fn(|_| 40.0 * normal())).collect();
        let constants = std::array::from_fn(|_| normal());
        FeatureRenderer {
            gap_seed,
            relevant_w,
            relevant_phase,
            parity_coef,
            phase_freq,
            phase_offset,
            noise_w,
            constants,
        }
    }

    pub fn gap_seed(&self) -> u64 {
        self.gap_seed
    }

    /// First [`RELEVANT_DIM`] entries depend only on (hand, object, target, grasp);
    /// the rest are distractors driven by step parity, step phase, a
    /// deterministic pseudo-noise projection and constant channels.
    pub fn render(&self, spec: &TaskSpec, s: &EnvState) -> Vec<f64> {
        let v = s.to_vector();
        let mut out = Vec::with_capacity(OBS_DIM);
        for (w, ph) in self.relevant_w.iter().zip(&self.relevant_phase) {
            let z: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + ph;
            out.push(z.sin());
        }
        let parity = if s.step_index.is_multiple_of(2) { 1.0 } else { -1.0 };
        for c in self.parity_coef {
            out.push(c * parity);
        }
        let frac = s.step_index as f64 / spec.episode_length.max(1) as f64;
        for (f, o) in self.phase_freq.iter().zip(&self.phase_offset) {
            out.push((2.0 * PI * f * frac + o).sin());
        }
        for w in &self.noise_w {
            let z: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + 7.3 * s.step_index as f64;
            out.push(z.sin());
        }
        out.extend_from_slice(&self.constants);
        debug_assert_eq!(out.len(), OBS_DIM);
        out
    }
}

/// A task instance: spec plus the feature renderer.
#[derive(Debug, Clone)]
pub struct Env {
    pub spec: TaskSpec,
    pub renderer: FeatureRenderer,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}

impl Env {
    pub fn new(spec: TaskSpec, gap_seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Env { spec, renderer: FeatureRenderer::new(gap_seed) })
    }

    pub fn for_task(task: TaskId, gap_seed: u64) -> Self {
        Self::new(TaskSpec::new(task), gap_seed).expect("default specs are valid")
    }

    /// Hand, object and target drawn from disjoint sub-regions of the arena.
    pub fn reset(&self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let (hand, object, target) = match self.spec.task_id {
            TaskId::Reach => {
                let hand = [uniform(r, -0.9, -0.5), uniform(r, -0.5, 0.5)];
                let target = [uniform(r, 0.3, 0.8), uniform(r, -0.5, 0.5)];
                (hand, hand, target)
            }
            TaskId::PushToTarget => {
                let object = [uniform(r, -0.4, -0.2), uniform(r, -0.3, 0.3)];
                let hand = [uniform(r, -0.65, -0.5), object[1] + uniform(r, -0.1, 0.1)];
                (hand, object, [uniform(r, 0.3, 0.6), uniform(r, -0.3, 0.3)])
            }
            TaskId::SlideOpen => {
                let object = [uniform(r, -0.5, -0.3), 0.0];
                let hand = [object[0] + uniform(r, -0.15, 0.15), uniform(r, 0.15, 0.3)];
                (hand, object, [uniform(r, 0.3, 0.5), 0.0])
            }
            TaskId::SlideClose => {
                let object = [uniform(r, 0.3, 0.5), 0.0];
                let hand = [object[0] + uniform(r, -0.15, 0.15), uniform(r, -0.3, -0.15)];
                (hand, object, [uniform(r, -0.5, -0.3), 0.0])
            }
        };
        EnvState { hand, object, target, grasp: 0.0, step_index: 0, success_latched: false }
    }

    pub fn render_features(&self, s: &EnvState) -> Vec<f64> {
        self.renderer.render(&self.spec, s)
    }

    pub fn is_terminal(&self, s: &EnvState) -> bool {
        s.step_index >= self.spec.episode_length
    }

    /// Pure kinematic update without rendering.
    pub fn next_state(&self, s: &EnvState, action: &[f64]) -> Result<EnvState> {
        if action.len() != self.spec.action_dim {
            return Err(Error::DimensionMismatch { expected: self.spec.action_dim, actual: action.len() });
        }
        if self.is_terminal(s) {
            return Err(Error::Invariant("step on a terminal state".into()));
        }
        let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let old_hand = s.hand;
        let hand = [
            (old_hand[0] + HAND_SPEED * a[0]).clamp(-1.0, 1.0),
            (old_hand[1] + HAND_SPEED * a[1]).clamp(-1.0, 1.0),
        ];
        let grasp = 0.5 * (a[2] + 1.0);
        let engaged = grasp > 0.5 && dist(old_hand, s.object) < CONTACT_RADIUS;
        let moved = [hand[0] - old_hand[0], hand[1] - old_hand[1]];
        let object = match self.spec.task_id {
            TaskId::Reach => hand,
            TaskId::PushToTarget if engaged => {
                [(s.object[0] + moved[0]).clamp(-1.0, 1.0), (s.object[1] + moved[1]).clamp(-1.0, 1.0)]
            }
            t if t.is_slide() && engaged => {
                [(s.object[0] + moved[0]).clamp(SLIDE_TRACK.0, SLIDE_TRACK.1), s.object[1]]
            }
            _ => s.object,
        };
        let mut next = EnvState {
            hand,
            object,
            target: s.target,
            grasp,
            step_index: s.step_index + 1,
            success_latched: s.success_latched,
        };
        if next.object_target_distance() < self.spec.success_radius {
            next.success_latched = true;
        }
        Ok(next)
    }

    pub fn step(&self, s: &EnvState, action: &[f64]) -> Result<Transition> {
        let next = self.next_state(s, action)?;
        let reward = dense_reward(&self.spec, &next);
        Ok(Transition {
            state: *s,
            action: action.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            next_state: next,
            true_reward: GroundTruth::new(reward),
            success: next.object_target_distance() < self.spec.success_radius,
            obs_features: self.render_features(s),
            next_obs_features: self.render_features(&next),
        })
    }

    /// Proportional controller: go to the object, grasp, carry it to the target.
    pub fn scripted_action(&self, s: &EnvState) -> Vec<f64> {
        let toward = |from: [f64; 2], to: [f64; 2]| {
            let g = 1.0 / HAND_SPEED;
            [((to[0] - from[0]) * g).clamp(-1.0, 1.0), ((to[1] - from[1]) * g).clamp(-1.0, 1.0)]
        };
        let mut a = vec![0.0; self.spec.action_dim];
        let (dir, grasp) = if self.spec.task_id == TaskId::Reach {
            (toward(s.hand, s.target), -1.0)
        } else if s.hand_object_distance() < 0.5 * CONTACT_RADIUS {
            // carry: move so the object follows
            let goal = [s.target[0], if self.spec.task_id.is_slide() { s.hand[1] } else { s.target[1] }];
            let mut d = toward(s.object, goal);
            if self.spec.task_id.is_slide() {
                d[1] = 0.0;
            }
            (d, 1.0)
        } else {
            (toward(s.hand, s.object), -1.0)
        };
        a[0] = dir[0];
        a[1] = dir[1];
        a[2] = grasp;
        a
    }
}

/// Sum of ground-truth rewards over a segment, read under the given access tag.
pub fn segment_true_return(segment: &Segment, access: RewardAccess) -> f64 {
    segment.true_rewards().iter().map(|r| r.read(access)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_action(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..ACTION_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }

    #[test]
    fn reset_is_deterministic_and_in_bounds() {
        for task in TaskId::ALL {
            let env = Env::for_task(task, 3);
            assert_eq!(env.reset(42), env.reset(42));
            for seed in 0..10_000 {
                let s = env.reset(seed);
                assert!(s.in_bounds(), "{task} seed {seed}");
                assert_eq!(s.step_index, 0);
            }
        }
    }

    #[test]
    fn reach_object_coincides_with_hand() {
        let env = Env::for_task(TaskId::Reach, 0);
        let s = env.reset(9);
        assert_eq!(s.object, s.hand);
        let t = env.step(&s, &[1.0, 0.5, 0.0, 0.0]).unwrap();
        assert_eq!(t.next_state.object, t.next_state.hand);
    }

    #[test]
    fn solved_state_gets_full_bonus() {
        let env = Env::for_task(TaskId::PushToTarget, 0);
        let mut s = env.reset(1);
        s.object = s.target;
        s.hand = s.target;
        let t = env.step(&s, &[0.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(t.true_reward.read(RewardAccess::Other), 1.0);
        assert!(t.success && t.next_state.success_latched);
    }

    #[test]
    fn zero_action_keeps_positions() {
        let env = Env::for_task(TaskId::PushToTarget, 0);
        let s = env.reset(5);
        let t = env.step(&s, &[0.0; 4]).unwrap();
        assert_eq!(t.next_state.hand, s.hand);
        assert_eq!(t.next_state.object, s.object);
        let want = -s.object_target_distance() - 0.1 * s.hand_object_distance();
        assert_eq!(t.true_reward.read(RewardAccess::Other), want);
    }

    #[test]
    fn action_dimension_checked() {
        let env = Env::for_task(TaskId::Reach, 0);
        let s = env.reset(0);
        assert!(matches!(env.step(&s, &[0.0; 3]), Err(Error::DimensionMismatch { .. })));
    }

    // Independent restatement of the kinematics used as a dual-implementation oracle.
    fn replay_kinematics(task: TaskId, s0: EnvState, actions: &[Vec<f64>]) -> Vec<f64> {
        let (mut h, mut o, t) = (s0.hand, s0.object, s0.target);
        let mut rewards = Vec::new();
        for a in actions {
            let ax = a[0].clamp(-1.0, 1.0) * 0.1;
            let ay = a[1].clamp(-1.0, 1.0) * 0.1;
            let g = a[2].clamp(-1.0, 1.0) > 0.0;
            let nh = [(h[0] + ax).clamp(-1.0, 1.0), (h[1] + ay).clamp(-1.0, 1.0)];
            let contact = ((h[0] - o[0]).hypot(h[1] - o[1])) < 0.15;
            match task {
                TaskId::Reach => o = nh,
                TaskId::PushToTarget => {
                    if g && contact {
                        o = [(o[0] + nh[0] - h[0]).clamp(-1.0, 1.0), (o[1] + nh[1] - h[1]).clamp(-1.0, 1.0)];
                    }
                }
                _ => {
                    if g && contact {
                        o[0] = (o[0] + nh[0] - h[0]).clamp(-0.8, 0.8);
                    }
                }
            }
            h = nh;
            let d = (o[0] - t[0]).hypot(o[1] - t[1]);
            let r = -d - 0.1 * (h[0] - o[0]).hypot(h[1] - o[1]) + if d < 0.1 { 1.0 } else { 0.0 };
            rewards.push(r);
        }
        rewards
    }

    #[test]
    fn random_rollout_matches_dual_kinematics() {
        for task in TaskId::ALL {
            let env = Env::for_task(task, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut s = env.reset(3);
            let s0 = s;
            let mut actions = Vec::new();
            let mut rewards = Vec::new();
            for _ in 0..200 {
                // bias toward grasping near the object so carries happen
                let mut a = random_action(&mut rng);
                if s.hand_object_distance() < 0.3 {
                    a[2] = 1.0;
                }
                let t = env.step(&s, &a).unwrap();
                rewards.push(t.true_reward.read(RewardAccess::Other));
                actions.push(a);
                s = t.next_state;
            }
            assert!(env.is_terminal(&s));
            let want = replay_kinematics(task, s0, &actions);
            for (g, w) in rewards.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{task}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn reward_bounded_and_success_latches() {
        let bound = -2.0 * 8f64.sqrt() - 0.1 * 8f64.sqrt();
        for task in TaskId::ALL {
            let env = Env::for_task(task, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(task.description_id() as u64);
            for ep in 0..20 {
                let mut s = env.reset(ep);
                let mut latched = false;
                while !env.is_terminal(&s) {
                    let a = if ep % 2 == 0 { env.scripted_action(&s) } else { random_action(&mut rng) };
                    let t = env.step(&s, &a).unwrap();
                    let r = t.true_reward.read(RewardAccess::Other);
                    assert!(r.is_finite() && r >= bound && r <= 1.0);
                    if t.success {
                        assert!(t.next_state.object_target_distance() < env.spec.success_radius);
                    }
                    assert!(!latched || t.next_state.success_latched);
                    latched = t.next_state.success_latched;
                    assert!(t.next_state.in_bounds());
                    s = t.next_state;
                }
            }
        }
    }

    #[test]
    fn scripted_controller_solves_every_task() {
        for task in TaskId::ALL {
            let env = Env::for_task(task, 0);
            for seed in 0..500 {
                let mut s = env.reset(seed);
                let mut steps = 0;
                while !s.success_latched {
                    assert!(steps < 150, "{task} seed {seed} not solved in 150 steps");
                    s = env.next_state(&s, &env.scripted_action(&s)).unwrap();
                    steps += 1;
                }
            }
        }
    }

    #[test]
    fn features_deterministic_and_injective() {
        let env = Env::for_task(TaskId::PushToTarget, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for i in 0..10_000u64 {
            let mut s = env.reset(i);
            s.step_index = rng.random_range(0..200);
            s.grasp = rng.random_range(0.0..=1.0);
            let f = env.render_features(&s);
            assert_eq!(f.len(), OBS_DIM);
            assert_eq!(f, env.render_features(&s));
            seen.push(f);
        }
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(seen.windows(2).all(|w| w[0] != w[1]));
    }

    #[test]
    fn relevant_features_track_state_distance() {
        let env = Env::for_task(TaskId::PushToTarget, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut random_state = || EnvState {
            hand: [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
            object: [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
            target: [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
            grasp: rng.random_range(0.0..=1.0),
            step_index: rng.random_range(0..200),
            success_latched: false,
        };
        let mut state_d = Vec::new();
        let mut feat_d = Vec::new();
        for _ in 0..1000 {
            let (a, b) = (random_state(), random_state());
            let (va, vb) = (a.to_vector(), b.to_vector());
            state_d.push(va.iter().zip(&vb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
            let (fa, fb) = (env.render_features(&a), env.render_features(&b));
            feat_d.push(
                fa[..RELEVANT_DIM]
                    .iter()
                    .zip(&fb[..RELEVANT_DIM])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
        let rho = crate::stats::spearman(&state_d, &feat_d);
        assert!(rho >= 0.9, "spearman {rho}");
    }
}
