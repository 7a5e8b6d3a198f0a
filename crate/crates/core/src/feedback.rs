//! KL-based label filtering, budget-capped oracle escalation and the scripted oracle.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{segment_true_return, RewardAccess};
use crate::error::{Error, Result};
use crate::reward::{LabeledPreference, Label, Provenance, RewardEnsemble, Segment, PROB_EPS};
use crate::stats::RunningStats;

/// `KL(y || p)` with `p = P[σ0 ≻ σ1]`; `0 ln 0 = 0`, `p` clamped away from 0 and 1.
pub fn kl_label(label: Label, p_first: f64) -> f64 {
    let p0 = p_first.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let p = [p0, 1.0 - p0];
    label
        .probs()
        .iter()
        .zip(p)
        .filter(|(&y, _)| y > 0.0)
        .map(|(&y, pi)| y * (y / pi).ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub alpha: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Per-round decay of the uncertainty weight.
    pub beta_decay: f64,
    pub tau_upper: f64,
    pub initial_rho: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            alpha: 0.5,
            beta_min: 1.0,
            beta_max: 3.0,
            beta_decay: 1.0 / 300.0,
            tau_upper: 3.0 * std::f64::consts::LN_10,
            initial_rho: std::f64::consts::LN_2,
        }
    }
}

/// Thresholding state carried across feedback rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorState {
    config: SelectorConfig,
    rho: f64,
    kl_stats: RunningStats,
    round: u64,
}

impl SelectorState {
    pub fn new(config: SelectorConfig) -> Result<Self> {
        if config.initial_rho.is_nan() || config.initial_rho <= 0.0 {
            return Err(Error::InvalidRho(config.initial_rho));
        }
        Ok(SelectorState { rho: config.initial_rho, config, kl_stats: RunningStats::default(), round: 0 })
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Standard deviation of every KL value scored so far.
    pub fn kl_std(&self) -> f64 {
        self.kl_stats.std_dev()
    }

    pub fn beta_t(&self) -> f64 {
        beta_t(&self.config, self.round)
    }

    pub fn tau_lower(&self) -> Result<f64> {
        tau_lower(self.rho, self.config.alpha, self.beta_t(), self.kl_std())
    }

    pub fn tau_upper(&self) -> f64 {
        self.config.tau_upper
    }

    pub fn observe_kl(&mut self, kl: f64) {
        self.kl_stats.push(kl);
    }

    /// `ρ` becomes the largest per-sample loss (kept when the list is empty);
    /// the round counter always advances.
    pub fn update_rho(&mut self, per_sample_losses: &[f64]) {
        if let Some(max) = per_sample_losses.iter().copied().filter(|l| l.is_finite()).reduce(f64::max) {
            self.rho = max.max(f64::MIN_POSITIVE);
        }
        self.round += 1;
    }
}

pub fn beta_t(config: &SelectorConfig, round: u64) -> f64 {
    (config.beta_max - config.beta_decay * round as f64).max(config.beta_min)
}

/// `-ln ρ + αρ + β s_KL`
pub fn tau_lower(rho: f64, alpha: f64, beta: f64, kl_std: f64) -> Result<f64> {
    if rho.is_nan() || rho <= 0.0 {
        return Err(Error::InvalidRho(rho));
    }
    Ok(-rho.ln() + alpha * rho + beta * kl_std)
}

/// Where a scored sample lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    Clean,
    Flipped,
    Uncertain,
}

/// Clean wins below `tau_lower`; flipping needs `d > tau_upper` and `d >= tau_lower`.
pub fn classify(kl: f64, tau_lower: f64, tau_upper: f64) -> Bucket {
    if kl < tau_lower {
        Bucket::Clean
    } else if kl > tau_upper {
        Bucket::Flipped
    } else {
        Bucket::Uncertain
    }
}

#[derive(Debug, Clone)]
pub struct ScoredPreference {
    pub preference: LabeledPreference,
    pub kl: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub clean: Vec<ScoredPreference>,
    /// Labels already replaced by their complement.
    pub flipped: Vec<ScoredPreference>,
    pub uncertain: Vec<ScoredPreference>,
    pub tau_lower: f64,
    pub tau_upper: f64,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.clean.len() + self.flipped.len() + self.uncertain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scores every label against the ensemble, splits the batch with the current
/// thresholds, then folds the scores into the running KL statistics.
pub fn partition(state: &mut SelectorState, ensemble: &RewardEnsemble, batch: Vec<LabeledPreference>) -> Result<Partition> {
    let pairs: Vec<(&Segment, &Segment)> = batch.iter().map(|p| (&*p.seg0, &*p.seg1)).collect();
    let p_second = ensemble.mean_preference_probs(&pairs)?;
    let kls: Vec<f64> = batch.iter().zip(&p_second).map(|(p, &p1)| kl_label(p.label, 1.0 - p1)).collect();
    partition_scored(state, batch, &kls)
}

/// [`partition`] with precomputed KL scores.
pub fn partition_scored(state: &mut SelectorState, batch: Vec<LabeledPreference>, kls: &[f64]) -> Result<Partition> {
    if batch.len() != kls.len() {
        return Err(Error::DimensionMismatch { expected: batch.len(), actual: kls.len() });
    }
    let tau_lower = state.tau_lower()?;
    let tau_upper = state.tau_upper();
    let mut out = Partition { tau_lower, tau_upper, ..Default::default() };
    for (mut preference, &kl) in batch.into_iter().zip(kls) {
        match classify(kl, tau_lower, tau_upper) {
            Bucket::Clean => out.clean.push(ScoredPreference { preference, kl }),
            Bucket::Flipped => {
                preference.label = preference.label.flipped();
                preference.provenance = Provenance::Flipped;
                out.flipped.push(ScoredPreference { preference, kl });
            }
            Bucket::Uncertain => out.uncertain.push(ScoredPreference { preference, kl }),
        }
    }
    for &d in kls {
        state.observe_kl(d);
    }
    Ok(out)
}

/// Oracle query accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetLedger {
    total: usize,
    used: usize,
    per_round_cap: usize,
}

impl BudgetLedger {
    /// The per-round cap is a quarter of the pairs sampled each round, rounded up.
    pub fn new(total: usize, pairs_per_round: usize) -> Self {
        BudgetLedger { total, used: 0, per_round_cap: pairs_per_round.div_ceil(4) }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn used(&self) -> usize {
        self.used
    }

    pub fn remaining(&self) -> usize {
        self.total - self.used
    }

    pub fn per_round_cap(&self) -> usize {
        self.per_round_cap
    }

    pub fn is_exhausted(&self) -> bool {
        self.used >= self.total
    }

    pub fn charge(&mut self) -> Result<()> {
        if self.used >= self.total {
            return Err(Error::BudgetExhausted { used: self.used, total: self.total });
        }
        self.used += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    #[default]
    Uniform,
    MaxKl,
}

/// Splits `uncertain` into (selected, rest); the selection size is
/// `min(|uncertain|, per-round cap, remaining budget)`.
pub fn select_for_oracle<R: Rng + ?Sized>(
    mut uncertain: Vec<ScoredPreference>,
    ledger: &BudgetLedger,
    rule: SelectionRule,
    rng: &mut R,
) -> (Vec<ScoredPreference>, Vec<ScoredPreference>) {
    let k = uncertain.len().min(ledger.per_round_cap()).min(ledger.remaining());
    match rule {
        SelectionRule::Uniform => {
            let mut picked = index::sample(rng, uncertain.len(), k).into_vec();
            picked.sort_unstable();
            let mut selected = Vec::with_capacity(k);
            for &i in picked.iter().rev() {
                selected.push(uncertain.swap_remove(i));
            }
            selected.reverse();
            (selected, uncertain)
        }
        SelectionRule::MaxKl => {
            uncertain.sort_by(|a, b| b.kl.total_cmp(&a.kl));
            let rest = uncertain.split_off(k);
            (uncertain, rest)
        }
    }
}

/// Compares ground-truth segment returns; charges one query.
pub fn oracle_label(seg0: &Segment, seg1: &Segment, ledger: &mut BudgetLedger, tie_eps: f64) -> Result<Label> {
    ledger.charge()?;
    let r0 = segment_true_return(seg0, RewardAccess::Oracle);
    let r1 = segment_true_return(seg1, RewardAccess::Oracle);
    Ok(if r0 > r1 + tie_eps {
        Label::First
    } else if r1 > r0 + tie_eps {
        Label::Second
    } else {
        Label::Tie
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn seg(rewards: &[f64]) -> Arc<Segment> {
        let h = rewards.len();
        Arc::new(Segment::from_parts(1, Array2::zeros((h, 2)), Array2::zeros((h, 1)), rewards.to_vec()).unwrap())
    }

    fn pref(label: Label) -> LabeledPreference {
        LabeledPreference::new(seg(&[0.0]), seg(&[1.0]), label, Provenance::Vle)
    }

    fn scored(n: usize) -> Vec<ScoredPreference> {
        (0..n).map(|i| ScoredPreference { preference: pref(Label::First), kl: i as f64 }).collect()
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_label(Label::Tie, 0.5), 0.0);
        assert!((kl_label(Label::First, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        let d = kl_label(Label::First, 1e-4);
        assert!((d - 4.0 * std::f64::consts::LN_10).abs() < 1e-12);
        assert!(d > SelectorConfig::default().tau_upper);
        assert!((kl_label(Label::Second, 1.0) - (1.0 / PROB_EPS).ln()).abs() < 1e-6);
    }

    #[test]
    fn beta_schedule() {
        let c = SelectorConfig::default();
        assert_eq!(beta_t(&c, 0), 3.0);
        assert!((beta_t(&c, 300) - 2.0).abs() < 1e-12);
        assert_eq!(beta_t(&c, 10_000), 1.0);
    }

    #[test]
    fn tau_lower_values() {
        assert!((tau_lower(0.1, 0.5, 3.0, 0.0).unwrap() - (-(0.1f64).ln() + 0.05)).abs() < 1e-12);
        assert!((tau_lower(1.0, 0.5, 2.0, 0.5).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(tau_lower(0.0, 0.5, 1.0, 0.0), Err(Error::InvalidRho(_))));
        assert!(matches!(tau_lower(-1.0, 0.5, 1.0, 0.0), Err(Error::InvalidRho(_))));
        let s = SelectorState::new(SelectorConfig::default()).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((s.tau_lower().unwrap() - (-ln2.ln() + 0.5 * ln2)).abs() < 1e-15);
        assert!(SelectorState::new(SelectorConfig { initial_rho: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn rho_updates() {
        let mut s = SelectorState::new(SelectorConfig::default()).unwrap();
        s.update_rho(&[0.1, 0.4, 0.2]);
        assert_eq!(s.rho(), 0.4);
        assert_eq!(s.round(), 1);
        s.update_rho(&[]);
        assert_eq!(s.rho(), 0.4);
        assert_eq!(s.round(), 2);
        let want = -(0.4f64).ln() + 0.5 * 0.4 + s.beta_t() * s.kl_std();
        assert_eq!(s.tau_lower().unwrap(), want);
    }

    #[test]
    fn confident_flip_and_clean() {
        let mut s = SelectorState::new(SelectorConfig::default()).unwrap();
        let batch = vec![pref(Label::First), pref(Label::Second), pref(Label::First)];
        // P[σ0 ≻ σ1] per sample: agree, agree, strongly disagree
        let kls = [kl_label(Label::First, 0.99), kl_label(Label::Second, 0.01), kl_label(Label::First, 1e-4)];
        let part = partition_scored(&mut s, batch, &kls).unwrap();
        assert_eq!(part.len(), 3);
        assert_eq!(part.flipped.len(), 1);
        assert_eq!(part.flipped[0].preference.label, Label::Second);
        assert_eq!(part.flipped[0].preference.provenance, Provenance::Flipped);
        assert_eq!(part.clean.len(), 2);
    }

    #[test]
    fn degenerate_thresholds_leave_no_uncertain() {
        // tau_lower above tau_upper
        assert_eq!(classify(5.0, 8.0, 6.9), Bucket::Clean);
        assert_eq!(classify(8.5, 8.0, 6.9), Bucket::Flipped);
        assert_eq!(classify(7.0, 7.0, 6.9), Bucket::Flipped);
        for d in [0.0, 3.0, 6.9, 7.5, 9.0] {
            assert_ne!(classify(d, 8.0, 6.9), Bucket::Uncertain);
        }
    }

    #[test]
    fn selection_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ledger = BudgetLedger::new(10, 128);
        assert_eq!(ledger.per_round_cap(), 32);
        let (sel, rest) = select_for_oracle(Vec::new(), &ledger, SelectionRule::Uniform, &mut rng);
        assert!(sel.is_empty() && rest.is_empty());
        let (sel, rest) = select_for_oracle(scored(100), &ledger, SelectionRule::Uniform, &mut rng);
        assert_eq!((sel.len(), rest.len()), (10, 90));
        let big = BudgetLedger::new(1000, 128);
        let (sel, _) = select_for_oracle(scored(100), &big, SelectionRule::MaxKl, &mut rng);
        assert_eq!(sel.len(), 32);
        assert!(sel.iter().all(|s| s.kl >= 68.0));
    }

    #[test]
    fn selection_is_deterministic() {
        let pick = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (sel, _) = select_for_oracle(scored(50), &BudgetLedger::new(100, 128), SelectionRule::Uniform, &mut rng);
            sel.iter().map(|s| s.kl).collect::<Vec<_>>()
        };
        assert_eq!(pick(4), pick(4));
        assert_ne!(pick(4), pick(5));
    }

    #[test]
    fn oracle_labels_and_budget() {
        let mut ledger = BudgetLedger::new(2, 4);
        let a = seg(&[1.0, 2.0]);
        let b = seg(&[0.5, 0.5]);
        assert_eq!(oracle_label(&a, &a, &mut ledger, 1e-6).unwrap(), Label::Tie);
        assert_eq!(oracle_label(&a, &b, &mut ledger, 1e-6).unwrap(), Label::First);
        assert_eq!(ledger.used(), 2);
        assert!(matches!(oracle_label(&b, &a, &mut ledger, 1e-6), Err(Error::BudgetExhausted { .. })));
        assert_eq!(ledger.used(), 2);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Select(usize),
        Query,
        Charge,
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![(0usize..200).prop_map(Op::Select), Just(Op::Query), Just(Op::Charge)]
    }

    proptest! {
        #[test]
        fn partition_is_complete(kls in proptest::collection::vec(0.0f64..20.0, 0..60), rho in 1e-4f64..3.0) {
            let mut s = SelectorState::new(SelectorConfig { initial_rho: rho, ..Default::default() }).unwrap();
            let batch: Vec<_> = kls.iter().map(|_| pref(Label::First)).collect();
            let part = partition_scored(&mut s, batch, &kls).unwrap();
            prop_assert_eq!(part.len(), kls.len());
            prop_assert!(part.flipped.iter().all(|p| p.preference.label == Label::Second));
            if part.tau_lower > part.tau_upper {
                prop_assert!(part.uncertain.is_empty());
            }
        }

        #[test]
        fn ledger_never_overdrawn(total in 0usize..80, ops in proptest::collection::vec(op(), 1..120), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ledger = BudgetLedger::new(total, 128);
            let a = seg(&[1.0]);
            let b = seg(&[2.0]);
            for o in ops {
                let before = ledger.used();
                match o {
                    Op::Select(n) => {
                        let (sel, _) = select_for_oracle(scored(n), &ledger, SelectionRule::Uniform, &mut rng);
                        prop_assert!(sel.len() <= ledger.remaining());
                        for s in sel {
                            oracle_label(&s.preference.seg0, &s.preference.seg1, &mut ledger, 1e-6).unwrap();
                        }
                    }
                    Op::Query => { let _ = oracle_label(&a, &b, &mut ledger, 1e-6); }
                    Op::Charge => { let _ = ledger.charge(); }
                }
                prop_assert!(ledger.used() <= ledger.total());
                prop_assert!(ledger.used() >= before);
            }
        }
    }
}
