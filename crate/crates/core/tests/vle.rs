mod common;

use common::{oracle_pairs, rng};
use roved::envs::{Env, TaskId, Transition};
use roved::reward::LabeledPreference;
use roved::vle::{AdapterConfig, AdapterStack, BaseEncoders, FinetuneOptions, VleView};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const GAP_SEED: u64 = 1;

fn accuracy(view: &VleView, task: TaskId, prefs: &[LabeledPreference]) -> f64 {
    let hits = prefs.iter().filter(|p| view.label(task.description_id(), &p.seg0, &p.seg1, 1e-6).unwrap() == p.label).count();
    hits as f64 / prefs.len() as f64
}

#[test]
fn label_accuracy_does_not_rise_with_gap() {
    for task in TaskId::ALL {
        let env = Env::for_task(task, GAP_SEED);
        let (pairs, _) = oracle_pairs(&env, 1000, &mut rng(11));
        let acc: Vec<f64> = [0.0, 0.25, 0.5, 0.75]
            .iter()
            .map(|&g| accuracy(&VleView::Raw(&BaseEncoders::new(GAP_SEED, g).unwrap()), task, &pairs))
            .collect();
        for w in acc.windows(2) {
            assert!(w[1] <= w[0] + 0.02, "{task}: {acc:?}");
        }
    }
}

#[test]
fn oracle_finetuning_improves_held_out_agreement() {
    let encoders = BaseEncoders::new(GAP_SEED, 0.5).unwrap();
    let config = AdapterConfig { hidden: 64, ..AdapterConfig::default() };
    for task in TaskId::ALL {
        let env = Env::for_task(task, GAP_SEED);
        let (held_out, _) = oracle_pairs(&env, 300, &mut rng(21));
        let (train, transitions) = oracle_pairs(&env, 500, &mut rng(22));
        let transitions: Vec<&Transition> = transitions.iter().collect();
        let mut adapters = AdapterStack::new(&config, env.spec.action_dim, 3).unwrap();
        let before = accuracy(&VleView::Adapted(&encoders, &adapters), task, &held_out);
        let options = FinetuneOptions { steps: 300, ..FinetuneOptions::from_config(&config) };
        adapters.finetune(&encoders, task.description_id(), &train, &transitions, &options).unwrap();
        let after = accuracy(&VleView::Adapted(&encoders, &adapters), task, &held_out);
        assert!(after >= before + 0.15, "{task}: {before:.3} -> {after:.3}");
    }
}
