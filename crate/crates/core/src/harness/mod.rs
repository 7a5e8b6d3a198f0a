//! Experiment orchestration: configuration, the full training cycle,
//! suites of runs, metrics files and plots.

mod config;
mod metrics;
mod plot;
mod run;
mod suite;

pub use config::{Method, PairSampling, Profile, RunConfig};
pub use metrics::{read_csv, read_metrics, write_csv, MetricsRow, RoundRecord, TimingRow};
pub use plot::emit_plots;
pub use run::{run_experiment, run_transfer, run_with_options, RunOptions, RunOutcome};
pub use suite::{run_suite, RunRecord, SuiteSummary, SummaryRow};

/// Independent seed for one randomness stream of a run (splitmix64 finaliser).
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a; identifies checkpoint contents in metrics files.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
