use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::write_csv;
use super::run::{run_experiment, RunOutcome};
use crate::error::Result;
use crate::stats;

/// Result of one (config, seed) job; failures are kept as text.
#[derive(Debug)]
pub struct RunRecord {
    pub series: String,
    pub seed: u64,
    pub outcome: std::result::Result<RunOutcome, String>,
}

/// Aggregate over the seeds of one series. Also the summary CSV layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub series: String,
    pub task: String,
    pub method: String,
    pub runs: usize,
    pub failures: usize,
    pub mean_success: f64,
    /// Population standard deviation across seeds.
    pub std_success: f64,
    pub mean_oracle_used: f64,
}

#[derive(Debug)]
pub struct SuiteSummary {
    pub records: Vec<RunRecord>,
    pub rows: Vec<SummaryRow>,
    pub summary_csv: PathBuf,
    pub summary_table: PathBuf,
}

impl SuiteSummary {
    pub fn row(&self, series: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.series == series)
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.outcome.is_err()).count()
    }
}

/// Runs every (config, seed) pair. A failing run is recorded and does not
/// stop its siblings. Runs share nothing, so `parallel` only changes timing.
pub fn run_suite(configs: &[RunConfig], out_dir: &Path, parallel: bool) -> Result<SuiteSummary> {
    std::fs::create_dir_all(out_dir)?;
    let jobs: Vec<(&RunConfig, u64)> = configs.iter().flat_map(|c| c.seeds.iter().map(move |&s| (c, s))).collect();
    let one = |&(config, seed): &(&RunConfig, u64)| RunRecord {
        series: config.series_name(),
        seed,
        outcome: match catch_unwind(AssertUnwindSafe(|| run_experiment(config, seed, out_dir))) {
            Ok(Ok(outcome)) => Ok(outcome),
            Ok(Err(e)) => Err(e.to_string()),
            Err(panic) => Err(panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "run panicked".into())),
        },
    };
    let records: Vec<RunRecord> = if parallel { jobs.par_iter().map(one).collect() } else { jobs.iter().map(one).collect() };

    let mut rows: Vec<SummaryRow> = Vec::new();
    for config in configs {
        let series = config.series_name();
        if rows.iter().any(|r| r.series == series) {
            continue;
        }
        let mine: Vec<&RunRecord> = records.iter().filter(|r| r.series == series).collect();
        let ok: Vec<&RunOutcome> = mine.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
        let success: Vec<f64> = ok.iter().map(|o| o.final_success()).collect();
        let oracle: Vec<f64> = ok.iter().map(|o| o.final_row().oracle_used as f64).collect();
        rows.push(SummaryRow {
            series,
            task: config.task.name().into(),
            method: config.method.name().into(),
            runs: mine.len(),
            failures: mine.len() - ok.len(),
            mean_success: stats::mean(&success),
            std_success: stats::std_dev(&success),
            mean_oracle_used: stats::mean(&oracle),
        });
    }

    let summary_csv = out_dir.join("summary.csv");
    write_csv(&summary_csv, &rows)?;
    let summary_table = out_dir.join("summary.txt");
    std::fs::write(&summary_table, render_table(&rows, &records))?;
    Ok(SuiteSummary { records, rows, summary_csv, summary_table })
}

fn render_table(rows: &[SummaryRow], records: &[RunRecord]) -> String {
    let width = rows.iter().map(|r| r.series.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>4}  {:>6}  {:>15}  {:>8}", "series", "runs", "failed", "success", "oracle");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>4}  {:>6}  {:>6.3} ± {:<6.3}  {:>8.1}",
            r.series, r.runs, r.failures, r.mean_success, r.std_success, r.mean_oracle_used
        );
    }
    for rec in records {
        if let Err(e) = &rec.outcome {
            let _ = writeln!(out, "failed: {} seed {}: {e}", rec.series, rec.seed);
        }
    }
    out
}
