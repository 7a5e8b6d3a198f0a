use std::fs::File;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluation point. Field order is the CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: String,
    pub method: String,
    pub tag: String,
    pub seed: u64,
    /// `fresh`, or `<file name>#<content hash>` of the adapter checkpoint a transfer run started from.
    pub adapter_source: String,
    pub env_step: usize,
    pub eval_success_rate: f64,
    pub mean_episode_true_return: f64,
    pub oracle_used: usize,
    pub vle_labels_used: usize,
    pub pref_labels_used: usize,
    pub feedback_rounds: usize,
    /// Selector telemetry of the latest filtered round; empty before the first.
    pub round: Option<u64>,
    pub tau_lower: Option<f64>,
    pub tau_upper: Option<f64>,
    pub clean: Option<usize>,
    pub flipped: Option<usize>,
    pub uncertain: Option<usize>,
    pub oracle_queries_round: Option<usize>,
    pub ledger_used: usize,
}

/// Telemetry of one feedback round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub env_step: usize,
    pub pairs: usize,
    pub tau_lower: Option<f64>,
    pub tau_upper: Option<f64>,
    pub rho: Option<f64>,
    pub kl_std: Option<f64>,
    pub clean: usize,
    pub flipped: usize,
    pub uncertain: usize,
    pub vle_labels: usize,
    pub oracle_queries: usize,
    pub ledger_used: usize,
    pub dataset_size: usize,
    pub reward_loss: f64,
    /// Filled only when label diagnostics are enabled; reads ground truth for reporting.
    pub vle_label_accuracy: Option<f64>,
    pub accepted_label_accuracy: Option<f64>,
    /// Rank correlation of learned and true rewards over recent replay.
    pub reward_spearman: Option<f64>,
}

/// Wall-clock time per metrics row, kept apart so metrics files stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub env_step: usize,
    pub wall_seconds: f64,
}

/// Appends rows to a CSV file, flushing after each one.
pub struct CsvSink<T> {
    writer: csv::Writer<File>,
    _row: std::marker::PhantomData<T>,
}

impl<T: Serialize> CsvSink<T> {
    pub fn create(path: &Path) -> Result<Self> {
        let writer = csv::Writer::from_path(path).map_err(csv_error)?;
        Ok(CsvSink { writer, _row: std::marker::PhantomData })
    }

    pub fn push(&mut self, row: &T) -> Result<()> {
        self.writer.serialize(row).map_err(csv_error)?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut sink = CsvSink::create(path)?;
    for r in rows {
        sink.push(r)?;
    }
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Metrics(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Metrics(format!("{}: {e}", path.display())))
}

/// Reads a metrics file and checks that env_step strictly increases.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let rows: Vec<MetricsRow> = read_csv(path)?;
    if rows.is_empty() {
        return Err(Error::Metrics(format!("{}: no rows", path.display())));
    }
    if rows.windows(2).any(|w| w[1].env_step <= w[0].env_step) {
        return Err(Error::Metrics(format!("{}: env_step not strictly increasing", path.display())));
    }
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Metrics(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize) -> MetricsRow {
        MetricsRow {
            task: "reach".into(),
            method: "roved".into(),
            tag: String::new(),
            seed: 2,
            adapter_source: "fresh".into(),
            env_step: step,
            eval_success_rate: 0.35,
            mean_episode_true_return: -12.5,
            oracle_used: 57,
            vle_labels_used: 300,
            pref_labels_used: 357,
            feedback_rounds: 3,
            round: Some(2),
            tau_lower: Some(1.25),
            tau_upper: Some(6.907755278982137),
            clean: Some(90),
            flipped: Some(4),
            uncertain: Some(34),
            oracle_queries_round: Some(32),
            ledger_used: 57,
        }
    }

    #[test]
    fn round_trip_and_ordering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut r0 = row(3000);
        r0.round = None;
        r0.tau_lower = None;
        let rows = vec![r0, row(6000)];
        write_csv(&path, &rows).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("task,method,tag,seed,adapter_source,env_step,eval_success_rate"));

        write_csv(&path, &[row(6000), row(6000)]).unwrap();
        assert!(matches!(read_metrics(&path), Err(Error::Metrics(_))));
        std::fs::write(&path, "task,method\nreach\n").unwrap();
        assert!(matches!(read_metrics(&path), Err(Error::Metrics(_))));
    }
}
