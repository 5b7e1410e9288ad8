use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One aggregated CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub sweep_point: f64,
    pub metric: String,
    pub value: f64,
    pub trials: usize,
    pub std_error: f64,
}

/// Samples of one trial at one sweep point, or the error that aborted it.
pub type TrialOutcome = std::result::Result<Vec<(&'static str, f64)>, String>;

/// Collects per-trial samples and reduces them to mean and standard error.
/// Output order follows sweep order, then first appearance of each metric,
/// so it never depends on trial completion order.
#[derive(Debug, Clone)]
pub struct Aggregator {
    experiment: String,
    sweep: Vec<f64>,
    metrics: Vec<Vec<(&'static str, Vec<f64>)>>,
    failures: Vec<Vec<String>>,
}

impl Aggregator {
    pub fn new(experiment: &str, sweep: &[f64]) -> Self {
        Self {
            experiment: experiment.to_string(),
            sweep: sweep.to_vec(),
            metrics: vec![Vec::new(); sweep.len()],
            failures: vec![Vec::new(); sweep.len()],
        }
    }

    pub fn record(&mut self, point: usize, outcome: TrialOutcome) {
        match outcome {
            Ok(samples) if samples.iter().all(|(_, v)| v.is_finite()) => {
                for (name, v) in samples {
                    let slot = &mut self.metrics[point];
                    match slot.iter_mut().find(|(n, _)| *n == name) {
                        Some((_, vals)) => vals.push(v),
                        None => slot.push((name, vec![v])),
                    }
                }
            }
            Ok(samples) => {
                let bad: Vec<_> = samples.iter().filter(|(_, v)| !v.is_finite()).map(|(n, _)| *n).collect();
                self.failures[point].push(format!("non-finite {bad:?}"));
            }
            Err(e) => self.failures[point].push(e),
        }
    }

    /// Error messages of failed trials, by sweep point.
    pub fn failures(&self) -> &[Vec<String>] {
        &self.failures
    }

    pub fn rows(&self) -> Vec<ResultRow> {
        let mut rows = Vec::new();
        for (i, &point) in self.sweep.iter().enumerate() {
            for (name, vals) in &self.metrics[i] {
                let (mean, se) = mean_and_std_error(vals);
                rows.push(ResultRow {
                    experiment: self.experiment.clone(),
                    sweep_point: point,
                    metric: name.to_string(),
                    value: mean,
                    trials: vals.len(),
                    std_error: se,
                });
            }
            let failed = self.failures[i].len();
            let ok = self.metrics[i].first().map_or(0, |(_, v)| v.len());
            rows.push(ResultRow {
                experiment: self.experiment.clone(),
                sweep_point: point,
                metric: "failed_trials".to_string(),
                value: failed as f64,
                trials: ok + failed,
                std_error: 0.0,
            });
        }
        rows
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_std_error(vals: &[f64]) -> (f64, f64) {
    let n = vals.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = vals.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn write_csv<W: Write>(rows: &[ResultRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        w.write_record(["experiment", "sweep_point", "metric", "value", "trials", "std_error"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(rows: &[ResultRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}
