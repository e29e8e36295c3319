use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Split, TrainError};

/// One line of `metrics.jsonl`. Contains only quantities that are a pure
/// function of `(seed, config)`; wall-clock goes to [`TimingRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run: String,
    pub epoch: usize,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_soft: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_feat: Option<f64>,
    pub loss_ce: f64,
    pub loss_total: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub run: String,
    pub epoch: usize,
    pub wall_clock_seconds: f64,
}

/// Append-only metrics sink. Records are always kept in memory and, when
/// files are attached, written as JSON lines (the files start empty).
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
    pub timings: Vec<TimingRecord>,
    metrics_file: Option<File>,
    timings_file: Option<File>,
}

fn fresh(path: &Path) -> Result<File, TrainError> {
    Ok(File::create(path)?)
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_files(metrics: &Path, timings: &Path) -> Result<Self, TrainError> {
        Ok(Self {
            metrics_file: Some(fresh(metrics)?),
            timings_file: Some(fresh(timings)?),
            ..Self::default()
        })
    }

    pub fn push(&mut self, r: MetricsRecord) -> Result<(), TrainError> {
        if let Some(f) = &mut self.metrics_file {
            let line = serde_json::to_string(&r).map_err(|e| TrainError::Format(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn push_timing(&mut self, t: TimingRecord) -> Result<(), TrainError> {
        if let Some(f) = &mut self.timings_file {
            let line = serde_json::to_string(&t).map_err(|e| TrainError::Format(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        self.timings.push(t);
        Ok(())
    }

    pub fn for_run<'a>(&'a self, run: &'a str) -> impl Iterator<Item = &'a MetricsRecord> + 'a {
        self.records.iter().filter(move |r| r.run == run)
    }
}
