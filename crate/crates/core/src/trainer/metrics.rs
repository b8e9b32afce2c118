use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scheduler::Phase;

pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";

/// One row per epoch of any phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: String,
    pub lambda_retrieval: f64,
    pub lambda_reader: f64,
    pub loss_total: f64,
    pub loss_ict: Option<f64>,
    pub loss_retrieval: Option<f64>,
    pub loss_reader: Option<f64>,
    pub avg_rank: Option<f64>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub top10: Option<f64>,
    pub top20: Option<f64>,
    pub top100: Option<f64>,
    pub em_dev: Option<f64>,
    pub refresh_attempted: bool,
    pub refresh_accepted: bool,
    pub snapshot_version: u64,
}

impl MetricsRow {
    /// Fills top1..top100 from values ordered like [`super::METRIC_KS`].
    pub fn set_topk(&mut self, values: &[f64]) {
        let slots = [
            &mut self.top1,
            &mut self.top5,
            &mut self.top10,
            &mut self.top20,
            &mut self.top100,
        ];
        for (slot, v) in slots.into_iter().zip(values) {
            *slot = Some(*v);
        }
    }

    pub fn topk(&self) -> [Option<f64>; 5] {
        [self.top1, self.top5, self.top10, self.top20, self.top100]
    }
}

/// One row per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub phase: String,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ict: Option<f64>,
    pub loss_phrase_ict: Option<f64>,
    pub loss_retrieval: Option<f64>,
    pub loss_reader: Option<f64>,
}

struct Sink<T> {
    rows: Vec<T>,
    writer: Option<csv::Writer<File>>,
}

impl<T: Serialize + DeserializeOwned> Sink<T> {
    fn memory() -> Self {
        Sink {
            rows: Vec::new(),
            writer: None,
        }
    }

    /// Keeps rows accepted by `keep` from an existing file, rewrites it and
    /// leaves it open for appending.
    fn open(path: &Path, keep: impl Fn(&T) -> bool) -> Result<Self> {
        let rows: Vec<T> = if path.exists() {
            read_rows::<T>(path)?.into_iter().filter(|r| keep(r)).collect()
        } else {
            Vec::new()
        };
        let mut w = csv::WriterBuilder::new().has_headers(true).from_path(path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        drop(w);
        let file = OpenOptions::new().append(true).open(path)?;
        let writer = csv::WriterBuilder::new().has_headers(rows.is_empty()).from_writer(file);
        Ok(Sink {
            rows,
            writer: Some(writer),
        })
    }

    fn push(&mut self, row: T) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.serialize(&row)?;
            w.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

/// Epoch and step metrics, in memory and optionally mirrored to CSV files.
pub struct MetricsLog {
    epochs: Sink<MetricsRow>,
    steps: Sink<StepRow>,
    dir: Option<PathBuf>,
}

fn phase_order(name: &str) -> usize {
    [Phase::Pretrain, Phase::Retrieval, Phase::Joint]
        .iter()
        .position(|p| p.name() == name)
        .unwrap_or(usize::MAX)
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog {
            epochs: Sink::memory(),
            steps: Sink::memory(),
            dir: None,
        }
    }

    /// Opens `dir/metrics.csv` and `dir/steps.csv` for `phase`, dropping any
    /// rows from `phase` or later phases so reruns replace their own output.
    pub fn open(dir: &Path, phase: Phase) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let cut = phase_order(phase.name());
        Ok(MetricsLog {
            epochs: Sink::open(&dir.join(METRICS_FILE), |r: &MetricsRow| phase_order(&r.phase) < cut)?,
            steps: Sink::open(&dir.join(STEPS_FILE), |r: &StepRow| phase_order(&r.phase) < cut)?,
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn push_epoch(&mut self, row: MetricsRow) -> Result<()> {
        self.epochs.push(row)
    }

    pub fn push_step(&mut self, row: StepRow) -> Result<()> {
        self.steps.push(row)
    }

    pub fn epochs(&self) -> &[MetricsRow] {
        &self.epochs.rows
    }

    pub fn steps(&self) -> &[StepRow] {
        &self.steps.rows
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }
}
