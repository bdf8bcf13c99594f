use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Test accuracy of `task` after training stage `stage`, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: usize,
    pub task: usize,
    pub accuracy: f64,
    pub free_capacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub protocol: String,
    pub method: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    /// Wall-clock seconds per stage; not part of any determinism claim.
    pub stage_seconds: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    seed: u64,
    stage: usize,
    task: usize,
    accuracy: f64,
    free_capacity: f64,
    method: String,
    protocol: String,
    config_hash: String,
}

impl RunMetrics {
    pub fn new(protocol: &str, method: &str, seed: u64) -> Self {
        Self {
            protocol: protocol.into(),
            method: method.into(),
            seed,
            rows: Vec::new(),
            stage_seconds: Vec::new(),
        }
    }

    pub fn stages(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.rows.iter().map(|r| r.stage).collect();
        s.dedup();
        s
    }

    pub fn last_stage(&self) -> Option<usize> {
        self.rows.iter().map(|r| r.stage).max()
    }

    pub fn accuracy(&self, stage: usize, task: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.stage == stage && r.task == task)
            .map(|r| r.accuracy)
    }

    pub fn free_capacity(&self, stage: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.stage == stage).map(|r| r.free_capacity)
    }

    /// Unweighted mean accuracy over the tasks evaluated after `stage`.
    pub fn mean_seen(&self, stage: usize) -> Option<f64> {
        let accs: Vec<f64> = self.rows.iter().filter(|r| r.stage == stage).map(|r| r.accuracy).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn final_mean(&self) -> Option<f64> {
        self.mean_seen(self.last_stage()?)
    }

    /// Every stage `s` must report exactly tasks `0..=s` (the joint bound
    /// reports all tasks at its single stage).
    pub fn check_complete(&self) -> Result<()> {
        for s in self.stages() {
            let mut tasks: Vec<usize> = self.rows.iter().filter(|r| r.stage == s).map(|r| r.task).collect();
            tasks.sort_unstable();
            if tasks != (0..=s).collect::<Vec<_>>() {
                return Err(Error::Validation(format!("stage {s} reports tasks {tasks:?}")));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, w: impl Write, config_hash: &str) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        for r in &self.rows {
            csv.serialize(CsvRow {
                seed: self.seed,
                stage: r.stage,
                task: r.task,
                accuracy: r.accuracy,
                free_capacity: r.free_capacity,
                method: self.method.clone(),
                protocol: self.protocol.clone(),
                config_hash: config_hash.into(),
            })?;
        }
        csv.flush()?;
        Ok(())
    }

    /// Parses one run file, returning the metrics and their config hash.
    pub fn read_csv(r: impl Read) -> Result<(Self, String)> {
        let mut csv = csv::Reader::from_reader(r);
        let mut out: Option<(Self, String)> = None;
        for row in csv.deserialize() {
            let row: CsvRow = row?;
            let (m, hash) = out.get_or_insert_with(|| {
                (Self::new(&row.protocol, &row.method, row.seed), row.config_hash.clone())
            });
            if m.protocol != row.protocol || m.method != row.method || m.seed != row.seed || *hash != row.config_hash {
                return Err(Error::Validation("run file mixes runs".into()));
            }
            m.rows.push(MetricRow {
                stage: row.stage,
                task: row.task,
                accuracy: row.accuracy,
                free_capacity: row.free_capacity,
            });
        }
        out.ok_or_else(|| Error::Validation("empty run file".into()))
    }
}
