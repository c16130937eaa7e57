//! Append-only JSON-lines metrics traces.
//!
//! One record per optimizer step plus one per evaluated epoch; a `run`
//! header record carries the identifying configuration. Two traces of the
//! same seeded run are identical except for the wall-time fields, which
//! [`normalized`] zeroes for byte comparisons.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Run {
        protocol: String,
        global_batch: usize,
        workers: usize,
        tau: u64,
        model: String,
        epsilon: f64,
        augmentation: String,
        dataset: String,
        data_seed: u64,
        init_seed: u64,
        attack_seed: u64,
    },
    Step {
        step: u64,
        loss: f64,
        grad_norm: f64,
        t_update_ms: f64,
        t_gen_ms: f64,
        t_step_ms: f64,
    },
    Epoch {
        epoch: u64,
        test_acc: f64,
    },
    Final {
        steps: u64,
        test_acc: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTrace {
    pub records: Vec<Record>,
}

impl MetricsTrace {
    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(&path)?);
        let mut records = Vec::new();
        for (lineno, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!(
                    "{}:{}: corrupt metrics record: {e}",
                    path.as_ref().display(),
                    lineno + 1
                ))
            })?;
            records.push(r);
        }
        Ok(Self { records })
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| match r {
            Record::Final { test_acc, .. } => Some(*test_acc),
            _ => None,
        })
    }

    pub fn step_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                Record::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }
}

/// Copy with every wall-time field zeroed; equal traces modulo timing.
pub fn normalized(trace: &MetricsTrace) -> MetricsTrace {
    let records = trace
        .records
        .iter()
        .cloned()
        .map(|r| match r {
            Record::Step {
                step,
                loss,
                grad_norm,
                ..
            } => Record::Step {
                step,
                loss,
                grad_norm,
                t_update_ms: 0.0,
                t_gen_ms: 0.0,
                t_step_ms: 0.0,
            },
            other => other,
        })
        .collect();
    MetricsTrace { records }
}
