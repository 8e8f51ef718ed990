use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::BenchRow;

/// One line of a report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Config {
        config: String,
    },
    Census {
        mode: String,
        prompt: usize,
        head: usize,
        backbone: usize,
        backbone_frozen: bool,
        trainable: usize,
    },
    Pretrain {
        steps: usize,
        probe_accuracy: f64,
    },
    Epoch {
        epoch: usize,
        split: String,
        loss: f64,
        accuracy: f64,
        auroc: Option<f64>,
        lr: f64,
        secs_per_bag: f64,
        strategy: String,
    },
    Bench {
        strategy: String,
        n_instances: usize,
        batch_size: usize,
        peak_act_elems: usize,
        secs_per_bag: f64,
        reduction_pct: Option<f64>,
        grad_rel_diff: Option<f64>,
    },
    Ablation {
        k: usize,
        accuracy: f64,
        auroc: Option<f64>,
        val_accuracy: f64,
        best_epoch: usize,
        seed: u64,
        data_fingerprint: String,
    },
}

impl From<&BenchRow> for Record {
    fn from(r: &BenchRow) -> Self {
        Record::Bench {
            strategy: r.strategy.name().into(),
            n_instances: r.n_instances,
            batch_size: r.batch_size,
            peak_act_elems: r.peak_act_elems,
            secs_per_bag: r.secs_per_bag,
            reduction_pct: r.reduction_pct,
            grad_rel_diff: r.grad_rel_diff,
        }
    }
}

impl Record {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }

    /// Every float in the record is finite.
    pub fn is_finite(&self) -> bool {
        let fs: Vec<f64> = match self {
            Record::Epoch {
                loss,
                accuracy,
                auroc,
                lr,
                secs_per_bag,
                ..
            } => {
                vec![*loss, *accuracy, auroc.unwrap_or(0.0), *lr, *secs_per_bag]
            }
            Record::Bench {
                secs_per_bag,
                reduction_pct,
                grad_rel_diff,
                ..
            } => {
                vec![
                    *secs_per_bag,
                    reduction_pct.unwrap_or(0.0),
                    grad_rel_diff.unwrap_or(0.0),
                ]
            }
            Record::Ablation {
                accuracy,
                auroc,
                val_accuracy,
                ..
            } => {
                vec![*accuracy, auroc.unwrap_or(0.0), *val_accuracy]
            }
            Record::Pretrain { probe_accuracy, .. } => vec![*probe_accuracy],
            Record::Config { .. } | Record::Census { .. } => vec![],
        };
        fs.iter().all(|v| v.is_finite())
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("report record {}", r.to_line())));
        }
        writeln!(f, "{}", r.to_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
