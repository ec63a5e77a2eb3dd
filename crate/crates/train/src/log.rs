//! Per-iteration loss log written as CSV.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

/// One optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub iter: usize,
    pub l_sup: f64,
    pub l_con: f64,
    pub total: f64,
    pub pseudo_positive_rate: f64,
    pub lr: f64,
}

pub struct MetricsLog {
    writer: csv::Writer<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| TrainError::io(path, e))?;
        Ok(Self {
            writer: csv::Writer::from_writer(file),
        })
    }

    pub fn write(&mut self, reports: &[LossReport]) -> Result<()> {
        for r in reports {
            self.writer.serialize(r)?;
        }
        self.writer.flush().map_err(|e| TrainError::Csv(e.into()))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LossReport>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}
