//! Change-class confusion counts, IoU and overall accuracy, and the
//! results-table emitter.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::types::Mask;

/// Reference IoU values on WHU-CD with 5% labels for the four decoder
/// ablation rows (method, IoU). Documentation only; desk-scale runs are not
/// expected to reach them.
pub const REPORTED_WHU_5PCT_IOU: [(&str, f64); 4] =
    [("sup_only", 52.1), ("cnn", 78.9), ("trans", 76.5), ("cbff", 81.0)];

/// Pixel counts for the binary change / no-change problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accumulate(&mut self, pred: &Mask, truth: &Mask) -> Result<()> {
        if (pred.height, pred.width) != (truth.height, truth.width) {
            return Err(CoreError::Metrics(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        self.accumulate_slices(&pred.data, &truth.data)
    }

    pub fn accumulate_slices(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(CoreError::Metrics(format!(
                "{} predictions vs {} truth pixels",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (1, 1) => self.tp += 1,
                (1, 0) => self.fp += 1,
                (0, 1) => self.fn_ += 1,
                (0, 0) => self.tn += 1,
                _ => return Err(CoreError::Metrics(format!("non-binary pixel pair ({p}, {t})"))),
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// True when there is no change in either prediction or truth, in which
    /// case [`iou`](Self::iou) reports 100.
    pub fn iou_undefined(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    /// Change-class intersection over union, in percent.
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            100.0
        } else {
            100.0 * self.tp as f64 / denom as f64
        }
    }

    /// Overall pixel accuracy, in percent.
    pub fn oa(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(CoreError::Metrics("overall accuracy of an empty matrix".into()));
        }
        Ok(100.0 * (self.tp + self.tn) as f64 / total as f64)
    }
}

/// One cell group of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub ratio: f64,
    pub iou: f64,
    pub oa: f64,
}

/// Method-by-ratio table of IoU / OA scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn push(&mut self, method: impl Into<String>, ratio: f64, iou: f64, oa: f64) {
        self.rows.push(ResultRow {
            method: method.into(),
            ratio,
            iou,
            oa,
        });
    }

    fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }

    fn ratios(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.ratio) {
                out.push(r.ratio);
            }
        }
        out
    }

    fn cell(&self, method: &str, ratio: f64) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method && r.ratio == ratio)
    }

    /// Long-format CSV: `method,ratio,iou,oa`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,ratio,iou,oa\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.2},{:.2}", r.method, r.ratio, r.iou, r.oa);
        }
        s
    }

    /// Aligned text with one row per method and an IoU/OA column pair per
    /// label ratio.
    pub fn to_text(&self) -> String {
        let methods = self.methods();
        let ratios = self.ratios();
        let name_w = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = write!(s, "{:<name_w$} |", "Method");
        for r in &ratios {
            let _ = write!(s, " {:^15} |", format!("{:.0}%", r * 100.0));
        }
        s.push('\n');
        let _ = write!(s, "{:<name_w$} |", "");
        for _ in &ratios {
            let _ = write!(s, " {:>6}  {:>6} |", "IoU", "OA");
        }
        s.push('\n');
        s.push_str(&"-".repeat(name_w + 1 + ratios.len() * 18));
        s.push('\n');
        for m in methods {
            let _ = write!(s, "{m:<name_w$} |");
            for &r in &ratios {
                match self.cell(m, r) {
                    Some(c) => {
                        let _ = write!(s, " {:>6.1}  {:>6.2} |", c.iou, c.oa);
                    }
                    None => {
                        let _ = write!(s, " {:>6}  {:>6} |", "-", "-");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}
