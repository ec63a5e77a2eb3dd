//! Supervised and consistency cross-entropy, pseudo-labels and the
//! weighted total.
//!
//! Training differentiates the cross entropy of the logits on the tape;
//! the probability-space functions here compute the same quantities from
//! softmax outputs for reporting and checking.

use cbff_core::{BranchOutputs, Mask, Real, Tape, Tensor, TrainConfig, Var};
use cbff_model::NetOutput;

use crate::error::{Result, TrainError};

/// Mean over selected pixels of `-ln p[target]` for `(B, 2, H, W)`
/// probabilities. An empty selection gives zero.
pub fn cross_entropy_probs<T: Real>(probs: &Tensor<T>, targets: &[u8], valid: Option<&[u8]>) -> Result<f64> {
    let (b, k, h, w) = probs.dims4()?;
    let hw = h * w;
    if k != 2 || targets.len() != b * hw || valid.is_some_and(|v| v.len() != b * hw) {
        return Err(TrainError::Shape(format!(
            "{} targets against probabilities {:?}",
            targets.len(),
            probs.shape()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if valid.is_some_and(|v| v[i] == 0) {
            continue;
        }
        let (bi, p) = (i / hw, i % hw);
        total -= probs.data()[(bi * k + t as usize) * hw + p].to_f64_lossy().ln();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn flatten_masks(masks: &[Mask]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for m in masks {
        if let Some(&v) = m.data.iter().find(|&&v| v > 1) {
            return Err(TrainError::Shape(format!("label value {v} outside {{0, 1}}")));
        }
        out.extend_from_slice(&m.data);
    }
    Ok(out)
}

/// `0.5 (CE(P_C, Y) + CE(P_T, Y))`.
pub fn supervised_loss<T: Real>(out: &BranchOutputs<T>, labels: &[Mask]) -> Result<f64> {
    let y = flatten_masks(labels)?;
    Ok(0.5 * (cross_entropy_probs(&out.p_c, &y, None)? + cross_entropy_probs(&out.p_t, &y, None)?))
}

/// The same average of both heads against pseudo-labels; with
/// `mask_low_confidence` only confident pixels count.
pub fn consistency_loss<T: Real>(out: &BranchOutputs<T>, pseudo: &PseudoLabelBatch, mask_low_confidence: bool) -> Result<f64> {
    let y = flatten_masks(&pseudo.labels)?;
    let valid = mask_low_confidence.then(|| flatten_masks(&pseudo.confident)).transpose()?;
    let v = valid.as_deref();
    Ok(0.5 * (cross_entropy_probs(&out.p_c, &y, v)? + cross_entropy_probs(&out.p_t, &y, v)?))
}

/// `lambda1 * l_sup + lambda2 * l_con`.
pub fn total_loss(l_sup: f64, l_con: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda1 * l_sup + cfg.lambda2 * l_con
}

/// Tape version of the two-head cross entropy on logits.
pub fn branch_cross_entropy<T: Real>(tape: &mut Tape<T>, out: &NetOutput, targets: &[u8], valid: Option<&[u8]>) -> Result<Var> {
    let c = tape.cross_entropy(out.logits_c, targets, valid)?;
    let t = tape.cross_entropy(out.logits_t, targets, valid)?;
    let sum = tape.add(c, t)?;
    Ok(tape.scale(sum, T::from_f64_lossy(0.5)))
}

/// Which head produced the pseudo-labels. Only the convolutional head
/// labels unlabeled data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PseudoSource {
    ConvHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    /// 1 where the change probability is strictly above tau.
    pub labels: Vec<Mask>,
    /// 1 where either class probability is strictly above tau.
    pub confident: Vec<Mask>,
    /// Change probability, `(B, H, W)`.
    pub confidence: Tensor<f32>,
    pub source: PseudoSource,
}

impl PseudoLabelBatch {
    pub fn positive_rate(&self) -> f64 {
        let n: usize = self.labels.iter().map(|m| m.data.len()).sum();
        let ones: usize = self.labels.iter().map(Mask::count_ones).sum();
        if n == 0 {
            0.0
        } else {
            ones as f64 / n as f64
        }
    }
}

/// Hard labels from the convolutional head's change probability
/// `p_c[:, 1]` of a `(B, 2, H, W)` map: 1 iff `p > tau`, else 0.
pub fn make_pseudo_labels<T: Real>(p_c: &Tensor<T>, tau: f64) -> Result<PseudoLabelBatch> {
    let (b, k, h, w) = p_c.dims4()?;
    if k != 2 {
        return Err(TrainError::Shape(format!("expected two classes, got {k}")));
    }
    let hw = h * w;
    let mut labels = Vec::with_capacity(b);
    let mut confident = Vec::with_capacity(b);
    let mut conf = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let plane = &p_c.data()[(bi * 2 + 1) * hw..(bi * 2 + 2) * hw];
        let p: Vec<f64> = plane.iter().map(|v| v.to_f64_lossy()).collect();
        labels.push(Mask {
            height: h,
            width: w,
            data: p.iter().map(|&v| u8::from(v > tau)).collect(),
        });
        confident.push(Mask {
            height: h,
            width: w,
            data: p.iter().map(|&v| u8::from(v > tau || 1.0 - v > tau)).collect(),
        });
        conf.extend(p.iter().map(|&v| v as f32));
    }
    Ok(PseudoLabelBatch {
        labels,
        confident,
        confidence: Tensor::new(&[b, h, w], conf)?,
        source: PseudoSource::ConvHead,
    })
}
