//! Value types shared across ingest, augmentation, model and training.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Binary `H x W` mask, row-major, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoreError::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(CoreError::Shape("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// A co-registered pre-change / post-change image pair, each `(3, H, W)`
/// with values in `[0, 1]`, plus an optional change mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BitemporalSample {
    pub id: String,
    pub image_a: Tensor<f32>,
    pub image_b: Tensor<f32>,
    pub label: Option<Mask>,
}

impl BitemporalSample {
    pub fn new(id: impl Into<String>, image_a: Tensor<f32>, image_b: Tensor<f32>, label: Option<Mask>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            image_a,
            image_b,
            label,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.image_a.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image_a.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let sa = self.image_a.shape();
        if sa.len() != 3 || sa[0] != 3 {
            return Err(CoreError::Shape(format!("{}: image must be (3,H,W), got {sa:?}", self.id)));
        }
        if sa != self.image_b.shape() {
            return Err(CoreError::Shape(format!(
                "{}: image shapes differ {:?} vs {:?}",
                self.id,
                sa,
                self.image_b.shape()
            )));
        }
        if let Some(l) = &self.label {
            if (l.height, l.width) != (sa[1], sa[2]) {
                return Err(CoreError::Shape(format!(
                    "{}: label {}x{} does not match image {}x{}",
                    self.id, l.height, l.width, sa[1], sa[2]
                )));
            }
        }
        Ok(())
    }
}

/// Disjoint labeled / unlabeled / validation / test id sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetPartition {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub ratio: f64,
}

impl DatasetPartition {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self
            .labeled_ids
            .iter()
            .chain(&self.unlabeled_ids)
            .chain(&self.val_ids)
            .chain(&self.test_ids)
        {
            if !seen.insert(id.as_str()) {
                return Err(CoreError::Config(format!("id {id} appears in more than one split")));
            }
        }
        let m = self.labeled_ids.len() as f64;
        let n = self.unlabeled_ids.len() as f64;
        if m + n > 0.0 && (self.ratio * (m + n) - m).abs() > 1.0 {
            return Err(CoreError::Config(format!(
                "labeled fraction {}/{} is not within one sample of ratio {}",
                m,
                m + n,
                self.ratio
            )));
        }
        Ok(())
    }
}

/// Which decoder blocks the network uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    /// Local convolutional and global transformer branches, summed.
    Cbff,
    /// Convolutional branch only.
    CnnOnly,
    /// Transformer branch only.
    TransOnly,
}

impl DecoderVariant {
    pub fn uses_conv(self) -> bool {
        matches!(self, Self::Cbff | Self::CnnOnly)
    }

    pub fn uses_transformer(self) -> bool {
        matches!(self, Self::Cbff | Self::TransOnly)
    }
}

impl fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cbff => "cbff",
            Self::CnnOnly => "cnn",
            Self::TransOnly => "trans",
        })
    }
}

impl FromStr for DecoderVariant {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cbff" => Ok(Self::Cbff),
            "cnn" | "cnn_only" => Ok(Self::CnnOnly),
            "trans" | "trans_only" => Ok(Self::TransOnly),
            other => Err(CoreError::Config(format!("unknown decoder '{other}'"))),
        }
    }
}

/// Which head's probabilities produce the inference change map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadChoice {
    /// Argmax of `(P_C + P_T) / 2`.
    #[default]
    Avg,
    Conv,
    Trans,
}

impl FromStr for HeadChoice {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Self::Avg),
            "conv" => Ok(Self::Conv),
            "trans" => Ok(Self::Trans),
            other => Err(CoreError::Config(format!("unknown head choice '{other}'"))),
        }
    }
}

/// Learning-rate schedule over the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr * (1 - t / T)^0.9` over `T` total iterations.
    Poly,
}

impl LrSchedule {
    pub const POLY_POWER: f64 = 0.9;

    /// Rate at iteration `t` (from 0) of `total`.
    pub fn rate(self, base: f64, t: usize, total: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Poly => {
                let frac = if total == 0 { 0.0 } else { (t as f64 / total as f64).min(1.0) };
                base * (1.0 - frac).powf(Self::POLY_POWER)
            }
        }
    }
}

impl FromStr for LrSchedule {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "poly" => Ok(Self::Poly),
            other => Err(CoreError::Config(format!("unknown lr schedule '{other}'"))),
        }
    }
}

/// Every hyperparameter of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Pseudo-label confidence threshold.
    pub tau: f64,
    /// Weight of the supervised loss.
    pub lambda1: f64,
    /// Weight of the consistency loss.
    pub lambda2: f64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub decoder: DecoderVariant,
    pub encoder_widths: Vec<usize>,
    /// Bottleneck blocks per encoder stage.
    pub encoder_depths: Vec<usize>,
    pub decoder_width: usize,
    pub attention_heads: usize,
    pub mlp_ratio: usize,
    pub head_choice: HeadChoice,
    /// Exclude sub-threshold pixels from the consistency loss instead of
    /// labelling them unchanged.
    pub mask_low_confidence: bool,
    /// Lift the attention token-count guard.
    pub allow_large_attention: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            lambda1: 0.5,
            lambda2: 0.5,
            lr: 0.02,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 80,
            batch_size: 4,
            decoder: DecoderVariant::Cbff,
            encoder_widths: vec![256, 512, 1024, 2048],
            encoder_depths: vec![3, 4, 6, 3],
            decoder_width: 64,
            attention_heads: 4,
            mlp_ratio: 4,
            head_choice: HeadChoice::Avg,
            mask_low_confidence: false,
            allow_large_attention: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small widths used for desk-scale runs and tests.
    pub fn toy() -> Self {
        Self {
            encoder_widths: vec![16, 32, 64, 128],
            encoder_depths: vec![1, 1, 1, 1],
            decoder_width: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(msg));
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0,1), got {}", self.tau));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0,1) and weight decay be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.encoder_widths.len() != 4 || self.encoder_depths.len() != 4 {
            return bad("encoder needs exactly four stages".into());
        }
        if self.encoder_widths.iter().any(|&w| w < 4 || w % 4 != 0) {
            return bad("encoder widths must be positive multiples of 4".into());
        }
        if self.encoder_depths.iter().any(|&d| d == 0) {
            return bad("every encoder stage needs at least one block".into());
        }
        if self.attention_heads == 0 || self.decoder_width == 0 || self.decoder_width % self.attention_heads != 0 {
            return bad(format!(
                "decoder width {} must split evenly into {} attention heads",
                self.decoder_width, self.attention_heads
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp ratio must be positive".into());
        }
        Ok(())
    }
}

/// Per-pixel class probabilities `(B, 2, H, W)` from the convolutional head
/// (`p_c`) and the transformer head (`p_t`). Channel 1 is "changed".
#[derive(Clone, Debug)]
pub struct BranchOutputs<T> {
    pub p_c: Tensor<T>,
    pub p_t: Tensor<T>,
}

impl<T: Real> BranchOutputs<T> {
    /// Change probability per pixel for the selected head combination,
    /// `B*H*W` values.
    pub fn change_probability(&self, head: HeadChoice) -> Vec<T> {
        let (b, _, h, w) = self.p_c.dims4().expect("rank-4 outputs");
        let hw = h * w;
        let half = T::from_f64_lossy(0.5);
        let mut out = Vec::with_capacity(b * hw);
        for bi in 0..b {
            let pc = &self.p_c.data()[(bi * 2 + 1) * hw..(bi * 2 + 2) * hw];
            let pt = &self.p_t.data()[(bi * 2 + 1) * hw..(bi * 2 + 2) * hw];
            match head {
                HeadChoice::Conv => out.extend_from_slice(pc),
                HeadChoice::Trans => out.extend_from_slice(pt),
                HeadChoice::Avg => out.extend(pc.iter().zip(pt).map(|(&a, &b)| (a + b) * half)),
            }
        }
        out
    }

    /// Binary change maps (argmax over the two classes), one per batch item.
    pub fn change_maps(&self, head: HeadChoice) -> Vec<Mask> {
        let (b, _, h, w) = self.p_c.dims4().expect("rank-4 outputs");
        let half = T::from_f64_lossy(0.5);
        self.change_probability(head)
            .chunks(h * w)
            .take(b)
            .map(|p| Mask {
                height: h,
                width: w,
                data: p.iter().map(|&v| u8::from(v > half)).collect(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.tau, c.lambda1, c.lambda2), (0.95, 0.5, 0.5));
        assert_eq!((c.lr, c.momentum, c.weight_decay), (0.02, 0.9, 1e-4));
        assert_eq!((c.epochs, c.batch_size), (80, 4));
        c.validate().unwrap();
        TrainConfig::toy().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            TrainConfig { tau: 1.0, ..TrainConfig::toy() },
            TrainConfig { tau: 0.0, ..TrainConfig::toy() },
            TrainConfig { lambda2: -0.1, ..TrainConfig::toy() },
            TrainConfig { lr: 0.0, ..TrainConfig::toy() },
            TrainConfig { decoder_width: 18, ..TrainConfig::toy() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn poly_schedule_decays_to_zero() {
        assert_eq!(LrSchedule::Constant.rate(0.02, 7, 10), 0.02);
        assert_eq!(LrSchedule::Poly.rate(0.02, 0, 10), 0.02);
        assert!((LrSchedule::Poly.rate(0.02, 5, 10) - 0.02 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert_eq!(LrSchedule::Poly.rate(0.02, 10, 10), 0.0);
        assert_eq!("poly".parse::<LrSchedule>().unwrap(), LrSchedule::Poly);
        assert!("step".parse::<LrSchedule>().is_err());
    }

    #[test]
    fn sample_shape_checks() {
        let a = Tensor::zeros(&[3, 4, 4]);
        let b = Tensor::zeros(&[3, 4, 5]);
        assert!(BitemporalSample::new("x", a.clone(), b, None).is_err());
        assert!(BitemporalSample::new("x", a.clone(), a.clone(), Some(Mask::zeros(4, 3))).is_err());
        assert!(BitemporalSample::new("x", a.clone(), a, Some(Mask::zeros(4, 4))).is_ok());
    }

    #[test]
    fn partition_overlap_rejected() {
        let p = DatasetPartition {
            labeled_ids: vec!["a".into()],
            unlabeled_ids: vec!["a".into()],
            val_ids: vec![],
            test_ids: vec![],
            ratio: 0.5,
        };
        assert!(p.validate().is_err());
    }
}
