//! The full change-detection network: Siamese encoder, difference features,
//! atrous bottleneck, three fusion blocks and two prediction heads.

use serde::{Deserialize, Serialize};

use cbff_core::rng::{seeded_rng, INIT};
use cbff_core::{BranchOutputs, DecoderVariant, Real, Tensor, TrainConfig, Var};

use crate::decoder::{upsample_to, Aspp, DiffBlock, FusionBlock, Head};
use crate::encoder::{Encoder, EncoderFeatures};
use crate::error::{ModelError, Result};
use crate::layers::Cbr;
use crate::params::{Builder, Fwd, ParamStore};

/// Largest token sequence the transformer branches accept by default.
pub const MAX_ATTENTION_TOKENS: usize = 16_384;

/// Total encoder stride; input sides must be multiples of it.
pub const INPUT_MULTIPLE: usize = 32;

const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Architecture-shaping subset of [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub encoder_widths: Vec<usize>,
    pub encoder_depths: Vec<usize>,
    pub decoder_width: usize,
    pub decoder: DecoderVariant,
    pub attention_heads: usize,
    pub mlp_ratio: usize,
    pub allow_large_attention: bool,
}

impl From<&TrainConfig> for NetConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            encoder_widths: c.encoder_widths.clone(),
            encoder_depths: c.encoder_depths.clone(),
            decoder_width: c.decoder_width,
            decoder: c.decoder,
            attention_heads: c.attention_heads,
            mlp_ratio: c.mlp_ratio,
            allow_large_attention: c.allow_large_attention,
        }
    }
}

/// Pre-softmax outputs of both heads at input resolution.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    pub logits_c: Var,
    pub logits_t: Var,
}

#[derive(Clone, Debug)]
pub struct ChangeNet {
    cfg: NetConfig,
    encoder: Encoder,
    diffs: Vec<DiffBlock>,
    aspp: Aspp,
    /// Fusion blocks for levels 4, 3, 2 in that order.
    blocks: Vec<FusionBlock>,
    head_merge1: Cbr,
    head_merge3: Cbr,
    head_c: Head,
    head_t: Head,
}

impl ChangeNet {
    /// Build the network and He-initialise its parameters from the `init`
    /// stream of `seed`.
    pub fn new<T: Real>(cfg: &NetConfig, seed: u64) -> (Self, ParamStore<T>) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed, INIT);
        let net = {
            let mut b = Builder::new(&mut store, &mut rng);
            Self::build(&mut b, cfg)
        };
        (net, store)
    }

    fn build<T: Real>(b: &mut Builder<'_, T>, cfg: &NetConfig) -> Self {
        let w = cfg.decoder_width;
        let (heads, ratio) = (cfg.attention_heads, cfg.mlp_ratio);
        let encoder = Encoder::new(&mut b.sub("encoder"), &cfg.encoder_widths, &cfg.encoder_depths);
        let diffs = cfg
            .encoder_widths
            .iter()
            .enumerate()
            .map(|(i, &cin)| DiffBlock::new(&mut b.sub(&format!("diff{}", i + 1)), cin, w))
            .collect();
        let aspp = Aspp::new(&mut b.sub("aspp"), w);
        let blocks = [4, 3, 2]
            .iter()
            .map(|lvl| FusionBlock::new(&mut b.sub(&format!("fusion{lvl}")), w, cfg.decoder, heads, ratio))
            .collect();
        let (c_trans, t_trans) = match cfg.decoder {
            DecoderVariant::Cbff => (false, true),
            DecoderVariant::CnnOnly => (false, false),
            DecoderVariant::TransOnly => (true, true),
        };
        Self {
            cfg: cfg.clone(),
            encoder,
            diffs,
            aspp,
            blocks,
            head_merge1: Cbr::new(&mut b.sub("head.merge.cbr1"), 2 * w, w, 1),
            head_merge3: Cbr::new(&mut b.sub("head.merge.cbr3"), w, w, 3),
            head_c: Head::new(&mut b.sub("head_c"), w, c_trans, heads, ratio),
            head_t: Head::new(&mut b.sub("head_t"), w, t_trans, heads, ratio),
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn aspp(&self) -> &Aspp {
        &self.aspp
    }

    pub fn fusion_blocks(&self) -> &[FusionBlock] {
        &self.blocks
    }

    /// Reject spatial sizes the network cannot process.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(ModelError::Shape(format!(
                "input {h}x{w} must have sides divisible by {INPUT_MULTIPLE}"
            )));
        }
        let tokens = (h / 4) * (w / 4);
        if self.cfg.decoder.uses_transformer() && tokens > MAX_ATTENTION_TOKENS && !self.cfg.allow_large_attention {
            return Err(ModelError::TokenBudget {
                tokens,
                limit: MAX_ATTENTION_TOKENS,
            });
        }
        Ok(())
    }

    /// Siamese encoding: both images go through the same weights as one
    /// batch, so in training mode they share batch-norm statistics the way
    /// they share running statistics at inference. Normalizing each date
    /// on its own would cancel global radiometric differences during
    /// training only.
    pub fn encode_siamese<T: Real>(&self, cx: &mut Fwd<'_, T>, a: Var, b: Var) -> Result<(EncoderFeatures, EncoderFeatures)> {
        let (_, _, h, w) = cx.tape.value(a).dims4()?;
        if cx.tape.shape(a) != cx.tape.shape(b) {
            return Err(ModelError::Shape(format!(
                "image shapes differ: {:?} vs {:?}",
                cx.tape.shape(a),
                cx.tape.shape(b)
            )));
        }
        self.check_input(h, w)?;
        let n = cx.tape.shape(a)[0];
        let joint = cx.tape.concat_batch(&[a, b])?;
        let f = self.encoder.forward(cx, joint)?;
        let mut split = |half: usize| -> Result<EncoderFeatures> {
            let mut stages = f.stages;
            for s in &mut stages {
                *s = cx.tape.slice_batch(*s, half * n, (half + 1) * n)?;
            }
            Ok(EncoderFeatures { stages })
        };
        Ok((split(0)?, split(1)?))
    }

    /// Full forward pass on normalized `(B, 3, H, W)` inputs.
    pub fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, a: Var, b: Var) -> Result<NetOutput> {
        let (_, _, h, w) = cx.tape.value(a).dims4()?;
        let (fa, fb) = self.encode_siamese(cx, a, b)?;
        let mut d = Vec::with_capacity(4);
        for (i, block) in self.diffs.iter().enumerate() {
            cx.record(format!("c{}_a", i + 1), fa.stages[i]);
            cx.record(format!("c{}_b", i + 1), fb.stages[i]);
            let (abs, di) = block.forward(cx, fa.stages[i], fb.stages[i])?;
            cx.record(format!("absdiff{}", i + 1), abs);
            cx.record(format!("d{}", i + 1), di);
            d.push(di);
        }
        let fb_ = self.aspp.forward(cx, d[3])?;
        cx.record("f_b", fb_);
        let mut prev = fb_;
        for (block, level) in self.blocks.iter().zip([4usize, 3, 2]) {
            prev = block.forward(cx, d[level - 1], prev)?;
            cx.record(format!("f{level}"), prev);
        }
        let up = upsample_to(cx, prev, d[0])?;
        let cat = cx.tape.concat_channels(&[d[0], up])?;
        let f1 = self.head_merge1.forward(cx, cat)?;
        let f1 = self.head_merge3.forward(cx, f1)?;
        cx.record("f1", f1);
        let lc = self.head_c.forward(cx, f1)?;
        let lt = self.head_t.forward(cx, f1)?;
        let logits_c = cx.tape.resize_bilinear(lc, h, w)?;
        let logits_t = cx.tape.resize_bilinear(lt, h, w)?;
        Ok(NetOutput { logits_c, logits_t })
    }

    /// Eval-mode, gradient-free prediction on raw `[0, 1]` images.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<BranchOutputs<T>> {
        let mut cx = Fwd::new(store, false, false);
        let va = cx.tape.constant(normalize_images(a)?);
        let vb = cx.tape.constant(normalize_images(b)?);
        let out = self.forward(&mut cx, va, vb)?;
        Ok(probabilities(&mut cx, out)?)
    }
}

/// Softmax of both heads' logits.
pub fn probabilities<T: Real>(cx: &mut Fwd<'_, T>, out: NetOutput) -> Result<BranchOutputs<T>> {
    let pc = cx.tape.softmax_channels(out.logits_c)?;
    let pt = cx.tape.softmax_channels(out.logits_t)?;
    Ok(BranchOutputs {
        p_c: cx.tape.value(pc).clone(),
        p_t: cx.tape.value(pt).clone(),
    })
}

/// Per-channel ImageNet mean/std normalization of `(B, 3, H, W)` images.
pub fn normalize_images<T: Real>(x: &Tensor<f32>) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(ModelError::Shape(format!("expected 3 input channels, got {c}")));
    }
    let hw = h * w;
    Ok(Tensor::from_fn(x.shape(), |i| {
        let ch = (i / hw) % 3;
        T::from_f64_lossy((x[i] as f64 - MEAN[ch]) / STD[ch])
    }))
}
