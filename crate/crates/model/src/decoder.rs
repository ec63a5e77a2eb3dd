//! Difference features, the atrous bottleneck, cross-branch fusion blocks
//! and the prediction heads.

use cbff_core::ops::Conv2dSpec;
use cbff_core::{DecoderVariant, Real, Var};

use crate::error::{ModelError, Result};
use crate::layers::{Cbr, Conv2d, LayerNorm, Linear};
use crate::params::{Builder, Fwd};

/// `CBR3(CBR1(|a - b|))`, projecting one encoder stage to the decoder width.
#[derive(Clone, Debug)]
pub struct DiffBlock {
    project: Cbr,
    refine: Cbr,
}

impl DiffBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cin: usize, width: usize) -> Self {
        Self {
            project: Cbr::new(&mut b.sub("cbr1"), cin, width, 1),
            refine: Cbr::new(&mut b.sub("cbr3"), width, width, 3),
        }
    }

    /// Returns `(|a - b|, D)`.
    pub fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, a: Var, b: Var) -> Result<(Var, Var)> {
        if cx.tape.shape(a) != cx.tape.shape(b) {
            return Err(ModelError::Shape(format!(
                "stage features differ: {:?} vs {:?}",
                cx.tape.shape(a),
                cx.tape.shape(b)
            )));
        }
        let diff = cx.tape.sub(a, b)?;
        let abs = cx.tape.abs(diff);
        let y = self.project.forward(cx, abs)?;
        Ok((abs, self.refine.forward(cx, y)?))
    }
}

pub const ASPP_RATES: [usize; 3] = [6, 12, 18];

/// Atrous spatial pyramid pooling: a 1x1 branch, three dilated 3x3 branches,
/// and an image-pooling branch, fused by a 1x1 CBR.
#[derive(Clone, Debug)]
pub struct Aspp {
    point: Conv2d,
    atrous: Vec<Conv2d>,
    pooled: Conv2d,
    fuse: Cbr,
}

impl Aspp {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, width: usize) -> Self {
        let atrous = ASPP_RATES
            .iter()
            .map(|&r| {
                let spec = Conv2dSpec { stride: 1, padding: r, dilation: r };
                Conv2d::new(&mut b.sub(&format!("atrous{r}")), width, width, 3, spec, true)
            })
            .collect();
        Self {
            point: Conv2d::new(&mut b.sub("point"), width, width, 1, Conv2dSpec::default(), true),
            atrous,
            pooled: Conv2d::new(&mut b.sub("pool"), width, width, 1, Conv2dSpec::default(), true),
            fuse: Cbr::new(&mut b.sub("fuse"), 5 * width, width, 1),
        }
    }

    /// The five branch outputs before concatenation.
    pub fn branches<T: Real>(&self, cx: &mut Fwd<'_, T>, x: Var) -> Result<Vec<Var>> {
        let (_, _, h, w) = cx.tape.value(x).dims4()?;
        let mut out = vec![self.point.forward(cx, x)?];
        for conv in &self.atrous {
            out.push(conv.forward(cx, x)?);
        }
        let g = cx.tape.global_avg_pool(x)?;
        let g = self.pooled.forward(cx, g)?;
        out.push(cx.tape.expand_spatial(g, h, w)?);
        Ok(out)
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let branches = self.branches(cx, x)?;
        let cat = cx.tape.concat_channels(&branches)?;
        self.fuse.forward(cx, cat)
    }
}

/// Local convolutional branch: two 3x3 CBRs.
#[derive(Clone, Debug)]
pub struct Lcb {
    first: Cbr,
    second: Cbr,
}

impl Lcb {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, width: usize) -> Self {
        Self {
            first: Cbr::new(&mut b.sub("cbr_a"), width, width, 3),
            second: Cbr::new(&mut b.sub("cbr_b"), width, width, 3),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let y = self.first.forward(cx, x)?;
        self.second.forward(cx, y)
    }
}

/// Global transformer branch: a pre-norm transformer block over the `H*W`
/// spatial tokens, with no positional encoding.
#[derive(Clone, Debug)]
pub struct Gtb {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Gtb {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, width: usize, heads: usize, mlp_ratio: usize) -> Self {
        let hidden = width * mlp_ratio;
        Self {
            norm1: LayerNorm::new(&mut b.sub("norm1"), width),
            q: Linear::new(&mut b.sub("attn.q"), width, width),
            k: Linear::new(&mut b.sub("attn.k"), width, width),
            v: Linear::new(&mut b.sub("attn.v"), width, width),
            proj: Linear::new(&mut b.sub("attn.proj"), width, width),
            norm2: LayerNorm::new(&mut b.sub("norm2"), width),
            fc1: Linear::new(&mut b.sub("mlp.fc1"), width, hidden),
            fc2: Linear::new(&mut b.sub("mlp.fc2"), hidden, width),
            heads,
        }
    }

    /// Multi-head self-attention on already-normalized tokens.
    pub fn attend<T: Real>(&self, cx: &mut Fwd<'_, T>, tokens: Var) -> Result<Var> {
        let q = self.q.forward(cx, tokens)?;
        let k = self.k.forward(cx, tokens)?;
        let v = self.v.forward(cx, tokens)?;
        let a = cx.tape.attention(q, k, v, self.heads)?;
        self.proj.forward(cx, a)
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = cx.tape.value(x).dims4()?;
        let tokens = cx.tape.to_tokens(x)?;
        let n1 = self.norm1.forward(cx, tokens)?;
        let attn = self.attend(cx, n1)?;
        let z = cx.tape.add(attn, tokens)?;
        let n2 = self.norm2.forward(cx, z)?;
        let hdn = self.fc1.forward(cx, n2)?;
        let hdn = cx.tape.gelu(hdn);
        let m = self.fc2.forward(cx, hdn)?;
        let out = cx.tape.add(m, z)?;
        Ok(cx.tape.from_tokens(out, h, w)?)
    }
}

/// Resize `coarse` to the spatial size of `fine` when it is exactly half
/// (or equal to) that size.
pub fn upsample_to<T: Real>(cx: &mut Fwd<'_, T>, coarse: Var, fine: Var) -> Result<Var> {
    let (_, _, ch, cw) = cx.tape.value(coarse).dims4()?;
    let (_, _, fh, fw) = cx.tape.value(fine).dims4()?;
    if (fh, fw) == (ch, cw) {
        return Ok(coarse);
    }
    if (fh, fw) != (2 * ch, 2 * cw) {
        return Err(ModelError::Shape(format!(
            "cannot upsample {ch}x{cw} onto {fh}x{fw}: spatial ratio must be 2"
        )));
    }
    Ok(cx.tape.resize_bilinear(coarse, fh, fw)?)
}

/// One cross-branch fusion decoder block.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    merge1: Cbr,
    merge3: Cbr,
    lcb: Option<Lcb>,
    gtb: Option<Gtb>,
    fuse1: Cbr,
    fuse3: Cbr,
}

impl FusionBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, width: usize, variant: DecoderVariant, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            merge1: Cbr::new(&mut b.sub("merge.cbr1"), 2 * width, width, 1),
            merge3: Cbr::new(&mut b.sub("merge.cbr3"), width, width, 3),
            lcb: variant.uses_conv().then(|| Lcb::new(&mut b.sub("lcb"), width)),
            gtb: variant
                .uses_transformer()
                .then(|| Gtb::new(&mut b.sub("gtb"), width, heads, mlp_ratio)),
            fuse1: Cbr::new(&mut b.sub("fuse.cbr1"), width, width, 1),
            fuse3: Cbr::new(&mut b.sub("fuse.cbr3"), width, width, 3),
        }
    }

    /// `CBR3(CBR1(Cat(d, up(prev))))`.
    pub fn merge<T: Real>(&self, cx: &mut Fwd<'_, T>, d: Var, prev: Var) -> Result<Var> {
        let up = upsample_to(cx, prev, d)?;
        let cat = cx.tape.concat_channels(&[d, up])?;
        let y = self.merge1.forward(cx, cat)?;
        self.merge3.forward(cx, y)
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, d: Var, prev: Var) -> Result<Var> {
        let merged = self.merge(cx, d, prev)?;
        let local = match &self.lcb {
            Some(l) => Some(l.forward(cx, merged)?),
            None => None,
        };
        let global = match (&self.gtb, cx.hooks.drop_transformer_path && local.is_some()) {
            (Some(g), false) => Some(g.forward(cx, merged)?),
            _ => None,
        };
        let sum = match (local, global) {
            (Some(l), Some(g)) => cx.tape.add(l, g)?,
            (Some(l), None) => l,
            (None, Some(g)) => g,
            (None, None) => unreachable!("every variant has at least one branch"),
        };
        let y = self.fuse1.forward(cx, sum)?;
        self.fuse3.forward(cx, y)
    }
}

/// Which branch type feeds a prediction head.
#[derive(Clone, Debug)]
enum Branch {
    Conv(Lcb),
    Trans(Gtb),
}

/// A branch followed by the classifier `CBR3 -> 1x1 conv` to two classes.
#[derive(Clone, Debug)]
pub struct Head {
    branch: Branch,
    cls: Cbr,
    logits: Conv2d,
}

impl Head {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, width: usize, transformer: bool, heads: usize, mlp_ratio: usize) -> Self {
        let branch = if transformer {
            Branch::Trans(Gtb::new(&mut b.sub("gtb"), width, heads, mlp_ratio))
        } else {
            Branch::Conv(Lcb::new(&mut b.sub("lcb"), width))
        };
        Self {
            branch,
            cls: Cbr::new(&mut b.sub("cls.cbr3"), width, width, 3),
            logits: Conv2d::new(&mut b.sub("cls.out"), width, 2, 1, Conv2dSpec::default(), true),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, f1: Var) -> Result<Var> {
        let y = match &self.branch {
            Branch::Conv(l) => l.forward(cx, f1)?,
            Branch::Trans(g) => g.forward(cx, f1)?,
        };
        let y = self.cls.forward(cx, y)?;
        self.logits.forward(cx, y)
    }
}
