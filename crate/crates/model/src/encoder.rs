//! Width-configurable ResNet-style encoder with four bottleneck stages at
//! strides 4, 8, 16 and 32.

use cbff_core::ops::Conv2dSpec;
use cbff_core::{Real, Var};

use crate::error::Result;
use crate::layers::{BatchNorm2d, Cbr, Conv2d};
use crate::params::{Builder, Fwd};

/// Features of the four stages for one image.
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub stages: [Var; 4],
}

#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: Cbr,
    spatial: Cbr,
    expand_conv: Conv2d,
    expand_bn: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize, stride: usize) -> Self {
        let mid = cout / 4;
        let shortcut = (stride != 1 || cin != cout).then(|| {
            let spec = Conv2dSpec { stride, ..Conv2dSpec::default() };
            (
                Conv2d::new(&mut b.sub("downsample.conv"), cin, cout, 1, spec, false),
                BatchNorm2d::new(&mut b.sub("downsample.bn"), cout),
            )
        });
        Self {
            reduce: Cbr::new(&mut b.sub("conv1"), cin, mid, 1),
            spatial: Cbr::with_spec(&mut b.sub("conv2"), mid, mid, 3, Conv2dSpec { stride, padding: 1, dilation: 1 }),
            expand_conv: Conv2d::new(&mut b.sub("conv3.conv"), mid, cout, 1, Conv2dSpec::default(), false),
            expand_bn: BatchNorm2d::new(&mut b.sub("conv3.bn"), cout),
            shortcut,
        }
    }

    fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(cx, x)?;
        let y = self.spatial.forward(cx, y)?;
        let y = self.expand_conv.forward(cx, y)?;
        let y = self.expand_bn.forward(cx, y)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(cx, x)?;
                bn.forward(cx, s)?
            }
            None => x,
        };
        let sum = cx.tape.add(y, skip)?;
        Ok(cx.tape.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Cbr,
    stages: Vec<Vec<Bottleneck>>,
    widths: [usize; 4],
}

impl Encoder {
    /// `widths` are the output channels of the four stages; the stem has a
    /// quarter of the first stage's width.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, widths: &[usize], depths: &[usize]) -> Self {
        let stem_width = (widths[0] / 4).max(1);
        let stem = Cbr::with_spec(&mut b.sub("stem"), 3, stem_width, 7, Conv2dSpec { stride: 2, padding: 3, dilation: 1 });
        let mut cin = stem_width;
        let mut stages = Vec::with_capacity(4);
        for (s, (&w, &depth)) in widths.iter().zip(depths).enumerate() {
            let mut blocks = Vec::with_capacity(depth);
            for i in 0..depth {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                blocks.push(Bottleneck::new(&mut b.sub(&format!("layer{}.{}", s + 1, i)), cin, w, stride));
                cin = w;
            }
            stages.push(blocks);
        }
        Self {
            stem,
            stages,
            widths: [widths[0], widths[1], widths[2], widths[3]],
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, image: Var) -> Result<EncoderFeatures> {
        let x = self.stem.forward(cx, image)?;
        let mut x = cx.tape.max_pool2d(x, 3, 2, 1)?;
        let mut out = [x; 4];
        for (s, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                x = block.forward(cx, x)?;
            }
            out[s] = x;
        }
        Ok(EncoderFeatures { stages: out })
    }
}
