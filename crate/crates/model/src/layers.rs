//! Parameterised layers: convolution, batch norm, the conv-BN-ReLU unit,
//! layer norm and linear projections.

use cbff_core::ops::Conv2dSpec;
use cbff_core::{Real, Tensor, Var};

use crate::error::Result;
use crate::params::{BnUpdate, BufferId, Builder, Fwd, ParamId};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    spec: Conv2dSpec,
}

impl Conv2d {
    /// He-normal (fan-in) initialised convolution.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize, kernel: usize, spec: Conv2dSpec, bias: bool) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = b.normal(&[cout, cin, kernel, kernel], (2.0 / fan_in as f64).sqrt());
        let weight = b.param("weight", w, true);
        let bias = bias.then(|| b.param("bias", Tensor::zeros(&[cout]), false));
        Self { weight, bias, spec }
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let w = cx.var(self.weight);
        let b = self.bias.map(|p| cx.var(p));
        Ok(cx.tape.conv2d(x, w, b, self.spec)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, channels: usize) -> Self {
        Self {
            gamma: b.param("weight", Tensor::full(&[channels], T::one()), false),
            beta: b.param("bias", Tensor::zeros(&[channels]), false),
            running_mean: b.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: b.buffer("running_var", Tensor::full(&[channels], T::one())),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.var(self.gamma), cx.var(self.beta));
        if cx.train {
            let (y, stats) = cx.tape.batch_norm_train(x, g, b, BN_EPS)?;
            cx.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
            Ok(y)
        } else {
            let store = cx.store;
            let mean = store.buffer(self.running_mean).data();
            let var = store.buffer(self.running_var).data();
            Ok(cx.tape.batch_norm_eval(x, g, b, mean, var, BN_EPS)?)
        }
    }
}

/// `k x k` convolution, batch norm, ReLU. Padding keeps the spatial size
/// (scaled by the dilation) at stride 1.
#[derive(Clone, Debug)]
pub struct Cbr {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Cbr {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize, kernel: usize) -> Self {
        Self::with_spec(b, cin, cout, kernel, Conv2dSpec::same(kernel))
    }

    pub fn with_spec<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize, kernel: usize, spec: Conv2dSpec) -> Self {
        Self {
            conv: Conv2d::new(&mut b.sub("conv"), cin, cout, kernel, spec, false),
            bn: BatchNorm2d::new(&mut b.sub("bn"), cout),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let y = self.pre_activation(cx, x)?;
        Ok(cx.tape.relu(y))
    }

    /// Convolution and batch norm without the final ReLU.
    pub fn pre_activation<T: Real>(&self, cx: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        self.bn.forward(cx, y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize) -> Self {
        Self {
            gamma: b.param("weight", Tensor::full(&[dim], T::one()), false),
            beta: b.param("bias", Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.var(self.gamma), cx.var(self.beta));
        Ok(cx.tape.layer_norm(x, g, b, LN_EPS)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    /// Normal(0, 0.02) weights, zero bias.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, fan_in: usize, fan_out: usize) -> Self {
        let w = b.normal(&[fan_out, fan_in], 0.02);
        Self {
            weight: b.param("weight", w, true),
            bias: b.param("bias", Tensor::zeros(&[fan_out]), false),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Fwd<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.var(self.weight), cx.var(self.bias));
        Ok(cx.tape.linear(x, w, Some(b))?)
    }
}
