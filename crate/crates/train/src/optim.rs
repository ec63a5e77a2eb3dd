//! SGD with momentum and weight decay on a parameter store.

use cbff_core::{Real, Tensor};
use cbff_model::ParamStore;

use crate::error::{Result, TrainError};

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// `v <- mu v + (g + wd p)`, `p <- p - lr v`. Decay applies only to
    /// parameters flagged for it (not norm scales/shifts or biases). A
    /// missing gradient counts as zero. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if grads.len() != store.params.len() {
            return Err(TrainError::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.params.len()
            )));
        }
        for (p, g) in store.params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(TrainError::Shape(format!("gradient shape {:?} for {}", g.shape(), p.name)));
                }
                if !g.is_finite() {
                    return Err(TrainError::NonFinite {
                        what: format!("gradient of {}", p.name),
                        epoch: 0,
                        iter: 0,
                    });
                }
            }
        }
        let (lr, mu, wd) = (T::from_f64_lossy(self.lr), T::from_f64_lossy(self.momentum), T::from_f64_lossy(self.weight_decay));
        for ((p, g), v) in store.params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let decay = p.decay && self.weight_decay != 0.0;
            let pv = p.value.data_mut();
            let vv = v.data_mut();
            for i in 0..pv.len() {
                let mut d = g.map_or(T::zero(), |g| g.data()[i]);
                if decay {
                    d = d + wd * pv[i];
                }
                vv[i] = mu * vv[i] + d;
                pv[i] = pv[i] - lr * vv[i];
            }
        }
        Ok(())
    }
}
