//! Parameter and buffer storage, and the per-pass forward context that
//! binds parameters onto a tape.

use cbff_core::ops::BatchStats;
use cbff_core::rng::Stream;
use cbff_core::{Real, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether weight decay applies (false for norm parameters and biases).
    pub decay: bool,
}

#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Every trainable parameter plus the batch-norm running statistics.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
    pub buffers: Vec<Buffer<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                })
                .collect(),
        }
    }

    /// Fold one batch's statistics into the running mean / variance.
    pub fn apply_bn_update(&mut self, update: &BnUpdate<T>, momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        for (r, &s) in self.buffers[update.mean.0].value.data_mut().iter_mut().zip(&update.stats.mean) {
            *r = keep * *r + m * s;
        }
        for (r, &s) in self.buffers[update.var.0].value.data_mut().iter_mut().zip(&update.stats.var) {
            *r = keep * *r + m * s;
        }
    }
}

/// Registers parameters under a dotted name prefix during construction.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut Stream,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut Stream) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>, decay: bool) -> ParamId {
        let name = self.full_name(name);
        self.store.params.push(Param { name, value, decay });
        ParamId(self.store.params.len() - 1)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> BufferId {
        let name = self.full_name(name);
        self.store.buffers.push(Buffer { name, value });
        BufferId(self.store.buffers.len() - 1)
    }

    /// Zero-mean normal initialisation with the given standard deviation.
    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(self.rng)))
    }
}

/// Running-statistics update produced by one training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats<T>,
}

/// Switches used by tests to isolate parts of the decoder.
#[derive(Clone, Copy, Debug, Default)]
pub struct Hooks {
    /// Drop the transformer branch from every fusion block's sum.
    pub drop_transformer_path: bool,
}

/// One forward pass: the tape, the parameters bound onto it and the
/// side-effects the pass wants to apply afterwards.
pub struct Fwd<'s, T> {
    pub tape: Tape<T>,
    pub store: &'s ParamStore<T>,
    vars: Vec<Var>,
    pub train: bool,
    pub bn_updates: Vec<BnUpdate<T>>,
    pub hooks: Hooks,
    trace: Option<Vec<(String, Var)>>,
}

impl<'s, T: Real> Fwd<'s, T> {
    /// `train` selects batch statistics for batch norm; `grad` records
    /// backward closures for every parameter.
    pub fn new(store: &'s ParamStore<T>, train: bool, grad: bool) -> Self {
        let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
        let vars = store.params.iter().map(|p| tape.leaf(p.value.clone(), grad)).collect();
        Self {
            tape,
            store,
            vars,
            train,
            bn_updates: Vec::new(),
            hooks: Hooks::default(),
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Tape variable for every parameter, in store order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn record(&mut self, name: impl Into<String>, v: Var) {
        if let Some(t) = self.trace.as_mut() {
            t.push((name.into(), v));
        }
    }

    pub fn traced(&self, name: &str) -> Option<&Tensor<T>> {
        self.trace
            .as_ref()?
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| self.tape.value(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbff_core::rng::seeded_rng;

    #[test]
    fn builder_names_are_dotted_paths() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded_rng(0, "init");
        let mut b = Builder::new(&mut store, &mut rng);
        let mut enc = b.sub("encoder");
        let mut layer = enc.sub("layer1");
        layer.param("weight", Tensor::zeros(&[2]), true);
        b.buffer("running_mean", Tensor::zeros(&[2]));
        assert_eq!(store.params[0].name, "encoder.layer1.weight");
        assert_eq!(store.buffers[0].name, "running_mean");
        assert_eq!(store.param_count(), 2);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded_rng(0, "init");
        let (mean, var) = {
            let mut b = Builder::new(&mut store, &mut rng);
            (b.buffer("m", Tensor::zeros(&[1])), b.buffer("v", Tensor::full(&[1], 1.0)))
        };
        let update = BnUpdate {
            mean,
            var,
            stats: BatchStats { mean: vec![2.0], var: vec![5.0] },
        };
        store.apply_bn_update(&update, 0.1);
        assert!((store.buffer(mean)[0] - 0.2).abs() < 1e-15);
        assert!((store.buffer(var)[0] - 1.4).abs() < 1e-15);
    }
}
