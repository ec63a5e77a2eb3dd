//! Whole-network gradient verification against central differences.

use std::collections::BTreeMap;

use cbff_core::gradcheck::{finite_diff_at_5pt, relative_error};
use cbff_core::rng::{seeded_rng, Stream};
use cbff_core::{Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::network::{normalize_images, ChangeNet, NetConfig};
use crate::params::{Fwd, ParamStore};

/// Result for one parameter group (a module's parameters).
#[derive(Clone, Debug)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    /// Coordinates rejected because the objective is not differentiable
    /// within the stencil.
    pub skipped: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub batch: usize,
    pub size: usize,
    /// Largest finite-difference step tried.
    pub eps: f64,
    /// Coordinates sampled per parameter tensor.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Corrupt the ReLU backward pass (harness self-test).
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            batch: 8,
            size: 32,
            eps: 1e-3,
            samples_per_tensor: 4,
            seed: 7,
            inject_fault: false,
        }
    }
}

/// Group name: the module path without its final parameter component,
/// truncated to two levels.
pub fn group_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let keep = (parts.len() - 1).clamp(1, 2);
    parts[..keep].join(".")
}

/// Agreement required between the estimates at a step and its half.
const STEP_RTOL: f64 = 1e-7;
/// Absolute round-off in the loss, which the stencil divides by the step.
const LOSS_ROUNDOFF: f64 = 1e-14;
/// Successively smaller steps tried per coordinate.
const STEP_LADDER: usize = 5;

/// Five-point derivative at the largest step (starting from `eps_max`,
/// shrinking tenfold) where halving the step leaves the estimate unchanged.
/// A ReLU or max-pool switch inside the stencil breaks that agreement, so
/// `None` means the objective is not smooth near this coordinate.
fn stable_derivative(
    eval: &mut impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    i: usize,
    eps_max: f64,
) -> Result<Option<f64>> {
    let mut eps = eps_max;
    for _ in 0..STEP_LADDER {
        let coarse = finite_diff_at_5pt(&mut *eval, x, eps, &[i])?[0];
        let fine = finite_diff_at_5pt(&mut *eval, x, eps / 2.0, &[i])?[0];
        let tol = STEP_RTOL * coarse.abs().max(fine.abs()) + 4.0 * LOSS_ROUNDOFF / eps;
        if (coarse - fine).abs() <= tol {
            return Ok(Some(fine));
        }
        eps /= 10.0;
    }
    Ok(None)
}

struct Problem {
    a: Tensor<f64>,
    b: Tensor<f64>,
    labels: Vec<u8>,
}

fn loss_on(net: &ChangeNet, cx: &mut Fwd<'_, f64>, p: &Problem) -> Result<Var> {
    let va = cx.tape.constant(p.a.clone());
    let vb = cx.tape.constant(p.b.clone());
    let out = net.forward(cx, va, vb)?;
    let lc = cx.tape.cross_entropy(out.logits_c, &p.labels, None)?;
    let lt = cx.tape.cross_entropy(out.logits_t, &p.labels, None)?;
    let s = cx.tape.add(lc, lt)?;
    Ok(cx.tape.scale(s, 0.5))
}

fn random_images(rng: &mut Stream, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random::<f32>())
}

/// Analytic vs numeric gradients of the mean two-head cross entropy, for a
/// sample of coordinates in every parameter tensor, in 64-bit precision with
/// training-mode batch norm.
pub fn check_network(cfg: &NetConfig, opts: &GradCheckOptions) -> Result<Vec<GroupReport>> {
    let (net, store) = ChangeNet::new::<f64>(cfg, opts.seed);
    let mut rng = seeded_rng(opts.seed, "gradcheck");
    let shape = [opts.batch, 3, opts.size, opts.size];
    let problem = Problem {
        a: normalize_images(&random_images(&mut rng, &shape))?,
        b: normalize_images(&random_images(&mut rng, &shape))?,
        labels: (0..opts.batch * opts.size * opts.size)
            .map(|_| u8::from(rng.random::<f64>() < 0.3))
            .collect(),
    };

    let mut cx = Fwd::new(&store, true, true);
    cx.tape.inject_relu_fault(opts.inject_fault);
    let loss = loss_on(&net, &mut cx, &problem)?;
    let grads = cx.tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = cx
        .param_vars()
        .iter()
        .zip(&store.params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect();
    drop(cx);

    let mut groups: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
    let mut probe_store: ParamStore<f64> = store.clone();
    for (pi, param) in store.params.iter().enumerate() {
        let grad = &analytic[pi];
        let n = grad.numel();
        let peak = grad.max_abs();
        // Half the draws come from coordinates with a non-negligible gradient
        // so that structurally-zero entries (out-of-range dilated taps, biases
        // feeding batch norm) cannot make up a whole group.
        let active: Vec<usize> = (0..n).filter(|&i| grad[i].abs() > 1e-3 * peak).collect();
        let want = opts.samples_per_tensor.min(n);
        let mut chosen: Vec<usize> = Vec::with_capacity(want);
        let mut budget = 4 * want;
        let mut failure = None;
        let mut eval = |probe: &Tensor<f64>| {
            probe_store.params[pi].value = probe.clone();
            let mut cx = Fwd::new(&probe_store, true, false);
            match loss_on(&net, &mut cx, &problem) {
                Ok(l) => cx.tape.value(l)[0],
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        };
        while chosen.len() < want && budget > 0 {
            budget -= 1;
            let i = if chosen.len() % 2 == 0 && !active.is_empty() {
                active[rng.random_range(0..active.len())]
            } else {
                rng.random_range(0..n)
            };
            if chosen.contains(&i) {
                continue;
            }
            let Some(numeric) = stable_derivative(&mut eval, &param.value, i, opts.eps)? else {
                *skipped.entry(group_of(&param.name)).or_default() += 1;
                continue;
            };
            chosen.push(i);
            let entry = groups.entry(group_of(&param.name)).or_default();
            entry.0.push(grad[i]);
            entry.1.push(numeric);
        }
        if let Some(e) = failure.take() {
            return Err(e);
        }
        probe_store.params[pi].value = param.value.clone();
    }
    Ok(groups
        .into_iter()
        .map(|(group, (a, n))| GroupReport {
            skipped: skipped.get(&group).copied().unwrap_or(0),
            group,
            checked: a.len(),
            rel_error: relative_error(&a, &n),
        })
        .collect())
}
