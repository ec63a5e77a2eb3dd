use cbff_core::gradcheck::relative_error;
use cbff_core::rng::seeded_rng;
use cbff_core::{Real, Tensor, TrainConfig};
use cbff_model::gradcheck::{check_network, group_of, GradCheckOptions};
use cbff_model::{normalize_images, ChangeNet, Fwd, NetConfig, ParamStore};
use rand::Rng;

#[test]
fn network_gradients_match_finite_differences() {
    let cfg = NetConfig::from(&TrainConfig::toy());
    let opts = GradCheckOptions {
        samples_per_tensor: 1,
        ..GradCheckOptions::default()
    };
    let report = check_network(&cfg, &opts).unwrap();
    assert!(report.len() >= 30, "{} groups", report.len());
    for g in &report {
        assert!(g.checked > 0, "{} has no checked coordinates", g.group);
        assert!(g.rel_error < 1e-6, "{}: {:e}", g.group, g.rel_error);
    }
}

#[test]
fn broken_backward_is_caught() {
    let cfg = NetConfig::from(&TrainConfig::toy());
    let opts = GradCheckOptions {
        samples_per_tensor: 1,
        batch: 4,
        inject_fault: true,
        ..GradCheckOptions::default()
    };
    let report = check_network(&cfg, &opts).unwrap();
    let worst = report.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    assert!(worst > 1e-3, "fault went unnoticed: {worst:e}");
}

fn loss_gradients<T: Real>(net: &ChangeNet, store: &ParamStore<T>, a: &Tensor<f32>, b: &Tensor<f32>, labels: &[u8]) -> Vec<Tensor<T>> {
    let mut cx = Fwd::new(store, true, true);
    let va = cx.tape.constant(normalize_images(a).unwrap());
    let vb = cx.tape.constant(normalize_images(b).unwrap());
    let out = net.forward(&mut cx, va, vb).unwrap();
    let lc = cx.tape.cross_entropy(out.logits_c, labels, None).unwrap();
    let lt = cx.tape.cross_entropy(out.logits_t, labels, None).unwrap();
    let l = cx.tape.add(lc, lt).unwrap();
    let grads = cx.tape.backward(l).unwrap();
    cx.param_vars()
        .iter()
        .zip(&store.params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect()
}

/// Single-precision accumulation over long reductions (weight-gradient
/// products, batch-norm sums shared by both dates) leaves the end-to-end
/// f32 gradient about 1.1e-2 away from the verified f64 one.
const F32_TOLERANCE: f64 = 2e-2;

/// Single precision tracks the finite-difference-verified double precision
/// gradients per group.
#[test]
fn single_precision_gradients_track_double() {
    let cfg = NetConfig::from(&TrainConfig::toy());
    let (net, wide) = ChangeNet::new::<f64>(&cfg, 3);
    let narrow: ParamStore<f32> = wide.cast();
    let mut rng = seeded_rng(3, "f32-check");
    let a = Tensor::from_fn(&[8, 3, 32, 32], |_| rng.random::<f32>());
    let b = Tensor::from_fn(&[8, 3, 32, 32], |_| rng.random::<f32>());
    let labels: Vec<u8> = (0..8 * 32 * 32).map(|_| u8::from(rng.random::<f32>() < 0.3)).collect();
    let g64 = loss_gradients(&net, &wide, &a, &b, &labels);
    let g32 = loss_gradients(&net, &narrow, &a, &b, &labels);

    let mut groups: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)> = Default::default();
    for ((p, x), y) in wide.params.iter().zip(&g64).zip(&g32) {
        let e = groups.entry(group_of(&p.name)).or_default();
        e.0.extend(x.data());
        e.1.extend(y.data().iter().map(|&v| v as f64));
    }
    for (group, (x, y)) in groups {
        let err = relative_error(&x, &y);
        assert!(err < F32_TOLERANCE, "{group}: {err:e}");
    }
}
