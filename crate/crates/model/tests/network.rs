use cbff_core::ops::attention_probs;
use cbff_core::rng::seeded_rng;
use cbff_core::{DecoderVariant, Real, Tensor, TrainConfig};
use cbff_model::decoder::{Aspp, FusionBlock, Gtb, ASPP_RATES};
use cbff_model::params::Builder;
use cbff_model::{normalize_images, ChangeNet, Fwd, ModelError, NetConfig, ParamStore};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn toy(variant: DecoderVariant) -> NetConfig {
    let mut cfg = TrainConfig::toy();
    cfg.decoder = variant;
    NetConfig::from(&cfg)
}

fn images(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = seeded_rng(seed, "test-images");
    Tensor::from_fn(shape, |_| rng.random::<f32>())
}

fn randn<T: Real>(shape: &[usize], std: f64, seed: u64) -> Tensor<T> {
    let mut rng = seeded_rng(seed, "test-randn");
    let d = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(d.sample(&mut rng)))
}

/// Overwrite every parameter with Normal(0, std) noise so that zero biases
/// and unit norms cannot hide mistakes.
fn scramble<T: Real>(store: &mut ParamStore<T>, std: f64, seed: u64) {
    for (i, p) in store.params.iter_mut().enumerate() {
        p.value = randn(p.value.shape(), std, seed + i as u64);
    }
}

fn param<'a, T>(store: &'a ParamStore<T>, name: &str) -> &'a Tensor<T> {
    &store.params.iter().find(|p| p.name == name).unwrap_or_else(|| panic!("no {name}")).value
}

/// Eval-mode forward returning the traced intermediates and both logits.
fn traced_forward<T: Real>(
    net: &ChangeNet,
    store: &ParamStore<T>,
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    names: &[&str],
) -> (Vec<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let mut cx = Fwd::new(store, false, false).with_trace();
    let va = cx.tape.constant(normalize_images(a).unwrap());
    let vb = cx.tape.constant(normalize_images(b).unwrap());
    let out = net.forward(&mut cx, va, vb).unwrap();
    let traced = names.iter().map(|n| cx.traced(n).unwrap().clone()).collect();
    (traced, cx.tape.value(out.logits_c).clone(), cx.tape.value(out.logits_t).clone())
}

#[test]
fn encoder_and_decoder_geometry() {
    let (net, store) = ChangeNet::new::<f32>(&toy(DecoderVariant::Cbff), 1);
    let a = images(&[2, 3, 64, 64], 1);
    let b = images(&[2, 3, 64, 64], 2);
    let names = ["c1_a", "c2_a", "c3_a", "c4_a", "d1", "d2", "d3", "d4", "f_b", "f4", "f3", "f2", "f1"];
    let (t, lc, lt) = traced_forward(&net, &store, &a, &b, &names);
    let expect: [&[usize]; 13] = [
        &[2, 16, 16, 16],
        &[2, 32, 8, 8],
        &[2, 64, 4, 4],
        &[2, 128, 2, 2],
        &[2, 16, 16, 16],
        &[2, 16, 8, 8],
        &[2, 16, 4, 4],
        &[2, 16, 2, 2],
        &[2, 16, 2, 2],
        &[2, 16, 2, 2],
        &[2, 16, 4, 4],
        &[2, 16, 8, 8],
        &[2, 16, 16, 16],
    ];
    for ((name, tensor), shape) in names.iter().zip(&t).zip(expect) {
        assert_eq!(tensor.shape(), shape, "{name}");
    }
    assert_eq!(lc.shape(), &[2, 2, 64, 64]);
    assert_eq!(lt.shape(), &[2, 2, 64, 64]);
}

#[test]
fn siamese_encoder_shares_weights() {
    let (net, store) = ChangeNet::new::<f64>(&toy(DecoderVariant::Cbff), 2);
    let a = images(&[1, 3, 32, 32], 3);
    let b = images(&[1, 3, 32, 32], 4);
    let names = ["c1_a", "c2_a", "c3_a", "c4_a", "c1_b", "c2_b", "c3_b", "c4_b"];

    let (same, _, _) = traced_forward(&net, &store, &a, &a, &names);
    for i in 0..4 {
        assert_eq!(same[i], same[i + 4], "stage {}", i + 1);
    }

    let (ab, _, _) = traced_forward(&net, &store, &a, &b, &names);
    let (ba, _, _) = traced_forward(&net, &store, &b, &a, &names);
    for i in 0..4 {
        assert_eq!(ab[i], ba[i + 4]);
        assert_eq!(ab[i + 4], ba[i]);
    }
}

#[test]
fn difference_inputs_match_elementwise_oracle() {
    let (net, store) = ChangeNet::new::<f64>(&toy(DecoderVariant::Cbff), 3);
    let a = images(&[2, 3, 32, 32], 5);
    let b = images(&[2, 3, 32, 32], 6);
    let mut names = Vec::new();
    for i in 1..=4 {
        names.extend([format!("c{i}_a"), format!("c{i}_b"), format!("absdiff{i}")]);
    }
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let (t, _, _) = traced_forward(&net, &store, &a, &b, &names);
    for s in 0..4 {
        let oracle = t[3 * s].zip_map(&t[3 * s + 1], |x, y| (x - y).abs());
        assert_eq!(t[3 * s + 2], oracle);
    }

    let (t, _, _) = traced_forward(&net, &store, &a, &a, &names);
    for s in 0..4 {
        assert!(t[3 * s + 2].data().iter().all(|&v| v == 0.0), "stage {}", s + 1);
    }
}

#[test]
fn temporal_swap_is_exact_in_eval_mode() {
    for variant in [DecoderVariant::Cbff, DecoderVariant::CnnOnly, DecoderVariant::TransOnly] {
        let (net, mut store) = ChangeNet::new::<f64>(&toy(variant), 4);
        // Non-trivial running statistics, as after training.
        for (i, buf) in store.buffers.iter_mut().enumerate() {
            let noise = randn::<f64>(buf.value.shape(), 0.1, 100 + i as u64);
            buf.value = buf.value.zip_map(&noise, |v, n| v + n.abs());
        }
        let a = images(&[2, 3, 32, 64], 7);
        let b = images(&[2, 3, 32, 64], 8);
        let (_, c1, t1) = traced_forward(&net, &store, &a, &b, &[]);
        let (_, c2, t2) = traced_forward(&net, &store, &b, &a, &[]);
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&c1), bits(&c2), "{variant}");
        assert_eq!(bits(&t1), bits(&t2), "{variant}");
    }
}

#[test]
fn outputs_follow_input_size_and_are_distributions() {
    let (net, store) = ChangeNet::new::<f32>(&toy(DecoderVariant::Cbff), 5);
    for (h, w) in [(32, 32), (64, 96), (96, 64)] {
        let a = images(&[2, 3, h, w], 9);
        let b = images(&[2, 3, h, w], 10);
        let out = net.predict(&store, &a, &b).unwrap();
        for p in [&out.p_c, &out.p_t] {
            assert_eq!(p.shape(), &[2, 2, h, w]);
            let hw = h * w;
            for n in 0..2 {
                for i in 0..hw {
                    let (p0, p1) = (p[n * 2 * hw + i], p[n * 2 * hw + hw + i]);
                    assert!((0.0..=1.0).contains(&p0) && (0.0..=1.0).contains(&p1));
                    assert!((p0 + p1 - 1.0).abs() <= 1e-5);
                }
            }
        }
    }
}

#[test]
fn input_size_checks() {
    let (net, store) = ChangeNet::new::<f32>(&toy(DecoderVariant::Cbff), 6);
    let a = images(&[1, 3, 48, 64], 1);
    assert!(matches!(net.predict(&store, &a, &a), Err(ModelError::Shape(_))));
    let b = images(&[1, 3, 64, 64], 1);
    let c = images(&[1, 3, 32, 64], 1);
    assert!(matches!(net.predict(&store, &b, &c), Err(ModelError::Shape(_))));

    net.check_input(256, 256).unwrap();
    net.check_input(512, 512).unwrap();
    assert!(matches!(
        net.check_input(544, 544),
        Err(ModelError::TokenBudget { tokens: 18496, limit: 16384 })
    ));
    let mut cfg = toy(DecoderVariant::Cbff);
    cfg.allow_large_attention = true;
    let (net, _) = ChangeNet::new::<f32>(&cfg, 6);
    net.check_input(544, 544).unwrap();
    let (net, _) = ChangeNet::new::<f32>(&toy(DecoderVariant::CnnOnly), 6);
    net.check_input(544, 544).unwrap();
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &Tensor<f64>, dilation: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, k, _) = w.dims4().unwrap();
    let half = (k / 2) as isize;
    let mut out = Tensor::zeros(&[n, cout, h, wd]);
    for b in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bias[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + (ky as isize - half) * dilation as isize;
                                let sx = xx as isize + (kx as isize - half) * dilation as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * cin + c) * h + sy as usize) * wd + sx as usize;
                                acc += w[((o * cin + c) * k + ky) * k + kx] * x[xi];
                            }
                        }
                    }
                    out.data_mut()[((b * cout + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn standalone_aspp(width: usize, seed: u64) -> (Aspp, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed, "init");
    let aspp = Aspp::new(&mut Builder::new(&mut store, &mut rng).sub("aspp"), width);
    scramble(&mut store, 0.3, seed);
    (aspp, store)
}

#[test]
fn aspp_branches_on_constant_input() {
    let width = 4;
    let (aspp, store) = standalone_aspp(width, 11);
    let levels = [0.7, -1.2, 0.3, 2.0];
    let x = Tensor::from_fn(&[1, width, 6, 6], |i| levels[i / 36]);

    let mut cx = Fwd::new(&store, false, false);
    let vx = cx.tape.constant(x.clone());
    let branches = aspp.branches(&mut cx, vx).unwrap();
    assert_eq!(branches.len(), 5);

    let point = naive_conv(&x, param(&store, "aspp.point.weight"), param(&store, "aspp.point.bias"), 1);
    assert!(cx.tape.value(branches[0]).zip_map(&point, |a, b| (a - b).abs()).max_abs() < 1e-12);
    for (j, r) in ASPP_RATES.iter().enumerate() {
        let w = param(&store, &format!("aspp.atrous{r}.weight"));
        let b = param(&store, &format!("aspp.atrous{r}.bias"));
        let oracle = naive_conv(&x, w, b, *r);
        let got = cx.tape.value(branches[1 + j]);
        assert!(got.zip_map(&oracle, |a, b| (a - b).abs()).max_abs() < 1e-12, "rate {r}");
    }
    // Every dilation is at least the map size, so only the centre tap ever
    // lands inside: the dilated branches reduce to their centre 1x1 kernel.
    for (j, r) in ASPP_RATES.iter().enumerate() {
        let got = cx.tape.value(branches[1 + j]);
        for o in 0..width {
            let plane = &got.data()[o * 36..(o + 1) * 36];
            assert!(plane.iter().all(|&v| v == plane[0]), "rate {r} channel {o}");
        }
    }
    let pooled = cx.tape.value(branches[4]);
    let (pw, pb) = (param(&store, "aspp.pool.weight"), param(&store, "aspp.pool.bias"));
    for o in 0..width {
        let want: f64 = pb[o] + (0..width).map(|c| pw[o * width + c] * levels[c]).sum::<f64>();
        let plane = &pooled.data()[o * 36..(o + 1) * 36];
        assert!(plane.iter().all(|&v| v == plane[0]));
        assert!((plane[0] - want).abs() < 1e-12);
    }

    let y = aspp.forward(&mut cx, vx).unwrap();
    assert_eq!(cx.tape.shape(y), &[1, width, 6, 6]);
}

#[test]
fn aspp_boundary_effects_on_larger_map() {
    // With a 20x20 map the rate-6 taps fall off the edge near the border
    // only, so the branch is constant in the interior and not at the rim.
    let width = 2;
    let (aspp, store) = standalone_aspp(width, 12);
    let x = Tensor::full(&[1, width, 20, 20], 1.0);
    let mut cx = Fwd::new(&store, false, false);
    let vx = cx.tape.constant(x.clone());
    let branches = aspp.branches(&mut cx, vx).unwrap();
    let got = cx.tape.value(branches[1]);
    let oracle = naive_conv(&x, param(&store, "aspp.atrous6.weight"), param(&store, "aspp.atrous6.bias"), 6);
    assert!(got.zip_map(&oracle, |a, b| (a - b).abs()).max_abs() < 1e-12);
    let at = |y: usize, x: usize| got[y * 20 + x];
    assert_eq!(at(7, 7), at(12, 12));
    assert_ne!(at(0, 0), at(10, 10));
}

#[test]
fn aspp_gradients_match_finite_differences() {
    let width = 3;
    let (aspp, store) = standalone_aspp(width, 13);
    let x = randn::<f64>(&[2, width, 6, 6], 1.0, 14);
    let weights = randn::<f64>(&[2, width, 6, 6], 1.0, 15);
    let loss = |store: &ParamStore<f64>, grad: bool| {
        let mut cx = Fwd::new(store, true, grad);
        let vx = cx.tape.constant(x.clone());
        let y = aspp.forward(&mut cx, vx).unwrap();
        let r = cx.tape.constant(weights.clone());
        let prod = cx.tape.mul(y, r).unwrap();
        let l = cx.tape.sum(prod);
        let grads = if grad { Some(cx.tape.backward(l).unwrap()) } else { None };
        let vars = cx.param_vars().to_vec();
        (cx.tape.value(l)[0], grads, vars)
    };
    let (_, grads, vars) = loss(&store, true);
    let grads = grads.unwrap();
    let mut probe = store.clone();
    for (pi, p) in store.params.iter().enumerate() {
        let analytic = grads.get(vars[pi]).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let numeric = cbff_core::gradcheck::finite_diff_grad(
            |t| {
                probe.params[pi].value = t.clone();
                loss(&probe, false).0
            },
            &p.value,
            1e-6,
        )
        .unwrap();
        probe.params[pi].value = p.value.clone();
        let err = cbff_core::gradcheck::relative_error(analytic.data(), numeric.data());
        // Biases feeding batch norm have an exactly-zero true gradient.
        let scale = analytic.max_abs().max(numeric.max_abs());
        assert!(err < 1e-3 || scale < 1e-7, "{}: rel err {err}", p.name);
    }
}

fn standalone_block(variant: DecoderVariant, width: usize, seed: u64) -> (FusionBlock, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed, "init");
    let block = FusionBlock::new(&mut Builder::new(&mut store, &mut rng).sub("block"), width, variant, 4, 4);
    (block, store)
}

#[test]
fn fusion_block_shapes_and_ratio_check() {
    let (block, store) = standalone_block(DecoderVariant::Cbff, 32, 16);
    let mut cx = Fwd::new(&store, false, false);
    let d = cx.tape.constant(randn(&[1, 32, 8, 8], 1.0, 17));
    let prev = cx.tape.constant(randn(&[1, 32, 4, 4], 1.0, 18));
    let f = block.forward(&mut cx, d, prev).unwrap();
    assert_eq!(cx.tape.shape(f), &[1, 32, 8, 8]);

    let bad = cx.tape.constant(randn(&[1, 32, 3, 3], 1.0, 19));
    let d9 = cx.tape.constant(randn(&[1, 32, 9, 9], 1.0, 20));
    assert!(matches!(block.forward(&mut cx, d9, bad), Err(ModelError::Shape(_))));
}

#[test]
fn dropping_transformer_path_leaves_the_convolutional_block() {
    let (block, mut store) = standalone_block(DecoderVariant::Cbff, 8, 21);
    scramble(&mut store, 0.3, 22);
    let (cnn, mut cnn_store) = standalone_block(DecoderVariant::CnnOnly, 8, 23);
    for p in &mut cnn_store.params {
        p.value = param(&store, &p.name).clone();
    }
    let d = randn::<f64>(&[2, 8, 8, 8], 1.0, 24);
    let prev = randn::<f64>(&[2, 8, 4, 4], 1.0, 25);
    let run = |blk: &FusionBlock, st: &ParamStore<f64>, drop: bool| {
        let mut cx = Fwd::new(st, true, false);
        cx.hooks.drop_transformer_path = drop;
        let vd = cx.tape.constant(d.clone());
        let vp = cx.tape.constant(prev.clone());
        let f = blk.forward(&mut cx, vd, vp).unwrap();
        cx.tape.value(f).clone()
    };
    let dropped = run(&block, &store, true);
    assert_eq!(dropped, run(&cnn, &cnn_store, false));
    assert_ne!(dropped, run(&block, &store, false));
}

#[test]
fn single_token_attention_matches_hand_computation() {
    let c = 8;
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(26, "init");
    let gtb = Gtb::new(&mut Builder::new(&mut store, &mut rng).sub("g"), c, 4, 4);
    scramble(&mut store, 0.4, 27);
    let x = randn::<f64>(&[2, c, 1, 1], 1.0, 28);

    let mut cx = Fwd::new(&store, false, false);
    let vx = cx.tape.constant(x.clone());
    let y = gtb.forward(&mut cx, vx).unwrap();
    let got = cx.tape.value(y).clone();

    let p = |n: &str| param(&store, &format!("g.{n}")).data().to_vec();
    let linear = |w: &[f64], b: &[f64], v: &[f64]| -> Vec<f64> {
        let fan_in = v.len();
        (0..b.len()).map(|o| b[o] + (0..fan_in).map(|i| w[o * fan_in + i] * v[i]).sum::<f64>()).collect()
    };
    let layer_norm = |v: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / v.len() as f64;
        v.iter().enumerate().map(|(i, t)| (t - mean) / (var + 1e-5).sqrt() * g[i] + b[i]).collect()
    };
    for n in 0..2 {
        let token: Vec<f64> = (0..c).map(|ch| x[n * c + ch]).collect();
        let n1 = layer_norm(&token, &p("norm1.weight"), &p("norm1.bias"));
        // One token: its attention weight is 1, so MSA is proj(v).
        let v = linear(&p("attn.v.weight"), &p("attn.v.bias"), &n1);
        let a = linear(&p("attn.proj.weight"), &p("attn.proj.bias"), &v);
        let z: Vec<f64> = a.iter().zip(&token).map(|(a, t)| a + t).collect();
        let n2 = layer_norm(&z, &p("norm2.weight"), &p("norm2.bias"));
        let h: Vec<f64> = linear(&p("mlp.fc1.weight"), &p("mlp.fc1.bias"), &n2)
            .into_iter()
            .map(|t| 0.5 * t * (1.0 + <f64 as Real>::erf(t / 2f64.sqrt())))
            .collect();
        let m = linear(&p("mlp.fc2.weight"), &p("mlp.fc2.bias"), &h);
        for ch in 0..c {
            let want = m[ch] + z[ch];
            assert!((got[n * c + ch] - want).abs() < 1e-12, "sample {n} channel {ch}");
        }
    }

    let q = randn::<f64>(&[2, 1, c], 1.0, 29);
    let k = randn::<f64>(&[2, 1, c], 1.0, 30);
    let probs = attention_probs(&q, &k, 4).unwrap();
    assert!(probs.data().iter().all(|&w| w == 1.0));
}

#[test]
fn attention_rows_are_normalised() {
    let q = randn::<f32>(&[2, 64, 16], 3.0, 31);
    let k = randn::<f32>(&[2, 64, 16], 3.0, 32);
    let probs = attention_probs(&q, &k, 4).unwrap();
    assert_eq!(probs.shape(), &[2, 4, 64, 64]);
    for row in probs.data().chunks(64) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() <= 1e-5);
        assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }
}

#[test]
fn heads_do_not_leak_gradient_into_each_other() {
    let (net, store) = ChangeNet::new::<f64>(&toy(DecoderVariant::Cbff), 33);
    let a = normalize_images::<f64>(&images(&[2, 3, 32, 32], 34)).unwrap();
    let b = normalize_images::<f64>(&images(&[2, 3, 32, 32], 35)).unwrap();
    for (which, other) in [("c", "head_t."), ("t", "head_c.")] {
        let mut cx = Fwd::new(&store, true, true);
        let va = cx.tape.constant(a.clone());
        let vb = cx.tape.constant(b.clone());
        let out = net.forward(&mut cx, va, vb).unwrap();
        let logits = if which == "c" { out.logits_c } else { out.logits_t };
        let p = cx.tape.softmax_channels(logits).unwrap();
        let r = cx.tape.constant(randn(&[2, 2, 32, 32], 1.0, 40));
        let weighted = cx.tape.mul(p, r).unwrap();
        let l = cx.tape.sum(weighted);
        let grads = cx.tape.backward(l).unwrap();
        let mut touched = 0;
        for (pi, prm) in store.params.iter().enumerate() {
            let g = grads.get(cx.param_vars()[pi]);
            if prm.name.starts_with(other) {
                assert!(g.is_none_or(|g| g.data().iter().all(|&v| v == 0.0)), "{}", prm.name);
            } else if g.is_some_and(|g| g.max_abs() > 0.0) {
                touched += 1;
            }
        }
        assert!(touched > 0);
    }
}

#[test]
fn parameter_counts_are_pinned() {
    let count = |v| ChangeNet::new::<f32>(&toy(v), 0).1.param_count();
    let (cbff, cnn, trans) = (
        count(DecoderVariant::Cbff),
        count(DecoderVariant::CnnOnly),
        count(DecoderVariant::TransOnly),
    );
    assert_eq!((cbff, cnn, trans), (111_064, 102_616, 95_656));
    assert!(cbff > cnn && cbff > trans);

    let full = |v| {
        let mut cfg = TrainConfig::default();
        cfg.decoder = v;
        ChangeNet::new::<f32>(&NetConfig::from(&cfg), 0).1.param_count()
    };
    assert_eq!(full(DecoderVariant::Cbff), 24_916_996);
}

#[test]
fn batch_norm_modes() {
    let (net, mut store) = ChangeNet::new::<f64>(&toy(DecoderVariant::Cbff), 36);
    let x0 = images(&[1, 3, 32, 32], 37);
    let x1 = images(&[1, 3, 32, 32], 38);
    let x2 = images(&[1, 3, 32, 32], 39);
    let pair = |u: &Tensor<f32>, v: &Tensor<f32>| Tensor::stack_outer(&[u, v]).unwrap();
    let first = |store: &ParamStore<f64>, batch: &Tensor<f32>, train: bool| {
        let mut cx = Fwd::new(store, train, false);
        let va = cx.tape.constant(normalize_images(batch).unwrap());
        let vb = cx.tape.constant(normalize_images(&batch.map(|v| 1.0 - v)).unwrap());
        let out = net.forward(&mut cx, va, vb).unwrap();
        let n = cx.bn_updates.len();
        (cx.tape.value(out.logits_c).slice_outer(0, 1), n)
    };
    let (e1, n_eval) = first(&store, &pair(&x0, &x1), false);
    let (e2, _) = first(&store, &pair(&x0, &x2), false);
    assert_eq!(e1, e2, "eval output must not depend on the rest of the batch");
    assert_eq!(n_eval, 0);
    assert_eq!(e1, first(&store, &pair(&x0, &x1), false).0);

    let (t1, n_train) = first(&store, &pair(&x0, &x1), true);
    let (t2, _) = first(&store, &pair(&x0, &x2), true);
    assert_ne!(t1, t2, "train output uses batch statistics");
    assert!(n_train > 0);

    // Applying running-stat updates changes eval behaviour and nothing else.
    let mut cx = Fwd::new(&store, true, false);
    let batch = pair(&x0, &x1);
    let va = cx.tape.constant(normalize_images::<f64>(&batch).unwrap());
    let vb = cx.tape.constant(normalize_images::<f64>(&batch.map(|v| 1.0 - v)).unwrap());
    net.forward(&mut cx, va, vb).unwrap();
    let updates = std::mem::take(&mut cx.bn_updates);
    drop(cx);
    let params_before: Vec<_> = store.params.iter().map(|p| p.value.clone()).collect();
    for u in &updates {
        store.apply_bn_update(u, 0.1);
    }
    assert!(store.params.iter().zip(&params_before).all(|(p, q)| &p.value == q));
    assert_ne!(first(&store, &pair(&x0, &x1), false).0, e1);
}
