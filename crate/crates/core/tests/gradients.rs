//! Analytic backward passes against the central-difference oracle, in f64.

use cbff_core::gradcheck::check_tape_fn;
use cbff_core::ops::Conv2dSpec;
use cbff_core::{Result, Tape, Tensor, Var};

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

/// Deterministic pseudo-random values in roughly [-1, 1], kept away from 0.
fn rand_tensor(shape: &[usize], salt: u64) -> Tensor<f64> {
    let mut state = 0x9E37_79B9_7F4A_7C15u64 ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        let u = (state >> 11) as f64 / (1u64 << 53) as f64;
        let v = u * 2.0 - 1.0;
        if v.abs() < 0.05 {
            v + 0.1_f64.copysign(v)
        } else {
            v
        }
    })
}

/// Reduce any output to a scalar with fixed non-uniform weights.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, salt: u64) -> Result<Var> {
    let w = tape.constant(rand_tensor(tape.shape(y), salt));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn assert_close(errs: Vec<f64>, what: &str) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < TOL, "{what}: input {i} relative error {e:e}");
    }
}

#[test]
fn elementwise_ops() {
    let a = rand_tensor(&[2, 3, 4], 1);
    let b = rand_tensor(&[2, 3, 4], 2);
    let errs = check_tape_fn(&[a.clone(), b.clone()], EPS, |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        let m = t.scale(m, 0.7);
        weighted_sum(t, m, 3)
    })
    .unwrap();
    assert_close(errs, "add/sub/mul/scale");

    for (name, op) in [("abs", 0), ("relu", 1), ("gelu", 2)] {
        let errs = check_tape_fn(&[a.clone()], EPS, |t, v| {
            let y = match op {
                0 => t.abs(v[0]),
                1 => t.relu(v[0]),
                _ => t.gelu(v[0]),
            };
            weighted_sum(t, y, 4)
        })
        .unwrap();
        assert_close(errs, name);
    }

    let errs = check_tape_fn(&[a], EPS, |t, v| {
        let s = t.mean(v[0]);
        let q = t.mul(v[0], v[0])?;
        let q = t.sum(q);
        t.add(s, q)
    })
    .unwrap();
    assert_close(errs, "sum/mean");
}

#[test]
fn shape_ops() {
    let a = rand_tensor(&[2, 3, 4, 5], 5);
    let b = rand_tensor(&[2, 2, 4, 5], 6);
    let errs = check_tape_fn(&[a.clone(), b], EPS, |t, v| {
        let c = t.concat_channels(&[v[0], v[1], v[0]])?;
        weighted_sum(t, c, 7)
    })
    .unwrap();
    assert_close(errs, "concat");

    let c = rand_tensor(&[3, 3, 4, 5], 10);
    let errs = check_tape_fn(&[a.clone(), c], EPS, |t, v| {
        let joined = t.concat_batch(&[v[0], v[1]])?;
        let mid = t.slice_batch(joined, 1, 4)?;
        weighted_sum(t, mid, 11)
    })
    .unwrap();
    assert_close(errs, "batch concat/slice");

    let errs = check_tape_fn(&[a.clone()], EPS, |t, v| {
        let p = t.global_avg_pool(v[0])?;
        let e = t.expand_spatial(p, 3, 2)?;
        weighted_sum(t, e, 8)
    })
    .unwrap();
    assert_close(errs, "gap/expand");

    let errs = check_tape_fn(&[a], EPS, |t, v| {
        let tok = t.to_tokens(v[0])?;
        let w = t.constant(rand_tensor(&[2, 20, 3], 9));
        let tok = t.mul(tok, w)?;
        let back = t.from_tokens(tok, 4, 5)?;
        weighted_sum(t, back, 10)
    })
    .unwrap();
    assert_close(errs, "tokens");
}

#[test]
fn convolutions() {
    let cases = [
        (3, Conv2dSpec { stride: 1, padding: 1, dilation: 1 }),
        (3, Conv2dSpec { stride: 2, padding: 1, dilation: 1 }),
        (3, Conv2dSpec { stride: 1, padding: 6, dilation: 6 }),
        (1, Conv2dSpec::default()),
        (1, Conv2dSpec { stride: 2, padding: 0, dilation: 1 }),
        (7, Conv2dSpec { stride: 2, padding: 3, dilation: 1 }),
    ];
    for (i, (k, spec)) in cases.into_iter().enumerate() {
        let x = rand_tensor(&[2, 3, 7, 6], 20 + i as u64);
        let w = rand_tensor(&[4, 3, k, k], 30 + i as u64);
        let b = rand_tensor(&[4], 40 + i as u64);
        let errs = check_tape_fn(&[x, w, b], EPS, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
            weighted_sum(t, y, 50 + i as u64)
        })
        .unwrap();
        assert_close(errs, &format!("conv k={k} {spec:?}"));
    }
}

#[test]
fn max_pool() {
    let x = rand_tensor(&[2, 2, 7, 8], 60);
    let errs = check_tape_fn(&[x], EPS, |t, v| {
        let y = t.max_pool2d(v[0], 3, 2, 1)?;
        weighted_sum(t, y, 61)
    })
    .unwrap();
    assert_close(errs, "max_pool");
}

#[test]
fn normalizations() {
    let x = rand_tensor(&[3, 4, 3, 2], 70);
    let g = rand_tensor(&[4], 71);
    let b = rand_tensor(&[4], 72);
    let errs = check_tape_fn(&[x.clone(), g.clone(), b.clone()], EPS, |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 73)
    })
    .unwrap();
    assert_close(errs, "batch_norm_train");

    let errs = check_tape_fn(&[x, g.clone(), b.clone()], EPS, |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.0, 0.3], &[1.0, 0.5, 2.0, 0.8], 1e-5)?;
        weighted_sum(t, y, 74)
    })
    .unwrap();
    assert_close(errs, "batch_norm_eval");

    let tokens = rand_tensor(&[2, 5, 4], 75);
    let errs = check_tape_fn(&[tokens, g, b], EPS, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 76)
    })
    .unwrap();
    assert_close(errs, "layer_norm");
}

#[test]
fn linear_and_attention() {
    let x = rand_tensor(&[2, 5, 8], 80);
    let w = rand_tensor(&[6, 8], 81);
    let b = rand_tensor(&[6], 82);
    let errs = check_tape_fn(&[x.clone(), w, b], EPS, |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        weighted_sum(t, y, 83)
    })
    .unwrap();
    assert_close(errs, "linear");

    let k = rand_tensor(&[2, 5, 8], 84);
    let vv = rand_tensor(&[2, 5, 8], 85);
    let errs = check_tape_fn(&[x, k, vv], EPS, |t, v| {
        let y = t.attention(v[0], v[1], v[2], 4)?;
        weighted_sum(t, y, 86)
    })
    .unwrap();
    assert_close(errs, "attention");
}

#[test]
fn resize_softmax_and_cross_entropy() {
    let x = rand_tensor(&[2, 2, 3, 4], 90);
    for (oh, ow) in [(6, 8), (5, 3), (12, 16)] {
        let errs = check_tape_fn(&[x.clone()], EPS, |t, v| {
            let y = t.resize_bilinear(v[0], oh, ow)?;
            weighted_sum(t, y, 91)
        })
        .unwrap();
        assert_close(errs, "resize");
    }

    let errs = check_tape_fn(&[x.clone()], EPS, |t, v| {
        let y = t.softmax_channels(v[0])?;
        weighted_sum(t, y, 92)
    })
    .unwrap();
    assert_close(errs, "softmax");

    let targets: Vec<u8> = (0..24).map(|i| (i * 7 % 3 == 0) as u8).collect();
    let valid: Vec<u8> = (0..24).map(|i| (i % 4 != 1) as u8).collect();
    let errs = check_tape_fn(&[x.clone()], EPS, |t, v| t.cross_entropy(v[0], &targets, None)).unwrap();
    assert_close(errs, "cross_entropy");
    let errs = check_tape_fn(&[x], EPS, |t, v| t.cross_entropy(v[0], &targets, Some(&valid))).unwrap();
    assert_close(errs, "masked cross_entropy");
}

#[test]
fn fault_injection_is_detected() {
    let x = rand_tensor(&[2, 6], 100);
    let errs = check_tape_fn(&[x], EPS, |t, v| {
        t.inject_relu_fault(true);
        let y = t.relu(v[0]);
        weighted_sum(t, y, 101)
    })
    .unwrap();
    assert!(errs[0] > 1e-3);
}
