use crate::autograd::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::real::{lit, Real};
use crate::tensor::Tensor;

/// Softmax over the class (channel) axis of a `(B, K, H, W)` tensor.
pub(crate) fn softmax_channels_values<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, k, h, w) = x.dims4()?;
    let hw = h * w;
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for bi in 0..b {
        let base = bi * k * hw;
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(xs[base + c * hw + p]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (xs[base + c * hw + p] - m).exp();
                out[base + c * hw + p] = e;
                z = z + e;
            }
            for c in 0..k {
                out[base + c * hw + p] = out[base + c * hw + p] / z;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

impl<T: Real> Tape<T> {
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (b, k, h, w) = self.value(x).dims4()?;
        let out = softmax_channels_values(self.value(x))?;
        let hw = h * w;
        Ok(self.push(out, &[x], move |cx| {
            let y = cx.output.data();
            let g = cx.grad.data();
            let mut dx = vec![T::zero(); y.len()];
            for bi in 0..b {
                let base = bi * k * hw;
                for p in 0..hw {
                    let dot: T = (0..k).map(|c| y[base + c * hw + p] * g[base + c * hw + p]).sum();
                    for c in 0..k {
                        let i = base + c * hw + p;
                        dx[i] = y[i] * (g[i] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(&[b, k, h, w], dx).expect("shape"))]
        }))
    }

    /// Mean pixel-wise cross entropy of `(B, K, H, W)` logits against class
    /// indices `targets` (`B*H*W`, row-major). When `valid` is given, only
    /// pixels with a non-zero flag contribute and the mean runs over them;
    /// an empty selection yields zero loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8], valid: Option<&[u8]>) -> Result<Var> {
        let (b, k, h, w) = self.value(logits).dims4()?;
        let hw = h * w;
        if targets.len() != b * hw || valid.is_some_and(|v| v.len() != b * hw) {
            return Err(CoreError::Shape(format!(
                "cross_entropy: {} targets for logits {:?}",
                targets.len(),
                self.shape(logits)
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= k) {
            return Err(CoreError::Shape(format!("cross_entropy: class {bad} out of range for {k} classes")));
        }
        let probs = softmax_channels_values(self.value(logits))?;
        let xs = self.value(logits).data();
        let mut count = 0usize;
        let mut total = T::zero();
        for bi in 0..b {
            for p in 0..hw {
                let i = bi * hw + p;
                if valid.is_some_and(|v| v[i] == 0) {
                    continue;
                }
                count += 1;
                let base = bi * k * hw + p;
                let m = (0..k).fold(T::neg_infinity(), |a, c| a.max(xs[base + c * hw]));
                let lse = m + (0..k).map(|c| (xs[base + c * hw] - m).exp()).sum::<T>().ln();
                total = total + lse - xs[base + targets[i] as usize * hw];
            }
        }
        let denom = lit::<T>(count.max(1) as f64);
        let out = Tensor::scalar(total / denom);
        let targets = targets.to_vec();
        let valid = valid.map(|v| v.to_vec());
        Ok(self.push(out, &[logits], move |cx| {
            let scale = cx.grad[0] / denom;
            let mut dx = vec![T::zero(); b * k * hw];
            let pr = probs.data();
            for bi in 0..b {
                for p in 0..hw {
                    let i = bi * hw + p;
                    if valid.as_ref().is_some_and(|v| v[i] == 0) {
                        continue;
                    }
                    for c in 0..k {
                        let j = bi * k * hw + c * hw + p;
                        let onehot = if targets[i] as usize == c { T::one() } else { T::zero() };
                        dx[j] = (pr[j] - onehot) * scale;
                    }
                }
            }
            vec![Some(Tensor::new(&[b, k, h, w], dx).expect("shape"))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln2() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
        let t = vec![1u8; 18];
        let l = tape.cross_entropy(x, &t, None).unwrap();
        assert!((tape.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_is_zero_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64), true);
        let l = tape.cross_entropy(x, &[0; 4], Some(&[0; 4])).unwrap();
        assert_eq!(tape.value(l)[0], 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_out_of_range_class() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(tape.cross_entropy(x, &[2], None).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2, 4, 4], |i| (i as f32 * 0.77).sin() * 20.0));
        let y = tape.softmax_channels(x).unwrap();
        let d = tape.value(y).data();
        for bi in 0..2 {
            for p in 0..16 {
                let s = d[bi * 32 + p] + d[bi * 32 + 16 + p];
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
