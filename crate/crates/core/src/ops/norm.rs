use crate::autograd::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::real::{lit, Real};
use crate::tensor::Tensor;

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var: Vec<T>,
}

fn check_affine<T: Real>(tape: &Tape<T>, gamma: Var, beta: Var, c: usize, op: &str) -> Result<()> {
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(CoreError::Shape(format!(
            "{op}: affine params {:?}/{:?} for {c} channels",
            tape.shape(gamma),
            tape.shape(beta)
        )));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    /// Batch normalization with statistics of the current batch.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (b, c, h, w) = self.value(x).dims4()?;
        check_affine(self, gamma, beta, c, "batch_norm")?;
        let hw = h * w;
        let n = b * hw;
        let nt = lit::<T>(n as f64);
        let eps = lit::<T>(eps);
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                s = s + xs[(bi * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
            let m = s / nt;
            let mut v = T::zero();
            for bi in 0..b {
                v = v + xs[(bi * c + ch) * hw..][..hw].iter().map(|&t| (t - m) * (t - m)).sum::<T>();
            }
            mean[ch] = m;
            var[ch] = v / nt;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for bi in 0..b {
            for ch in 0..c {
                let o = (bi * c + ch) * hw;
                for i in o..o + hw {
                    xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                    out[i] = gs[ch] * xhat[i] + bs[ch];
                }
            }
        }
        let unbiased = if n > 1 {
            var.iter().map(|&v| v * nt / lit::<T>((n - 1) as f64)).collect()
        } else {
            var.clone()
        };
        let stats = BatchStats { mean, var: unbiased };
        let out = Tensor::new(&[b, c, h, w], out)?;
        let y = self.push(out, &[x, gamma, beta], move |cx| {
            let g = cx.grad.data();
            let gamma = cx.inputs[1].data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for bi in 0..b {
                for ch in 0..c {
                    let o = (bi * c + ch) * hw;
                    for i in o..o + hw {
                        sum_g[ch] = sum_g[ch] + g[i];
                        sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
                    }
                }
            }
            let dx = cx.needs[0].then(|| {
                let mut dx = vec![T::zero(); g.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let o = (bi * c + ch) * hw;
                        let k = gamma[ch] * inv_std[ch] / nt;
                        for i in o..o + hw {
                            dx[i] = k * (nt * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                        }
                    }
                }
                Tensor::new(&[b, c, h, w], dx).expect("shape")
            });
            vec![
                dx,
                cx.needs[1].then(|| Tensor::new(&[c], sum_gx.clone()).expect("shape")),
                cx.needs[2].then(|| Tensor::new(&[c], sum_g.clone()).expect("shape")),
            ]
        });
        Ok((y, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        check_affine(self, gamma, beta, c, "batch_norm")?;
        if mean.len() != c || var.len() != c {
            return Err(CoreError::Shape("batch_norm: running stats length".into()));
        }
        let hw = h * w;
        let eps = lit::<T>(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let out = Tensor::from_fn(&[b, c, h, w], |i| {
            let ch = (i / hw) % c;
            gs[ch] * (xs[i] - mean[ch]) * inv_std[ch] + bs[ch]
        });
        Ok(self.push(out, &[x, gamma, beta], move |cx| {
            let g = cx.grad.data();
            let xs = cx.inputs[0].data();
            let gamma = cx.inputs[1].data();
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for (i, &gv) in g.iter().enumerate() {
                let ch = (i / hw) % c;
                dg[ch] = dg[ch] + gv * (xs[i] - mean[ch]) * inv_std[ch];
                db[ch] = db[ch] + gv;
            }
            vec![
                cx.needs[0].then(|| {
                    Tensor::from_fn(&[b, c, h, w], |i| {
                        let ch = (i / hw) % c;
                        g[i] * gamma[ch] * inv_std[ch]
                    })
                }),
                cx.needs[1].then(|| Tensor::new(&[c], dg).expect("shape")),
                cx.needs[2].then(|| Tensor::new(&[c], db).expect("shape")),
            ]
        }))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| CoreError::Shape("layer_norm on scalar".into()))?;
        check_affine(self, gamma, beta, c, "layer_norm")?;
        let rows = self.value(x).numel() / c;
        let ct = lit::<T>(c as f64);
        let eps = lit::<T>(eps);
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let m = row.iter().copied().sum::<T>() / ct;
            let v = row.iter().map(|&t| (t - m) * (t - m)).sum::<T>() / ct;
            let is = T::one() / (v + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - m) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = gs[j] * xh + bs[j];
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, &[x, gamma, beta], move |cx| {
            let g = cx.grad.data();
            let gamma = cx.inputs[1].data();
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            let mut dx = cx.needs[0].then(|| vec![T::zero(); g.len()]);
            for r in 0..rows {
                let gr = &g[r * c..(r + 1) * c];
                let xr = &xhat[r * c..(r + 1) * c];
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for j in 0..c {
                    dg[j] = dg[j] + gr[j] * xr[j];
                    db[j] = db[j] + gr[j];
                    let dxh = gr[j] * gamma[j];
                    s1 = s1 + dxh;
                    s2 = s2 + dxh * xr[j];
                }
                if let Some(dx) = dx.as_mut() {
                    let k = inv_std[r] / ct;
                    for j in 0..c {
                        dx[r * c + j] = k * (ct * gr[j] * gamma[j] - s1 - xr[j] * s2);
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::new(cx.inputs[0].shape(), d).expect("shape")),
                cx.needs[1].then(|| Tensor::new(&[c], dg).expect("shape")),
                cx.needs[2].then(|| Tensor::new(&[c], db).expect("shape")),
            ]
        }))
    }

    /// `x @ weight^T + bias` over the last axis; `weight` is `(out, in)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[out_f, in_f] = self.shape(weight) else {
            return Err(CoreError::Shape(format!("linear weight {:?}", self.shape(weight))));
        };
        if shape.last() != Some(&in_f) {
            return Err(CoreError::Shape(format!("linear: input {shape:?} vs weight in={in_f}")));
        }
        let rows = self.value(x).numel() / in_f;
        let xs = self.value(x).data();
        let ws = self.value(weight).data();
        let mut out = vec![T::zero(); rows * out_f];
        T::gemm(rows, in_f, out_f, T::one(), xs, in_f as isize, 1, ws, 1, in_f as isize, T::zero(), &mut out, out_f as isize, 1);
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for row in out.chunks_mut(out_f) {
                for (o, &bb) in row.iter_mut().zip(bd) {
                    *o = *o + bb;
                }
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().expect("rank>=1") = out_f;
        let out = Tensor::new(&out_shape, out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(out, &inputs, move |cx| {
            let g = cx.grad.data();
            let xs = cx.inputs[0].data();
            let ws = cx.inputs[1].data();
            let dx = cx.needs[0].then(|| {
                let mut dx = vec![T::zero(); rows * in_f];
                T::gemm(rows, out_f, in_f, T::one(), g, out_f as isize, 1, ws, in_f as isize, 1, T::zero(), &mut dx, in_f as isize, 1);
                Tensor::new(&shape, dx).expect("shape")
            });
            let dw = cx.needs[1].then(|| {
                let mut dw = vec![T::zero(); out_f * in_f];
                T::gemm(out_f, rows, in_f, T::one(), g, 1, out_f as isize, xs, in_f as isize, 1, T::zero(), &mut dw, in_f as isize, 1);
                Tensor::new(&[out_f, in_f], dw).expect("shape")
            });
            let mut grads = vec![dx, dw];
            if cx.inputs.len() == 3 {
                grads.push(cx.needs[2].then(|| {
                    let mut db = vec![T::zero(); out_f];
                    for row in g.chunks(out_f) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d = *d + gv;
                        }
                    }
                    Tensor::new(&[out_f], db).expect("shape")
                }));
            }
            grads
        }))
    }
}
