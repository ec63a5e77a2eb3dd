use crate::autograd::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::real::{lit, Real};
use crate::tensor::Tensor;

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, op: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(CoreError::Shape(format!(
            "{op}: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, &[a, b], |cx| {
            vec![
                cx.needs[0].then(|| cx.grad.clone()),
                cx.needs[1].then(|| cx.grad.clone()),
            ]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, &[a, b], |cx| {
            vec![
                cx.needs[0].then(|| cx.grad.clone()),
                cx.needs[1].then(|| cx.grad.map(|g| -g)),
            ]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, &[a, b], |cx| {
            vec![
                cx.needs[0].then(|| cx.grad.zip_map(cx.inputs[1], |g, y| g * y)),
                cx.needs[1].then(|| cx.grad.zip_map(cx.inputs[0], |g, x| g * x)),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], move |cx| vec![Some(cx.grad.map(|g| g * s))])
    }

    /// Elementwise `|a|`; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, &[a], |cx| {
            vec![Some(cx.grad.zip_map(cx.inputs[0], |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            }))]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let fault = self.relu_fault;
        self.push(out, &[a], move |cx| {
            let slope = if fault { lit::<T>(1.01) } else { T::one() };
            vec![Some(cx.grad.zip_map(cx.output, |g, y| {
                if y > T::zero() {
                    g * slope
                } else {
                    T::zero()
                }
            }))]
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let inv_sqrt2 = lit::<T>(std::f64::consts::FRAC_1_SQRT_2);
        let half = lit::<T>(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        self.push(out, &[a], move |cx| {
            let inv_sqrt_2pi = lit::<T>(0.398_942_280_401_432_7);
            vec![Some(cx.grad.zip_map(cx.inputs[0], |g, x| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                g * (cdf + x * pdf)
            }))]
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, &[a], |cx| {
            vec![Some(Tensor::full(cx.inputs[0].shape(), cx.grad[0]))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = lit::<T>(self.value(a).numel() as f64);
        let out = Tensor::scalar(self.value(a).sum() / n);
        self.push(out, &[a], move |cx| {
            vec![Some(Tensor::full(cx.inputs[0].shape(), cx.grad[0] / n))]
        })
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let (b, _, h, w) = self.value(parts[0]).dims4()?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pb, pc, ph, pw) = self.value(p).dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(CoreError::Shape(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(p),
                    self.shape(parts[0])
                )));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for (&p, &c) in parts.iter().zip(&chans) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let out = Tensor::new(&[b, total, h, w], out)?;
        Ok(self.push(out, parts, move |cx| {
            let g = cx.grad.data();
            let mut grads = Vec::with_capacity(chans.len());
            let mut offset = 0;
            for (i, &c) in chans.iter().enumerate() {
                if cx.needs[i] {
                    let mut gi = Vec::with_capacity(b * c * hw);
                    for bi in 0..b {
                        let start = (bi * total + offset) * hw;
                        gi.extend_from_slice(&g[start..start + c * hw]);
                    }
                    grads.push(Some(Tensor::new(&[b, c, h, w], gi).expect("shape")));
                } else {
                    grads.push(None);
                }
                offset += c;
            }
            grads
        }))
    }

    /// Concatenate tensors of equal trailing shape along the leading axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let lens: Vec<usize> = refs.iter().map(|t| t.shape()[0]).collect();
        let out = Tensor::stack_outer(&refs)?;
        Ok(self.push(out, parts, move |cx| {
            let mut start = 0;
            lens.iter()
                .enumerate()
                .map(|(i, &n)| {
                    let g = cx.needs[i].then(|| cx.grad.slice_outer(start, start + n));
                    start += n;
                    g
                })
                .collect()
        }))
    }

    /// Items `start..end` along the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let len = self.shape(x)[0];
        if start > end || end > len {
            return Err(CoreError::Shape(format!("batch slice {start}..{end} of {len}")));
        }
        let out = self.value(x).slice_outer(start, end);
        Ok(self.push(out, &[x], move |cx| {
            let shape = cx.inputs[0].shape();
            let inner: usize = shape[1..].iter().product();
            let mut g = Tensor::zeros(shape);
            g.data_mut()[start * inner..end * inner].copy_from_slice(cx.grad.data());
            vec![Some(g)]
        }))
    }

    /// `(B, C, H, W)` -> `(B, C, 1, 1)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let n = lit::<T>(hw as f64);
        let d = self.value(x).data();
        let out: Vec<T> = (0..b * c)
            .map(|i| d[i * hw..(i + 1) * hw].iter().copied().sum::<T>() / n)
            .collect();
        let out = Tensor::new(&[b, c, 1, 1], out)?;
        Ok(self.push(out, &[x], move |cx| {
            let g = cx.grad.data();
            let gi = Tensor::from_fn(&[b, c, h, w], |i| g[i / hw] / n);
            vec![Some(gi)]
        }))
    }

    /// `(B, C, 1, 1)` -> `(B, C, H, W)` by broadcasting.
    pub fn expand_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (b, c, xh, xw) = self.value(x).dims4()?;
        if (xh, xw) != (1, 1) {
            return Err(CoreError::Shape(format!(
                "expand_spatial needs 1x1 input, got {:?}",
                self.shape(x)
            )));
        }
        let hw = h * w;
        let d = self.value(x).data();
        let out = Tensor::from_fn(&[b, c, h, w], |i| d[i / hw]);
        Ok(self.push(out, &[x], move |cx| {
            let g = cx.grad.data();
            let gi: Vec<T> = (0..b * c)
                .map(|i| g[i * hw..(i + 1) * hw].iter().copied().sum())
                .collect();
            vec![Some(Tensor::new(&[b, c, 1, 1], gi).expect("shape"))]
        }))
    }

    /// `(B, C, H, W)` -> `(B, H*W, C)` token sequence.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let t = h * w;
        let out = transpose_inner(self.value(x).data(), b, c, t);
        let out = Tensor::new(&[b, t, c], out)?;
        Ok(self.push(out, &[x], move |cx| {
            let gi = transpose_inner(cx.grad.data(), b, t, c);
            vec![Some(Tensor::new(&[b, c, h, w], gi).expect("shape"))]
        }))
    }

    /// `(B, H*W, C)` -> `(B, C, H, W)`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [b, t, c] = shape[..] else {
            return Err(CoreError::Shape(format!("from_tokens needs rank 3, got {shape:?}")));
        };
        if t != h * w {
            return Err(CoreError::Shape(format!("{t} tokens cannot fill {h}x{w}")));
        }
        let out = transpose_inner(self.value(x).data(), b, t, c);
        let out = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(out, &[x], move |cx| {
            let gi = transpose_inner(cx.grad.data(), b, c, t);
            vec![Some(Tensor::new(&[b, t, c], gi).expect("shape"))]
        }))
    }
}

/// Per-batch transpose of `(rows, cols)` matrices.
fn transpose_inner<T: Real>(src: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    let n = rows * cols;
    for b in 0..batch {
        let s = &src[b * n..(b + 1) * n];
        let o = &mut out[b * n..(b + 1) * n];
        for r in 0..rows {
            for c in 0..cols {
                o[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}
