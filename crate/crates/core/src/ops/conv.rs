use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Stride, zero padding and dilation of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl Conv2dSpec {
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Self::default()
        }
    }

    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    /// Source coordinate for output position `o` and kernel tap `k`, if it
    /// falls inside the (unpadded) input.
    #[inline]
    fn src(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + k * self.spec.dilation) as isize - self.spec.padding as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom, cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..g.oh {
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    match g.src(oy, ki, g.h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.src(ox, kj, g.w) {
                                    Some(ix) => src_row[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            plane[iy * g.w + ix] = plane[iy * g.w + ix] + row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// 2-D convolution. `x` is `(B, Cin, H, W)`, `weight` is
    /// `(Cout, Cin, kh, kw)`, `bias` is `(Cout)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (co, ci, kh, kw) = self.value(weight).dims4()?;
        if ci != c {
            return Err(CoreError::Shape(format!(
                "conv2d: input has {c} channels, weight expects {ci}"
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [co] {
                return Err(CoreError::Shape(format!("conv2d: bias shape {:?}", self.shape(bv))));
            }
        }
        let (Some(oh), Some(ow)) = (spec.out_size(h, kh), spec.out_size(w, kw)) else {
            return Err(CoreError::Shape(format!(
                "conv2d: {h}x{w} input too small for kernel {kh}x{kw} {spec:?}"
            )));
        };
        let g = Geom { c, h, w, kh, kw, oh, ow, spec };
        let (k, p) = (g.k(), g.p());
        let xs = self.value(x).data();
        let ws = self.value(weight).data();
        let mut out = vec![T::zero(); b * co * p];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for bi in 0..b {
            let xb = &xs[bi * c * h * w..(bi + 1) * c * h * w];
            let colsb: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut cols);
                &cols
            };
            let ob = &mut out[bi * co * p..(bi + 1) * co * p];
            T::gemm(co, k, p, T::one(), ws, k as isize, 1, colsb, p as isize, 1, T::zero(), ob, p as isize, 1);
            if let Some(bv) = bias {
                let bd = self.value(bv).data();
                for (o, &bb) in ob.chunks_mut(p).zip(bd) {
                    o.iter_mut().for_each(|v| *v = *v + bb);
                }
            }
        }
        let out = Tensor::new(&[b, co, oh, ow], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(out, &inputs, move |cx| {
            let xs = cx.inputs[0].data();
            let ws = cx.inputs[1].data();
            let gs = cx.grad.data();
            let mut dx = cx.needs[0].then(|| vec![T::zero(); b * c * h * w]);
            let mut dw = cx.needs[1].then(|| vec![T::zero(); co * k]);
            let mut cols = vec![T::zero(); k * p];
            for bi in 0..b {
                let gb = &gs[bi * co * p..(bi + 1) * co * p];
                if let Some(dw) = dw.as_mut() {
                    let xb = &xs[bi * c * h * w..(bi + 1) * c * h * w];
                    let colsb: &[T] = if g.is_pointwise() {
                        xb
                    } else {
                        im2col(xb, &g, &mut cols);
                        &cols
                    };
                    // dW += G_b @ cols_b^T
                    T::gemm(co, p, k, T::one(), gb, p as isize, 1, colsb, 1, p as isize, T::one(), dw, k as isize, 1);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[bi * c * h * w..(bi + 1) * c * h * w];
                    if g.is_pointwise() {
                        T::gemm(k, co, p, T::one(), ws, 1, k as isize, gb, p as isize, 1, T::one(), dxb, p as isize, 1);
                    } else {
                        // dcols = W^T @ G_b
                        T::gemm(k, co, p, T::one(), ws, 1, k as isize, gb, p as isize, 1, T::zero(), &mut cols, p as isize, 1);
                        col2im(&cols, &g, dxb);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(&[b, c, h, w], d).expect("shape")),
                dw.map(|d| Tensor::new(&[co, ci, kh, kw], d).expect("shape")),
            ];
            if cx.inputs.len() == 3 {
                grads.push(cx.needs[2].then(|| {
                    let mut db = vec![T::zero(); co];
                    for bi in 0..b {
                        for (o, d) in db.iter_mut().enumerate() {
                            let s: T = gs[(bi * co + o) * p..(bi * co + o + 1) * p].iter().copied().sum();
                            *d = *d + s;
                        }
                    }
                    Tensor::new(&[co], db).expect("shape")
                }));
            }
            grads
        }))
    }

    /// Max pooling with a square window; padded positions never win.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let spec = Conv2dSpec { stride, padding, dilation: 1 };
        let (Some(oh), Some(ow)) = (spec.out_size(h, kernel), spec.out_size(w, kernel)) else {
            return Err(CoreError::Shape(format!("max_pool2d: {h}x{w} too small")));
        };
        let g = Geom { c: 1, h, w, kh: kernel, kw: kernel, oh, ow, spec };
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut arg = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ki in 0..kernel {
                        let Some(iy) = g.src(oy, ki, h) else { continue };
                        for kj in 0..kernel {
                            let Some(ix) = g.src(ox, kj, w) else { continue };
                            let v = xs[base + iy * w + ix];
                            if best_i == usize::MAX || v > best {
                                best = v;
                                best_i = base + iy * w + ix;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
        let out = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(out, &[x], move |cx| {
            let mut dx = Tensor::zeros(&[b, c, h, w]);
            let d = dx.data_mut();
            for (&i, &gv) in arg.iter().zip(cx.grad.data()) {
                d[i] = d[i] + gv;
            }
            vec![Some(dx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, bias: &[f64], s: Conv2dSpec) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4().unwrap();
        let (co, _, kh, kw) = wt.dims4().unwrap();
        let oh = s.out_size(h, kh).unwrap();
        let ow = s.out_size(w, kw).unwrap();
        let mut out = Tensor::zeros(&[b, co, oh, ow]);
        for bi in 0..b {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[o];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * s.stride + ki * s.dilation) as isize - s.padding as isize;
                                    let ix = (ox * s.stride + kj * s.dilation) as isize - s.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[((o * c + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out.data_mut()[((bi * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let specs = [
            (3, Conv2dSpec { stride: 1, padding: 1, dilation: 1 }),
            (3, Conv2dSpec { stride: 2, padding: 1, dilation: 1 }),
            (3, Conv2dSpec { stride: 1, padding: 2, dilation: 2 }),
            (1, Conv2dSpec::default()),
            (7, Conv2dSpec { stride: 2, padding: 3, dilation: 1 }),
        ];
        for (k, spec) in specs {
            let x = Tensor::from_fn(&[2, 3, 9, 8], |i| ((i * 37 % 17) as f64 - 8.0) / 7.0);
            let wt = Tensor::from_fn(&[4, 3, k, k], |i| ((i * 11 % 13) as f64 - 6.0) / 5.0);
            let bias = [0.1, -0.2, 0.3, 0.0];
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(wt.clone());
            let bv = tape.constant(Tensor::new(&[4], bias.to_vec()).unwrap());
            let y = tape.conv2d(xv, wv, Some(bv), spec).unwrap();
            let expect = naive_conv(&x, &wt, &bias, spec);
            assert_eq!(tape.shape(y), expect.shape());
            for (a, e) in tape.value(y).data().iter().zip(expect.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
        assert!(tape.conv2d(x, w, None, Conv2dSpec::same(3)).is_err());
    }

    #[test]
    fn max_pool_picks_window_max() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
        let y = tape.max_pool2d(x, 3, 2, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);
    }
}
