use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::real::{lit, Real};
use crate::tensor::Tensor;

/// Interpolation taps along one axis with half-pixel centers
/// (`align_corners = false`): output `i` samples source coordinate
/// `(i + 0.5) * in / out - 0.5`, clamped to the valid range.
#[derive(Clone, Debug)]
pub struct BilinearAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl BilinearAxis {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for i in 0..output {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (src.floor() as usize).min(input - 1);
            let h = (l + 1).min(input - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if h == l { 0.0 } else { src - l as f64 });
        }
        Self { lo, hi, frac }
    }
}

fn resize_planes<T: Real>(src: &[T], planes: usize, h: usize, w: usize, ys: &BilinearAxis, xs: &BilinearAxis) -> Vec<T> {
    let (oh, ow) = (ys.lo.len(), xs.lo.len());
    let fy: Vec<T> = ys.frac.iter().map(|&f| lit(f)).collect();
    let fx: Vec<T> = xs.frac.iter().map(|&f| lit(f)).collect();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (r0, r1, ly) = (ys.lo[oy] * w, ys.hi[oy] * w, fy[oy]);
            for ox in 0..ow {
                let (c0, c1, lx) = (xs.lo[ox], xs.hi[ox], fx[ox]);
                let top = s[r0 + c0] * (T::one() - lx) + s[r0 + c1] * lx;
                let bot = s[r1 + c0] * (T::one() - lx) + s[r1 + c1] * lx;
                out.push(top * (T::one() - ly) + bot * ly);
            }
        }
    }
    out
}

/// Bilinear resize of the two trailing axes of any tensor of rank >= 2.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let shape = x.shape();
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let planes = x.numel() / (h * w);
    let ys = BilinearAxis::new(h, out_h);
    let xs = BilinearAxis::new(w, out_w);
    let mut out_shape = shape.to_vec();
    out_shape[r - 2] = out_h;
    out_shape[r - 1] = out_w;
    Tensor::new(&out_shape, resize_planes(x.data(), planes, h, w, &ys, &xs)).expect("shape")
}

impl<T: Real> Tape<T> {
    /// Differentiable bilinear resize of a `(B, C, H, W)` tensor.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if (h, w) == (out_h, out_w) {
            let out = self.value(x).clone();
            return Ok(self.push(out, &[x], |cx| vec![Some(cx.grad.clone())]));
        }
        let ys = BilinearAxis::new(h, out_h);
        let xs = BilinearAxis::new(w, out_w);
        let out = resize_planes(self.value(x).data(), b * c, h, w, &ys, &xs);
        let out = Tensor::new(&[b, c, out_h, out_w], out)?;
        Ok(self.push(out, &[x], move |cx| {
            let g = cx.grad.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                let d = &mut dx[p * h * w..(p + 1) * h * w];
                let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                for oy in 0..out_h {
                    let (r0, r1) = (ys.lo[oy] * w, ys.hi[oy] * w);
                    let ly: T = lit(ys.frac[oy]);
                    for ox in 0..out_w {
                        let (c0, c1) = (xs.lo[ox], xs.hi[ox]);
                        let lx: T = lit(xs.frac[ox]);
                        let gv = gp[oy * out_w + ox];
                        let top = gv * (T::one() - ly);
                        let bot = gv * ly;
                        d[r0 + c0] = d[r0 + c0] + top * (T::one() - lx);
                        d[r0 + c1] = d[r0 + c1] + top * lx;
                        d[r1 + c0] = d[r1 + c0] + bot * (T::one() - lx);
                        d[r1 + c1] = d[r1 + c1] + bot * lx;
                    }
                }
            }
            vec![Some(Tensor::new(&[b, c, h, w], dx).expect("shape"))]
        }))
    }
}
