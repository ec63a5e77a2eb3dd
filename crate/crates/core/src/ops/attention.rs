use crate::autograd::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::real::{lit, Real};
use crate::tensor::Tensor;

fn softmax_rows<T: Real>(s: &mut [T], n: usize) {
    for row in s.chunks_mut(n) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
}

struct Dims {
    b: usize,
    t: usize,
    c: usize,
    dh: usize,
}

fn dims<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<Dims> {
    let [b, t, c] = q.shape()[..] else {
        return Err(CoreError::Shape(format!("attention expects (B,T,C), got {:?}", q.shape())));
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(CoreError::Shape("attention: q/k/v shapes differ".into()));
    }
    if heads == 0 || c % heads != 0 {
        return Err(CoreError::Shape(format!("{c} channels do not split into {heads} heads")));
    }
    Ok(Dims { b, t, c, dh: c / heads })
}

/// Per-head attention matrix for one batch item and head, `(T, T)`.
fn scores<T: Real>(q: &[T], k: &[T], d: &Dims, bi: usize, h: usize, out: &mut [T]) {
    let off = bi * d.t * d.c + h * d.dh;
    let scale = lit::<T>(1.0 / (d.dh as f64).sqrt());
    let c = d.c as isize;
    T::gemm(d.t, d.dh, d.t, scale, &q[off..], c, 1, &k[off..], 1, c, T::zero(), out, d.t as isize, 1);
    softmax_rows(out, d.t);
}

/// Softmax attention weights `(B, heads, T, T)` for query/key sequences.
pub fn attention_probs<T: Real>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let d = dims(q, k, k, heads)?;
    let tt = d.t * d.t;
    let mut out = vec![T::zero(); d.b * heads * tt];
    for bi in 0..d.b {
        for h in 0..heads {
            let idx = bi * heads + h;
            scores(q.data(), k.data(), &d, bi, h, &mut out[idx * tt..(idx + 1) * tt]);
        }
    }
    Tensor::new(&[d.b, heads, d.t, d.t], out)
}

impl<T: Real> Tape<T> {
    /// Multi-head scaled dot-product attention over `(B, T, C)` inputs whose
    /// channel axis is split into `heads` contiguous groups.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let d = dims(self.value(q), self.value(k), self.value(v), heads)?;
        let save = self.records(&[q, k, v]);
        let (b, t, c, dh) = (d.b, d.t, d.c, d.dh);
        let tt = t * t;
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let mut out = vec![T::zero(); b * t * c];
        let mut saved = if save { vec![T::zero(); b * heads * tt] } else { Vec::new() };
        let mut scratch = vec![T::zero(); tt];
        let ci = c as isize;
        for bi in 0..b {
            for h in 0..heads {
                let p: &mut [T] = if save {
                    let idx = bi * heads + h;
                    &mut saved[idx * tt..(idx + 1) * tt]
                } else {
                    &mut scratch
                };
                scores(qs, ks, &d, bi, h, p);
                let off = bi * t * c + h * dh;
                T::gemm(t, t, dh, T::one(), p, t as isize, 1, &vs[off..], ci, 1, T::zero(), &mut out[off..], ci, 1);
            }
        }
        let out = Tensor::new(&[b, t, c], out)?;
        Ok(self.push(out, &[q, k, v], move |cx| {
            let qs = cx.inputs[0].data();
            let ks = cx.inputs[1].data();
            let vs = cx.inputs[2].data();
            let g = cx.grad.data();
            let scale = lit::<T>(1.0 / (dh as f64).sqrt());
            let mut dq = vec![T::zero(); b * t * c];
            let mut dk = vec![T::zero(); b * t * c];
            let mut dv = vec![T::zero(); b * t * c];
            let mut dp = vec![T::zero(); tt];
            for bi in 0..b {
                for h in 0..heads {
                    let idx = bi * heads + h;
                    let p = &saved[idx * tt..(idx + 1) * tt];
                    let off = bi * t * c + h * dh;
                    // dV = P^T dO
                    T::gemm(t, t, dh, T::one(), p, 1, t as isize, &g[off..], ci, 1, T::zero(), &mut dv[off..], ci, 1);
                    // dP = dO V^T
                    T::gemm(t, dh, t, T::one(), &g[off..], ci, 1, &vs[off..], 1, ci, T::zero(), &mut dp, t as isize, 1);
                    // dS = P * (dP - rowsum(dP * P))
                    for (prow, drow) in p.chunks(t).zip(dp.chunks_mut(t)) {
                        let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                        for (d, &pv) in drow.iter_mut().zip(prow) {
                            *d = pv * (*d - dot);
                        }
                    }
                    // dQ = dS K * scale, dK = dS^T Q * scale
                    T::gemm(t, t, dh, scale, &dp, t as isize, 1, &ks[off..], ci, 1, T::zero(), &mut dq[off..], ci, 1);
                    T::gemm(t, t, dh, scale, &dp, 1, t as isize, &qs[off..], ci, 1, T::zero(), &mut dk[off..], ci, 1);
                }
            }
            let shape = [b, t, c];
            vec![
                cx.needs[0].then(|| Tensor::new(&shape, dq).expect("shape")),
                cx.needs[1].then(|| Tensor::new(&shape, dk).expect("shape")),
                cx.needs[2].then(|| Tensor::new(&shape, dv).expect("shape")),
            ]
        }))
    }
}
