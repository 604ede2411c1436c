//! Differentiable dense, elementwise and sequence operations.

use rand::Rng;

use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, MatView, Tensor};

fn same_graph<T>(a: &Var<'_, T>, b: &Var<'_, T>) {
    assert!(std::ptr::eq(a.graph, b.graph), "vars belong to different graphs");
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        same_graph(&self, &other);
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph
            .push(out, &[self, other], |g, _, _| vec![Some(g.clone()), Some(g.clone())])
    }

    /// `self + bias` where `bias.shape` is a suffix of `self.shape`.
    pub fn add_broadcast(self, bias: Var<'g, T>) -> Var<'g, T> {
        same_graph(&self, &bias);
        let (x, b) = (self.value(), bias.value());
        let xs = x.shape();
        let bs = b.shape();
        assert!(
            bs.len() <= xs.len() && xs[xs.len() - bs.len()..] == *bs,
            "cannot broadcast {bs:?} onto {xs:?}"
        );
        let mut out = (*x).clone();
        let bl = b.numel();
        for chunk in out.data_mut().chunks_mut(bl) {
            for (o, &v) in chunk.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        let bshape = bs.to_vec();
        self.graph.push(out, &[self, bias], move |g, _, _| {
            let mut gb = Tensor::zeros(bshape.clone());
            for chunk in g.data().chunks(gb.numel()) {
                for (o, &v) in gb.data_mut().iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            vec![Some(g.clone()), Some(gb)]
        })
    }

    pub fn scale(self, s: f64) -> Var<'g, T> {
        let s = T::from_f64(s);
        let out = self.value().map(|v| v * s);
        self.graph
            .push(out, &[self], move |g, _, _| vec![Some(g.map(|v| v * s))])
    }

    /// `x·Wᵀ + b` over the last axis, with `W` laid out `[out, in]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Var<'g, T> {
        let (x, w) = (self.value(), weight.value());
        assert_eq!(w.ndim(), 2, "linear weight must be 2-d");
        let (n_out, n_in) = (w.dim(0), w.dim(1));
        let xs = x.shape().to_vec();
        assert_eq!(*xs.last().expect("rank >= 1"), n_in, "linear input width");
        let rows = x.numel() / n_in;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("rank >= 1") = n_out;
        let mut out = vec![T::zero(); rows * n_out];
        matmul_into(
            MatView::new(x.data(), rows, n_in),
            MatView::new(w.data(), n_out, n_in).t(),
            T::zero(),
            &mut out,
        );
        let y = Tensor::new(out_shape, out);
        let y = self.graph.push(y, &[self, weight], move |g, _, p| {
            let (x, w) = (p[0], p[1]);
            let mut gx = vec![T::zero(); rows * n_in];
            matmul_into(
                MatView::new(g.data(), rows, n_out),
                MatView::new(w.data(), n_out, n_in),
                T::zero(),
                &mut gx,
            );
            let mut gw = vec![T::zero(); n_out * n_in];
            matmul_into(
                MatView::new(g.data(), rows, n_out).t(),
                MatView::new(x.data(), rows, n_in),
                T::zero(),
                &mut gw,
            );
            vec![
                Some(Tensor::new(x.shape().to_vec(), gx)),
                Some(Tensor::new(vec![n_out, n_in], gw)),
            ]
        });
        match bias {
            Some(b) => y.add_broadcast(b),
            None => y,
        }
    }

    /// Batched `op(a)·op(b)` on `[B, r, c]` tensors.
    pub fn bmm(self, other: Var<'g, T>, trans_a: bool, trans_b: bool) -> Var<'g, T> {
        same_graph(&self, &other);
        let (a, b) = (self.value(), other.value());
        assert!(a.ndim() == 3 && b.ndim() == 3, "bmm expects rank-3 operands");
        let batch = a.dim(0);
        assert_eq!(batch, b.dim(0), "bmm batch mismatch");
        let (ar, ac) = (a.dim(1), a.dim(2));
        let (br, bc) = (b.dim(1), b.dim(2));
        let m = if trans_a { ac } else { ar };
        let n = if trans_b { br } else { bc };
        let out = batched(a.data(), ar, ac, trans_a, b.data(), br, bc, trans_b, batch);
        let y = Tensor::new(vec![batch, m, n], out);
        self.graph.push(y, &[self, other], move |g, _, p| {
            let (a, b) = (p[0], p[1]);
            let ga = if trans_a {
                // dA = op(B)·dCᵀ
                batched(b.data(), br, bc, trans_b, g.data(), m, n, true, batch)
            } else {
                // dA = dC·op(B)ᵀ
                batched(g.data(), m, n, false, b.data(), br, bc, !trans_b, batch)
            };
            let gb = if trans_b {
                // dB = dCᵀ·op(A)
                batched(g.data(), m, n, true, a.data(), ar, ac, trans_a, batch)
            } else {
                // dB = op(A)ᵀ·dC
                batched(a.data(), ar, ac, !trans_a, g.data(), m, n, false, batch)
            };
            vec![
                Some(Tensor::new(a.shape().to_vec(), ga)),
                Some(Tensor::new(b.shape().to_vec(), gb)),
            ]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = (*x).clone().reshape(shape.to_vec());
        self.graph.push(out, &[self], move |g, _, _| {
            vec![Some(g.clone().reshape(in_shape.clone()))]
        })
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g, T> {
        let out = self.value().permute(perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.graph
            .push(out, &[self], move |g, _, _| vec![Some(g.permute(&inverse))])
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.graph.push(Tensor::new(out_shape, out), &[self], move |g, _, _| {
            let mut gx = Tensor::zeros(shape.clone());
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx.data_mut()[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g, T> {
        let x = self.value();
        let k = *x.shape().last().expect("rank >= 1");
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(k) {
            softmax_in_place(row);
        }
        self.graph.push(out, &[self], move |g, y, _| {
            let mut gx = g.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (gv, &yv) in gr.iter_mut().zip(yr) {
                    *gv = yv * (*gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn relu(self) -> Var<'g, T> {
        let out = self.value().map(|v| v.max(T::zero()));
        self.graph.push(out, &[self], |g, y, _| {
            vec![Some(g.zip_map(y, |gv, yv| if yv > T::zero() { gv } else { T::zero() }))]
        })
    }

    /// Exact (erf) GELU.
    pub fn gelu(self) -> Var<'g, T> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let out = self.value().map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
        self.graph.push(out, &[self], move |g, _, p| {
            vec![Some(p[0].zip_map(g, |x, gv| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                gv * (cdf + x * pdf)
            }))]
        })
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let out = self.value().map(sigmoid);
        self.graph.push(out, &[self], |g, y, _| {
            vec![Some(g.zip_map(y, |gv, s| gv * s * (T::one() - s)))]
        })
    }

    /// `x·σ(x)`, a.k.a. swish.
    pub fn silu(self) -> Var<'g, T> {
        let out = self.value().map(|v| v * sigmoid(v));
        self.graph.push(out, &[self], |g, _, p| {
            vec![Some(p[0].zip_map(g, |x, gv| {
                let s = sigmoid(x);
                gv * s * (T::one() + x * (T::one() - s))
            }))]
        })
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout(self, p: f64) -> Var<'g, T> {
        assert!((0.0..1.0).contains(&p), "dropout probability must lie in [0, 1)");
        if !self.graph.is_training() || p == 0.0 {
            return self;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let x = self.value();
        let mask: Vec<T> = {
            let mut rng = self.graph.rng();
            (0..x.numel())
                .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                .collect()
        };
        let mask = Tensor::new(x.shape().to_vec(), mask);
        let out = x.zip_map(&mask, |a, m| a * m);
        self.graph
            .push(out, &[self], move |g, _, _| vec![Some(g.zip_map(&mask, |a, m| a * m))])
    }

    /// Layer normalisation over the last axis with affine parameters.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Var<'g, T> {
        let (x, ga, be) = (self.value(), gamma.value(), beta.value());
        let d = *x.shape().last().expect("rank >= 1");
        assert!(ga.numel() == d && be.numel() == d, "layer norm parameter width");
        let eps = T::from_f64(eps);
        let inv_d = T::from_f64(1.0 / d as f64);
        let rows = x.numel() / d;
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * ga.data()[j] + be.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        self.graph
            .push(Tensor::new(shape.clone(), out), &[self, gamma, beta], move |g, _, p| {
                let ga = p[1];
                let mut gx = vec![T::zero(); rows * d];
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let dh = gr[j] * ga.data()[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    for j in 0..d {
                        let dh = gr[j] * ga.data()[j];
                        gx[r * d + j] = rstd[r] * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                    }
                }
                vec![
                    Some(Tensor::new(shape.clone(), gx)),
                    Some(Tensor::new(p[1].shape().to_vec(), ggamma)),
                    Some(Tensor::new(p[2].shape().to_vec(), gbeta)),
                ]
            })
    }

    /// Mean over axis 1 of a `[N, T, D]` tensor.
    pub fn mean_tokens(self) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 3, "mean_tokens expects [N, T, D]");
        let (n, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        let inv = T::from_f64(1.0 / t as f64);
        let mut out = vec![T::zero(); n * d];
        for b in 0..n {
            for s in 0..t {
                let row = &x.data()[(b * t + s) * d..(b * t + s + 1) * d];
                for (o, &v) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        self.graph.push(Tensor::new(vec![n, d], out), &[self], move |g, _, _| {
            let mut gx = vec![T::zero(); n * t * d];
            for b in 0..n {
                let gr = &g.data()[b * d..(b + 1) * d];
                for s in 0..t {
                    for (o, &v) in gx[(b * t + s) * d..(b * t + s + 1) * d].iter_mut().zip(gr) {
                        *o = v * inv;
                    }
                }
            }
            vec![Some(Tensor::new(vec![n, t, d], gx))]
        })
    }

    /// Prepends `token` (any shape with `D` elements) to every sequence of `[N, T, D]`.
    pub fn prepend_token(self, token: Var<'g, T>) -> Var<'g, T> {
        same_graph(&self, &token);
        let (x, tok) = (self.value(), token.value());
        assert_eq!(x.ndim(), 3, "prepend_token expects [N, T, D]");
        let (n, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        assert_eq!(tok.numel(), d, "token width");
        let mut out = Vec::with_capacity(n * (t + 1) * d);
        for b in 0..n {
            out.extend_from_slice(tok.data());
            out.extend_from_slice(&x.data()[b * t * d..(b + 1) * t * d]);
        }
        let tok_shape = tok.shape().to_vec();
        self.graph
            .push(Tensor::new(vec![n, t + 1, d], out), &[self, token], move |g, _, _| {
                let mut gx = Vec::with_capacity(n * t * d);
                let mut gt = vec![T::zero(); d];
                for b in 0..n {
                    let base = b * (t + 1) * d;
                    for (o, &v) in gt.iter_mut().zip(&g.data()[base..base + d]) {
                        *o += v;
                    }
                    gx.extend_from_slice(&g.data()[base + d..base + (t + 1) * d]);
                }
                vec![
                    Some(Tensor::new(vec![n, t, d], gx)),
                    Some(Tensor::new(tok_shape.clone(), gt)),
                ]
            })
    }

    /// Row `index` of every sequence: `[N, T, D] -> [N, D]`.
    pub fn select_token(self, index: usize) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 3, "select_token expects [N, T, D]");
        let (n, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        assert!(index < t, "token index out of range");
        let mut out = Vec::with_capacity(n * d);
        for b in 0..n {
            let base = (b * t + index) * d;
            out.extend_from_slice(&x.data()[base..base + d]);
        }
        self.graph.push(Tensor::new(vec![n, d], out), &[self], move |g, _, _| {
            let mut gx = Tensor::zeros(vec![n, t, d]);
            for b in 0..n {
                let base = (b * t + index) * d;
                gx.data_mut()[base..base + d].copy_from_slice(&g.data()[b * d..(b + 1) * d]);
            }
            vec![Some(gx)]
        })
    }

    /// `Σ self ⊙ coeffs` as a one-element tensor.
    pub fn dot_const(self, coeffs: &Tensor<T>) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.shape(), coeffs.shape(), "dot_const shape mismatch");
        let s: T = x.data().iter().zip(coeffs.data()).map(|(&a, &b)| a * b).sum();
        let coeffs = coeffs.clone();
        self.graph.push(Tensor::scalar(s), &[self], move |g, _, _| {
            let g0 = g.data()[0];
            vec![Some(coeffs.map(|c| c * g0))]
        })
    }

    /// Class-weighted cross-entropy of `[N, K]` logits with weighted-mean reduction:
    /// `Σ w[y_i]·nll_i / Σ w[y_i]`. Returns a one-element tensor; zero when the
    /// total weight is zero.
    pub fn weighted_cross_entropy(self, labels: &[usize], weights: &[f64]) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 2, "logits must be [N, K]");
        let (n, k) = (x.dim(0), x.dim(1));
        assert_eq!(labels.len(), n, "label count");
        assert_eq!(weights.len(), k, "weight count");
        let mut probs = (*x).clone();
        let mut total = 0.0f64;
        let mut loss = 0.0f64;
        for (i, row) in probs.data_mut().chunks_mut(k).enumerate() {
            let y = labels[i];
            assert!(y < k, "label {y} out of range for {k} classes");
            let lse = log_sum_exp(row);
            let nll = (lse - row[y]).to_f64();
            loss += weights[y] * nll;
            total += weights[y];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = if total > 0.0 { loss / total } else { 0.0 };
        let labels = labels.to_vec();
        let weights = weights.to_vec();
        self.graph
            .push(Tensor::scalar(T::from_f64(value)), &[self], move |g, _, _| {
                let mut gx = probs.clone();
                if total <= 0.0 {
                    return vec![Some(Tensor::zeros(gx.shape().to_vec()))];
                }
                let g0 = g.data()[0].to_f64();
                for (i, row) in gx.data_mut().chunks_mut(k).enumerate() {
                    let y = labels[i];
                    let c = T::from_f64(g0 * weights[y] / total);
                    row[y] -= T::one();
                    for v in row.iter_mut() {
                        *v *= c;
                    }
                }
                vec![Some(gx)]
            })
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

#[allow(clippy::too_many_arguments)]
fn batched<T: Scalar>(
    a: &[T],
    ar: usize,
    ac: usize,
    ta: bool,
    b: &[T],
    br: usize,
    bc: usize,
    tb: bool,
    batch: usize,
) -> Vec<T> {
    let m = if ta { ac } else { ar };
    let n = if tb { br } else { bc };
    let mut out = vec![T::zero(); batch * m * n];
    for i in 0..batch {
        let mut av = MatView::new(&a[i * ar * ac..(i + 1) * ar * ac], ar, ac);
        let mut bv = MatView::new(&b[i * br * bc..(i + 1) * br * bc], br, bc);
        if ta {
            av = av.t();
        }
        if tb {
            bv = bv.t();
        }
        matmul_into(av, bv, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
    }
    out
}
