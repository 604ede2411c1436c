//! Image operations on `[N, C, H, W]` tensors.

use crate::graph::Var;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, MatView, Tensor};

/// Geometry of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
    /// 1 for dense convolution; equal to the channel count for depthwise.
    pub groups: usize,
}

impl Conv2dGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(stride: usize, padding: usize, channels: usize) -> Self {
        Self {
            stride,
            padding,
            groups: channels,
        }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct Dims {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Dims {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], d: Dims, cols: &mut [T]) {
    let p = d.oh * d.ow;
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    let line = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * d.h + iy as usize) * d.w..(c * d.h + iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], d: Dims, x: &mut [T]) {
    let p = d.oh * d.ow;
    for c in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let base = (c * d.h + iy as usize) * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            x[base + ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], d: Dims, out: &mut [T]) {
    for c in 0..d.c {
        let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        let wc = &w[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
        let oc = &mut out[c * d.oh * d.ow..(c + 1) * d.oh * d.ow];
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let mut acc = T::zero();
                for ky in 0..d.kh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.kw {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            acc += wc[ky * d.kw + kx] * xc[iy as usize * d.w + ix as usize];
                        }
                    }
                }
                oc[oy * d.ow + ox] = acc;
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(x: &[T], w: &[T], g: &[T], d: Dims, gx: &mut [T], gw: &mut [T]) {
    for c in 0..d.c {
        let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        let wc = &w[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
        let gc = &g[c * d.oh * d.ow..(c + 1) * d.oh * d.ow];
        let gxc = &mut gx[c * d.h * d.w..(c + 1) * d.h * d.w];
        let gwc = &mut gw[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                let go = gc[oy * d.ow + ox];
                for ky in 0..d.kh {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.kw {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            let xi = iy as usize * d.w + ix as usize;
                            gwc[ky * d.kw + kx] += go * xc[xi];
                            gxc[xi] += go * wc[ky * d.kw + kx];
                        }
                    }
                }
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 2-d convolution; weight `[O, C/groups, kh, kw]`, optional bias `[O]`.
    /// Supports dense (`groups == 1`) and depthwise (`groups == C == O`) layouts.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, geo: Conv2dGeometry) -> Var<'g, T> {
        let (x, w) = (self.value(), weight.value());
        assert_eq!(x.ndim(), 4, "conv2d input must be [N, C, H, W]");
        assert_eq!(w.ndim(), 4, "conv2d weight must be [O, C/g, kh, kw]");
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, cg, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let depthwise = geo.groups != 1;
        if depthwise {
            assert!(
                geo.groups == c && o == c && cg == 1,
                "only depthwise grouping is supported (groups {} for {c} channels)",
                geo.groups
            );
        } else {
            assert_eq!(cg, c, "conv2d channel mismatch");
        }
        assert!(
            h + 2 * geo.padding >= kh && wd + 2 * geo.padding >= kw,
            "kernel larger than input"
        );
        let d = Dims {
            c,
            h,
            w: wd,
            kh,
            kw,
            oh: geo.output_size(h, kh),
            ow: geo.output_size(wd, kw),
            stride: geo.stride,
            pad: geo.padding,
        };
        let p = d.oh * d.ow;
        let ckk = c * kh * kw;
        let in_sz = c * h * wd;
        let mut out = vec![T::zero(); n * o * p];
        if depthwise {
            for b in 0..n {
                depthwise_forward(
                    &x.data()[b * in_sz..(b + 1) * in_sz],
                    w.data(),
                    d,
                    &mut out[b * o * p..(b + 1) * o * p],
                );
            }
        } else {
            let mut cols = if d.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); ckk * p]
            };
            for b in 0..n {
                let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
                let colv = if d.is_pointwise() {
                    xb
                } else {
                    im2col(xb, d, &mut cols);
                    &cols[..]
                };
                matmul_into(
                    MatView::new(w.data(), o, ckk),
                    MatView::new(colv, ckk, p),
                    T::zero(),
                    &mut out[b * o * p..(b + 1) * o * p],
                );
            }
        }
        let y = Tensor::new(vec![n, o, d.oh, d.ow], out);
        let y = self.graph.push(y, &[self, weight], move |g, _, pv| {
            let (x, w) = (pv[0], pv[1]);
            let mut gx = vec![T::zero(); n * in_sz];
            let mut gw = vec![T::zero(); w.numel()];
            if depthwise {
                for b in 0..n {
                    depthwise_backward(
                        &x.data()[b * in_sz..(b + 1) * in_sz],
                        w.data(),
                        &g.data()[b * o * p..(b + 1) * o * p],
                        d,
                        &mut gx[b * in_sz..(b + 1) * in_sz],
                        &mut gw,
                    );
                }
            } else {
                let pointwise = d.is_pointwise();
                let mut cols = vec![T::zero(); ckk * p];
                let mut gcols = vec![T::zero(); ckk * p];
                for b in 0..n {
                    let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
                    let gb = &g.data()[b * o * p..(b + 1) * o * p];
                    if pointwise {
                        cols.copy_from_slice(xb);
                    } else {
                        im2col(xb, d, &mut cols);
                    }
                    matmul_into(
                        MatView::new(gb, o, p),
                        MatView::new(&cols, ckk, p).t(),
                        T::one(),
                        &mut gw,
                    );
                    let gxb = &mut gx[b * in_sz..(b + 1) * in_sz];
                    if pointwise {
                        matmul_into(
                            MatView::new(w.data(), o, ckk).t(),
                            MatView::new(gb, o, p),
                            T::zero(),
                            gxb,
                        );
                    } else {
                        matmul_into(
                            MatView::new(w.data(), o, ckk).t(),
                            MatView::new(gb, o, p),
                            T::zero(),
                            &mut gcols,
                        );
                        col2im(&gcols, d, gxb);
                    }
                }
            }
            vec![
                Some(Tensor::new(x.shape().to_vec(), gx)),
                Some(Tensor::new(w.shape().to_vec(), gw)),
            ]
        });
        match bias {
            Some(b) => y.add_channel_bias(b),
            None => y,
        }
    }

    /// Adds a per-channel `[C]` bias to `[N, C, H, W]`.
    pub fn add_channel_bias(self, bias: Var<'g, T>) -> Var<'g, T> {
        let (x, b) = (self.value(), bias.value());
        let (n, c) = (x.dim(0), x.dim(1));
        let hw = x.numel() / (n * c);
        assert_eq!(b.numel(), c, "channel bias width");
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let bv = b.data()[i % c];
            for v in chunk {
                *v += bv;
            }
        }
        let bshape = b.shape().to_vec();
        self.graph.push(out, &[self, bias], move |g, _, _| {
            let mut gb = vec![T::zero(); c];
            for (i, chunk) in g.data().chunks(hw).enumerate() {
                gb[i % c] += chunk.iter().copied().sum::<T>();
            }
            vec![Some(g.clone()), Some(Tensor::new(bshape.clone(), gb))]
        })
    }

    /// Non-overlapping max pooling with a `k×k` window (stride `k`, floor mode).
    pub fn max_pool2d(self, k: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (oh, ow) = (h / k, w / k);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for nc in 0..n * c {
            let plane = &x.data()[nc * h * w..(nc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut bi = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = (oy * k + dy) * w + ox * k + dx;
                            if plane[i] > best || (dy == 0 && dx == 0) {
                                best = plane[i];
                                bi = i;
                            }
                        }
                    }
                    let o = (nc * oh + oy) * ow + ox;
                    out[o] = best;
                    arg[o] = nc * h * w + bi;
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.graph
            .push(Tensor::new(vec![n, c, oh, ow], out), &[self], move |g, _, _| {
                let mut gx = Tensor::zeros(in_shape.clone());
                for (o, &i) in arg.iter().enumerate() {
                    gx.data_mut()[i] += g.data()[o];
                }
                vec![Some(gx)]
            })
    }

    /// Spatial mean: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c) = (x.dim(0), x.dim(1));
        let hw = x.numel() / (n * c);
        let inv = T::from_f64(1.0 / hw as f64);
        let out: Vec<T> = x
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let in_shape = x.shape().to_vec();
        self.graph.push(Tensor::new(vec![n, c], out), &[self], move |g, _, _| {
            let mut gx = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                gx.extend(std::iter::repeat_n(gv * inv, hw));
            }
            vec![Some(Tensor::new(in_shape.clone(), gx))]
        })
    }

    /// Scales every channel plane of `[N, C, H, W]` by `gate[n, c]`.
    pub fn mul_channels(self, gate: Var<'g, T>) -> Var<'g, T> {
        let (x, s) = (self.value(), gate.value());
        let (n, c) = (x.dim(0), x.dim(1));
        assert_eq!(s.numel(), n * c, "gate must be [N, C]");
        let hw = x.numel() / (n * c);
        let mut out = (*x).clone();
        for (chunk, &sv) in out.data_mut().chunks_mut(hw).zip(s.data()) {
            for v in chunk {
                *v *= sv;
            }
        }
        self.graph.push(out, &[self, gate], move |g, _, p| {
            let (x, s) = (p[0], p[1]);
            let mut gx = g.clone();
            let mut gs = vec![T::zero(); n * c];
            for (i, (gch, xch)) in gx.data_mut().chunks_mut(hw).zip(x.data().chunks(hw)).enumerate() {
                let mut acc = T::zero();
                for (gv, &xv) in gch.iter_mut().zip(xch) {
                    acc += *gv * xv;
                    *gv *= s.data()[i];
                }
                gs[i] = acc;
            }
            vec![Some(gx), Some(Tensor::new(s.shape().to_vec(), gs))]
        })
    }

    /// Batch normalisation over `(N, H, W)` per channel.
    ///
    /// Training graphs normalise with batch statistics and queue running-stat
    /// updates (see [`crate::Graph::take_buffer_updates`]); evaluation graphs
    /// use the stored running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        store: &ParamStore<T>,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
        momentum: f64,
    ) -> Var<'g, T> {
        let (x, ga, be) = (self.value(), gamma.value(), beta.value());
        let (n, c) = (x.dim(0), x.dim(1));
        let hw = x.numel() / (n * c);
        let m = n * hw;
        let training = self.graph.is_training();
        let (mean, var) = if training {
            let mut mean = vec![0.0f64; c];
            let mut sq = vec![0.0f64; c];
            for (i, ch) in x.data().chunks(hw).enumerate() {
                let ci = i % c;
                for &v in ch {
                    let v = v.to_f64();
                    mean[ci] += v;
                    sq[ci] += v * v;
                }
            }
            let mut var = vec![0.0; c];
            for ci in 0..c {
                mean[ci] /= m as f64;
                var[ci] = (sq[ci] / m as f64 - mean[ci] * mean[ci]).max(0.0);
            }
            (mean, var)
        } else {
            let rm = store.value(running_mean).data().iter().map(|v| v.to_f64()).collect();
            let rv = store.value(running_var).data().iter().map(|v| v.to_f64()).collect();
            (rm, rv)
        };
        if training {
            let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            let rm = store.value(running_mean);
            let rv = store.value(running_var);
            let new_mean: Vec<T> = (0..c)
                .map(|ci| T::from_f64((1.0 - momentum) * rm.data()[ci].to_f64() + momentum * mean[ci]))
                .collect();
            let new_var: Vec<T> = (0..c)
                .map(|ci| T::from_f64((1.0 - momentum) * rv.data()[ci].to_f64() + momentum * var[ci] * unbias))
                .collect();
            self.graph
                .push_buffer_update(running_mean, Tensor::new(rm.shape().to_vec(), new_mean));
            self.graph
                .push_buffer_update(running_var, Tensor::new(rv.shape().to_vec(), new_var));
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mean: Vec<T> = mean.into_iter().map(T::from_f64).collect();
        let mut xhat = (*x).clone();
        let mut out = (*x).clone();
        for (i, (hch, och)) in xhat
            .data_mut()
            .chunks_mut(hw)
            .zip(out.data_mut().chunks_mut(hw))
            .enumerate()
        {
            let ci = i % c;
            for (h, o) in hch.iter_mut().zip(och.iter_mut()) {
                *h = (*h - mean[ci]) * rstd[ci];
                *o = *h * ga.data()[ci] + be.data()[ci];
            }
        }
        self.graph.push(out, &[self, gamma, beta], move |g, _, p| {
            let ga = p[1];
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gh = vec![T::zero(); c];
            for (i, (gch, hch)) in g.data().chunks(hw).zip(xhat.data().chunks(hw)).enumerate() {
                let ci = i % c;
                for (&gv, &hv) in gch.iter().zip(hch) {
                    sum_g[ci] += gv;
                    sum_gh[ci] += gv * hv;
                }
            }
            let inv_m = T::from_f64(1.0 / m as f64);
            let mut gx = g.clone();
            for (i, (gch, hch)) in gx.data_mut().chunks_mut(hw).zip(xhat.data().chunks(hw)).enumerate() {
                let ci = i % c;
                let k = ga.data()[ci] * rstd[ci];
                for (gv, &hv) in gch.iter_mut().zip(hch) {
                    *gv = if training {
                        k * (*gv - inv_m * sum_g[ci] - hv * inv_m * sum_gh[ci])
                    } else {
                        k * *gv
                    };
                }
            }
            vec![
                Some(gx),
                Some(Tensor::new(p[1].shape().to_vec(), sum_gh)),
                Some(Tensor::new(p[2].shape().to_vec(), sum_g)),
            ]
        })
    }
}
