//! EfficientNet backbone with its classifier removed.
//!
//! Parameters follow the timm naming scheme (`conv_stem`, `bn1`,
//! `blocks.<stage>.<block>.*`, `conv_head`, `bn2`). Stage count, block count,
//! kernel sizes and widths are read from the tensors themselves; per-stage
//! strides follow the fixed B-series table.

use qalam_nn::{init, Conv2dGeometry, Graph, ParamStore, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm, Binder, Conv, Named};
use crate::error::{Error, Result};

/// First-block stride of each of the seven stages.
pub const STAGE_STRIDES: [usize; 7] = [1, 2, 2, 2, 1, 2, 1];

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBn {
    fn bind<T: Scalar>(b: &Binder<T>, conv: &str, bn: &str, stride: usize, depthwise: bool) -> Result<Self> {
        let shape = b.shape(&format!("{conv}.weight"))?;
        let [out, cin, kh, kw] = shape[..] else {
            return Err(Error::InvalidSpec(format!(
                "{}{conv}.weight has shape {shape:?}",
                b.prefix
            )));
        };
        if kh != kw {
            return Err(Error::InvalidSpec(format!("{}{conv}.weight is not square", b.prefix)));
        }
        let geometry = if depthwise {
            if cin != 1 {
                return Err(Error::InvalidSpec(format!(
                    "{}{conv}.weight is not depthwise",
                    b.prefix
                )));
            }
            Conv2dGeometry::depthwise(stride, kh / 2, out)
        } else {
            Conv2dGeometry::new(stride, kh / 2)
        };
        Ok(Self {
            conv: Conv {
                weight: b.id(&format!("{conv}.weight"))?,
                bias: None,
                geometry,
            },
            bn: BatchNorm::bind(b, bn, out)?,
        })
    }

    fn out_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.value(self.conv.weight).dim(0)
    }

    fn in_channels<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        let w = store.value(self.conv.weight);
        if self.conv.geometry.groups > 1 {
            w.dim(0)
        } else {
            w.dim(1)
        }
    }

    fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>, act: bool) -> Var<'g, T> {
        let y = self.bn.forward(g, store, self.conv.forward(g, store, x));
        if act {
            y.silu()
        } else {
            y
        }
    }
}

#[derive(Clone, Debug)]
struct SqueezeExcite {
    reduce_w: qalam_nn::ParamId,
    reduce_b: qalam_nn::ParamId,
    expand_w: qalam_nn::ParamId,
    expand_b: qalam_nn::ParamId,
    channels: usize,
    reduced: usize,
}

impl SqueezeExcite {
    fn bind<T: Scalar>(b: &Binder<T>, name: &str, channels: usize) -> Result<Self> {
        let shape = b.shape(&format!("{name}.conv_reduce.weight"))?;
        let reduced = shape[0];
        Ok(Self {
            reduce_w: b.shaped(&format!("{name}.conv_reduce.weight"), &[reduced, channels, 1, 1])?,
            reduce_b: b.shaped(&format!("{name}.conv_reduce.bias"), &[reduced])?,
            expand_w: b.shaped(&format!("{name}.conv_expand.weight"), &[channels, reduced, 1, 1])?,
            expand_b: b.shaped(&format!("{name}.conv_expand.bias"), &[channels])?,
            channels,
            reduced,
        })
    }

    fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let s = x.global_avg_pool();
        let rw = g.param(store, self.reduce_w).reshape(&[self.reduced, self.channels]);
        let ew = g.param(store, self.expand_w).reshape(&[self.channels, self.reduced]);
        let s = s.linear(rw, Some(g.param(store, self.reduce_b))).silu();
        let gate = s.linear(ew, Some(g.param(store, self.expand_b))).sigmoid();
        x.mul_channels(gate)
    }
}

#[derive(Clone, Debug)]
enum Block {
    DepthwiseSeparable {
        dw: ConvBn,
        se: Option<SqueezeExcite>,
        pw: ConvBn,
        skip: bool,
    },
    InvertedResidual {
        expand: ConvBn,
        dw: ConvBn,
        se: Option<SqueezeExcite>,
        project: ConvBn,
        skip: bool,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct EfficientNet {
    stem: ConvBn,
    blocks: Vec<Block>,
    head: ConvBn,
    pub width: usize,
}

impl EfficientNet {
    pub fn bind<T: Scalar>(b: &Binder<T>) -> Result<Self> {
        let stem = ConvBn::bind(b, "conv_stem", "bn1", 2, false)?;
        let store = b.store;
        let mut channels = stem.out_channels(store);
        let mut blocks = Vec::new();
        let mut stage = 0;
        while b.has(&format!("blocks.{stage}.0.conv_dw.weight")) {
            let Some(&first_stride) = STAGE_STRIDES.get(stage) else {
                return Err(Error::InvalidSpec(format!("more than {} stages", STAGE_STRIDES.len())));
            };
            let mut idx = 0;
            while b.has(&format!("blocks.{stage}.{idx}.conv_dw.weight")) {
                let p = |n: &str| format!("blocks.{stage}.{idx}.{n}");
                let stride = if idx == 0 { first_stride } else { 1 };
                let se_name = p("se");
                let block = if b.has(&p("conv_pwl.weight")) {
                    let expand = ConvBn::bind(b, &p("conv_pw"), &p("bn1"), 1, false)?;
                    let dw = ConvBn::bind(b, &p("conv_dw"), &p("bn2"), stride, true)?;
                    let mid = expand.out_channels(store);
                    let se = if b.has(&format!("{se_name}.conv_reduce.weight")) {
                        Some(SqueezeExcite::bind(b, &se_name, mid)?)
                    } else {
                        None
                    };
                    let project = ConvBn::bind(b, &p("conv_pwl"), &p("bn3"), 1, false)?;
                    check_chain(b, &p("conv_pw"), channels, expand.in_channels(store))?;
                    check_chain(b, &p("conv_dw"), mid, dw.in_channels(store))?;
                    check_chain(b, &p("conv_pwl"), mid, project.in_channels(store))?;
                    let out = project.out_channels(store);
                    let skip = stride == 1 && out == channels;
                    channels = out;
                    Block::InvertedResidual {
                        expand,
                        dw,
                        se,
                        project,
                        skip,
                    }
                } else {
                    let dw = ConvBn::bind(b, &p("conv_dw"), &p("bn1"), stride, true)?;
                    check_chain(b, &p("conv_dw"), channels, dw.in_channels(store))?;
                    let se = if b.has(&format!("{se_name}.conv_reduce.weight")) {
                        Some(SqueezeExcite::bind(b, &se_name, channels)?)
                    } else {
                        None
                    };
                    let pw = ConvBn::bind(b, &p("conv_pw"), &p("bn2"), 1, false)?;
                    check_chain(b, &p("conv_pw"), channels, pw.in_channels(store))?;
                    let out = pw.out_channels(store);
                    let skip = stride == 1 && out == channels;
                    channels = out;
                    Block::DepthwiseSeparable { dw, se, pw, skip }
                };
                blocks.push(block);
                idx += 1;
            }
            stage += 1;
        }
        if blocks.is_empty() {
            return Err(Error::InvalidSpec(format!("no {}blocks.* tensors found", b.prefix)));
        }
        let head = ConvBn::bind(b, "conv_head", "bn2", 1, false)?;
        check_chain(b, "conv_head", channels, head.in_channels(store))?;
        let width = head.out_channels(store);
        Ok(Self {
            stem,
            blocks,
            head,
            width,
        })
    }

    /// Pooled `[N, width]` embedding.
    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = self.stem.forward(g, store, x, true);
        for block in &self.blocks {
            h = match block {
                Block::DepthwiseSeparable { dw, se, pw, skip } => {
                    let mut y = dw.forward(g, store, h, true);
                    if let Some(se) = se {
                        y = se.forward(g, store, y);
                    }
                    let y = pw.forward(g, store, y, false);
                    if *skip {
                        y.add(h)
                    } else {
                        y
                    }
                }
                Block::InvertedResidual {
                    expand,
                    dw,
                    se,
                    project,
                    skip,
                } => {
                    let mut y = dw.forward(g, store, expand.forward(g, store, h, true), true);
                    if let Some(se) = se {
                        y = se.forward(g, store, y);
                    }
                    let y = project.forward(g, store, y, false);
                    if *skip {
                        y.add(h)
                    } else {
                        y
                    }
                }
            };
        }
        self.head.forward(g, store, h, true).global_avg_pool()
    }
}

fn check_chain<T: Scalar>(b: &Binder<T>, name: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::InvalidSpec(format!(
            "{}{name} expects {got} input channels but receives {expected}",
            b.prefix
        )));
    }
    Ok(())
}

/// Layer sizes of one stage: kernel, expansion ratio, output width, repeats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub kernel: usize,
    pub expand: usize,
    pub out: usize,
    pub repeats: usize,
}

/// Width and depth of a concrete EfficientNet variant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EfficientNetShape {
    pub stem: usize,
    pub stages: Vec<StageShape>,
    pub head: usize,
}

const B0_STAGES: [(usize, usize, usize, usize); 7] = [
    (3, 1, 16, 1),
    (3, 6, 24, 2),
    (5, 6, 40, 2),
    (3, 6, 80, 3),
    (5, 6, 112, 3),
    (5, 6, 192, 4),
    (3, 6, 320, 1),
];

/// Rounds `channels * multiplier` to a multiple of 8, never dropping more than 10%.
fn round_channels(channels: usize, multiplier: f64) -> usize {
    let c = channels as f64 * multiplier;
    let mut r = (((c + 4.0) / 8.0).floor() * 8.0).max(8.0);
    if r < 0.9 * c {
        r += 8.0;
    }
    r as usize
}

impl EfficientNetShape {
    /// Compound-scaled B-series shape for width/depth multipliers.
    pub fn scaled(width: f64, depth: f64) -> Self {
        Self {
            stem: round_channels(32, width),
            stages: B0_STAGES
                .iter()
                .map(|&(kernel, expand, out, repeats)| StageShape {
                    kernel,
                    expand,
                    out: round_channels(out, width),
                    repeats: (repeats as f64 * depth).ceil() as usize,
                })
                .collect(),
            head: round_channels(1280, width),
        }
    }

    /// EfficientNet-B7 (width 2.0, depth 3.1): 2560-wide embedding.
    pub fn b7() -> Self {
        Self::scaled(2.0, 3.1)
    }

    /// Random weights with the same names and shapes a pretrained archive would have.
    pub fn random_params<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> Named<T> {
        let mut named = Named::new();
        let conv = |named: &mut Named<T>, name: String, shape: [usize; 4], rng: &mut ChaCha8Rng| {
            let fan_in = shape[1] * shape[2] * shape[3];
            named.insert(name, init::normal(&shape, (1.0 / fan_in as f64).sqrt(), rng));
        };
        let bn = |named: &mut Named<T>, name: String, c: usize| {
            named.insert(format!("{name}.weight"), Tensor::full(vec![c], T::one()));
            named.insert(format!("{name}.bias"), Tensor::zeros(vec![c]));
            named.insert(format!("{name}.running_mean"), Tensor::zeros(vec![c]));
            named.insert(format!("{name}.running_var"), Tensor::full(vec![c], T::one()));
        };
        let se = |named: &mut Named<T>, name: String, c: usize, rd: usize, rng: &mut ChaCha8Rng| {
            named.insert(
                format!("{name}.conv_reduce.weight"),
                init::normal(&[rd, c, 1, 1], (1.0 / c as f64).sqrt(), rng),
            );
            named.insert(format!("{name}.conv_reduce.bias"), Tensor::zeros(vec![rd]));
            named.insert(
                format!("{name}.conv_expand.weight"),
                init::normal(&[c, rd, 1, 1], (1.0 / rd as f64).sqrt(), rng),
            );
            named.insert(format!("{name}.conv_expand.bias"), Tensor::zeros(vec![c]));
        };
        conv(&mut named, "conv_stem.weight".into(), [self.stem, 3, 3, 3], rng);
        bn(&mut named, "bn1".into(), self.stem);
        let mut cin = self.stem;
        for (s, st) in self.stages.iter().enumerate() {
            for i in 0..st.repeats {
                let p = |n: &str| format!("blocks.{s}.{i}.{n}");
                let rd = (cin / 4).max(1);
                if st.expand == 1 {
                    conv(&mut named, p("conv_dw.weight"), [cin, 1, st.kernel, st.kernel], rng);
                    bn(&mut named, p("bn1"), cin);
                    se(&mut named, p("se"), cin, rd, rng);
                    conv(&mut named, p("conv_pw.weight"), [st.out, cin, 1, 1], rng);
                    bn(&mut named, p("bn2"), st.out);
                } else {
                    let mid = cin * st.expand;
                    conv(&mut named, p("conv_pw.weight"), [mid, cin, 1, 1], rng);
                    bn(&mut named, p("bn1"), mid);
                    conv(&mut named, p("conv_dw.weight"), [mid, 1, st.kernel, st.kernel], rng);
                    bn(&mut named, p("bn2"), mid);
                    se(&mut named, p("se"), mid, rd, rng);
                    conv(&mut named, p("conv_pwl.weight"), [st.out, mid, 1, 1], rng);
                    bn(&mut named, p("bn3"), st.out);
                }
                cin = st.out;
            }
        }
        conv(&mut named, "conv_head.weight".into(), [self.head, cin, 1, 1], rng);
        bn(&mut named, "bn2".into(), self.head);
        named.insert("classifier.weight".into(), init::normal(&[1000, self.head], 0.01, rng));
        named.insert("classifier.bias".into(), Tensor::zeros(vec![1000]));
        named
    }
}
