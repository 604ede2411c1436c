//! Pre-norm vision transformer shared by the custom family and ViT-B/16.

use qalam_nn::{init, Conv2dGeometry, Graph, ParamStore, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::interp::interpolate_positional_embeddings;
use super::layers::{Binder, Conv, LayerNorm, Linear, Named};
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-6;
/// timm's encoder-block weight init; keeps fresh blocks close to identity.
const BLOCK_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Pooling {
    /// Mean over patch tokens (custom family, no class token).
    Mean,
    /// Output of the prepended class token.
    ClassToken,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Transformer {
    patch_embed: Conv,
    cls_token: Option<qalam_nn::ParamId>,
    pos_embed: qalam_nn::ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    pub dim: usize,
    heads: usize,
    dropout: f64,
    pooling: Pooling,
}

/// Sizes needed to create fresh parameters.
#[derive(Clone, Copy, Debug)]
pub(crate) struct VitShape {
    pub image: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub class_token: bool,
}

impl VitShape {
    pub fn tokens(&self) -> usize {
        (self.image / self.patch).pow(2)
    }
}

/// Fresh parameters with timm-style names under `prefix`.
pub(crate) fn init_params<T: Scalar>(named: &mut Named<T>, prefix: &str, s: VitShape, rng: &mut ChaCha8Rng) {
    let p = |n: &str| format!("{prefix}{n}");
    let fan_in = 3 * s.patch * s.patch;
    named.insert(
        p("patch_embed.proj.weight"),
        init::fan_in_uniform(&[s.dim, 3, s.patch, s.patch], fan_in, rng),
    );
    named.insert(p("patch_embed.proj.bias"), Tensor::zeros(vec![s.dim]));
    if s.class_token {
        named.insert(p("cls_token"), init::normal(&[1, 1, s.dim], 0.02, rng));
        named.insert(p("pos_embed"), init::normal(&[1, s.tokens() + 1, s.dim], 0.02, rng));
    } else {
        named.insert(p("pos_embed"), init::normal(&[s.tokens(), s.dim], 0.02, rng));
    }
    let hidden = s.dim * s.mlp_ratio;
    for i in 0..s.depth {
        let b = |n: &str| p(&format!("blocks.{i}.{n}"));
        LayerNorm::init(named, &b("norm1"), s.dim);
        Linear::init_normal(named, &b("attn.qkv"), 3 * s.dim, s.dim, BLOCK_INIT_STD, rng);
        Linear::init_normal(named, &b("attn.proj"), s.dim, s.dim, BLOCK_INIT_STD, rng);
        LayerNorm::init(named, &b("norm2"), s.dim);
        Linear::init_normal(named, &b("mlp.fc1"), hidden, s.dim, BLOCK_INIT_STD, rng);
        Linear::init_normal(named, &b("mlp.fc2"), s.dim, hidden, BLOCK_INIT_STD, rng);
    }
    LayerNorm::init(named, &p("norm"), s.dim);
}

/// Resizes a class-token positional table in place when its grid differs from `grid`.
pub(crate) fn adapt_pos_embed<T: Scalar>(named: &mut Named<T>, prefix: &str, grid: usize) -> Result<()> {
    let key = format!("{prefix}pos_embed");
    let pos = named
        .get(&key)
        .ok_or_else(|| Error::InvalidSpec(format!("parameter {key} is missing")))?;
    let rows = pos.shape()[pos.ndim() - 2];
    let old = ((rows - 1) as f64).sqrt().round() as usize;
    if old * old + 1 != rows {
        return Err(Error::InvalidSpec(format!("{key} has {rows} rows, not 1 + G²")));
    }
    if old != grid {
        let resized = interpolate_positional_embeddings(pos, old, grid)?;
        named.insert(key, resized);
    }
    Ok(())
}

impl Transformer {
    /// Binds existing parameters; depth and width come from their shapes.
    pub fn bind<T: Scalar>(
        b: &Binder<T>,
        image: usize,
        heads: Option<usize>,
        dropout: f64,
        pooling: Pooling,
    ) -> Result<Self> {
        let pw = b.shape("patch_embed.proj.weight")?;
        let [dim, 3, patch, patch2] = pw[..] else {
            return Err(Error::InvalidSpec(format!("patch embedding weight has shape {pw:?}")));
        };
        if patch != patch2 || patch == 0 || !image.is_multiple_of(patch) {
            return Err(Error::InvalidSpec(format!(
                "image size {image} is not a multiple of patch {patch}"
            )));
        }
        let heads = heads.unwrap_or((dim / 64).max(1));
        if dim % heads != 0 {
            return Err(Error::InvalidSpec(format!(
                "width {dim} not divisible by {heads} heads"
            )));
        }
        let tokens = (image / patch).pow(2);
        let patch_embed = Conv {
            weight: b.id("patch_embed.proj.weight")?,
            bias: Some(b.shaped("patch_embed.proj.bias", &[dim])?),
            geometry: Conv2dGeometry::new(patch, 0),
        };
        let (cls_token, pos_embed) = match pooling {
            Pooling::ClassToken => (
                Some(b.shaped("cls_token", &[1, 1, dim])?),
                b.shaped("pos_embed", &[1, tokens + 1, dim])?,
            ),
            Pooling::Mean => (None, b.shaped("pos_embed", &[tokens, dim])?),
        };
        let mut blocks = Vec::new();
        while b.has(&format!("blocks.{}.attn.qkv.weight", blocks.len())) {
            let i = blocks.len();
            let n = |s: &str| format!("blocks.{i}.{s}");
            let hidden = b.shape(&n("mlp.fc1.weight"))?[0];
            blocks.push(Block {
                norm1: LayerNorm::bind(b, &n("norm1"), dim, LN_EPS)?,
                qkv: Linear::bind(b, &n("attn.qkv"), 3 * dim, dim)?,
                proj: Linear::bind(b, &n("attn.proj"), dim, dim)?,
                norm2: LayerNorm::bind(b, &n("norm2"), dim, LN_EPS)?,
                fc1: Linear::bind(b, &n("mlp.fc1"), hidden, dim)?,
                fc2: Linear::bind(b, &n("mlp.fc2"), dim, hidden)?,
            });
        }
        if blocks.is_empty() {
            return Err(Error::InvalidSpec("transformer has no encoder blocks".into()));
        }
        Ok(Self {
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNorm::bind(b, "norm", dim, LN_EPS)?,
            dim,
            heads,
            dropout,
            pooling,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn attention<'g, T: Scalar>(
        &self,
        g: &'g Graph<T>,
        store: &ParamStore<T>,
        blk: &Block,
        x: Var<'g, T>,
    ) -> Var<'g, T> {
        let shape = x.shape();
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let qkv = blk
            .qkv
            .forward(g, store, x)
            .reshape(&[n, t, 3, h, dh])
            .permute(&[2, 0, 3, 1, 4]);
        let part = |i| qkv.narrow(0, i, 1).reshape(&[n * h, t, dh]);
        let (q, k, v) = (part(0), part(1), part(2));
        let attn = q
            .bmm(k, false, true)
            .scale(1.0 / (dh as f64).sqrt())
            .softmax()
            .dropout(self.dropout);
        let ctx = attn
            .bmm(v, false, false)
            .reshape(&[n, h, t, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[n, t, d]);
        blk.proj.forward(g, store, ctx).dropout(self.dropout)
    }

    /// Token sequence after the final norm, `[N, T(+1), D]`.
    pub fn tokens<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let n = x.shape()[0];
        let patches = self.patch_embed.forward(g, store, x);
        let ps = patches.shape();
        let t = ps[2] * ps[3];
        let mut tokens = patches.reshape(&[n, self.dim, t]).permute(&[0, 2, 1]);
        if let Some(cls) = self.cls_token {
            tokens = tokens.prepend_token(g.param(store, cls));
        }
        let pos = g.param(store, self.pos_embed);
        let rows = pos.value().numel() / self.dim;
        let pos = pos.reshape(&[rows, self.dim]);
        let mut h = tokens.add_broadcast(pos);
        for blk in &self.blocks {
            let a = self.attention(g, store, blk, blk.norm1.forward(g, store, h));
            h = h.add(a);
            let m = blk
                .fc1
                .forward(g, store, blk.norm2.forward(g, store, h))
                .gelu()
                .dropout(self.dropout);
            let m = blk.fc2.forward(g, store, m).dropout(self.dropout);
            h = h.add(m);
        }
        self.norm.forward(g, store, h)
    }

    /// Pooled `[N, D]` embedding.
    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.tokens(g, store, x);
        match self.pooling {
            Pooling::Mean => h.mean_tokens(),
            Pooling::ClassToken => h.select_token(0),
        }
    }
}
