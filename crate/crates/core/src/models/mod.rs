//! The four dual-head model families behind one interface.
//!
//! Every model maps an `[N, 3, S, S]` batch to 28 letter logits and 4
//! position logits through a family-specific backbone, a shared dense layer
//! and two parallel heads. Parameters live in a [`ParamStore`] under
//! `backbone.*`, `shared.*`, `letter_head.*` and `position_head.*`.

mod cnn;
mod efficientnet;
mod interp;
mod layers;
mod vit;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use qalam_nn::{archive, Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use efficientnet::{EfficientNetShape, StageShape, STAGE_STRIDES};
pub use interp::{bicubic_resize_grid, interpolate_positional_embeddings};

use crate::error::{Error, IoContext, Result};
use crate::imaging::{ModelInput, SIDE};
use crate::labels::{NUM_LETTERS, NUM_POSITIONS};
use layers::{store_from, Binder, Linear, Named};

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const SPEC_FILE: &str = "spec.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    CustomCnn,
    CustomVit,
    EfficientnetB7,
    VitB16,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 4] = [Self::CustomCnn, Self::CustomVit, Self::EfficientnetB7, Self::VitB16];

    pub fn name(self) -> &'static str {
        match self {
            Self::CustomCnn => "custom_cnn",
            Self::CustomVit => "custom_vit",
            Self::EfficientnetB7 => "efficientnet_b7",
            Self::VitB16 => "vit_b16",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn default_dropout(self) -> f64 {
        match self {
            Self::CustomCnn => 0.5,
            Self::CustomVit => 0.1,
            Self::EfficientnetB7 | Self::VitB16 => 0.3,
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            Self::CustomCnn | Self::EfficientnetB7 => 1e-3,
            Self::CustomVit | Self::VitB16 => 1e-4,
        }
    }

    pub fn is_pretrained(self) -> bool {
        matches!(self, Self::EfficientnetB7 | Self::VitB16)
    }

    /// Expected pooled-embedding width of the pretrained backbone.
    pub fn default_embedding_width(self) -> Option<usize> {
        match self {
            Self::EfficientnetB7 => Some(2560),
            Self::VitB16 => Some(768),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture description. Optional fields fall back to family defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawSpec")]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub dropout: f64,
    pub head_width: usize,
    pub image_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv_channels: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedding_width: Option<usize>,
    pub freeze_backbone: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    family: ModelFamily,
    dropout: Option<f64>,
    head_width: Option<usize>,
    image_size: Option<usize>,
    conv_channels: Option<[usize; 2]>,
    kernel_size: Option<usize>,
    patch_size: Option<usize>,
    embed_dim: Option<usize>,
    depth: Option<usize>,
    num_heads: Option<usize>,
    mlp_ratio: Option<usize>,
    weights: Option<PathBuf>,
    embedding_width: Option<usize>,
    #[serde(default)]
    freeze_backbone: bool,
}

impl From<RawSpec> for ModelSpec {
    fn from(r: RawSpec) -> Self {
        Self {
            family: r.family,
            dropout: r.dropout.unwrap_or(r.family.default_dropout()),
            head_width: r.head_width.unwrap_or(128),
            image_size: r.image_size.unwrap_or(SIDE),
            conv_channels: r.conv_channels,
            kernel_size: r.kernel_size,
            patch_size: r.patch_size,
            embed_dim: r.embed_dim,
            depth: r.depth,
            num_heads: r.num_heads,
            mlp_ratio: r.mlp_ratio,
            weights: r.weights,
            embedding_width: r.embedding_width,
            freeze_backbone: r.freeze_backbone,
        }
    }
}

impl ModelSpec {
    pub fn new(family: ModelFamily) -> Self {
        Self {
            family,
            dropout: family.default_dropout(),
            head_width: 128,
            image_size: SIDE,
            conv_channels: None,
            kernel_size: None,
            patch_size: None,
            embed_dim: None,
            depth: None,
            num_heads: None,
            mlp_ratio: None,
            weights: None,
            embedding_width: None,
            freeze_backbone: false,
        }
    }

    /// Pretrained family reading its backbone from `weights`.
    pub fn pretrained(family: ModelFamily, weights: impl Into<PathBuf>) -> Self {
        Self {
            weights: Some(weights.into()),
            ..Self::new(family)
        }
    }

    pub fn conv_channels(&self) -> [usize; 2] {
        self.conv_channels.unwrap_or([32, 64])
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size.unwrap_or(3)
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size.unwrap_or(16)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim.unwrap_or(256)
    }

    pub fn depth(&self) -> usize {
        self.depth.unwrap_or(6)
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads.unwrap_or(8)
    }

    pub fn mlp_ratio(&self) -> usize {
        self.mlp_ratio.unwrap_or(4)
    }

    pub fn embedding_width(&self) -> Option<usize> {
        self.embedding_width.or(self.family.default_embedding_width())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.head_width == 0 || self.image_size == 0 {
            return bad("head_width and image_size must be positive".into());
        }
        let set = |name: &'static str, present: bool| present.then_some(name);
        let cnn_fields = [
            set("conv_channels", self.conv_channels.is_some()),
            set("kernel_size", self.kernel_size.is_some()),
        ];
        let vit_fields = [
            set("patch_size", self.patch_size.is_some()),
            set("embed_dim", self.embed_dim.is_some()),
            set("depth", self.depth.is_some()),
            set("mlp_ratio", self.mlp_ratio.is_some()),
        ];
        let pretrained_fields = [
            set("weights", self.weights.is_some()),
            set("embedding_width", self.embedding_width.is_some()),
            set("freeze_backbone", self.freeze_backbone),
        ];
        let foreign: Vec<&str> = match self.family {
            ModelFamily::CustomCnn => vit_fields
                .iter()
                .chain(&pretrained_fields)
                .chain(&[set("num_heads", self.num_heads.is_some())])
                .flatten()
                .copied()
                .collect(),
            ModelFamily::CustomVit => cnn_fields.iter().chain(&pretrained_fields).flatten().copied().collect(),
            ModelFamily::EfficientnetB7 => cnn_fields
                .iter()
                .chain(&vit_fields)
                .chain(&[set("num_heads", self.num_heads.is_some())])
                .flatten()
                .copied()
                .collect(),
            ModelFamily::VitB16 => cnn_fields.iter().chain(&vit_fields).flatten().copied().collect(),
        };
        if !foreign.is_empty() {
            return bad(format!("{} does not accept {}", self.family, foreign.join(", ")));
        }
        match self.family {
            ModelFamily::CustomCnn => {
                let [a, b] = self.conv_channels();
                let k = self.kernel_size();
                if a == 0 || b == 0 || k.is_multiple_of(2) {
                    return bad("conv_channels must be positive and kernel_size odd".into());
                }
                if !self.image_size.is_multiple_of(4) {
                    return bad(format!("image_size {} must be divisible by 4", self.image_size));
                }
            }
            ModelFamily::CustomVit => {
                let (p, d, h) = (self.patch_size(), self.embed_dim(), self.num_heads());
                if p == 0 || !self.image_size.is_multiple_of(p) {
                    return bad(format!(
                        "image_size {} is not a multiple of patch_size {p}",
                        self.image_size
                    ));
                }
                if h == 0 || d % h != 0 || self.depth() == 0 || self.mlp_ratio() == 0 {
                    return bad(format!(
                        "embed_dim {d} must be divisible by num_heads {h}; depth and mlp_ratio positive"
                    ));
                }
            }
            ModelFamily::EfficientnetB7 | ModelFamily::VitB16 => {
                if self.weights.is_none() {
                    return bad(format!("{} requires a weights archive", self.family));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").at(path)
    }
}

#[derive(Clone, Debug)]
enum Backbone {
    Cnn(cnn::Cnn),
    Vit(vit::Transformer),
    EfficientNet(efficientnet::EfficientNet),
}

impl Backbone {
    fn width(&self) -> usize {
        match self {
            Self::Cnn(c) => c.features,
            Self::Vit(v) => v.dim,
            Self::EfficientNet(e) => e.width,
        }
    }
}

/// Logits of both heads for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DualOutput<'g, T> {
    pub letter: Var<'g, T>,
    pub position: Var<'g, T>,
}

/// Row-major logits: `letter` is `N×28`, `position` is `N×4`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualLogits {
    pub letter: Vec<f64>,
    pub position: Vec<f64>,
}

impl DualLogits {
    pub fn len(&self) -> usize {
        self.letter.len() / NUM_LETTERS
    }

    pub fn is_empty(&self) -> bool {
        self.letter.is_empty()
    }

    pub fn letter_row(&self, i: usize) -> &[f64] {
        &self.letter[i * NUM_LETTERS..(i + 1) * NUM_LETTERS]
    }

    pub fn position_row(&self, i: usize) -> &[f64] {
        &self.position[i * NUM_POSITIONS..(i + 1) * NUM_POSITIONS]
    }
}

/// Letter and position probability vectors for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DualDistribution {
    pub letter: Vec<f64>,
    pub position: Vec<f64>,
}

/// Tolerance on the unit-sum check of a probability vector.
pub const PROB_TOL: f64 = 1e-6;

/// Checks non-negativity and unit sum within [`PROB_TOL`].
pub fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::MalformedDistribution("empty vector".into()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::MalformedDistribution("negative or non-finite entry".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(Error::MalformedDistribution(format!("sums to {s}")));
    }
    Ok(())
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    qalam_nn::softmax_in_place(&mut out);
    out
}

impl DualDistribution {
    pub fn new(letter: Vec<f64>, position: Vec<f64>) -> Result<Self> {
        if letter.len() != NUM_LETTERS || position.len() != NUM_POSITIONS {
            return Err(Error::MalformedDistribution(format!(
                "expected {NUM_LETTERS}+{NUM_POSITIONS} entries, got {}+{}",
                letter.len(),
                position.len()
            )));
        }
        check_distribution(&letter)?;
        check_distribution(&position)?;
        Ok(Self { letter, position })
    }

    /// Softmax of both logit rows; rejects non-finite logits.
    pub fn from_logits(letter: &[f64], position: &[f64]) -> Result<Self> {
        if letter.iter().chain(position).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogits);
        }
        Self::new(softmax(letter), softmax(position))
    }
}

/// Stacks inputs into an `[N, 3, 128, 128]` tensor.
pub fn batch_tensor<T: Scalar>(inputs: &[&ModelInput]) -> Tensor<T> {
    let mut data = Vec::with_capacity(inputs.len() * ModelInput::LEN);
    for m in inputs {
        data.extend(m.values().iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(vec![inputs.len(), 3, SIDE, SIDE], data)
}

#[derive(Clone, Debug)]
struct Heads {
    shared: Linear,
    letter: Linear,
    position: Linear,
}

/// A backbone, a shared dense layer and the two classification heads.
#[derive(Clone, Debug)]
pub struct DualHeadModel<T: Scalar = f32> {
    spec: ModelSpec,
    store: ParamStore<T>,
    backbone: Backbone,
    heads: Heads,
}

const INFERENCE_BATCH: usize = 32;

fn init_heads<T: Scalar>(named: &mut Named<T>, features: usize, width: usize, rng: &mut ChaCha8Rng) {
    Linear::init(named, "shared", width, features, rng);
    Linear::init(named, "letter_head", NUM_LETTERS, width, rng);
    Linear::init(named, "position_head", NUM_POSITIONS, width, rng);
}

fn prefixed<T>(named: Named<T>, prefix: &str) -> Named<T> {
    named.into_iter().map(|(k, v)| (format!("{prefix}{k}"), v)).collect()
}

/// Reads a backbone archive, keeping only tensors outside `drop_prefix`.
fn load_backbone<T: Scalar>(path: &Path, drop_prefixes: &[&str]) -> Result<Named<T>> {
    let tensors = archive::load::<T>(path)?;
    Ok(tensors
        .into_iter()
        .filter(|(k, _)| !drop_prefixes.iter().any(|p| k.starts_with(p)))
        .collect())
}

impl<T: Scalar> DualHeadModel<T> {
    /// Builds any family; pretrained families read `spec.weights`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        match spec.family {
            ModelFamily::CustomCnn => Self::build_custom_cnn(spec, seed),
            ModelFamily::CustomVit => Self::build_custom_vit(spec, seed),
            ModelFamily::EfficientnetB7 => {
                Self::build_efficientnet_b7(spec, spec.weights.as_deref().expect("validated"), seed)
            }
            ModelFamily::VitB16 => Self::build_vit_b16(spec, spec.weights.as_deref().expect("validated"), seed),
        }
    }

    fn expect_family(spec: &ModelSpec, family: ModelFamily) -> Result<()> {
        if spec.family != family {
            return Err(Error::InvalidSpec(format!(
                "expected a {family} spec, got {}",
                spec.family
            )));
        }
        if !family.is_pretrained() {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn build_custom_cnn(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::expect_family(spec, ModelFamily::CustomCnn)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut named = Named::new();
        cnn::init_params(
            &mut named,
            BACKBONE_PREFIX,
            spec.conv_channels(),
            spec.kernel_size(),
            &mut rng,
        );
        let features = spec.conv_channels()[1] * (spec.image_size / 4).pow(2);
        init_heads(&mut named, features, spec.head_width, &mut rng);
        Self::from_named(spec.clone(), named)
    }

    pub fn build_custom_vit(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::expect_family(spec, ModelFamily::CustomVit)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut named = Named::new();
        let shape = vit::VitShape {
            image: spec.image_size,
            patch: spec.patch_size(),
            dim: spec.embed_dim(),
            depth: spec.depth(),
            mlp_ratio: spec.mlp_ratio(),
            class_token: false,
        };
        vit::init_params(&mut named, BACKBONE_PREFIX, shape, &mut rng);
        init_heads(&mut named, spec.embed_dim(), spec.head_width, &mut rng);
        Self::from_named(spec.clone(), named)
    }

    /// Pretrained EfficientNet backbone (classifier dropped) plus fresh heads.
    pub fn build_efficientnet_b7(spec: &ModelSpec, weights: &Path, seed: u64) -> Result<Self> {
        Self::expect_family(spec, ModelFamily::EfficientnetB7)?;
        let backbone = load_backbone::<T>(weights, &["classifier."])?;
        Self::attach_heads(spec, weights, backbone, seed, "conv_head.weight", 0)
    }

    /// Pretrained ViT backbone with positional embeddings resampled to the input grid.
    pub fn build_vit_b16(spec: &ModelSpec, weights: &Path, seed: u64) -> Result<Self> {
        Self::expect_family(spec, ModelFamily::VitB16)?;
        let mut backbone = load_backbone::<T>(weights, &["head.", "fc_norm."])?;
        let patch = backbone
            .get("patch_embed.proj.weight")
            .map(|w| w.shape()[w.ndim() - 1])
            .ok_or_else(|| archive_error(weights, "patch_embed.proj.weight is missing"))?;
        if patch == 0 || !spec.image_size.is_multiple_of(patch) {
            return Err(Error::InvalidSpec(format!(
                "image_size {} is not a multiple of patch {patch}",
                spec.image_size
            )));
        }
        vit::adapt_pos_embed(&mut backbone, "", spec.image_size / patch)
            .map_err(|e| archive_error(weights, &e.to_string()))?;
        Self::attach_heads(spec, weights, backbone, seed, "patch_embed.proj.weight", 0)
    }

    fn attach_heads(
        spec: &ModelSpec,
        weights: &Path,
        backbone: Named<T>,
        seed: u64,
        width_tensor: &str,
        width_axis: usize,
    ) -> Result<Self> {
        let width = backbone
            .get(width_tensor)
            .map(|t| t.shape()[width_axis])
            .ok_or_else(|| archive_error(weights, &format!("{width_tensor} is missing")))?;
        if let Some(expected) = spec.embedding_width() {
            if width != expected {
                return Err(archive_error(
                    weights,
                    &format!("backbone embedding width {width} does not match the expected {expected}"),
                ));
            }
        }
        let mut named = prefixed(backbone, BACKBONE_PREFIX);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_heads(&mut named, width, spec.head_width, &mut rng);
        Self::from_named(spec.clone(), named).map_err(|e| match e {
            Error::InvalidSpec(m) => archive_error(weights, &m),
            other => other,
        })
    }

    /// Binds a complete named parameter set (as written by [`Self::save`]).
    pub fn from_named(spec: ModelSpec, named: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut store = store_from(named);
        let b = Binder::new(&store, BACKBONE_PREFIX);
        let backbone = match spec.family {
            ModelFamily::CustomCnn => Backbone::Cnn(cnn::Cnn::bind(&b, spec.image_size)?),
            ModelFamily::CustomVit => Backbone::Vit(vit::Transformer::bind(
                &b,
                spec.image_size,
                Some(spec.num_heads()),
                spec.dropout,
                vit::Pooling::Mean,
            )?),
            ModelFamily::VitB16 => Backbone::Vit(vit::Transformer::bind(
                &b,
                spec.image_size,
                spec.num_heads,
                0.0,
                vit::Pooling::ClassToken,
            )?),
            ModelFamily::EfficientnetB7 => Backbone::EfficientNet(efficientnet::EfficientNet::bind(&b)?),
        };
        let hb = Binder::new(&store, "");
        let heads = Heads {
            shared: Linear::bind(&hb, "shared", spec.head_width, backbone.width())?,
            letter: Linear::bind(&hb, "letter_head", NUM_LETTERS, spec.head_width)?,
            position: Linear::bind(&hb, "position_head", NUM_POSITIONS, spec.head_width)?,
        };
        if spec.freeze_backbone {
            store.set_trainable_prefix(BACKBONE_PREFIX, false);
        }
        Ok(Self {
            spec,
            store,
            backbone,
            heads,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Width of the pooled backbone embedding.
    pub fn embedding_width(&self) -> usize {
        self.backbone.width()
    }

    /// Encoder depth for transformer families.
    pub fn transformer_depth(&self) -> Option<usize> {
        match &self.backbone {
            Backbone::Vit(v) => Some(v.depth()),
            _ => None,
        }
    }

    /// Pooled backbone features `[N, width]`.
    pub fn embed<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Var<'g, T> {
        match &self.backbone {
            Backbone::Cnn(c) => c.forward(g, &self.store, x),
            Backbone::Vit(v) => v.forward(g, &self.store, x),
            Backbone::EfficientNet(e) => e.forward(g, &self.store, x),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> DualOutput<'g, T> {
        let features = self.embed(g, x);
        let h = self
            .heads
            .shared
            .forward(g, &self.store, features)
            .relu()
            .dropout(self.spec.dropout);
        DualOutput {
            letter: self.heads.letter.forward(g, &self.store, h),
            position: self.heads.position.forward(g, &self.store, h),
        }
    }

    /// Evaluation-mode logits for a raw `[N, 3, S, S]` tensor.
    pub fn logits(&self, batch: Tensor<T>) -> DualLogits {
        let g = Graph::eval();
        let out = self.forward(&g, g.input(batch));
        DualLogits {
            letter: out.letter.value().data().iter().map(|v| v.to_f64()).collect(),
            position: out.position.value().data().iter().map(|v| v.to_f64()).collect(),
        }
    }

    /// Evaluation-mode logits for preprocessed inputs, in batches of 32.
    pub fn logits_for(&self, inputs: &[&ModelInput]) -> DualLogits {
        let mut all = DualLogits {
            letter: Vec::with_capacity(inputs.len() * NUM_LETTERS),
            position: Vec::with_capacity(inputs.len() * NUM_POSITIONS),
        };
        for chunk in inputs.chunks(INFERENCE_BATCH) {
            let l = self.logits(batch_tensor(chunk));
            all.letter.extend(l.letter);
            all.position.extend(l.position);
        }
        all
    }

    /// Softmax distributions per input; non-finite logits signal divergence.
    pub fn predict_proba(&self, inputs: &[&ModelInput]) -> Result<Vec<DualDistribution>> {
        let logits = self.logits_for(inputs);
        (0..logits.len())
            .map(|i| DualDistribution::from_logits(logits.letter_row(i), logits.position_row(i)))
            .collect()
    }

    /// Writes `model.safetensors` and `spec.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let mut meta = BTreeMap::new();
        meta.insert("family".to_string(), self.spec.family.name().to_string());
        archive::save(&dir.join(WEIGHTS_FILE), &self.store.to_named(), &meta)?;
        self.spec.save(&dir.join(SPEC_FILE))
    }

    /// Restores a model written by [`Self::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join(SPEC_FILE);
        let text = fs::read_to_string(&spec_path).at(&spec_path)?;
        let spec: ModelSpec = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: spec_path.clone(),
            reason: e.to_string(),
        })?;
        let named = archive::load::<T>(&dir.join(WEIGHTS_FILE))?;
        Self::from_named(spec, named)
    }
}

fn archive_error(path: &Path, reason: &str) -> Error {
    Error::Nn(qalam_nn::NnError::Archive {
        path: path.display().to_string(),
        reason: reason.to_string(),
    })
}

/// Writes an EfficientNet archive with random weights and pretrained naming.
///
/// Useful for smoke tests and for exercising the adapter without downloading
/// real ImageNet weights.
pub fn write_random_efficientnet(path: &Path, shape: &EfficientNetShape, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let named: Named<f32> = shape.random_params(&mut rng);
    let tensors: Vec<_> = named.into_iter().collect();
    archive::save(path, &tensors, &BTreeMap::new())?;
    Ok(())
}

/// Writes a ViT archive with random weights, a class token and a `grid×grid` position table.
pub fn write_random_vit(path: &Path, dim: usize, depth: usize, grid: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut named: Named<f32> = Named::new();
    let shape = vit::VitShape {
        image: grid * 16,
        patch: 16,
        dim,
        depth,
        mlp_ratio: 4,
        class_token: true,
    };
    vit::init_params(&mut named, "", shape, &mut rng);
    named.insert(
        "head.weight".into(),
        qalam_nn::init::normal(&[1000, dim], 0.01, &mut rng),
    );
    named.insert("head.bias".into(), Tensor::zeros(vec![1000]));
    let tensors: Vec<_> = named.into_iter().collect();
    archive::save(path, &tensors, &BTreeMap::new())?;
    Ok(())
}
