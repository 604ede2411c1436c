//! Weighted multi-task training with early stopping and best-epoch selection.

use std::fs;
use std::path::{Path, PathBuf};

use qalam_nn::{Adam, AdamConfig, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pipeline, AugmentConfig, RandomSource};
use crate::corpus::{CorpusManifest, SplitManifest};
use crate::error::{Error, IoContext, Result};
use crate::imaging::{normalize_and_expand, standardize, GrayImage, ModelInput};
use crate::labels::{NUM_LETTERS, NUM_POSITIONS};
use crate::models::{batch_tensor, DualHeadModel, DualLogits, ModelFamily, ModelSpec};

/// `w_c = N / (K · count_c)` over the `K` classes that occur; absent classes get 0.
pub fn compute_class_weights(counts: &[usize], n: usize) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidConfig("class counts are all zero".into()));
    }
    if total != n {
        return Err(Error::InvalidConfig(format!("counts sum to {total}, not N = {n}")));
    }
    let k = counts.iter().filter(|&&c| c > 0).count() as f64;
    Ok(counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n as f64 / (k * c as f64) })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub letter: Vec<f64>,
    pub position: Vec<f64>,
}

impl ClassWeights {
    pub fn from_counts(letters: &[usize; NUM_LETTERS], positions: &[usize; NUM_POSITIONS]) -> Result<Self> {
        let n = letters.iter().sum();
        Ok(Self {
            letter: compute_class_weights(letters, n)?,
            position: compute_class_weights(positions, n)?,
        })
    }

    pub fn uniform() -> Self {
        Self {
            letter: vec![1.0; NUM_LETTERS],
            position: vec![1.0; NUM_POSITIONS],
        }
    }
}

/// Weighted-mean cross-entropy of row-major `[N, K]` logits.
pub fn weighted_cross_entropy(logits: &[f64], labels: &[usize], weights: &[f64]) -> Result<f64> {
    let k = weights.len();
    if logits.len() != labels.len() * k {
        return Err(Error::InvalidConfig(format!(
            "{} logits for {} labels of {k} classes",
            logits.len(),
            labels.len()
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (row, &y) in logits.chunks(k).zip(labels) {
        if y >= k {
            return Err(Error::InvalidConfig(format!("label {y} out of range for {k} classes")));
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        num += weights[y] * (lse - row[y]);
        den += weights[y];
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Letter loss plus position loss.
pub fn multitask_loss(logits: &DualLogits, letters: &[usize], positions: &[usize], w: &ClassWeights) -> Result<f64> {
    if letters.len() != positions.len() || letters.len() != logits.len() {
        return Err(Error::InvalidConfig("batch sizes disagree".into()));
    }
    Ok(weighted_cross_entropy(&logits.letter, letters, &w.letter)?
        + weighted_cross_entropy(&logits.position, positions, &w.position)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_letter_acc: f64,
    pub val_position_acc: f64,
    pub avg_acc: f64,
}

impl EpochRecord {
    pub fn new(epoch: usize, train_loss: f64, val_loss: f64, letter_acc: f64, position_acc: f64) -> Self {
        Self {
            epoch,
            train_loss,
            val_loss,
            val_letter_acc: letter_acc,
            val_position_acc: position_acc,
            avg_acc: (letter_acc + position_acc) / 2.0,
        }
    }
}

/// True once the last `patience` epochs all fail to beat the best before them.
pub fn early_stop(history: &[EpochRecord], patience: usize) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let (before, recent) = history.split_at(history.len() - patience);
    let best = before.iter().map(|r| r.avg_acc).fold(f64::NEG_INFINITY, f64::max);
    recent.iter().all(|r| r.avg_acc <= best)
}

/// Epoch number of the earliest record with the highest `avg_acc`.
pub fn select_best(history: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<&EpochRecord> = None;
    for r in history {
        if best.is_none_or(|b| r.avg_acc > b.avg_acc) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().at(path)?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub early_stopping: bool,
    pub seed: u64,
    pub augmentation: Option<AugmentConfig>,
    pub run_id: String,
    /// Write `epoch_<k>/` directories for every epoch, not only `best/`.
    pub save_every_epoch: bool,
}

impl TrainConfig {
    /// Defaults for a family; augmentation is on.
    pub fn for_family(family: ModelFamily, seed: u64) -> Self {
        Self {
            learning_rate: family.default_learning_rate(),
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            early_stopping: true,
            seed,
            augmentation: Some(AugmentConfig::default()),
            run_id: "run".into(),
            save_every_epoch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, patience and max_epochs must be at least 1".into(),
            ));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::InvalidConfig(format!("invalid run_id {:?}", self.run_id)));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }
}

/// Standardised images with their labels, kept in integer form so they can be augmented.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub ids: Vec<String>,
    pub images: Vec<GrayImage>,
    pub letters: Vec<usize>,
    pub positions: Vec<usize>,
}

impl LabeledImages {
    pub fn load<S: AsRef<str>>(manifest: &CorpusManifest, ids: &[S]) -> Result<Self> {
        let mut out = Self::default();
        for s in manifest.resolve(ids)? {
            out.push(
                &s.sample_id,
                standardize(&GrayImage::load(&s.image_path)?),
                s.letter.index(),
                s.position.index(),
            );
        }
        Ok(out)
    }

    pub fn push(&mut self, id: &str, image: GrayImage, letter: usize, position: usize) {
        self.ids.push(id.to_string());
        self.images.push(image);
        self.letters.push(letter);
        self.positions.push(position);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn inputs(&self) -> Result<Vec<ModelInput>> {
        self.images.iter().map(normalize_and_expand).collect()
    }

    pub fn class_weights(&self) -> Result<ClassWeights> {
        let mut l = [0usize; NUM_LETTERS];
        let mut p = [0usize; NUM_POSITIONS];
        for (&a, &b) in self.letters.iter().zip(&self.positions) {
            l[a] += 1;
            p[b] += 1;
        }
        ClassWeights::from_counts(&l, &p)
    }
}

/// Loss and per-head accuracy of a model on a labelled set (evaluation mode).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub letter_acc: f64,
    pub position_acc: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(model: &DualHeadModel<f32>, data: &LabeledImages, weights: &ClassWeights) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::InvalidSplit("cannot evaluate on an empty set".into()));
    }
    let inputs = data.inputs()?;
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let logits = model.logits_for(&refs);
    if logits.letter.iter().chain(&logits.position).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let loss = multitask_loss(&logits, &data.letters, &data.positions, weights)?;
    let n = data.len();
    let hits = |k: usize, rows: &[f64], labels: &[usize]| {
        rows.chunks(k).zip(labels).filter(|(r, &y)| argmax(r) == y).count() as f64 / n as f64
    };
    Ok(Evaluation {
        loss,
        letter_acc: hits(NUM_LETTERS, &logits.letter, &data.letters),
        position_acc: hits(NUM_POSITIONS, &logits.position, &data.positions),
    })
}

/// Mixes a seed with two counters (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What the per-epoch observer wants the loop to do next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub struct TrainOutcome {
    /// Model restored to the selected epoch.
    pub model: DualHeadModel<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub class_weights: ClassWeights,
    /// `checkpoints/<run_id>/best` when an output directory was given.
    pub best_dir: Option<PathBuf>,
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const HISTORY_FILE: &str = "history.csv";

fn write_checkpoint(
    dir: &Path,
    model: &DualHeadModel<f32>,
    record: &EpochRecord,
    weights: &ClassWeights,
) -> Result<()> {
    model.save(dir)?;
    let metrics = dir.join("metrics.json");
    fs::write(&metrics, serde_json::to_string_pretty(record)? + "\n").at(&metrics)?;
    let cw = dir.join("class_weights.json");
    fs::write(&cw, serde_json::to_string_pretty(weights)? + "\n").at(&cw)
}

/// Reads the epoch record stored next to a checkpoint.
pub fn read_checkpoint_metrics(dir: &Path) -> Result<EpochRecord> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path).at(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        reason: e.to_string(),
    })
}

pub fn read_class_weights(dir: &Path) -> Result<ClassWeights> {
    let path = dir.join("class_weights.json");
    let text = fs::read_to_string(&path).at(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        reason: e.to_string(),
    })
}

/// Builds the model from `spec` (seeded by `cfg.seed`) and trains it.
pub fn train(
    spec: &ModelSpec,
    train_set: &LabeledImages,
    val_set: &LabeledImages,
    cfg: &TrainConfig,
    out: Option<&Path>,
    observer: impl FnMut(&EpochRecord, &DualHeadModel<f32>) -> Control,
) -> Result<TrainOutcome> {
    let model = DualHeadModel::<f32>::build(spec, cfg.seed)?;
    train_model(model, train_set, val_set, cfg, out, observer)
}

/// Loads both subsets of a split and trains on them.
pub fn train_from_split(
    spec: &ModelSpec,
    manifest: &CorpusManifest,
    split: &SplitManifest,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    split.validate_against(manifest)?;
    let train_set = LabeledImages::load(manifest, &split.train)?;
    let val_set = LabeledImages::load(manifest, &split.validation)?;
    train(spec, &train_set, &val_set, cfg, out, |_, _| Control::Continue)
}

/// The epoch loop over an already-built model.
pub fn train_model(
    mut model: DualHeadModel<f32>,
    train_set: &LabeledImages,
    val_set: &LabeledImages,
    cfg: &TrainConfig,
    out: Option<&Path>,
    mut observer: impl FnMut(&EpochRecord, &DualHeadModel<f32>) -> Control,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidSplit("training subset is empty".into()));
    }
    // With no validation samples the training subset stands in for it.
    let val_set = if val_set.is_empty() { train_set } else { val_set };
    let weights = train_set.class_weights()?;
    let mut adam = Adam::new(AdamConfig::new(cfg.learning_rate));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let run_dir = out.map(|o| o.join(CHECKPOINT_DIR).join(&cfg.run_id));
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64, DualHeadModel<f32>)> = None;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut inputs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let img = match &cfg.augmentation {
                    Some(aug) => {
                        let mut rng = RandomSource::new(derive_seed(cfg.seed, epoch as u64, i as u64));
                        augment_pipeline(&train_set.images[i], &mut rng, aug)?.image
                    }
                    None => train_set.images[i].clone(),
                };
                inputs.push(normalize_and_expand(&img)?);
            }
            let refs: Vec<&ModelInput> = inputs.iter().collect();
            let letters: Vec<usize> = chunk.iter().map(|&i| train_set.letters[i]).collect();
            let positions: Vec<usize> = chunk.iter().map(|&i| train_set.positions[i]).collect();

            let g = Graph::train(derive_seed(cfg.seed ^ 0xD0, epoch as u64, b as u64));
            let x = g.input(batch_tensor::<f32>(&refs));
            let o = model.forward(&g, x);
            let loss = o
                .letter
                .weighted_cross_entropy(&letters, &weights.letter)
                .add(o.position.weighted_cross_entropy(&positions, &weights.position));
            let value = loss.value().data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: b + 1 });
            }
            let grads = g.backward(loss);
            let updates = g.take_buffer_updates();
            drop(g);
            let store = model.store_mut();
            for (id, t) in updates {
                if store.get(id).trainable {
                    store.set(id, t)?;
                }
            }
            adam.step(store, grads.params());
            loss_sum += value * chunk.len() as f64;
            seen += chunk.len();
        }

        let ev = evaluate(&model, val_set, &weights)?;
        let record = EpochRecord::new(epoch, loss_sum / seen as f64, ev.loss, ev.letter_acc, ev.position_acc);
        if let Some(dir) = &run_dir {
            if cfg.save_every_epoch {
                write_checkpoint(&dir.join(format!("epoch_{epoch}")), &model, &record, &weights)?;
            }
        }
        if best.as_ref().is_none_or(|(_, acc, _)| record.avg_acc > *acc) {
            best = Some((epoch, record.avg_acc, model.clone()));
        }
        history.push(record);
        if let Some(o) = out {
            write_history(&o.join(HISTORY_FILE), &history)?;
        }
        let stop = observer(history.last().expect("just pushed"), &model) == Control::Stop;
        if stop || (cfg.early_stopping && early_stop(&history, cfg.patience)) {
            break;
        }
    }

    let best_epoch = select_best(&history).expect("at least one epoch");
    let (_, _, best_model) = best.expect("at least one epoch");
    let best_dir = match &run_dir {
        Some(dir) => {
            let best_dir = dir.join("best");
            if best_dir.exists() {
                fs::remove_dir_all(&best_dir).at(&best_dir)?;
            }
            write_checkpoint(&best_dir, &best_model, &history[best_epoch - 1], &weights)?;
            Some(best_dir)
        }
        None => None,
    };
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        class_weights: weights,
        best_dir,
    })
}
