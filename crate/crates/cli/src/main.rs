//! `qalam`: command-line front end for corpus preparation, training,
//! evaluation and ensemble fusion.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::KvConfig;
use qalam_core::augment::{augment_pipeline, AugmentConfig, RandomSource};
use qalam_core::corpus::{self, CorpusManifest, SplitManifest};
use qalam_core::fusion::{self, PredictionRow};
use qalam_core::imaging::{standardize, GrayImage};
use qalam_core::labels::LetterClass;
use qalam_core::metrics::{self, Averaging, EvalReport, Predictions, RateFormat};
use qalam_core::models::{DualHeadModel, ModelSpec};
use qalam_core::synthetic::{self, SyntheticConfig};
use qalam_core::training::{self, derive_seed, ClassWeights, LabeledImages, TrainConfig};

#[derive(Parser)]
#[command(name = "qalam", version, about = "Dual-head handwritten Arabic letter recognition")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` settings file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (for `fuse`, a `.csv` path names the fused dump directly).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a `<Letter>/<Code>/` image tree and write `manifest.csv`.
    Prepare(PrepareArgs),
    /// Stratified train/validation/test split at the level of (letter, position) pairs.
    Split(SplitArgs),
    /// Train one model and write checkpoints plus `history.csv`.
    Train(TrainArgs),
    /// Run a checkpoint on a split subset and write predictions and reports.
    Evaluate(EvaluateArgs),
    /// Confidence-weighted fusion of two checkpoints or two prediction dumps.
    Fuse(FuseArgs),
    /// Build or convert evaluation reports.
    Report(ReportArgs),
    /// Write augmented copies of every image plus a log of applied transforms.
    Augment(AugmentArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Corpus root.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Render the bundled pseudo-glyph corpus into the root first.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    samples_per_pair: Option<usize>,
    /// Comma-separated letter names for the synthetic corpus.
    #[arg(long)]
    letters: Option<String>,
}

#[derive(Args)]
struct SplitArgs {
    /// Manifest CSV or corpus directory.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Train, validation and test fractions, comma-separated.
    #[arg(long)]
    ratios: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Model spec JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Split JSON written by `split`.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Manifest CSV or corpus directory the split refers to.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Split subset to evaluate: train, validation or test.
    #[arg(long)]
    subset: Option<String>,
    /// Averaging for precision/recall/F1: weighted or macro.
    #[arg(long)]
    averaging: Option<String>,
    /// Render CSV rates as percentages.
    #[arg(long)]
    percent: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory (`model.safetensors` + `spec.json`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    preds_a: Option<PathBuf>,
    #[arg(long)]
    preds_b: Option<PathBuf>,
    #[arg(long)]
    checkpoint_a: Option<PathBuf>,
    #[arg(long)]
    checkpoint_b: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Prediction dump to score against the manifest labels.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Existing `report.json` to convert.
    #[arg(long)]
    report: Option<PathBuf>,
    /// json, csv or all.
    #[arg(long)]
    format: Option<String>,
    #[command(flatten)]
    eval: EvalArgs,
}

#[derive(Args)]
struct AugmentArgs {
    /// Corpus directory (or manifest CSV) to augment.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Augmented copies per image.
    #[arg(long)]
    copies: Option<usize>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = KvConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Prepare(a) => prepare(&mut cfg, cli.seed, cli.out, a),
        Command::Split(a) => split(&mut cfg, cli.seed, cli.out, a),
        Command::Train(a) => train(&mut cfg, cli.seed, cli.out, a),
        Command::Evaluate(a) => evaluate(&mut cfg, cli.out, a),
        Command::Fuse(a) => fuse(&mut cfg, cli.out, a),
        Command::Report(a) => report(&mut cfg, cli.out, a),
        Command::Augment(a) => augment(&mut cfg, cli.seed, cli.out, a),
    }
}

fn must_exist(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

fn open_manifest(path: &Path) -> Result<CorpusManifest> {
    must_exist(path, "manifest")?;
    let m = if path.is_file() {
        CorpusManifest::from_samples(corpus::read_manifest_csv(path)?)
    } else {
        corpus::load_manifest(path)
    };
    m.with_context(|| format!("cannot load manifest {}", path.display()))
}

fn open_split(path: &Path, manifest: &CorpusManifest) -> Result<SplitManifest> {
    must_exist(path, "split file")?;
    let split = SplitManifest::load(path).with_context(|| format!("cannot load split {}", path.display()))?;
    split
        .validate_against(manifest)
        .with_context(|| format!("split {} does not match the manifest", path.display()))?;
    Ok(split)
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("invalid ratios {s:?}"))?;
    let [a, b, c] = v[..] else {
        bail!("expected three ratios, got {s:?}");
    };
    Ok([a, b, c])
}

fn prepare(cfg: &mut KvConfig, seed: Option<u64>, out: Option<PathBuf>, a: PrepareArgs) -> Result<()> {
    let root = cfg.require_path("root", a.root)?;
    let synthetic = cfg.switch("synthetic", a.synthetic, false)?;
    let out = cfg.path("out", out)?.unwrap_or_else(|| root.clone());
    if synthetic {
        let seed = cfg.seed(seed)?;
        let per_pair = cfg.get_or("samples_per_pair", a.samples_per_pair, 50)?;
        let letters = cfg.get_or("letters", a.letters, "Alef,Baa,Jeem,Dal".to_string())?;
        cfg.finish()?;
        let mut sc = SyntheticConfig::small(per_pair, seed);
        sc.letters = letters
            .split(',')
            .map(|n| LetterClass::from_name(n.trim()).with_context(|| format!("unknown letter {n:?}")))
            .collect::<Result<_>>()?;
        let n = synthetic::write_corpus(&root, &sc)?;
        eprintln!("rendered {n} synthetic images into {}", root.display());
    } else {
        cfg.finish()?;
    }
    must_exist(&root, "corpus directory")?;
    let root_abs = fs::canonicalize(&root).with_context(|| format!("cannot resolve {}", root.display()))?;
    let manifest = corpus::scan_manifest(&root_abs).with_context(|| format!("cannot scan {}", root.display()))?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let out_abs = fs::canonicalize(&out)?;
    let path = out_abs.join(corpus::MANIFEST_FILE);
    manifest.write_csv(&path)?;
    cfg.write_resolved(&out, "prepare")?;
    println!(
        "{} samples in {} pairs -> {}",
        manifest.len(),
        manifest.pair_counts().len(),
        path.display()
    );
    Ok(())
}

const SPLIT_FILE: &str = "splits.json";

fn split(cfg: &mut KvConfig, seed: Option<u64>, out: Option<PathBuf>, a: SplitArgs) -> Result<()> {
    let manifest_path = cfg.require_path("manifest", a.manifest)?;
    let out = cfg.require_path("out", out)?;
    let ratios = cfg.get_or("ratios", a.ratios, "0.7,0.1,0.2".to_string())?;
    let seed = cfg.seed(seed)?;
    cfg.finish()?;
    let ratios = parse_ratios(&ratios)?;
    let manifest = open_manifest(&manifest_path)?;
    let split = corpus::stratified_split(&manifest, ratios, seed)?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let path = out.join(SPLIT_FILE);
    split.save(&path)?;
    cfg.write_resolved(&out, "split")?;
    println!(
        "train {} / validation {} / test {} -> {}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        path.display()
    );
    Ok(())
}

/// Overlays augmentation settings from the config onto `base`.
fn augment_settings(cfg: &mut KvConfig, base: AugmentConfig) -> Result<AugmentConfig> {
    let a = AugmentConfig {
        apply_probability: cfg.get_or("apply_probability", None, base.apply_probability)?,
        rotation_degrees: cfg.get_or("rotation_degrees", None, base.rotation_degrees)?,
        blur_radius: cfg.get_or("blur_radius", None, base.blur_radius)?,
        noise_std_fraction: cfg.get_or("noise_std_fraction", None, base.noise_std_fraction)?,
        elastic_alpha: cfg.get_or("elastic_alpha", None, base.elastic_alpha)?,
        elastic_sigma: cfg.get_or("elastic_sigma", None, base.elastic_sigma)?,
        elastic_pad: cfg.get_or("elastic_pad", None, base.elastic_pad)?,
        skew_magnitude_fraction: cfg.get_or("skew_magnitude_fraction", None, base.skew_magnitude_fraction)?,
    };
    a.validate()?;
    Ok(a)
}

fn train(cfg: &mut KvConfig, seed: Option<u64>, out: Option<PathBuf>, a: TrainArgs) -> Result<()> {
    let spec_path = cfg.require_path("spec", a.spec)?;
    let splits_path = cfg.require_path("splits", a.splits)?;
    let manifest_path = cfg.require_path("manifest", a.manifest)?;
    let out = cfg.require_path("out", out)?;
    must_exist(&spec_path, "model spec")?;
    let spec = ModelSpec::load(&spec_path).with_context(|| format!("cannot load spec {}", spec_path.display()))?;
    let seed = cfg.seed(seed)?;
    let d = TrainConfig::for_family(spec.family, seed);
    let augmentation = if cfg.switch("augmentation", false, d.augmentation.is_some())? {
        Some(augment_settings(cfg, d.augmentation.clone().unwrap_or_default())?)
    } else {
        None
    };
    let tc = TrainConfig {
        learning_rate: cfg.get_or("learning_rate", None, d.learning_rate)?,
        batch_size: cfg.get_or("batch_size", None, d.batch_size)?,
        max_epochs: cfg.get_or("max_epochs", None, d.max_epochs)?,
        patience: cfg.get_or("patience", None, d.patience)?,
        early_stopping: cfg.switch("early_stopping", false, d.early_stopping)?,
        seed,
        augmentation,
        run_id: cfg.get_or("run_id", None, d.run_id)?,
        save_every_epoch: cfg.switch("save_every_epoch", false, d.save_every_epoch)?,
    };
    cfg.finish()?;
    tc.validate()?;
    let manifest = open_manifest(&manifest_path)?;
    let split = open_split(&splits_path, &manifest)?;
    cfg.write_resolved(&out, "train")?;
    let outcome = training::train_from_split(&spec, &manifest, &split, &tc, Some(&out))?;
    let best = &outcome.history[outcome.best_epoch - 1];
    println!(
        "best epoch {} of {}: letter {:.4}, position {:.4} -> {}",
        outcome.best_epoch,
        outcome.history.len(),
        best.val_letter_acc,
        best.val_position_acc,
        outcome.best_dir.as_deref().unwrap_or(&out).display()
    );
    Ok(())
}

struct EvalSettings {
    /// Manifest plus the images of the chosen subset, when a manifest was given.
    labeled: Option<(CorpusManifest, LabeledImages)>,
    averaging: Averaging,
    format: RateFormat,
}

fn eval_settings(cfg: &mut KvConfig, a: EvalArgs, need_split: bool) -> Result<EvalSettings> {
    let manifest_path = cfg.path("manifest", a.manifest)?;
    let splits_path = cfg.path("splits", a.splits)?;
    let subset = cfg.get_or("subset", a.subset, "test".to_string())?;
    let averaging = match cfg.get_or("averaging", a.averaging, "weighted".to_string())?.as_str() {
        "weighted" => Averaging::Weighted,
        "macro" => Averaging::Macro,
        other => bail!("averaging must be weighted or macro, got {other:?}"),
    };
    let format = if cfg.switch("percent", a.percent, false)? {
        RateFormat::Percent
    } else {
        RateFormat::Fraction
    };
    let Some(manifest_path) = manifest_path else {
        if need_split {
            bail!("missing required setting `manifest` (flag --manifest)");
        }
        return Ok(EvalSettings {
            labeled: None,
            averaging,
            format,
        });
    };
    let manifest = open_manifest(&manifest_path)?;
    let data = match splits_path {
        Some(p) => {
            let split = open_split(&p, &manifest)?;
            let ids = match subset.as_str() {
                "train" => &split.train,
                "validation" => &split.validation,
                "test" => &split.test,
                other => bail!("subset must be train, validation or test, got {other:?}"),
            };
            LabeledImages::load(&manifest, ids)?
        }
        None if need_split => bail!("missing required setting `splits` (flag --splits)"),
        None => LabeledImages::default(),
    };
    Ok(EvalSettings {
        labeled: Some((manifest, data)),
        averaging,
        format,
    })
}

fn load_checkpoint(dir: &Path) -> Result<(DualHeadModel, ClassWeights)> {
    must_exist(dir, "checkpoint")?;
    let model = DualHeadModel::load(dir).with_context(|| format!("cannot load checkpoint {}", dir.display()))?;
    let weights = if dir.join("class_weights.json").is_file() {
        training::read_class_weights(dir)?
    } else {
        ClassWeights::uniform()
    };
    Ok((model, weights))
}

fn predict(model: &DualHeadModel, data: &LabeledImages) -> Result<Vec<PredictionRow>> {
    let inputs = data.inputs()?;
    let refs: Vec<_> = inputs.iter().collect();
    let dists = model.predict_proba(&refs)?;
    Ok(data
        .ids
        .iter()
        .zip(dists)
        .map(|(id, dist)| PredictionRow {
            sample_id: id.clone(),
            dist,
        })
        .collect())
}

/// Scores a dump against manifest labels; the loss is the weighted `-ln p[y]`.
fn score(
    rows: &[PredictionRow],
    manifest: &CorpusManifest,
    weights: &ClassWeights,
    averaging: Averaging,
) -> Result<EvalReport> {
    let mut truth = Vec::with_capacity(rows.len());
    for r in rows {
        let s = manifest
            .get(&r.sample_id)
            .with_context(|| format!("sample {} is not in the manifest", r.sample_id))?;
        truth.push((s.letter, s.position));
    }
    let letters: Vec<usize> = truth.iter().map(|t| t.0.index()).collect();
    let positions: Vec<usize> = truth.iter().map(|t| t.1.index()).collect();
    let lrows: Vec<&[f64]> = rows.iter().map(|r| r.dist.letter.as_slice()).collect();
    let prows: Vec<&[f64]> = rows.iter().map(|r| r.dist.position.as_slice()).collect();
    let losses = (
        metrics::probability_cross_entropy(&lrows, &letters, &weights.letter)?,
        metrics::probability_cross_entropy(&prows, &positions, &weights.position)?,
    );
    let preds = Predictions {
        truth,
        letter: lrows.iter().map(|p| fusion::argmax(p)).collect(),
        position: prows.iter().map(|p| fusion::argmax(p)).collect(),
    };
    Ok(EvalReport::build(&preds, Some(losses), averaging)?)
}

const PREDICTIONS_FILE: &str = "predictions.csv";

fn evaluate(cfg: &mut KvConfig, out: Option<PathBuf>, a: EvaluateArgs) -> Result<()> {
    let checkpoint = cfg.require_path("checkpoint", a.checkpoint)?;
    let out = cfg.require_path("out", out)?;
    let s = eval_settings(cfg, a.eval, true)?;
    cfg.finish()?;
    let (manifest, data) = s.labeled.as_ref().expect("manifest required");
    let (model, weights) = load_checkpoint(&checkpoint)?;
    if data.is_empty() {
        bail!("the selected subset is empty");
    }
    let rows = predict(&model, data)?;
    let report = score(&rows, manifest, &weights, s.averaging)?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    fusion::write_predictions(&out.join(PREDICTIONS_FILE), &rows)?;
    report.write_all(&out, s.format)?;
    cfg.write_resolved(&out, "evaluate")?;
    print_overall(&report, &out);
    Ok(())
}

fn print_overall(report: &EvalReport, out: &Path) {
    let o = &report.overall;
    println!(
        "letter accuracy {:.4}, position accuracy {:.4} -> {}",
        o.letter.accuracy,
        o.position.accuracy,
        out.display()
    );
}

#[derive(Serialize)]
struct FusionDetail<'a> {
    sample_id: &'a str,
    letter_class: usize,
    position_class: usize,
    c_letter_a: f64,
    c_letter_b: f64,
    c_pos_a: f64,
    c_pos_b: f64,
}

fn fuse(cfg: &mut KvConfig, out: Option<PathBuf>, a: FuseArgs) -> Result<()> {
    let preds_a = cfg.path("preds_a", a.preds_a)?;
    let preds_b = cfg.path("preds_b", a.preds_b)?;
    let ck_a = cfg.path("checkpoint_a", a.checkpoint_a)?;
    let ck_b = cfg.path("checkpoint_b", a.checkpoint_b)?;
    let eps = cfg.get_or("eps", a.eps, fusion::DEFAULT_EPS)?;
    let out = cfg.require_path("out", out)?;
    let by_checkpoint = match (&preds_a, &preds_b, &ck_a, &ck_b) {
        (Some(_), Some(_), None, None) => false,
        (None, None, Some(_), Some(_)) => true,
        _ => bail!("give either --preds-a and --preds-b, or --checkpoint-a and --checkpoint-b"),
    };
    let settings = eval_settings(cfg, a.eval, by_checkpoint)?;
    cfg.finish()?;

    let (rows_a, rows_b, weights) = if by_checkpoint {
        let (_, data) = settings.labeled.as_ref().expect("required");
        let (ma, wa) = load_checkpoint(ck_a.as_deref().expect("checked"))?;
        let (mb, _) = load_checkpoint(ck_b.as_deref().expect("checked"))?;
        (predict(&ma, data)?, predict(&mb, data)?, wa)
    } else {
        let read = |p: &Path| -> Result<Vec<PredictionRow>> {
            must_exist(p, "prediction dump")?;
            fusion::read_predictions(p).with_context(|| format!("cannot read {}", p.display()))
        };
        (
            read(preds_a.as_deref().expect("checked"))?,
            read(preds_b.as_deref().expect("checked"))?,
            ClassWeights::uniform(),
        )
    };
    let fused = fusion::fuse_predictions(&rows_a, &rows_b, eps)?;
    let rows: Vec<PredictionRow> = fused.iter().map(|(r, _)| r.clone()).collect();

    let (dir, dump) = if out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let dir = out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        (dir, out.clone())
    } else {
        (out.clone(), out.join(PREDICTIONS_FILE))
    };
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    fusion::write_predictions(&dump, &rows)?;
    let details = dir.join("fusion_details.csv");
    let mut w = csv::Writer::from_path(&details).with_context(|| format!("cannot write {}", details.display()))?;
    for (r, f) in &fused {
        w.serialize(FusionDetail {
            sample_id: &r.sample_id,
            letter_class: f.letter_class,
            position_class: f.position_class,
            c_letter_a: f.confidences[0],
            c_letter_b: f.confidences[1],
            c_pos_a: f.confidences[2],
            c_pos_b: f.confidences[3],
        })?;
    }
    w.flush()?;
    if let Some((manifest, _)) = &settings.labeled {
        let report = score(&rows, manifest, &weights, settings.averaging)?;
        report.write_all(&dir, settings.format)?;
        print_overall(&report, &dir);
    } else {
        println!("fused {} samples -> {}", rows.len(), dump.display());
    }
    cfg.write_resolved(&dir, "fuse")?;
    Ok(())
}

fn report(cfg: &mut KvConfig, out: Option<PathBuf>, a: ReportArgs) -> Result<()> {
    let predictions = cfg.path("predictions", a.predictions)?;
    let existing = cfg.path("report", a.report)?;
    let format = cfg.get_or("format", a.format, "all".to_string())?;
    let out = cfg.require_path("out", out)?;
    let settings = eval_settings(cfg, a.eval, false)?;
    cfg.finish()?;
    let (report, rate) = match (predictions, existing) {
        (Some(p), None) => {
            let (manifest, _) = settings
                .labeled
                .as_ref()
                .context("scoring predictions needs --manifest")?;
            must_exist(&p, "prediction dump")?;
            let rows = fusion::read_predictions(&p).with_context(|| format!("cannot read {}", p.display()))?;
            (
                score(&rows, manifest, &ClassWeights::uniform(), settings.averaging)?,
                settings.format,
            )
        }
        (None, Some(r)) => {
            must_exist(&r, "report")?;
            (EvalReport::read_json(&r)?, settings.format)
        }
        _ => bail!("give exactly one of --predictions or --report"),
    };
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    match format.as_str() {
        "json" => report.write_json(&out.join(metrics::REPORT_JSON))?,
        "csv" => report.write_csv(&out, rate)?,
        "all" => report.write_all(&out, rate)?,
        other => bail!("format must be json, csv or all, got {other:?}"),
    }
    cfg.write_resolved(&out, "report")?;
    print_overall(&report, &out);
    Ok(())
}

#[derive(Serialize)]
struct AugmentLogEntry {
    sample_id: String,
    copy: usize,
    seed: u64,
    file: String,
    applied: Vec<&'static str>,
}

fn augment(cfg: &mut KvConfig, seed: Option<u64>, out: Option<PathBuf>, a: AugmentArgs) -> Result<()> {
    let input = cfg.require_path("in", a.input)?;
    let out = cfg.require_path("out", out)?;
    let seed = cfg.seed(seed)?;
    let copies = cfg.get_or("copies", a.copies, 1usize)?;
    let settings = augment_settings(cfg, AugmentConfig::default())?;
    cfg.finish()?;
    let manifest = open_manifest(&input)?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut log = Vec::new();
    for (i, s) in manifest.samples().iter().enumerate() {
        let img = standardize(&GrayImage::load(&s.image_path)?);
        for k in 0..copies {
            let sample_seed = derive_seed(seed, i as u64, k as u64);
            let res = augment_pipeline(&img, &mut RandomSource::new(sample_seed), &settings)?;
            let rel = format!("{}__aug{k}.png", s.sample_id);
            let path = out.join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
            }
            res.image.save_png(&path)?;
            log.push(AugmentLogEntry {
                sample_id: s.sample_id.clone(),
                copy: k,
                seed: sample_seed,
                file: rel,
                applied: res.applied_names(),
            });
        }
    }
    let log_path = out.join("augment_log.json");
    fs::write(&log_path, serde_json::to_string_pretty(&log)? + "\n")
        .with_context(|| format!("cannot write {}", log_path.display()))?;
    cfg.write_resolved(&out, "augment")?;
    println!("wrote {} augmented images -> {}", log.len(), out.display());
    Ok(())
}
