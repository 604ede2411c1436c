use qalam_core::imaging::GrayImage;
use qalam_core::labels::{NUM_LETTERS, NUM_POSITIONS};
use qalam_core::models::{DualHeadModel, DualLogits, ModelFamily, ModelSpec};
use qalam_core::training::{
    self, evaluate, multitask_loss, read_checkpoint_metrics, read_class_weights, weighted_cross_entropy, ClassWeights,
    Control, LabeledImages, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        conv_channels: Some([4, 8]),
        head_width: 16,
        ..ModelSpec::new(ModelFamily::CustomCnn)
    }
}

/// Vertical bar for letter 0, horizontal bar for letter 1, shifted by position.
fn bars(n: usize, seed: u64) -> LabeledImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = LabeledImages::default();
    for i in 0..n {
        let (letter, position) = (i % 2, (i / 2) % 2);
        let off = 30 + 60 * position + rng.random_range(0..6);
        let img = GrayImage::from_fn(128, 128, |x, y| {
            let on = if letter == 0 {
                (off..off + 8).contains(&x)
            } else {
                (off..off + 8).contains(&y)
            };
            if on {
                0
            } else {
                255
            }
        });
        set.push(&format!("s{i}"), img, letter, position);
    }
    set
}

fn config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: epochs,
        early_stopping: false,
        augmentation: None,
        ..TrainConfig::for_family(ModelFamily::CustomCnn, seed)
    }
}

#[test]
fn identical_seeds_give_identical_histories() {
    let (train, val) = (bars(16, 1), bars(8, 2));
    let run = || {
        training::train(&tiny_spec(), &train, &val, &config(5, 3), None, |_, _| {
            Control::Continue
        })
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.store().to_named(), b.model.store().to_named());
}

#[test]
fn checkpoints_reproduce_their_validation_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = (bars(16, 3), bars(8, 4));
    let outcome = training::train(&tiny_spec(), &train, &val, &config(6, 3), Some(dir.path()), |_, _| {
        Control::Continue
    })
    .unwrap();
    let best = outcome.best_dir.unwrap();
    let recorded = read_checkpoint_metrics(&best).unwrap();
    assert_eq!(recorded, outcome.history[outcome.best_epoch - 1]);

    let restored = DualHeadModel::<f32>::load(&best).unwrap();
    let weights = read_class_weights(&best).unwrap();
    let ev = evaluate(&restored, &val, &weights).unwrap();
    assert!((ev.loss - recorded.val_loss).abs() <= 1e-6);
    assert!((ev.letter_acc - recorded.val_letter_acc).abs() <= 1e-6);
    assert!((ev.position_acc - recorded.val_position_acc).abs() <= 1e-6);

    let history = training::read_history(&dir.path().join(training::HISTORY_FILE)).unwrap();
    assert_eq!(history.len(), 3);
}

#[test]
fn a_plateau_stops_training_early() {
    let (train, val) = (bars(8, 5), bars(4, 6));
    let cfg = TrainConfig {
        learning_rate: 1e-12,
        early_stopping: true,
        patience: 2,
        ..config(7, 20)
    };
    let outcome = training::train(&tiny_spec(), &train, &val, &cfg, None, |_, _| Control::Continue).unwrap();
    assert!(outcome.history.len() < 20, "ran all {} epochs", outcome.history.len());
    assert_eq!(outcome.history.len(), outcome.best_epoch + cfg.patience);
}

#[test]
fn loss_reduction_ignores_weight_scale_and_splits_by_task() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 6;
    let logits = DualLogits {
        letter: (0..n * NUM_LETTERS).map(|_| rng.random_range(-3.0..3.0)).collect(),
        position: (0..n * NUM_POSITIONS).map(|_| rng.random_range(-3.0..3.0)).collect(),
    };
    let letters: Vec<usize> = (0..n).map(|_| rng.random_range(0..NUM_LETTERS)).collect();
    let positions: Vec<usize> = (0..n).map(|_| rng.random_range(0..NUM_POSITIONS)).collect();
    let w = ClassWeights {
        letter: (0..NUM_LETTERS).map(|_| rng.random_range(0.1..3.0)).collect(),
        position: (0..NUM_POSITIONS).map(|_| rng.random_range(0.1..3.0)).collect(),
    };
    let total = multitask_loss(&logits, &letters, &positions, &w).unwrap();
    let l = weighted_cross_entropy(&logits.letter, &letters, &w.letter).unwrap();
    let p = weighted_cross_entropy(&logits.position, &positions, &w.position).unwrap();
    assert!((total - (l + p)).abs() <= 1e-9);

    let halved = ClassWeights {
        letter: w.letter.iter().map(|v| v / 2.0).collect(),
        position: w.position.iter().map(|v| v / 2.0).collect(),
    };
    assert!((multitask_loss(&logits, &letters, &positions, &halved).unwrap() - total).abs() <= 1e-12);

    // Sharply peaked correct logits drive the loss towards zero.
    let mut sharp = DualLogits {
        letter: vec![0.0; n * NUM_LETTERS],
        position: vec![0.0; n * NUM_POSITIONS],
    };
    for i in 0..n {
        sharp.letter[i * NUM_LETTERS + letters[i]] = 60.0;
        sharp.position[i * NUM_POSITIONS + positions[i]] = 60.0;
    }
    assert!(multitask_loss(&sharp, &letters, &positions, &w).unwrap() < 1e-20);
}
