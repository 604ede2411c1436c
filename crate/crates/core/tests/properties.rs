use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use proptest::prelude::*;
use qalam_core::augment::{self, AugmentConfig, RandomSource};
use qalam_core::corpus::{stratified_split, CorpusManifest, LetterSample};
use qalam_core::fusion::{argmax, confidence, fuse};
use qalam_core::imaging::{normalize_and_expand, standardize, GrayImage};
use qalam_core::labels::{LetterClass, PositionClass, NUM_LETTERS, NUM_POSITIONS};
use qalam_core::metrics::{
    confusion, per_letter_accuracy, summary_metrics, Averaging, EvalReport, Predictions, RateFormat,
};
use qalam_core::models::softmax;
use qalam_core::training::{compute_class_weights, early_stop, EpochRecord};

fn manifest_from(pair_sizes: &[(usize, usize, usize)]) -> CorpusManifest {
    let mut samples = Vec::new();
    for &(l, p, n) in pair_sizes {
        let letter = LetterClass::new(l).unwrap();
        let position = PositionClass::from_index(p).unwrap();
        for i in 0..n {
            samples.push(LetterSample {
                sample_id: format!("{}/{}/s{i:03}", letter.name(), position.code()),
                image_path: PathBuf::from("unused.png"),
                letter,
                position,
            });
        }
    }
    CorpusManifest::from_samples(samples).unwrap()
}

fn pair_sizes() -> impl Strategy<Value = Vec<(usize, usize, usize)>> {
    prop::collection::btree_map((0..NUM_LETTERS, 0..NUM_POSITIONS), 1usize..40, 1..8)
        .prop_map(|m| m.into_iter().map(|((l, p), n)| (l, p, n)).collect())
}

fn ratios() -> impl Strategy<Value = [f64; 3]> {
    (1u32..100, 1u32..100, 1u32..100).prop_map(|(a, b, c)| {
        let s = (a + b + c) as f64;
        [a as f64 / s, b as f64 / s, c as f64 / s]
    })
}

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, k).prop_map(|l| softmax(&l))
}

fn image_between(min_side: usize, max_side: usize) -> impl Strategy<Value = GrayImage> {
    (min_side..=max_side, min_side..=max_side).prop_flat_map(|(w, h)| {
        prop::collection::vec(any::<u8>(), w * h).prop_map(move |px| GrayImage::new(w, h, px).unwrap())
    })
}

fn image(max_side: usize) -> impl Strategy<Value = GrayImage> {
    image_between(1, max_side)
}

/// Perspective skew needs an 8×8 image to place its corners.
fn augmentable() -> impl Strategy<Value = GrayImage> {
    image_between(8, 40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_every_sample(sizes in pair_sizes(), r in ratios(), seed in any::<u64>()) {
        let m = manifest_from(&sizes);
        let s = stratified_split(&m, r, seed).unwrap();
        let all: BTreeSet<&str> = m.samples().iter().map(|x| x.sample_id.as_str()).collect();
        let mut seen = BTreeSet::new();
        for id in s.train.iter().chain(&s.validation).chain(&s.test) {
            prop_assert!(seen.insert(id.as_str()), "{id} appears twice");
        }
        prop_assert_eq!(seen, all);
    }

    #[test]
    fn split_shares_track_ratios(sizes in pair_sizes(), r in ratios(), seed in any::<u64>()) {
        let m = manifest_from(&sizes);
        let s = stratified_split(&m, r, seed).unwrap();
        let pair_of = |id: &String| m.get(id).unwrap().pair();
        for (&pair, &n) in m.pair_counts() {
            if n < 10 {
                continue;
            }
            for (subset, ratio) in [(&s.train, r[0]), (&s.validation, r[1]), (&s.test, r[2])] {
                let k = subset.iter().filter(|id| pair_of(id) == pair).count();
                let dev = (k as f64 / n as f64 - ratio).abs();
                prop_assert!(dev < 1.0 / n as f64, "pair {pair:?}: {k}/{n} vs {ratio}");
            }
        }
    }

    #[test]
    fn split_is_byte_deterministic(sizes in pair_sizes(), r in ratios(), seed in any::<u64>()) {
        let m = manifest_from(&sizes);
        let a = stratified_split(&m, r, seed).unwrap().to_json().unwrap();
        let b = stratified_split(&m, r, seed).unwrap().to_json().unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn standardize_is_idempotent_and_pads_white(img in image(200)) {
        let s = standardize(&img);
        prop_assert_eq!((s.width(), s.height()), (128, 128));
        prop_assert_eq!(&standardize(&s), &s);
        // Content size: unchanged when it fits, otherwise the long side becomes 128.
        let (w, h) = (img.width(), img.height());
        let (cw, ch) = if w <= 128 && h <= 128 {
            (w, h)
        } else if h >= w {
            (((w * 128) as f64 / h as f64).round().max(1.0) as usize, 128)
        } else {
            (128, ((h * 128) as f64 / w as f64).round().max(1.0) as usize)
        };
        let (top, left) = ((128 - ch) / 2, (128 - cw) / 2);
        for y in 0..128 {
            for x in 0..128 {
                let inside = (top..top + ch).contains(&y) && (left..left + cw).contains(&x);
                if !inside {
                    prop_assert_eq!(s.get(x, y), 255, "padding at ({}, {})", x, y);
                }
            }
        }
    }

    #[test]
    fn shrinking_preserves_ink_aspect(img in image_between(129, 300), ring in 3usize..6) {
        // A glyph cropped to its ink: dark border, arbitrary interior.
        let (w, h) = (img.width(), img.height());
        let glyph = GrayImage::from_fn(w, h, |x, y| {
            if x < ring || y < ring || x >= w - ring || y >= h - ring { 0 } else { img.get(x, y) }
        });
        let s = standardize(&glyph);
        let ink: Vec<(usize, usize)> = (0..128)
            .flat_map(|y| (0..128).map(move |x| (x, y)))
            .filter(|&(x, y)| s.get(x, y) < 128)
            .collect();
        let bw = ink.iter().map(|p| p.0).max().unwrap() - ink.iter().map(|p| p.0).min().unwrap() + 1;
        let bh = ink.iter().map(|p| p.1).max().unwrap() - ink.iter().map(|p| p.1).min().unwrap() + 1;
        let want = bh as f64 * w as f64 / h as f64;
        prop_assert!((bw as f64 - want).abs() <= 1.0, "ink box {bw}x{bh}, aspect wants width {want}");
    }

    #[test]
    fn expanded_channels_are_identical(img in image(128)) {
        let input = normalize_and_expand(&standardize(&img)).unwrap();
        let (c0, c1, c2) = (input.channel(0), input.channel(1), input.channel(2));
        prop_assert!(c0.iter().zip(c1).zip(c2).all(|((a, b), c)| a.to_bits() == b.to_bits() && b.to_bits() == c.to_bits()));
    }

    #[test]
    fn augmentation_keeps_shape_and_is_deterministic(img in augmentable(), seed in any::<u64>(), p in 0.0f64..=1.0) {
        let cfg = AugmentConfig { apply_probability: p, ..AugmentConfig::default() };
        let a = augment::augment_pipeline(&img, &mut RandomSource::new(seed), &cfg).unwrap();
        let b = augment::augment_pipeline(&img, &mut RandomSource::new(seed), &cfg).unwrap();
        prop_assert_eq!((a.image.width(), a.image.height()), (img.width(), img.height()));
        prop_assert_eq!(&a.image, &b.image);
        prop_assert_eq!(a.applied_names(), b.applied_names());
    }

    #[test]
    fn each_transform_keeps_shape(img in augmentable(), seed in any::<u64>()) {
        let cfg = AugmentConfig::default();
        let rng = &mut RandomSource::new(seed);
        let dims = (img.width(), img.height());
        let outs = [
            augment::elastic_deform(&img, rng, &cfg).unwrap(),
            augment::random_rotate(&img, rng, &cfg),
            augment::gaussian_blur(&img, &cfg),
            augment::gaussian_noise(&img, rng, &cfg),
            augment::perspective_skew(&img, rng, &cfg).unwrap(),
        ];
        for o in outs {
            prop_assert_eq!((o.width(), o.height()), dims);
        }
    }

    #[test]
    fn zero_magnitude_pipeline_is_identity(img in augmentable(), seed in any::<u64>()) {
        let cfg = AugmentConfig { apply_probability: 1.0, ..AugmentConfig::zero_magnitude() };
        let out = augment::augment_pipeline(&img, &mut RandomSource::new(seed), &cfg).unwrap();
        prop_assert_eq!(&out.image, &img);
    }

    #[test]
    fn softmax_ignores_row_shifts(logits in prop::collection::vec(-20.0f64..20.0, 2..30), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn balanced_counts_weigh_one(k in 1usize..30, per in 1usize..50) {
        let counts = vec![per; k];
        let w = compute_class_weights(&counts, k * per).unwrap();
        prop_assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frequency_weighted_mean_weight_is_one(counts in prop::collection::vec(1usize..500, 1..30)) {
        let n: usize = counts.iter().sum();
        let w = compute_class_weights(&counts, n).unwrap();
        let mean: f64 = counts.iter().zip(&w).map(|(&c, &wc)| c as f64 / n as f64 * wc).sum();
        prop_assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn early_stop_waits_out_patience(accs in prop::collection::vec(0.0f64..1.0, 1..30), patience in 1usize..8) {
        let history: Vec<EpochRecord> = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| EpochRecord::new(i + 1, 0.0, 0.0, a, a))
            .collect();
        for end in 1..=history.len() {
            let h = &history[..end];
            let best = h
                .iter()
                .enumerate()
                .fold(0, |b, (i, r)| if r.avg_acc > h[b].avg_acc { i } else { b });
            if early_stop(h, patience) {
                prop_assert!(end - 1 - best >= patience, "stopped {} epochs after best", end - 1 - best);
            }
        }
    }

    #[test]
    fn fusion_conserves_mass(a in distribution(NUM_LETTERS), b in distribution(NUM_LETTERS), eps in 0.0f64..1e-2) {
        let f = fuse(&a, &b, eps).unwrap();
        let (ca, cb) = (confidence(&a).unwrap(), confidence(&b).unwrap());
        prop_assert!((f.iter().sum::<f64>() - (ca + cb) / (ca + cb + eps)).abs() <= 1e-12);
    }

    #[test]
    fn fusion_is_symmetric(a in distribution(NUM_LETTERS), b in distribution(NUM_LETTERS)) {
        prop_assert_eq!(fuse(&a, &b, 1e-8).unwrap(), fuse(&b, &a, 1e-8).unwrap());
    }

    #[test]
    fn shared_argmax_survives_fusion(a in distribution(NUM_POSITIONS), b in distribution(NUM_POSITIONS), k in 0..NUM_POSITIONS) {
        // Move each vector's peak onto class k.
        let peak = |mut p: Vec<f64>| { let m = argmax(&p); p.swap(m, k); p };
        let (a, b) = (peak(a), peak(b));
        prop_assume!(argmax(&a) == k && argmax(&b) == k);
        prop_assert_eq!(argmax(&fuse(&a, &b, 1e-8).unwrap()), k);
    }

    #[test]
    fn sharper_model_never_loses_mass(a in distribution(NUM_POSITIONS), b in distribution(NUM_POSITIONS), k in 0..NUM_POSITIONS, t in 0.0f64..1.0) {
        let onehot: Vec<f64> = (0..NUM_POSITIONS).map(|i| f64::from(u8::from(i == k))).collect();
        let toward = |s: f64| -> Vec<f64> { a.iter().zip(&onehot).map(|(x, o)| (1.0 - s) * x + s * o).collect() };
        prop_assume!(argmax(&a) == k);
        let lo = fuse(&toward(t * 0.5), &b, 1e-8).unwrap()[k];
        let hi = fuse(&toward(t), &b, 1e-8).unwrap()[k];
        prop_assert!(hi >= lo - 1e-12, "{hi} < {lo}");
    }

    #[test]
    fn uniform_inputs_fuse_to_near_uniform(k in 2usize..30, eps in 1e-12f64..1e-2) {
        let u = vec![1.0 / k as f64; k];
        let f = fuse(&u, &u, eps).unwrap();
        prop_assert!(f.iter().all(|v| v.is_finite() && (v - 1.0 / k as f64).abs() <= eps * k as f64));
    }

    #[test]
    fn weighted_recall_equals_accuracy(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..200)) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let s = summary_metrics(&confusion(&t, &p, 6).unwrap(), Averaging::Weighted).unwrap();
        prop_assert!((s.recall - s.accuracy).abs() < 1e-12);
    }

    #[test]
    fn per_letter_is_support_weighted_pair_mean(rows in prop::collection::vec((0usize..5, 0usize..4, 0usize..5), 1..150)) {
        let truth: Vec<LetterClass> = rows.iter().map(|r| LetterClass::new(r.0).unwrap()).collect();
        let preds: Vec<usize> = rows.iter().map(|r| r.2).collect();
        let mut pairs: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
        for r in &rows {
            let e = pairs.entry((r.0, r.1)).or_default();
            e.0 += 1;
            e.1 += usize::from(r.0 == r.2);
        }
        for row in per_letter_accuracy(&truth, &preds).unwrap() {
            let l = row.letter.index();
            let (num, den) = pairs
                .iter()
                .filter(|((pl, _), _)| *pl == l)
                .fold((0.0, 0.0), |(n, d), (_, &(sup, ok))| (n + sup as f64 * (ok as f64 / sup as f64), d + sup as f64));
            prop_assert!((row.accuracy - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn report_survives_csv_round_trip(rows in prop::collection::vec((0usize..NUM_LETTERS, 0usize..NUM_POSITIONS, 0usize..NUM_LETTERS, 0usize..NUM_POSITIONS), 1..120), loss in 0.0f64..5.0, percent in any::<bool>()) {
        let preds = Predictions {
            truth: rows.iter().map(|r| (LetterClass::new(r.0).unwrap(), PositionClass::from_index(r.1).unwrap())).collect(),
            letter: rows.iter().map(|r| r.2).collect(),
            position: rows.iter().map(|r| r.3).collect(),
        };
        let report = EvalReport::build(&preds, Some((loss, loss / 2.0)), Averaging::Weighted).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let format = if percent { RateFormat::Percent } else { RateFormat::Fraction };
        report.write_csv(dir.path(), format).unwrap();
        prop_assert_eq!(EvalReport::read_csv(dir.path()).unwrap(), report.rounded());
    }
}
