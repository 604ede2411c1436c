use std::fs;
use std::path::Path;

use qalam_core::augment::{self, noise_field, AugmentConfig, RandomSource};
use qalam_core::corpus::{self, class_counts, scan_manifest, stratified_split};
use qalam_core::imaging::{normalize_and_expand, preprocess, standardize, to_grayscale, GrayImage, RasterImage};
use qalam_core::labels::{LetterClass, PositionClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_gray(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayImage {
    GrayImage::from_fn(w, h, |_, _| rng.random())
}

#[test]
fn tall_input_is_halved_and_centred() {
    // 256 rows by 128 columns.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random_gray(&mut rng, 128, 256);
    let out = standardize(&img);
    // At exactly half scale with half-pixel centres, each output pixel is a 2×2 mean.
    for y in 0..128 {
        for x in 0..128 {
            let v = out.get(x, y) as i32;
            if !(32..96).contains(&x) {
                assert_eq!(v, 255, "column {x} should be white");
                continue;
            }
            let (sx, sy) = (2 * (x - 32), 2 * y);
            let mean = (img.get(sx, sy) as f64
                + img.get(sx + 1, sy) as f64
                + img.get(sx, sy + 1) as f64
                + img.get(sx + 1, sy + 1) as f64)
                / 4.0;
            assert!((v as f64 - mean).abs() <= 1.0, "({x},{y}): {v} vs {mean}");
        }
    }
}

#[test]
fn preprocess_equals_the_explicit_chain() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..50 {
        let (w, h) = (rng.random_range(1..200), rng.random_range(1..200));
        let rgb = image::RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
        let path = dir
            .path()
            .join(format!("{i}.{}", if i % 2 == 0 { "png" } else { "bmp" }));
        rgb.save(&path).unwrap();
        let chain =
            normalize_and_expand(&standardize(&to_grayscale(&RasterImage::load(&path).unwrap()).unwrap())).unwrap();
        assert_eq!(preprocess(&path).unwrap(), chain, "image {i}");
    }
}

#[test]
fn white_png_becomes_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("white.png");
    image::GrayImage::from_pixel(10, 10, image::Luma([255]))
        .save(&path)
        .unwrap();
    let input = preprocess(&path).unwrap();
    assert_eq!(input.values().len(), 3 * 128 * 128);
    assert!(input.values().iter().all(|&v| v == 1.0));
}

#[test]
fn noise_has_the_configured_spread() {
    let cfg = AugmentConfig::default();
    let std = cfg.noise_std_fraction * 255.0;
    assert!((std - 102.0).abs() < 1e-9);
    let draws = noise_field(&mut RandomSource::new(3), 1_000_000, std);
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((sd - 102.0).abs() / 102.0 < 0.01, "empirical std {sd}");
}

#[test]
fn noisy_outputs_stay_in_range_and_shape() {
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = random_gray(&mut rng, 17, 23);
    for seed in 0..1000 {
        let out = augment::gaussian_noise(&img, &mut RandomSource::new(seed), &cfg);
        assert_eq!((out.width(), out.height()), (17, 23));
    }
}

#[test]
fn rotation_only_copies_existing_values_or_white() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let palette = [0u8, 37, 90, 181];
    let img = GrayImage::from_fn(31, 19, |_, _| palette[rng.random_range(0..4)]);
    for deg in [-15.0, -7.3, 0.4, 9.9, 15.0, 90.0] {
        let out = augment::rotate(&img, deg);
        assert!(
            out.pixels().iter().all(|p| palette.contains(p) || *p == 255),
            "angle {deg}"
        );
    }
    let white = GrayImage::filled(20, 20, 255);
    assert_eq!(augment::rotate(&white, 12.0), white);
}

#[test]
fn constant_images_survive_smoothing_and_warps() {
    let cfg = AugmentConfig::default();
    for v in [0u8, 77, 255] {
        let img = GrayImage::filled(24, 24, v);
        assert_eq!(augment::gaussian_blur(&img, &cfg), img);
    }
    let white = GrayImage::filled(24, 24, 255);
    let rng = &mut RandomSource::new(6);
    assert_eq!(augment::elastic_deform(&white, rng, &cfg).unwrap(), white);
    assert_eq!(augment::perspective_skew(&white, rng, &cfg).unwrap(), white);
}

fn write_png(path: &Path) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    image::GrayImage::from_pixel(12, 9, image::Luma([40]))
        .save(path)
        .unwrap();
}

#[test]
fn scanning_counts_pairs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for i in 0..3 {
        write_png(&root.join(format!("Alef/I/a{i}.png")));
    }
    for i in 0..2 {
        write_png(&root.join(format!("Baa/M/b{i}.png")));
    }
    let m = scan_manifest(root).unwrap();
    assert_eq!(m.len(), 5);
    let alef_i = (
        LetterClass::from_name("Alef").unwrap(),
        PositionClass::from_code("I").unwrap(),
    );
    let baa_m = (
        LetterClass::from_name("Baa").unwrap(),
        PositionClass::from_code("M").unwrap(),
    );
    assert_eq!(
        m.pair_counts().iter().map(|(k, v)| (*k, *v)).collect::<Vec<_>>(),
        [(alef_i, 3), (baa_m, 2)]
    );

    let (a, b) = (root.join("m1.csv"), root.join("m2.csv"));
    m.write_csv(&a).unwrap();
    scan_manifest(root).unwrap().write_csv(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let back = corpus::read_manifest_csv(&a).unwrap();
    assert_eq!(back, m.samples());

    let ids: Vec<&str> = m.samples().iter().map(|s| s.sample_id.as_str()).collect();
    let (letters, positions) = class_counts(&m, &ids).unwrap();
    assert_eq!((letters[alef_i.0.index()], letters[baa_m.0.index()]), (3, 2));
    assert_eq!((positions[alef_i.1.index()], positions[baa_m.1.index()]), (3, 2));
    let (letters, positions) = class_counts(&m, &[] as &[&str]).unwrap();
    assert!(letters.iter().chain(positions.iter()).all(|&c| c == 0));
}

#[test]
fn scanning_rejects_empty_roots_and_bad_codes() {
    let dir = tempfile::tempdir().unwrap();
    let err = scan_manifest(dir.path()).unwrap_err().to_string();
    assert!(err.contains("no samples found"), "{err}");
    write_png(&dir.path().join("Alef/X/img.png"));
    let err = scan_manifest(dir.path()).unwrap_err().to_string();
    assert!(err.contains("invalid position code \"X\""), "{err}");
}

#[test]
fn thousand_samples_split_roughly_70_10_20() {
    let mut samples = Vec::new();
    for (letter, pos) in [("Alef", "I"), ("Baa", "B")] {
        for i in 0..500 {
            samples.push(corpus::LetterSample {
                sample_id: format!("{letter}/{pos}/{i:04}"),
                image_path: format!("{letter}/{pos}/{i:04}.png").into(),
                letter: LetterClass::from_name(letter).unwrap(),
                position: PositionClass::from_code(pos).unwrap(),
            });
        }
    }
    let m = corpus::CorpusManifest::from_samples(samples).unwrap();
    let s = stratified_split(&m, [0.7, 0.1, 0.2], 9).unwrap();
    assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (700, 100, 200));
    assert!(stratified_split(&m, [0.5, 0.5, 0.5], 9).is_err());
}
