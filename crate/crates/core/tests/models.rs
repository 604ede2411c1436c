use std::collections::BTreeMap;

use qalam_core::imaging::{normalize_and_expand, GrayImage, ModelInput};
use qalam_core::models::{
    batch_tensor, softmax, write_random_efficientnet, write_random_vit, DualDistribution, DualHeadModel,
    EfficientNetShape, ModelFamily, ModelSpec, BACKBONE_PREFIX,
};
use qalam_nn::{archive, Adam, AdamConfig, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_inputs(n: usize, seed: u64) -> Vec<ModelInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| normalize_and_expand(&GrayImage::from_fn(128, 128, |_, _| rng.random())).unwrap())
        .collect()
}

fn shapes(model: &DualHeadModel, n: usize) -> (usize, usize) {
    let inputs = random_inputs(n, 1);
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let l = model.logits_for(&refs);
    assert_eq!(l.len(), n);
    (l.letter.len() / n, l.position.len() / n)
}

fn named(model: &DualHeadModel) -> BTreeMap<String, Tensor<f32>> {
    model.store().to_named().into_iter().collect()
}

#[test]
fn cnn_flattens_to_65536_and_emits_both_heads() {
    let model = DualHeadModel::<f32>::build(&ModelSpec::new(ModelFamily::CustomCnn), 0).unwrap();
    // Two 2×2 pools take 128 to 32; 64 channels remain.
    assert_eq!(named(&model)["shared.weight"].shape(), &[128, 64 * 32 * 32]);
    assert_eq!(shapes(&model, 2), (28, 4));
}

#[test]
fn eval_is_deterministic_and_dropout_only_acts_in_training() {
    let model = DualHeadModel::<f32>::build(&ModelSpec::new(ModelFamily::CustomCnn), 3).unwrap();
    let inputs = random_inputs(2, 2);
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let a = model.logits_for(&refs);
    let b = model.logits_for(&refs);
    assert!(a.letter.iter().zip(&b.letter).all(|(x, y)| x.to_bits() == y.to_bits()));

    let run = |seed| {
        let g = Graph::train(seed);
        let out = model.forward(&g, g.input(batch_tensor::<f32>(&refs)));
        out.letter.value().data().to_vec()
    };
    assert_ne!(run(1), run(2));
}

#[test]
fn custom_vit_has_64_tokens_and_emits_both_heads() {
    let model = DualHeadModel::<f32>::build(&ModelSpec::new(ModelFamily::CustomVit), 0).unwrap();
    assert_eq!(named(&model)["backbone.pos_embed"].shape(), &[64, 256]);
    assert_eq!(model.transformer_depth(), Some(6));
    assert_eq!(shapes(&model, 3), (28, 4));
}

#[test]
fn permuting_positional_rows_changes_outputs() {
    let spec = ModelSpec::new(ModelFamily::CustomVit);
    let model = DualHeadModel::<f32>::build(&spec, 5).unwrap();
    let mut params = named(&model);
    let pos = params["backbone.pos_embed"].clone();
    let (rows, dim) = (pos.shape()[0], pos.shape()[1]);
    let mut permuted = Vec::with_capacity(pos.numel());
    for r in (0..rows).rev() {
        permuted.extend_from_slice(&pos.data()[r * dim..(r + 1) * dim]);
    }
    params.insert("backbone.pos_embed".into(), Tensor::new(vec![rows, dim], permuted));
    let shuffled = DualHeadModel::from_named(spec, params).unwrap();

    let inputs = random_inputs(1, 9);
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let (a, b) = (model.logits_for(&refs), shuffled.logits_for(&refs));
    let diff = a
        .letter
        .iter()
        .chain(&a.position)
        .zip(b.letter.iter().chain(&b.position))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-6, "max-norm difference {diff}");
}

#[test]
fn efficientnet_b7_archive_yields_2560_wide_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b7.safetensors");
    write_random_efficientnet(&path, &EfficientNetShape::b7(), 1).unwrap();
    let spec = ModelSpec::pretrained(ModelFamily::EfficientnetB7, &path);
    let model = DualHeadModel::<f32>::build(&spec, 0).unwrap();
    assert_eq!(model.embedding_width(), 2560);
    assert_eq!(shapes(&model, 1), (28, 4));
}

#[test]
fn frozen_backbone_survives_an_optimizer_step() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("small.safetensors");
    let shape = EfficientNetShape::scaled(0.25, 0.25);
    write_random_efficientnet(&path, &shape, 2).unwrap();
    let spec = ModelSpec {
        embedding_width: Some(shape.head),
        freeze_backbone: true,
        ..ModelSpec::pretrained(ModelFamily::EfficientnetB7, &path)
    };
    let mut model = DualHeadModel::<f32>::build(&spec, 0).unwrap();
    let before = named(&model);

    let inputs = random_inputs(2, 3);
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let g = Graph::train(7);
    let out = model.forward(&g, g.input(batch_tensor::<f32>(&refs)));
    let loss = out
        .letter
        .weighted_cross_entropy(&[0, 1], &[1.0; 28])
        .add(out.position.weighted_cross_entropy(&[0, 1], &[1.0; 4]));
    let grads = g.backward(loss);
    drop(g);
    Adam::new(AdamConfig::new(1e-2)).step(model.store_mut(), grads.params());

    let after = named(&model);
    let mut heads_moved = false;
    for (name, t) in &after {
        if name.starts_with(BACKBONE_PREFIX) {
            assert_eq!(t, &before[name], "{name} changed");
        } else {
            heads_moved |= t != &before[name];
        }
    }
    assert!(heads_moved, "head parameters should train");
}

#[test]
fn vit_b16_adapts_positions_only_when_the_grid_changes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vit.safetensors");
    write_random_vit(&path, 64, 2, 14, 4).unwrap();
    let archived: BTreeMap<String, Tensor<f32>> = archive::load::<f32>(&path).unwrap().into_iter().collect();
    assert_eq!(archived["pos_embed"].shape(), &[1, 197, 64]);

    let at = |image_size| {
        let spec = ModelSpec {
            image_size,
            embedding_width: Some(64),
            ..ModelSpec::pretrained(ModelFamily::VitB16, &path)
        };
        DualHeadModel::<f32>::build(&spec, 0).unwrap()
    };

    // 224×224: the backbone is the archive, tensor for tensor.
    let native = named(&at(224));
    for (name, t) in &archived {
        if name.starts_with("head.") {
            continue;
        }
        assert_eq!(&native[&format!("{BACKBONE_PREFIX}{name}")], t, "{name} was altered");
    }

    // 128×128: only the positional table is resampled, to 1 + 8² rows.
    let model = at(128);
    let adapted = named(&model);
    assert_eq!(adapted["backbone.pos_embed"].shape(), &[1, 65, 64]);
    assert_eq!(
        &adapted["backbone.pos_embed"].data()[..64],
        &archived["pos_embed"].data()[..64]
    );
    for (name, t) in &archived {
        if name.starts_with("head.") || name == "pos_embed" {
            continue;
        }
        assert_eq!(&adapted[&format!("{BACKBONE_PREFIX}{name}")], t);
    }
    assert_eq!(shapes(&model, 2), (28, 4));
}

#[test]
fn probabilities_are_normalised_and_uniform_for_flat_logits() {
    let d = DualDistribution::from_logits(&[0.3; 28], &[-2.0; 4]).unwrap();
    assert!(d.letter.iter().all(|&p| (p - 1.0 / 28.0).abs() < 1e-12));
    assert!(d.position.iter().all(|&p| (p - 0.25).abs() < 1e-12));

    let model = DualHeadModel::<f32>::build(&ModelSpec::new(ModelFamily::CustomCnn), 8).unwrap();
    let inputs = random_inputs(3, 4);
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    for d in model.predict_proba(&refs).unwrap() {
        assert!((d.letter.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        assert!((d.position.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    let p = softmax(&[0.0, 3f64.ln()]);
    assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
}
