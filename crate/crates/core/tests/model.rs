mod common;

use geosam::model::{ClassInput, GeoSam, ImageEncoder, ModelConfig, PrecomputedEmbeddingLoader};
use geosam::points::{generate_class_prompts, SamplingConfig};
use geosam::raster::ClassCatalog;
use ndarray::{s, Array2, Axis};

fn setup() -> (GeoSam, Vec<ClassInput>, geosam::model::ImageEmbedding) {
    let catalog = ClassCatalog::default();
    let model = GeoSam::new(ModelConfig::default(), catalog.clone(), 11).unwrap();
    let entry = common::scenes(1, 3, 0.1).remove(0);
    let sets = generate_class_prompts(entry.pseudo.as_ref().unwrap(), &catalog, &SamplingConfig { k_fg: 6, k_bg: 3, seed: 5 }).unwrap();
    let texts = common::default_texts(&catalog);
    let inputs = model.class_inputs(&sets, Some(&texts)).unwrap();
    let emb = model.encode_image(&entry.image).unwrap();
    (model, inputs, emb)
}

fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn logits(model: &GeoSam, emb: &geosam::model::ImageEmbedding, inputs: &[ClassInput]) -> Array2<f64> {
    let mut b = geosam::params::Binder::new(&model.store).unwrap();
    let out = model.forward_on(&mut b, emb, inputs).unwrap();
    b.tape.value(out).clone()
}

#[test]
fn output_ignores_prompt_order() {
    let (model, inputs, emb) = setup();
    let base = logits(&model, &emb, &inputs);
    let mut shuffled = inputs.clone();
    for input in &mut shuffled {
        let n = input.points.nrows();
        let order: Vec<usize> = (0..n).rev().collect();
        input.points = input.points.select(Axis(0), &order);
        if let Some(t) = &mut input.text {
            *t = t.select(Axis(0), &[2, 0, 3, 1]);
        }
    }
    let permuted = logits(&model, &emb, &shuffled);
    assert!(max_diff(&base, &permuted) < 1e-9, "diff {}", max_diff(&base, &permuted));
}

#[test]
fn decodes_without_any_prompt() {
    let (model, inputs, emb) = setup();
    let empty: Vec<ClassInput> = inputs
        .iter()
        .map(|i| ClassInput {
            group: i.group.clone(),
            points: Array2::zeros((0, model.config.d_model)),
            text: None,
        })
        .collect();
    let probs = model.forward_multiclass(&emb, &empty).unwrap();
    assert_eq!((probs.num_channels(), probs.height(), probs.width()), (2, 128, 128));
    assert!(probs.as_array().iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
    let direct = model.decode(&emb, &Array2::zeros((0, model.config.d_model))).unwrap();
    assert_eq!(direct.dim(), (128, 128));
}

#[test]
fn swapping_class_inputs_swaps_channels() {
    let (model, inputs, emb) = setup();
    let base = logits(&model, &emb, &inputs);
    let swapped: Vec<ClassInput> = inputs.iter().rev().cloned().collect();
    let out = logits(&model, &emb, &swapped);
    let s = model.config.image_size;
    assert_eq!(base.slice(s![..s, ..]), out.slice(s![s.., ..]));
    assert_eq!(base.slice(s![s.., ..]), out.slice(s![..s, ..]));
}

#[test]
fn classes_decode_independently() {
    let (model, inputs, emb) = setup();
    let base = logits(&model, &emb, &inputs);
    let mut changed = inputs.clone();
    changed[1].points = Array2::zeros((0, model.config.d_model));
    let out = logits(&model, &emb, &changed);
    let s = model.config.image_size;
    assert_eq!(base.slice(s![..s, ..]), out.slice(s![..s, ..]));
    assert_ne!(base.slice(s![s.., ..]), out.slice(s![s.., ..]));
}

#[test]
fn encoder_ignores_trainable_parameters() {
    let (mut model, _, emb) = setup();
    let entry = common::scenes(1, 3, 0.1).remove(0);
    let names: Vec<String> = model.trainable_parameters().unwrap().iter().map(|s| s.to_string()).collect();
    for n in &names {
        model.store.get_mut(n).unwrap().mapv_inplace(|v| v * 3.0 + 1.0);
    }
    assert_eq!(model.encode_image(&entry.image).unwrap(), emb);
}

#[test]
fn only_decoder_and_text_projection_train() {
    let (model, _, _) = setup();
    let trainable = model.trainable_parameters().unwrap();
    assert!(trainable
        .iter()
        .all(|n| n.starts_with("decoder.") || n.starts_with("prompt.text_proj") || n.starts_with("prompt.class_embed.")));
    assert!(trainable.iter().any(|n| n.starts_with("prompt.class_embed.")));
    let frozen = model.store.frozen_parameters().unwrap();
    assert!(frozen.iter().any(|n| n.starts_with("encoder.")));
    assert!(frozen.iter().all(|n| !n.starts_with("decoder.")));
}

#[test]
fn cached_embeddings_match_live_encoder() {
    let (model, inputs, emb) = setup();
    let dir = tempfile::tempdir().unwrap();
    let entry = common::scenes(1, 3, 0.1).remove(0);
    let loader = PrecomputedEmbeddingLoader {
        dir: dir.path().to_path_buf(),
        fingerprint: model.encoder_fingerprint(),
    };
    let path = loader.populate(&entry.image, &model.encoder()).unwrap();
    assert!(path.exists());
    let cached = loader.encode(&entry.image).unwrap();
    assert_eq!(cached, emb);
    assert_eq!(
        model.forward_multiclass(&cached, &inputs).unwrap(),
        model.forward_multiclass(&emb, &inputs).unwrap()
    );
    let other = GeoSam::new(ModelConfig::default(), ClassCatalog::default(), 12).unwrap();
    assert_ne!(other.encoder_fingerprint(), model.encoder_fingerprint());
}

#[test]
fn checkpoint_roundtrip_preserves_predictions() {
    let (model, inputs, emb) = setup();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.to_checkpoint(serde_json::json!({}), serde_json::json!({}), Vec::new()).write(&path).unwrap();
    let back = GeoSam::from_checkpoint(&geosam::model::Checkpoint::read(&path).unwrap()).unwrap();
    assert_eq!(back.forward_multiclass(&emb, &inputs).unwrap(), model.forward_multiclass(&emb, &inputs).unwrap());
}

#[test]
fn same_seed_same_weights() {
    let a = GeoSam::new(ModelConfig::default(), ClassCatalog::default(), 4).unwrap();
    let b = GeoSam::new(ModelConfig::default(), ClassCatalog::default(), 4).unwrap();
    let c = GeoSam::new(ModelConfig::default(), ClassCatalog::default(), 5).unwrap();
    let vals = |m: &GeoSam| m.store.iter().map(|p| p.value.clone()).collect::<Vec<_>>();
    assert_eq!(vals(&a), vals(&b));
    assert_ne!(vals(&a), vals(&c));
}

#[test]
fn rejects_mismatched_inputs() {
    let (model, inputs, emb) = setup();
    assert!(model.forward_multiclass(&emb, &inputs[..1]).is_err());
    let mut wide = inputs.clone();
    wide[0].points = Array2::zeros((2, 7));
    assert!(model.forward_multiclass(&emb, &wide).is_err());
    let small = GeoSam::new(ModelConfig { image_size: 64, ..ModelConfig::default() }, ClassCatalog::default(), 1).unwrap();
    assert!(small.forward_multiclass(&emb, &inputs).is_err());
}
