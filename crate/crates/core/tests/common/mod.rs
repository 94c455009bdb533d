#![allow(dead_code)]

pub mod gradcheck;

use geosam::geodata::{corrupt_labels, synth_scene, LoadedEntry, SceneSpec};
use geosam::prompt::{catalog_text_features, parse_text_prompts, StubTextEncoder, DEFAULT_TEXT_PROMPTS};
use geosam::raster::ClassCatalog;
use geosam::seed::{derive_seed, stream};
use ndarray::Array2;

/// `n` synthetic scenes with pseudo-labels corrupted at `rate`.
pub fn scenes(n: usize, seed: u64, rate: f64) -> Vec<LoadedEntry> {
    let catalog = ClassCatalog::default();
    (0..n)
        .map(|i| {
            let spec = SceneSpec {
                seed: derive_seed(seed, &[stream::SCENE, i as u64]),
                ..SceneSpec::default()
            };
            let (image, gt) = synth_scene(&spec).unwrap();
            let pseudo = corrupt_labels(&gt, rate, derive_seed(seed, &[stream::CORRUPT, i as u64]), &catalog).unwrap();
            LoadedEntry {
                id: format!("scene_{i:04}"),
                image,
                gt,
                pseudo: Some(pseudo),
            }
        })
        .collect()
}

pub fn default_texts(catalog: &ClassCatalog) -> Vec<Array2<f64>> {
    let sets = parse_text_prompts(DEFAULT_TEXT_PROMPTS).unwrap();
    catalog_text_features(&sets, catalog, 4, &StubTextEncoder::default()).unwrap()
}
