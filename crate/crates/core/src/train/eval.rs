//! Dataset-level IoU / AP evaluation.
//!
//! Per class, every image's pixels are pooled before scoring: IoU is total
//! intersection over total union, AP ranks all pixels of all images.

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::geodata::LoadedEntry;
use crate::metrics::{aggregate, average_precision, iou};
use crate::model::GeoSam;
use crate::morph::{refine, MorphConfig};
use crate::points::{generate_class_prompts, PointPromptSet, SamplingConfig};
use crate::raster::{binarize, one_hot_encode, BinaryMask, ClassCatalog, MultiChannelMask};
use crate::seed::{derive_seed, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub threshold: f64,
    /// `None` scores the raw binarized maps.
    pub postprocess: Option<MorphConfig>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            postprocess: Some(MorphConfig::desk()),
        }
    }
}

/// One image to score. `pseudo` feeds prompt generation.
pub type EvalEntry = LoadedEntry;

pub trait Predictor {
    /// Per-class probabilities for entry number `index`.
    fn predict(&self, index: usize, entry: &EvalEntry) -> Result<MultiChannelMask>;
}

/// Runs the model with point prompts sampled from each entry's
/// pseudo-label (falling back to the ground truth when absent).
pub struct ModelPredictor<'a> {
    pub model: &'a GeoSam,
    pub texts: Option<Vec<Array2<f64>>>,
    pub use_points: bool,
    pub k_fg: usize,
    pub k_bg: usize,
    pub seed: u64,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, index: usize, entry: &EvalEntry) -> Result<MultiChannelMask> {
        let catalog = &self.model.catalog;
        let sets = if self.use_points {
            let cfg = SamplingConfig {
                k_fg: self.k_fg,
                k_bg: self.k_bg,
                seed: derive_seed(self.seed, &[stream::EVAL, index as u64]),
            };
            generate_class_prompts(entry.pseudo.as_ref().unwrap_or(&entry.gt), catalog, &cfg)?
        } else {
            catalog
                .groups()
                .iter()
                .enumerate()
                .map(|(c, g)| PointPromptSet::empty(g.clone(), c))
                .collect()
        };
        let emb = self.model.encode_image(&entry.image)?;
        let inputs = self.model.class_inputs(&sets, self.texts.as_deref())?;
        self.model.forward_multiclass(&emb, &inputs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub iou: f64,
    /// `None` when the class never occurs in the ground truth.
    pub ap: Option<f64>,
    pub gt_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub split: String,
    pub images: usize,
    pub per_class: Vec<ClassMetrics>,
    pub miou: f64,
    /// Mean over classes with a defined AP.
    pub map: Option<f64>,
    pub settings: EvalSettings,
    /// Fully resolved configuration of the producing run.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou,ap,gt_pixels\n");
        let ap = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for c in &self.per_class {
            out += &format!("{},{:.6},{},{}\n", c.class, c.iou, ap(c.ap), c.gt_pixels);
        }
        out += &format!("mean,{:.6},{},\n", self.miou, ap(self.map));
        out
    }
}

/// Scores `predictor` on `entries`. IoU uses the binarized (and optionally
/// postprocessed) maps; AP uses the raw probabilities.
pub fn evaluate(
    predictor: &dyn Predictor,
    entries: &[EvalEntry],
    catalog: &ClassCatalog,
    settings: &EvalSettings,
    dataset: (&str, &str),
    config: serde_json::Value,
) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let c = catalog.num_channels();
    let mut preds: Vec<Vec<BinaryMask>> = vec![Vec::new(); c];
    let mut scores: Vec<Vec<Array2<f64>>> = vec![Vec::new(); c];
    let mut truth: Vec<Vec<BinaryMask>> = vec![Vec::new(); c];
    for (i, entry) in entries.iter().enumerate() {
        let probs = predictor.predict(i, entry)?;
        let gt = one_hot_encode(&entry.gt, catalog)?;
        if probs.num_channels() != c || probs.height() != gt.height() || probs.width() != gt.width() {
            return Err(Error::Shape(format!(
                "entry `{}`: prediction {}x{}x{}, ground truth {c}x{}x{}",
                entry.id,
                probs.num_channels(),
                probs.height(),
                probs.width(),
                gt.height(),
                gt.width()
            )));
        }
        let bin = binarize(&probs, settings.threshold)?;
        for ch in 0..c {
            let mask = bin.channel_mask(ch);
            preds[ch].push(match &settings.postprocess {
                Some(cfg) => refine(&mask, cfg),
                None => mask,
            });
            scores[ch].push(probs.channel(ch).to_owned());
            truth[ch].push(gt.channel_mask(ch));
        }
    }
    let tall = |parts: &[BinaryMask]| {
        let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
        concatenate(Axis(0), &views).expect("equal widths")
    };
    let mut per_class = Vec::with_capacity(c);
    for (ch, group) in catalog.groups().iter().enumerate() {
        let gt = tall(&truth[ch]);
        let views: Vec<_> = scores[ch].iter().map(|m| m.view()).collect();
        let sc = concatenate(Axis(0), &views).expect("equal widths");
        let ap = match average_precision(sc.view(), &gt) {
            Ok(v) => Some(v),
            Err(Error::NoPositives) => None,
            Err(e) => return Err(e),
        };
        per_class.push(ClassMetrics {
            class: group.clone(),
            iou: iou(&tall(&preds[ch]), &gt)?.value,
            ap,
            gt_pixels: gt.iter().filter(|&&b| b).count(),
        });
    }
    let miou = aggregate(&per_class.iter().map(|m| m.iou).collect::<Vec<_>>())?;
    let aps: Vec<f64> = per_class.iter().filter_map(|m| m.ap).collect();
    Ok(EvalReport {
        dataset: dataset.0.to_string(),
        split: dataset.1.to_string(),
        images: entries.len(),
        per_class,
        miou,
        map: aggregate(&aps).ok(),
        settings: settings.clone(),
        config,
    })
}
