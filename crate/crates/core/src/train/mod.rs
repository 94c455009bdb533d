//! Decoder fine-tuning loop, checkpointing and evaluation.
//!
//! One optimizer step consumes `grad_accum` images. Image order, point
//! prompts and initialization all come from seed streams keyed by
//! (epoch, image index), so the whole trajectory is a function of the step
//! counter and a resumed run continues bit-exactly.

mod eval;
mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use eval::{evaluate, ClassMetrics, EvalEntry, EvalReport, EvalSettings, ModelPredictor, Predictor};
pub use optim::{cosine_lr, AdamW, OptimizerConfig};

use crate::geodata::{DatasetManifest, LoadedEntry};
use crate::loss::{dice_focal_with_grad, LossConfig};
use crate::model::{
    stack, unstack, Checkpoint, GeoSam, ImageEmbedding, ImageEncoder, PrecomputedEmbeddingLoader, TensorKind,
};
use crate::params::Binder;
use crate::points::{generate_class_prompts, PointPromptSet, SamplingConfig};
use crate::raster::{one_hot_encode, LabelMap};
use crate::seed::{derive_seed, rng_for, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: u64,
    /// Stop early after this many optimizer steps; the schedule still spans
    /// all epochs.
    pub max_steps: Option<u64>,
    pub grad_accum: usize,
    pub k_fg: usize,
    pub k_bg: usize,
    pub use_points: bool,
    /// Entries that may fail to load before training aborts.
    pub skip_budget: usize,
    /// Write `last.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let s = SamplingConfig::default();
        Self {
            epochs: 500,
            max_steps: None,
            grad_accum: 1,
            k_fg: s.k_fg,
            k_bg: s.k_bg,
            use_points: true,
            skip_budget: 0,
            checkpoint_every: 0,
            seed: 0,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::desk(),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.grad_accum == 0 {
            return Err(Error::InvalidArgument("grad_accum must be at least 1".into()));
        }
        self.loss.validate()?;
        self.optimizer.validate()
    }
}

/// Trainer bookkeeping persisted in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub total_steps: u64,
    pub seed: u64,
    pub dataset_len: usize,
    pub optimizer_t: u64,
    /// Lowest mean training loss over a completed epoch, and that epoch.
    pub best_loss: Option<f64>,
    pub best_epoch: Option<u64>,
    pub epoch_loss_sum: f64,
    pub epoch_loss_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

/// A training image reduced to what the loop needs: its frozen embedding,
/// one-hot ground truth and the pseudo-label used for point prompts.
#[derive(Debug, Clone)]
pub struct TrainEntry {
    pub id: String,
    pub embedding: ImageEmbedding,
    pub target: Array3<f64>,
    pub pseudo: LabelMap,
}

/// Encodes images once, optionally through an on-disk embedding cache.
pub fn prepare_entries(model: &GeoSam, loaded: Vec<LoadedEntry>, cache: Option<&Path>) -> Result<Vec<TrainEntry>> {
    let live = model.encoder();
    let loader = cache.map(|dir| PrecomputedEmbeddingLoader {
        dir: dir.to_path_buf(),
        fingerprint: model.encoder_fingerprint(),
    });
    loaded
        .into_iter()
        .map(|e| {
            let embedding = match &loader {
                Some(l) => {
                    l.populate(&e.image, &live)?;
                    l.encode(&e.image)?
                }
                None => live.encode(&e.image)?,
            };
            let pseudo = e.pseudo.ok_or_else(|| {
                Error::Dataset(format!("entry `{}` has no pseudo-label; generate them first", e.id))
            })?;
            Ok(TrainEntry {
                target: one_hot_encode(&e.gt, &model.catalog)?.into_array(),
                id: e.id,
                embedding,
                pseudo,
            })
        })
        .collect()
}

/// Loads every manifest entry, skipping and logging failures up to `budget`.
pub fn load_with_budget(manifest: &DatasetManifest, budget: usize) -> Result<Vec<LoadedEntry>> {
    let mut out = Vec::with_capacity(manifest.entries.len());
    let mut skipped = 0;
    for i in 0..manifest.entries.len() {
        let loaded = manifest.load_entry(i).and_then(|e| match e.pseudo {
            Some(_) => Ok(e),
            None => Err(Error::Dataset(format!(
                "entry `{}` has no pseudo-label; generate them first",
                e.id
            ))),
        });
        match loaded {
            Ok(e) => out.push(e),
            Err(err) => {
                skipped += 1;
                warn!("skipping entry `{}`: {err}", manifest.entries[i].id);
                if skipped > budget {
                    return Err(Error::DataBudget {
                        skipped,
                        budget,
                        last: err.to_string(),
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("training set"));
    }
    Ok(out)
}

pub struct Trainer {
    model: GeoSam,
    entries: Vec<TrainEntry>,
    texts: Option<Vec<Array2<f64>>>,
    settings: TrainSettings,
    run_config: serde_json::Value,
    optimizer: AdamW,
    state: TrainState,
    order: (u64, Vec<usize>),
}

impl Trainer {
    /// `texts` holds raw text features per class in channel order; `None`
    /// trains without text prompts.
    pub fn new(
        model: GeoSam,
        entries: Vec<TrainEntry>,
        texts: Option<Vec<Array2<f64>>>,
        settings: TrainSettings,
        run_config: serde_json::Value,
    ) -> Result<Self> {
        settings.validate()?;
        if entries.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let samples = settings.epochs * entries.len() as u64;
        let state = TrainState {
            step: 0,
            epoch: 0,
            total_steps: samples.div_ceil(settings.grad_accum as u64),
            seed: settings.seed,
            dataset_len: entries.len(),
            optimizer_t: 0,
            best_loss: None,
            best_epoch: None,
            epoch_loss_sum: 0.0,
            epoch_loss_count: 0,
        };
        Self::assemble(model, entries, texts, settings, run_config, AdamW::new(OptimizerConfig::default()), state)
    }

    /// Continues a run from `ckpt`. Settings must describe the same run.
    pub fn resume(
        ckpt: &Checkpoint,
        entries: Vec<TrainEntry>,
        texts: Option<Vec<Array2<f64>>>,
        settings: TrainSettings,
        run_config: serde_json::Value,
    ) -> Result<Self> {
        settings.validate()?;
        let model = GeoSam::from_checkpoint(ckpt)?;
        let state: TrainState = serde_json::from_value(ckpt.header.state.clone())
            .map_err(|e| Error::Checkpoint(format!("trainer state: {e}")))?;
        if state.seed != settings.seed || state.dataset_len != entries.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was trained with seed {} on {} images; resuming with seed {} on {}",
                state.seed,
                state.dataset_len,
                settings.seed,
                entries.len()
            )));
        }
        let optimizer = AdamW::from_state(
            settings.optimizer.clone(),
            state.optimizer_t,
            ckpt.tensors_of(TensorKind::Optimizer)
                .map(|(m, a)| (m.name.as_str(), a)),
        )?;
        Self::assemble(model, entries, texts, settings, run_config, optimizer, state)
    }

    fn assemble(
        model: GeoSam,
        entries: Vec<TrainEntry>,
        texts: Option<Vec<Array2<f64>>>,
        settings: TrainSettings,
        run_config: serde_json::Value,
        mut optimizer: AdamW,
        state: TrainState,
    ) -> Result<Self> {
        if let Some(t) = &texts {
            if t.len() != model.catalog.num_channels() {
                return Err(Error::InvalidArgument(format!(
                    "{} text feature sets for {} classes",
                    t.len(),
                    model.catalog.num_channels()
                )));
            }
        }
        let target_dim = (model.catalog.num_channels(), model.config.image_size, model.config.image_size);
        if let Some(e) = entries.iter().find(|e| e.target.dim() != target_dim) {
            return Err(Error::Shape(format!(
                "entry `{}` target {:?}, model expects {target_dim:?}",
                e.id,
                e.target.dim()
            )));
        }
        optimizer.config = settings.optimizer.clone();
        Ok(Self {
            model,
            entries,
            texts,
            settings,
            run_config,
            optimizer,
            state,
            order: (u64::MAX, Vec::new()),
        })
    }

    pub fn model(&self) -> &GeoSam {
        &self.model
    }

    pub fn into_model(self) -> GeoSam {
        self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Step at which this invocation stops.
    pub fn stop_step(&self) -> u64 {
        self.settings
            .max_steps
            .map_or(self.state.total_steps, |m| m.min(self.state.total_steps))
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.order.0 != epoch {
            let mut idx: Vec<usize> = (0..self.entries.len()).collect();
            idx.shuffle(&mut rng_for(self.settings.seed, &[stream::SHUFFLE, epoch]));
            self.order = (epoch, idx);
        }
        &self.order.1
    }

    /// Point prompts for image `index` in `epoch`; empty sets when points
    /// are disabled.
    pub fn prompts_for(&self, index: usize, epoch: u64) -> Result<Vec<PointPromptSet>> {
        let catalog = &self.model.catalog;
        if !self.settings.use_points {
            return Ok(catalog
                .groups()
                .iter()
                .enumerate()
                .map(|(c, g)| PointPromptSet::empty(g.clone(), c))
                .collect());
        }
        let cfg = SamplingConfig {
            k_fg: self.settings.k_fg,
            k_bg: self.settings.k_bg,
            seed: derive_seed(self.settings.seed, &[stream::POINTS, epoch, index as u64]),
        };
        generate_class_prompts(&self.entries[index].pseudo, catalog, &cfg)
    }

    /// Loss and trainable-parameter gradients for one image.
    pub fn sample_loss(&self, index: usize, epoch: u64) -> Result<(f64, Vec<(String, Array2<f64>)>)> {
        let sets = self.prompts_for(index, epoch)?;
        let inputs = self.model.class_inputs(&sets, self.texts.as_deref())?;
        let entry = &self.entries[index];
        let mut b = Binder::new(&self.model.store)?;
        let logits = self.model.forward_on(&mut b, &entry.embedding, &inputs)?;
        let probs = b.tape.sigmoid(logits);
        let s = unstack(b.tape.value(probs), inputs.len());
        let (loss, grad) = dice_focal_with_grad(s.view(), entry.target.view(), &self.settings.loss)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.state.step,
                detail: format!(
                    "image `{}` (epoch {epoch}); probability range [{:.3e}, {:.3e}]",
                    entry.id,
                    s.iter().cloned().fold(f64::INFINITY, f64::min),
                    s.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                ),
            });
        }
        let root = b.tape.scalar(probs, loss, stack(&grad));
        Ok((loss, b.gradients(root)))
    }

    /// One optimizer update over `grad_accum` images.
    pub fn step(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        let n = self.entries.len() as u64;
        let accum = self.settings.grad_accum;
        let mut total: Vec<(String, Array2<f64>)> = Vec::new();
        let mut loss_sum = 0.0;
        let first = self.state.step * accum as u64;
        for j in 0..accum as u64 {
            let k = first + j;
            let epoch = k / n;
            let index = self.epoch_order(epoch)[(k % n) as usize];
            let (loss, grads) = self.sample_loss(index, epoch)?;
            loss_sum += loss;
            if total.is_empty() {
                total = grads;
            } else {
                for ((tn, tg), (gn, g)) in total.iter_mut().zip(&grads) {
                    debug_assert_eq!(tn, gn);
                    *tg += g;
                }
            }
        }
        if accum > 1 {
            for (_, g) in &mut total {
                *g /= accum as f64;
            }
        }
        let lr = cosine_lr(
            self.state.step,
            self.state.total_steps,
            self.settings.optimizer.lr_max,
            self.settings.optimizer.lr_min,
        );
        self.optimizer.step(&mut self.model.store, &total, lr)?;
        let loss = loss_sum / accum as f64;
        let record = StepRecord {
            step: self.state.step,
            epoch: first / n,
            lr,
            loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        let st = &mut self.state;
        st.step += 1;
        st.optimizer_t = self.optimizer.t;
        st.epoch_loss_sum += loss_sum;
        st.epoch_loss_count += accum as u64;
        let epoch_now = st.step * accum as u64 / n;
        if epoch_now > st.epoch {
            let mean = st.epoch_loss_sum / st.epoch_loss_count as f64;
            if st.best_loss.is_none_or(|b| mean < b) {
                st.best_loss = Some(mean);
                st.best_epoch = Some(st.epoch);
            }
            st.epoch = epoch_now;
            st.epoch_loss_sum = 0.0;
            st.epoch_loss_count = 0;
        }
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(
            self.run_config.clone(),
            serde_json::to_value(&self.state).expect("state serializes"),
            self.optimizer.state_tensors(),
        )
    }

    /// Trains until [`Trainer::stop_step`]. With an output directory, appends
    /// to `train_log.jsonl` and writes `final.ckpt`, `best.ckpt` (lowest
    /// epoch-mean loss) and periodic `last.ckpt`.
    pub fn run(&mut self, out_dir: Option<&Path>, observer: &mut dyn FnMut(&StepRecord, &GeoSam)) -> Result<TrainSummary> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::at(dir, e.into()))?;
                let path = dir.join("train_log.jsonl");
                let f: File = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::at(&path, e.into()))?;
                Some((path, BufWriter::new(f)))
            }
            None => None,
        };
        let stop = self.stop_step();
        let mut losses = Vec::new();
        while self.state.step < stop {
            let best_before = self.state.best_epoch;
            let rec = self.step()?;
            losses.push(rec.loss);
            observer(&rec, &self.model);
            if rec.step % 100 == 0 {
                info!("step {} epoch {} lr {:.3e} loss {:.5}", rec.step, rec.epoch, rec.lr, rec.loss);
            }
            if let Some((path, w)) = &mut log {
                serde_json::to_writer(&mut *w, &rec)
                    .map_err(Error::from)
                    .and_then(|_| w.write_all(b"\n").map_err(Error::from))
                    .map_err(|e| Error::at(path.as_path(), e))?;
            }
            if let Some(dir) = out_dir {
                if self.state.best_epoch != best_before {
                    self.checkpoint().write(&dir.join("best.ckpt"))?;
                }
                let every = self.settings.checkpoint_every;
                if every > 0 && self.state.step % every == 0 {
                    self.checkpoint().write(&dir.join("last.ckpt"))?;
                }
            }
        }
        if let Some((path, w)) = &mut log {
            w.flush().map_err(|e| Error::at(path.as_path(), e.into()))?;
        }
        let final_path = match out_dir {
            Some(dir) => {
                let p = dir.join("final.ckpt");
                self.checkpoint().write(&p)?;
                Some(p)
            }
            None => None,
        };
        Ok(TrainSummary { losses, final_path })
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// Loss per step taken in this invocation.
    pub losses: Vec<f64>,
    pub final_path: Option<PathBuf>,
}
