mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use geosam::geodata::{write_pseudo_labels, write_synthetic_dataset, DatasetManifest, LoadedEntry};
use geosam::model::{Checkpoint, GeoSam, ModelConfig};
use geosam::morph::refine;
use geosam::prompt::{catalog_text_features, load_text_prompts, parse_text_prompts, StubTextEncoder, DEFAULT_TEXT_PROMPTS};
use geosam::raster::png_io::{read_binary_mask, read_label_map, read_rgb, write_binary_mask, write_rgb};
use geosam::raster::{binarize, ClassCatalog, MultiChannelMask, RasterImage};
use geosam::seed::derive_seed;
use geosam::train::{
    evaluate, load_with_budget, prepare_entries, ModelPredictor, Predictor, Trainer,
};
use log::info;
use ndarray::Array2;
use serde_json::{json, Value};

use config::{resolve, RunConfig};

#[derive(Parser)]
#[command(name = "geosam", version, about = "Prompted decoder fine-tuning for road and pedestrian segmentation")]
struct Cli {
    /// JSON run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set optimizer.lr_max=0.001`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the fully resolved configuration.
    Config,
    /// Generate synthetic scenes, ground-truth masks and a manifest.
    Synth {
        /// Dataset directory; defaults to the directory of the split's manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        /// Split tag, `train` or `test`.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write simulated pseudo-labels for every manifest entry.
    Pseudo {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Fine-tune the decoder.
    Train {
        /// Train without text prompts.
        #[arg(long)]
        no_text: bool,
        /// Train without point prompts.
        #[arg(long)]
        no_points: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        no_postprocess: bool,
        /// Report path; defaults to `<output_dir>/eval_report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Segment one image and write per-class masks plus a color overlay.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Pseudo-label PNG to sample point prompts from.
        #[arg(long)]
        pseudo: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply the configured morphological refinement to a binary mask PNG.
    Postprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = err
                .chain()
                .find_map(|e| e.downcast_ref::<geosam::Error>())
                .map_or("config", geosam::Error::category);
            let message = format!("{err:#}");
            eprintln!("{}", json!({"error": {"category": category, "message": message}}));
            ExitCode::from(exit_code(category))
        }
    }
}

fn exit_code(category: &str) -> u8 {
    match category {
        "config" => 2,
        "data" => 3,
        "io" => 4,
        "model" => 5,
        "numeric" => 6,
        "prompt" => 7,
        "metric" => 8,
        "geo" => 9,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
        Command::Synth {
            out,
            count,
            split,
            seed,
        } => cmd_synth(&cfg, out, count, split, seed),
        Command::Pseudo { manifest, rate } => cmd_pseudo(&cfg, manifest, rate),
        Command::Train {
            no_text,
            no_points,
            resume,
            out,
        } => cmd_train(cfg, no_text, no_points, resume, out),
        Command::Eval {
            checkpoint,
            manifest,
            no_postprocess,
            report,
            csv,
        } => cmd_eval(cfg, &checkpoint, manifest, no_postprocess, report, csv),
        Command::Infer {
            checkpoint,
            image,
            pseudo,
            out,
        } => cmd_infer(&cfg, &checkpoint, &image, pseudo, out),
        Command::Postprocess { input, output } => cmd_postprocess(&cfg, &input, &output),
    }
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| geosam::Error::Io(e)).with_context(|| format!("writing {}", path.display()))
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn cmd_synth(
    cfg: &RunConfig,
    out: Option<PathBuf>,
    count: Option<usize>,
    split: Option<String>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let split = split.unwrap_or_else(|| cfg.data.synth_split.clone());
    let dir = match out {
        Some(d) => resolve(&d),
        None if split == "train" => manifest_dir(&resolve(&cfg.data.train_manifest)),
        None => manifest_dir(&resolve(&cfg.data.eval_manifest)),
    };
    let count = count.unwrap_or(cfg.data.synth_count);
    let seed = seed.unwrap_or(cfg.seed);
    // Splits draw from disjoint seed streams.
    let split_tag = split.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
    let m = write_synthetic_dataset(&dir, &split, &split, count, &cfg.data.scene, derive_seed(seed, &[split_tag]))?;
    let mut echo = cfg.to_value();
    echo["synth"] = json!({"split": split, "count": count, "seed": seed});
    write_json(&dir.join("synth_config.json"), &echo)?;
    info!("wrote {} scenes to {}", m.entries.len(), dir.display());
    Ok(())
}

fn cmd_pseudo(cfg: &RunConfig, manifest: Option<PathBuf>, rate: Option<f64>) -> anyhow::Result<()> {
    let path = resolve(&manifest.unwrap_or_else(|| cfg.data.train_manifest.clone()));
    let rate = rate.unwrap_or(cfg.data.pseudo_rate);
    let mut m = DatasetManifest::load(&path)?;
    write_pseudo_labels(&mut m, rate, cfg.seed)?;
    let mut echo = cfg.to_value();
    echo["pseudo"] = json!({"manifest": path, "rate": rate});
    write_json(&m.root.join("pseudo_config.json"), &echo)?;
    info!("wrote {} pseudo-labels (rate {rate})", m.entries.len());
    Ok(())
}

fn text_features(cfg: &RunConfig, catalog: &ClassCatalog) -> anyhow::Result<Option<Vec<Array2<f64>>>> {
    if !cfg.prompts.use_text {
        return Ok(None);
    }
    let sets = match &cfg.prompts.text_file {
        Some(p) => load_text_prompts(&resolve(p))?,
        None => parse_text_prompts(DEFAULT_TEXT_PROMPTS)?,
    };
    let enc = StubTextEncoder {
        dim: cfg.model.text_dim,
    };
    Ok(Some(catalog_text_features(&sets, catalog, cfg.prompts.t_n, &enc)?))
}

fn cmd_train(
    mut cfg: RunConfig,
    no_text: bool,
    no_points: bool,
    resume: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    if no_text {
        cfg.prompts.use_text = false;
    }
    if no_points {
        cfg.prompts.use_points = false;
    }
    if !cfg.prompts.use_text && !cfg.prompts.use_points {
        bail!(geosam::Error::InvalidArgument("at least one prompt type must stay enabled".into()));
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let out_dir = resolve(&cfg.output_dir);
    let manifest = DatasetManifest::load(&resolve(&cfg.data.train_manifest))?;
    let loaded = load_with_budget(&manifest, cfg.schedule.skip_budget)?;
    let settings = cfg.train_settings();
    let run_config = cfg.to_value();
    write_json(&out_dir.join("run_config.json"), &run_config)?;
    let cache = cfg.data.embedding_cache.as_ref().map(|p| resolve(p));
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::read(&resolve(&path))?;
            check_model_config(&cfg.model, &ckpt.header.model)?;
            let model = GeoSam::from_checkpoint(&ckpt)?;
            let texts = text_features(&cfg, &model.catalog)?;
            let entries = prepare_entries(&model, loaded, cache.as_deref())?;
            Trainer::resume(&ckpt, entries, texts, settings, run_config)?
        }
        None => {
            let model = GeoSam::new(cfg.model.clone(), manifest.catalog.clone(), cfg.seed)?;
            let texts = text_features(&cfg, &model.catalog)?;
            let entries = prepare_entries(&model, loaded, cache.as_deref())?;
            Trainer::new(model, entries, texts, settings, run_config)?
        }
    };
    info!(
        "training steps {}..{} of {}",
        trainer.state().step,
        trainer.stop_step(),
        trainer.state().total_steps
    );
    let summary = trainer.run(Some(&out_dir), &mut |_, _| {})?;
    if let Some(p) = summary.final_path {
        info!("final checkpoint {}", p.display());
    }
    Ok(())
}

/// Rejects a config whose model section disagrees with a checkpoint,
/// naming every differing field.
fn check_model_config(want: &ModelConfig, have: &ModelConfig) -> anyhow::Result<()> {
    let (a, b) = (serde_json::to_value(want)?, serde_json::to_value(have)?);
    let (Value::Object(a), Value::Object(b)) = (a, b) else {
        unreachable!("model config is an object")
    };
    let diffs: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("model.{k}: config {v}, checkpoint {}", b.get(k).unwrap_or(&Value::Null)))
        .collect();
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(geosam::Error::ConfigMismatch(diffs.join("; ")).into())
    }
}

/// Prompt modality recorded at training time wins over the current config.
fn trained_modality(cfg: &mut RunConfig, ckpt: &Checkpoint) {
    let prompts = &ckpt.header.run_config["prompts"];
    if let Some(b) = prompts["use_text"].as_bool() {
        cfg.prompts.use_text = b;
    }
    if let Some(b) = prompts["use_points"].as_bool() {
        cfg.prompts.use_points = b;
    }
}

fn load_model(cfg: &mut RunConfig, checkpoint: &Path) -> anyhow::Result<GeoSam> {
    let ckpt = Checkpoint::read(&resolve(checkpoint))?;
    check_model_config(&cfg.model, &ckpt.header.model)?;
    trained_modality(cfg, &ckpt);
    Ok(GeoSam::from_checkpoint(&ckpt)?)
}

fn cmd_eval(
    mut cfg: RunConfig,
    checkpoint: &Path,
    manifest: Option<PathBuf>,
    no_postprocess: bool,
    report: Option<PathBuf>,
    csv: Option<PathBuf>,
) -> anyhow::Result<()> {
    if no_postprocess {
        cfg.postprocess.enabled = false;
    }
    let model = load_model(&mut cfg, checkpoint)?;
    let path = resolve(&manifest.unwrap_or_else(|| cfg.data.eval_manifest.clone()));
    let m = DatasetManifest::load(&path)?;
    let entries: Vec<LoadedEntry> = (0..m.entries.len())
        .map(|i| m.load_entry(i))
        .collect::<geosam::Result<_>>()?;
    let predictor = ModelPredictor {
        model: &model,
        texts: text_features(&cfg, &model.catalog)?,
        use_points: cfg.prompts.use_points,
        k_fg: cfg.prompts.k_fg,
        k_bg: cfg.prompts.k_bg,
        seed: cfg.seed,
    };
    let mut echo = cfg.to_value();
    echo["eval"] = json!({"checkpoint": checkpoint, "manifest": path});
    let r = evaluate(&predictor, &entries, &model.catalog, &cfg.eval_settings(), (&m.name, &m.split), echo)?;
    let report = resolve(&report.unwrap_or_else(|| cfg.output_dir.join("eval_report.json")));
    write_json(&report, &serde_json::to_value(&r)?)?;
    if let Some(csv) = csv {
        let csv = resolve(&csv);
        fs::write(&csv, r.to_csv()).map_err(geosam::Error::Io).with_context(|| format!("writing {}", csv.display()))?;
    }
    for c in &r.per_class {
        info!("{}: IoU {:.4} AP {}", c.class, c.iou, c.ap.map_or("n/a".into(), |v| format!("{v:.4}")));
    }
    info!("mIoU {:.4}; report {}", r.miou, report.display());
    Ok(())
}

/// Blends each predicted class into the image with the catalog color of its
/// representative label (yellow road, blue pedestrian by default).
fn overlay(image: &RasterImage, mask: &MultiChannelMask, catalog: &ClassCatalog) -> geosam::Result<RasterImage> {
    let mut data = image.data().to_vec();
    let w = image.width();
    for ch in 0..mask.num_channels() {
        let color = catalog.entries()[usize::from(catalog.primary_id(ch))].color;
        let m = mask.channel(ch);
        for ((y, x), &v) in m.indexed_iter() {
            if v >= 0.5 {
                for (k, &c) in color.iter().enumerate() {
                    let i = (y * w + x) * 3 + k;
                    data[i] = 0.5 * data[i] + 0.5 * f32::from(c) / 255.0;
                }
            }
        }
    }
    RasterImage::new(image.height(), image.width(), data)
}

fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    image: &Path,
    pseudo: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    let model = load_model(&mut cfg, checkpoint)?;
    let img = read_rgb(&resolve(image))?;
    let s = model.config.image_size;
    if (img.height(), img.width()) != (s, s) {
        bail!(geosam::Error::Shape(format!(
            "model expects {s}x{s} images, {} is {}x{}",
            image.display(),
            img.height(),
            img.width()
        )));
    }
    let pseudo = match &pseudo {
        Some(p) => Some(read_label_map(&resolve(p), &model.catalog)?),
        None => None,
    };
    if pseudo.is_none() && cfg.prompts.use_points {
        if !cfg.prompts.use_text {
            bail!(geosam::Error::InvalidArgument(
                "this checkpoint needs point prompts; pass --pseudo".into()
            ));
        }
        log::warn!("no pseudo-label given; running with text prompts only");
        cfg.prompts.use_points = false;
    }
    let predictor = ModelPredictor {
        model: &model,
        texts: text_features(&cfg, &model.catalog)?,
        use_points: cfg.prompts.use_points,
        k_fg: cfg.prompts.k_fg,
        k_bg: cfg.prompts.k_bg,
        seed: cfg.seed,
    };
    let entry = LoadedEntry {
        id: image.display().to_string(),
        gt: geosam::raster::LabelMap::filled(s, s, model.catalog.background_id()),
        pseudo,
        image: img.clone(),
    };
    let probs = predictor.predict(0, &entry)?;
    let bin = binarize(&probs, cfg.postprocess.threshold)?;
    let masks: Vec<_> = (0..bin.num_channels())
        .map(|c| {
            let m = bin.channel_mask(c);
            if cfg.postprocess.enabled {
                refine(&m, &cfg.postprocess.morph)
            } else {
                m
            }
        })
        .collect();
    let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let dir = resolve(&out.unwrap_or_else(|| cfg.output_dir.join("infer").join(&stem)));
    fs::create_dir_all(&dir).map_err(geosam::Error::Io).with_context(|| format!("creating {}", dir.display()))?;
    for (c, group) in model.catalog.groups().iter().enumerate() {
        write_binary_mask(&dir.join(format!("mask_{group}.png")), &masks[c])?;
    }
    let refined = MultiChannelMask::from_binary_masks(&masks)?;
    write_rgb(&dir.join("overlay.png"), &overlay(&img, &refined, &model.catalog)?)?;
    let mut echo = cfg.to_value();
    echo["infer"] = json!({"checkpoint": checkpoint, "image": image});
    write_json(&dir.join("infer_config.json"), &echo)?;
    info!("wrote {} masks and overlay to {}", masks.len(), dir.display());
    Ok(())
}

fn cmd_postprocess(cfg: &RunConfig, input: &Path, output: &Path) -> anyhow::Result<()> {
    let mask = read_binary_mask(&resolve(input))?;
    let output = resolve(output);
    write_binary_mask(&output, &refine(&mask, &cfg.postprocess.morph))?;
    let mut echo = cfg.to_value();
    echo["postprocess_input"] = json!(input);
    write_json(&output.with_extension("config.json"), &echo)?;
    Ok(())
}
