//! Run configuration: one JSON document with a section per stage. Every
//! field has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use geosam::geodata::SceneSpec;
use geosam::loss::LossConfig;
use geosam::model::ModelConfig;
use geosam::morph::MorphConfig;
use geosam::points::SamplingConfig;
use geosam::train::{EvalSettings, OptimizerConfig, TrainSettings};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Relative paths resolve against this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "GEOSAM_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub k_fg: usize,
    pub k_bg: usize,
    /// Text prompt file (`[class]` sections); built-in prompts when absent.
    pub text_file: Option<PathBuf>,
    pub t_n: usize,
    pub use_points: bool,
    pub use_text: bool,
}

impl Default for PromptSection {
    fn default() -> Self {
        let s = SamplingConfig::default();
        Self {
            k_fg: s.k_fg,
            k_bg: s.k_bg,
            text_file: None,
            t_n: 4,
            use_points: true,
            use_text: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub epochs: u64,
    pub max_steps: Option<u64>,
    pub grad_accum: usize,
    pub checkpoint_every: u64,
    pub skip_budget: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let t = TrainSettings::default();
        Self {
            epochs: t.epochs,
            max_steps: t.max_steps,
            grad_accum: t.grad_accum,
            checkpoint_every: t.checkpoint_every,
            skip_budget: t.skip_budget,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessSection {
    pub enabled: bool,
    pub threshold: f64,
    pub morph: MorphConfig,
}

impl Default for PostprocessSection {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold: 0.5,
            morph: MorphConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    /// Scenes written by `synth`.
    pub synth_count: usize,
    pub synth_split: String,
    pub scene: SceneSpec,
    /// Pseudo-label corruption rate used by `pseudo`.
    pub pseudo_rate: f64,
    pub embedding_cache: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_manifest: PathBuf::from("data/train/manifest.json"),
            eval_manifest: PathBuf::from("data/test/manifest.json"),
            synth_count: 16,
            synth_split: "train".into(),
            scene: SceneSpec::default(),
            pseudo_rate: 0.1,
            embedding_cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub prompts: PromptSection,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleSection,
    pub postprocess: PostprocessSection,
    pub data: DataSection,
    /// Run directory for checkpoints, logs and reports.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            prompts: PromptSection::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::desk(),
            schedule: ScheduleSection::default(),
            postprocess: PostprocessSection::default(),
            data: DataSection::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies `key.path=json`
    /// overrides. Non-JSON override values are taken as strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => serde_json::to_value(Self::default())?,
        };
        for o in overrides {
            let Some((key, raw)) = o.split_once('=') else {
                bail!("override `{o}` must look like section.key=value");
            };
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: Self = serde_json::from_value(doc).context("invalid run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> geosam::Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.data.scene.validate()?;
        if !(0.0..1.0).contains(&self.data.pseudo_rate) {
            return Err(geosam::Error::InvalidArgument(format!(
                "data.pseudo_rate must be in [0, 1), got {}",
                self.data.pseudo_rate
            )));
        }
        if self.schedule.grad_accum == 0 {
            return Err(geosam::Error::InvalidArgument("schedule.grad_accum must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.schedule.epochs,
            max_steps: self.schedule.max_steps,
            grad_accum: self.schedule.grad_accum,
            k_fg: self.prompts.k_fg,
            k_bg: self.prompts.k_bg,
            use_points: self.prompts.use_points,
            skip_budget: self.schedule.skip_budget,
            checkpoint_every: self.schedule.checkpoint_every,
            seed: self.seed,
            loss: self.loss.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            threshold: self.postprocess.threshold,
            postprocess: self.postprocess.enabled.then(|| self.postprocess.morph.clone()),
        }
    }
}

/// Resolves `p` against `$GEOSAM_OUTPUT_ROOT` when relative.
pub fn resolve(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> anyhow::Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            bail!("override `{key}`: `{}` is not a section", parts[..i].join("."));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_overrides() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        let c = RunConfig::load(
            None,
            &["seed=7".into(), "optimizer.lr_max=0.01".into(), "output_dir=runs/x".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.optimizer.lr_max, 0.01);
        assert_eq!(c.output_dir, PathBuf::from("runs/x"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::load(None, &["optimizer.momentum=0.5".into()]).is_err());
        assert!(RunConfig::load(None, &["bogus=1".into()]).is_err());
        assert!(RunConfig::load(None, &["data.pseudo_rate=1.0".into()]).is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"schedule": {"epochs": 3}}"#).unwrap();
        let c = RunConfig::load(Some(&p), &[]).unwrap();
        assert_eq!(c.schedule.epochs, 3);
        assert_eq!(c.model, ModelConfig::default());
    }
}
