//! Foreground/background point prompts sampled from a
//! pseudo-label map, one prompt set per foreground group.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{decompose_pseudo_label, BinaryMask, ClassCatalog, LabelMap};
use crate::seed::{rng_for, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Foreground,
    Background,
}

/// Pixel coordinate (`x` = column, `y` = row) with its prompt label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: usize,
    pub y: usize,
    pub label: PointLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub k_fg: usize,
    pub k_bg: usize,
    pub seed: u64,
}

impl SamplingConfig {
    /// Counts used at 1024x1024: 2000 foreground, 1000 background.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            k_fg: 2000,
            k_bg: 1000,
            seed,
        }
    }

    /// Scales the 1024x1024 counts by image area, keeping the 2:1 ratio.
    /// 128x128 gives 32 foreground and 16 background points.
    pub fn scaled_for(height: usize, width: usize, seed: u64) -> Self {
        let area = (height * width) as f64 / (1024.0 * 1024.0);
        let k_bg = (1000.0 * area).ceil().max(1.0) as usize;
        Self {
            k_fg: 2 * k_bg,
            k_bg,
            seed,
        }
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self::scaled_for(128, 128, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingWarning {
    EmptyForeground,
    EmptyBackground,
}

/// Prompts for one foreground group. Coordinates are `[x, y]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointPromptSet {
    pub class: String,
    pub channel: usize,
    pub foreground: Vec<[usize; 2]>,
    pub background: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<SamplingWarning>,
}

impl PointPromptSet {
    pub fn empty(class: impl Into<String>, channel: usize) -> Self {
        Self {
            class: class.into(),
            channel,
            foreground: Vec::new(),
            background: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.foreground.len() + self.background.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Foreground points first, then background.
    pub fn points(&self) -> impl Iterator<Item = PointPrompt> + '_ {
        let fg = self.foreground.iter().map(|&[x, y]| PointPrompt {
            x,
            y,
            label: PointLabel::Foreground,
        });
        let bg = self.background.iter().map(|&[x, y]| PointPrompt {
            x,
            y,
            label: PointLabel::Background,
        });
        fg.chain(bg)
    }
}

fn set_pixels(mask: &BinaryMask) -> Vec<[usize; 2]> {
    mask.indexed_iter()
        .filter(|(_, &b)| b)
        .map(|((r, c), _)| [c, r])
        .collect()
}

fn draw<R: Rng>(rng: &mut R, pool: &[[usize; 2]], k: usize) -> Vec<[usize; 2]> {
    (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

/// Uniform sampling with replacement: `k_fg` points on `fg`, `k_bg` on `bg`.
/// An empty mask yields an empty list plus a warning instead of an error.
pub fn sample_points(
    fg: &BinaryMask,
    bg: &BinaryMask,
    config: &SamplingConfig,
) -> Result<PointPromptSet> {
    sample_points_with(fg, bg, config.k_fg, config.k_bg, config.seed)
}

fn sample_points_with(
    fg: &BinaryMask,
    bg: &BinaryMask,
    k_fg: usize,
    k_bg: usize,
    seed: u64,
) -> Result<PointPromptSet> {
    if fg.dim() != bg.dim() {
        return Err(Error::Shape(format!(
            "foreground mask {:?} vs background mask {:?}",
            fg.dim(),
            bg.dim()
        )));
    }
    if fg.iter().zip(bg.iter()).any(|(&a, &b)| a && b) {
        return Err(Error::InvalidArgument(
            "foreground and background masks overlap".into(),
        ));
    }
    let mut rng = rng_for(seed, &[stream::POINTS]);
    let mut set = PointPromptSet::empty("", 0);
    let fg_pool = set_pixels(fg);
    let bg_pool = set_pixels(bg);
    if k_fg > 0 {
        if fg_pool.is_empty() {
            set.warnings.push(SamplingWarning::EmptyForeground);
        } else {
            set.foreground = draw(&mut rng, &fg_pool, k_fg);
        }
    }
    if k_bg > 0 {
        if bg_pool.is_empty() {
            set.warnings.push(SamplingWarning::EmptyBackground);
        } else {
            set.background = draw(&mut rng, &bg_pool, k_bg);
        }
    }
    Ok(set)
}

/// One prompt set per foreground group of `catalog`, all sharing the
/// background mask. Each group draws from its own seed stream.
pub fn generate_class_prompts(
    pseudo: &LabelMap,
    catalog: &ClassCatalog,
    config: &SamplingConfig,
) -> Result<Vec<PointPromptSet>> {
    let parts = decompose_pseudo_label(pseudo, catalog)?;
    catalog
        .groups()
        .iter()
        .enumerate()
        .map(|(channel, group)| {
            let seed = crate::seed::derive_seed(config.seed, &[channel as u64]);
            let mut set = sample_points_with(
                &parts.foreground[channel],
                &parts.background,
                config.k_fg,
                config.k_bg,
                seed,
            )?;
            for w in &set.warnings {
                warn!("class `{group}`: {w:?}; continuing with the remaining prompts");
            }
            set.class = group.clone();
            set.channel = channel;
            Ok(set)
        })
        .collect()
}
