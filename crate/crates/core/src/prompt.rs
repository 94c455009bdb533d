//! Prompt embeddings: Fourier-encoded point prompts, projected text prompts,
//! and their row-wise fusion into the decoder's prompt tokens.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::params::{fan_in_uniform, normal, Binder, ParamStore, Tag};
use crate::points::{PointLabel, PointPromptSet};
use crate::raster::ClassCatalog;
use crate::tape::Var;
use crate::{Error, Result};

/// Feature width of the text encoder output.
pub const TEXT_DIM: usize = 512;

pub const PE_GAUSSIAN: &str = "prompt.pe_gaussian";
pub const LABEL_FG: &str = "prompt.label_fg";
pub const LABEL_BG: &str = "prompt.label_bg";
pub const TEXT_PROJ: &str = "prompt.text_proj";

pub fn class_embed_name(group: &str) -> String {
    format!("prompt.class_embed.{group}")
}

/// Maps a string to a fixed-width real vector. Must be deterministic.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Array1<f64>>;
}

/// Stand-in for a pretrained text model: the SHA-256 digest of the string
/// seeds a ChaCha8 stream of standard-normal draws.
#[derive(Debug, Clone, Copy)]
pub struct StubTextEncoder {
    pub dim: usize,
}

impl Default for StubTextEncoder {
    fn default() -> Self {
        Self { dim: TEXT_DIM }
    }
}

impl TextEncoder for StubTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Array1<f64>> {
        stub_text_encode(text, self.dim)
    }
}

pub fn stub_text_encode(text: &str, dim: usize) -> Result<Array1<f64>> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("text prompt is empty".into()));
    }
    let digest: [u8; 32] = Sha256::digest(text.as_bytes()).into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    Ok(Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng)))
}

/// Text prompts for one foreground group, each shaped `"<Class>: description."`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPromptSet {
    pub class: String,
    pub prompts: Vec<String>,
}

impl TextPromptSet {
    /// The part before the first `:` must start with the group name
    /// (case-insensitive), so `"Roads: ..."` fits group `road`.
    pub fn new(class: impl Into<String>, prompts: Vec<String>) -> Result<Self> {
        let class = class.into();
        if prompts.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no text prompts for class `{class}`"
            )));
        }
        for p in &prompts {
            let prefix = p.split_once(':').map(|(a, _)| a.trim().to_lowercase());
            match prefix {
                Some(pre) if pre.starts_with(&class.to_lowercase()) => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "prompt {p:?} does not start with `{class}:`"
                    )))
                }
            }
        }
        Ok(Self { class, prompts })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Parses a prompt file: `[group]` section headers, one prompt per line,
/// blank lines and `#` comments ignored.
pub fn parse_text_prompts(src: &str) -> Result<Vec<TextPromptSet>> {
    let mut sections: Vec<(String, Vec<String>)> = Vec::new();
    for (n, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if sections.iter().any(|(g, _)| g == name) {
                return Err(Error::InvalidArgument(format!(
                    "line {}: duplicate section [{name}]",
                    n + 1
                )));
            }
            sections.push((name.to_string(), Vec::new()));
            continue;
        }
        match sections.last_mut() {
            Some((_, prompts)) => prompts.push(line.to_string()),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "line {}: prompt before any [section] header",
                    n + 1
                )))
            }
        }
    }
    sections
        .into_iter()
        .map(|(class, prompts)| TextPromptSet::new(class, prompts))
        .collect()
}

pub fn load_text_prompts(path: &Path) -> Result<Vec<TextPromptSet>> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::at(path, e.into()))?;
    parse_text_prompts(&src).map_err(|e| Error::at(path, e))
}

/// Built-in prompt file used when none is configured.
pub const DEFAULT_TEXT_PROMPTS: &str = "\
[road]
Roads: paved surfaces, vehicle lanes.
Roads: dark asphalt strips, lane markings.
Roads: wide gray corridors, intersections.
Roads: long smooth paths, traffic routes.

[pedestrian]
Pedestrian paths: narrow pale walkways, curbs.
Pedestrian crossings: striped white bands.
Pedestrian sidewalks: light strips beside streets.
Pedestrian walkways: thin concrete edges, corners.
";

/// One prompt set per catalog group in channel order, trimmed to `t_n`.
pub fn prompts_for_catalog(
    sets: &[TextPromptSet],
    catalog: &ClassCatalog,
    t_n: usize,
) -> Result<Vec<TextPromptSet>> {
    if t_n == 0 {
        return Err(Error::InvalidArgument("t_n must be at least 1".into()));
    }
    catalog
        .groups()
        .iter()
        .map(|g| {
            let set = sets.iter().find(|s| &s.class == g).ok_or_else(|| {
                Error::InvalidArgument(format!("no text prompts for class `{g}`"))
            })?;
            if set.len() < t_n {
                return Err(Error::InvalidArgument(format!(
                    "class `{g}` has {} text prompts, {t_n} required",
                    set.len()
                )));
            }
            Ok(TextPromptSet {
                class: g.clone(),
                prompts: set.prompts[..t_n].to_vec(),
            })
        })
        .collect()
}

/// Raw encoder outputs for a prompt set, `t_n x text_dim`. These do not
/// depend on any parameter and can be computed once per run.
pub fn raw_text_features(set: &TextPromptSet, enc: &dyn TextEncoder) -> Result<Array2<f64>> {
    let rows: Vec<Array1<f64>> = set
        .prompts
        .iter()
        .map(|t| enc.encode(t))
        .collect::<Result<_>>()?;
    let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Raw text features per catalog group, in channel order.
pub fn catalog_text_features(
    sets: &[TextPromptSet],
    catalog: &ClassCatalog,
    t_n: usize,
    enc: &dyn TextEncoder,
) -> Result<Vec<Array2<f64>>> {
    prompts_for_catalog(sets, catalog, t_n)?
        .iter()
        .map(|s| raw_text_features(s, enc))
        .collect()
}

/// Registers the prompt-path parameters: frozen positional frequencies and
/// label vectors, trainable class embeddings and text projection.
pub fn register_params(
    store: &mut ParamStore,
    groups: &[String],
    d_model: usize,
    text_dim: usize,
    seed: u64,
) -> Result<()> {
    if d_model % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "d_model must be even, got {d_model}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.insert(PE_GAUSSIAN, Tag::Frozen, normal(&mut rng, 2, d_model / 2, 1.0))?;
    store.insert(LABEL_FG, Tag::Frozen, normal(&mut rng, 1, d_model, 1.0))?;
    store.insert(LABEL_BG, Tag::Frozen, normal(&mut rng, 1, d_model, 1.0))?;
    for g in groups {
        store.insert(class_embed_name(g), Tag::Trainable, normal(&mut rng, 1, text_dim, 1.0))?;
    }
    store.insert(TEXT_PROJ, Tag::Trainable, fan_in_uniform(&mut rng, text_dim, d_model))?;
    Ok(())
}

/// Random Fourier features of coordinates already normalized to `[0, 1]`.
/// `coords` is `n x 2` holding `(x, y)`.
pub fn fourier_features(gaussian: &Array2<f64>, coords: &Array2<f64>) -> Array2<f64> {
    let proj = (coords * 2.0 - 1.0).dot(gaussian) * (2.0 * PI);
    concatenate![Axis(1), proj.mapv(f64::sin), proj.mapv(f64::cos)]
}

/// Positional encoding of every cell center of an `h x w` grid, row-major.
pub fn dense_pe(store: &ParamStore, h: usize, w: usize) -> Array2<f64> {
    let coords = Array2::from_shape_fn((h * w, 2), |(i, j)| {
        if j == 0 {
            ((i % w) as f64 + 0.5) / w as f64
        } else {
            ((i / w) as f64 + 0.5) / h as f64
        }
    });
    fourier_features(store.value(PE_GAUSSIAN), &coords)
}

/// `k x d_model` point embeddings: Fourier features of the pixel centers
/// plus the foreground or background label vector.
pub fn encode_points(
    store: &ParamStore,
    points: &PointPromptSet,
    height: usize,
    width: usize,
) -> Result<Array2<f64>> {
    let pts: Vec<_> = points.points().collect();
    for p in &pts {
        if p.x >= width || p.y >= height {
            return Err(Error::PointOutOfBounds {
                x: p.x,
                y: p.y,
                width,
                height,
            });
        }
    }
    let coords = Array2::from_shape_fn((pts.len(), 2), |(i, j)| {
        if j == 0 {
            (pts[i].x as f64 + 0.5) / width as f64
        } else {
            (pts[i].y as f64 + 0.5) / height as f64
        }
    });
    let mut out = fourier_features(store.value(PE_GAUSSIAN), &coords);
    let fg = store.value(LABEL_FG).row(0).to_owned();
    let bg = store.value(LABEL_BG).row(0).to_owned();
    for (mut row, p) in out.rows_mut().into_iter().zip(&pts) {
        row += match p.label {
            PointLabel::Foreground => &fg,
            PointLabel::Background => &bg,
        };
    }
    Ok(out)
}

/// Text embeddings on the tape: `normalize(raw + E_cls) · W_t`.
pub fn encode_texts_on(binder: &mut Binder, group: &str, raw: &Array2<f64>) -> Result<Var> {
    let e_cls = binder.param(&class_embed_name(group));
    let w_t = binder.param(TEXT_PROJ);
    let cls_row = binder.tape.value(e_cls).row(0).to_owned();
    for (i, row) in raw.rows().into_iter().enumerate() {
        let norm = (&row + &cls_row).mapv(|v| v * v).sum().sqrt();
        if !(norm >= 1e-12) {
            return Err(Error::DegenerateText(format!(
                "class `{group}` prompt {i} has norm {norm:e}"
            )));
        }
    }
    let raw = binder.tape.constant(raw.clone());
    let summed = binder.tape.add_row(raw, e_cls);
    let normed = binder.tape.l2_normalize_rows(summed);
    Ok(binder.tape.matmul(normed, w_t))
}

/// Text embeddings as plain values (`t_n x d_model`).
pub fn encode_texts(store: &ParamStore, group: &str, raw: &Array2<f64>) -> Result<Array2<f64>> {
    let mut b = Binder::new(store)?;
    let v = encode_texts_on(&mut b, group, raw)?;
    Ok(b.tape.value(v).clone())
}

/// Point rows followed by text rows.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPromptEmbedding {
    pub matrix: Array2<f64>,
    /// Index of the first text row.
    pub boundary: usize,
}

impl JointPromptEmbedding {
    pub fn points(&self) -> ndarray::ArrayView2<'_, f64> {
        self.matrix.slice(s![..self.boundary, ..])
    }

    pub fn texts(&self) -> ndarray::ArrayView2<'_, f64> {
        self.matrix.slice(s![self.boundary.., ..])
    }
}

pub fn fuse_prompts(tx: &Array2<f64>, tt: &Array2<f64>) -> Result<JointPromptEmbedding> {
    if tx.ncols() != tt.ncols() {
        return Err(Error::Shape(format!(
            "point embedding width {} vs text embedding width {}",
            tx.ncols(),
            tt.ncols()
        )));
    }
    Ok(JointPromptEmbedding {
        matrix: concatenate![Axis(0), *tx, *tt],
        boundary: tx.nrows(),
    })
}
