//! Frozen image encoders and the on-disk embedding cache.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use sha2::{Digest, Sha256};

use super::layers::{self, Registrar};
use super::ModelConfig;
use crate::params::{Binder, ParamStore};
use crate::raster::RasterImage;
use crate::{Error, Result};

/// Grid of `d`-dimensional tokens stored row-major as `(h * w) x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub grid_h: usize,
    pub grid_w: usize,
    pub tokens: Array2<f64>,
}

impl ImageEmbedding {
    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

pub trait ImageEncoder {
    fn encode(&self, image: &RasterImage) -> Result<ImageEmbedding>;
}

/// Per-channel normalization applied before patch embedding.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

pub(crate) fn register<R: Rng>(reg: &mut Registrar<R>, cfg: &ModelConfig) -> Result<()> {
    let d = cfg.d_model;
    let patch_dim = cfg.patch_size * cfg.patch_size * 3;
    reg.linear("encoder.patch", patch_dim, d)?;
    for i in 0..cfg.encoder_blocks {
        let p = format!("encoder.block{i}");
        reg.layer_norm(&format!("{p}.ln1"), d)?;
        reg.attention(&format!("{p}.attn"), d, d)?;
        reg.layer_norm(&format!("{p}.ln2"), d)?;
        reg.mlp(&format!("{p}.mlp"), d, cfg.mlp_hidden, d)?;
    }
    reg.layer_norm("encoder.neck", d)
}

/// Patch embedding followed by pre-norm transformer blocks, all randomly
/// initialized and frozen.
pub struct ToyFrozenEncoder<'a> {
    pub(crate) store: &'a ParamStore,
    pub(crate) config: &'a ModelConfig,
}

impl ToyFrozenEncoder<'_> {
    fn patches(&self, image: &RasterImage) -> Array2<f64> {
        let p = self.config.patch_size;
        let (gh, gw) = self.config.grid();
        let data = image.data();
        let w = image.width();
        Array2::from_shape_fn((gh * gw, p * p * 3), |(n, k)| {
            let (gy, gx) = (n / gw, n % gw);
            let (py, rest) = (k / (p * 3), k % (p * 3));
            let (px, c) = (rest / 3, rest % 3);
            let (y, x) = (gy * p + py, gx * p + px);
            (f64::from(data[(y * w + x) * 3 + c]) - PIXEL_MEAN) / PIXEL_STD
        })
    }
}

impl ImageEncoder for ToyFrozenEncoder<'_> {
    fn encode(&self, image: &RasterImage) -> Result<ImageEmbedding> {
        let s = self.config.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::Shape(format!(
                "encoder expects {s}x{s} images, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        let mut b = Binder::new(self.store)?;
        let x = b.tape.constant(self.patches(image));
        let mut x = layers::linear(&mut b, "encoder.patch", x);
        for i in 0..self.config.encoder_blocks {
            let p = format!("encoder.block{i}");
            let h = layers::layer_norm(&mut b, &format!("{p}.ln1"), x);
            let a = layers::attention(
                &mut b,
                &format!("{p}.attn"),
                h,
                h,
                h,
                self.config.encoder_heads,
            );
            x = b.tape.add(x, a);
            let h = layers::layer_norm(&mut b, &format!("{p}.ln2"), x);
            let m = layers::mlp(&mut b, &format!("{p}.mlp"), h);
            x = b.tape.add(x, m);
        }
        let out = layers::layer_norm(&mut b, "encoder.neck", x);
        let (gh, gw) = self.config.grid();
        Ok(ImageEmbedding {
            grid_h: gh,
            grid_w: gw,
            tokens: b.tape.value(out).clone(),
        })
    }
}

const EMB_MAGIC: &[u8; 8] = b"GSEMB001";

/// Content address of an image under a given encoder: SHA-256 over the
/// encoder fingerprint, the image dimensions and its raw samples.
pub fn embedding_key(fingerprint: &str, image: &RasterImage) -> String {
    let mut h = Sha256::new();
    h.update(fingerprint.as_bytes());
    h.update((image.height() as u64).to_le_bytes());
    h.update((image.width() as u64).to_le_bytes());
    for v in image.data() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_embedding(path: &Path, emb: &ImageEmbedding) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + emb.tokens.len() * 8);
    buf.extend_from_slice(EMB_MAGIC);
    for v in [emb.grid_h, emb.grid_w, emb.dim()] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in emb.tokens.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::at(path, e.into()))?;
    f.write_all(&buf).map_err(|e| Error::at(path, e.into()))
}

pub fn read_embedding(path: &Path) -> Result<ImageEmbedding> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::at(path, e.into()))?;
    let bad = |m: &str| Error::at(path, Error::Checkpoint(m.to_string()));
    if buf.len() < 32 || &buf[..8] != EMB_MAGIC {
        return Err(bad("not an embedding file"));
    }
    let word = |i: usize| u64::from_le_bytes(buf[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
    let (gh, gw, d) = (word(0), word(1), word(2));
    let n = gh * gw * d;
    if buf.len() != 32 + 8 * n {
        return Err(bad("truncated embedding payload"));
    }
    let data: Vec<f64> = buf[32..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ImageEmbedding {
        grid_h: gh,
        grid_w: gw,
        tokens: Array2::from_shape_vec((gh * gw, d), data).expect("length checked"),
    })
}

/// Serves embeddings cached on disk, addressed by [`embedding_key`].
pub struct PrecomputedEmbeddingLoader {
    pub dir: PathBuf,
    pub fingerprint: String,
}

impl PrecomputedEmbeddingLoader {
    pub fn path_for(&self, image: &RasterImage) -> PathBuf {
        self.dir
            .join(format!("{}.emb", embedding_key(&self.fingerprint, image)))
    }

    /// Encodes `image` with `live` and stores the result unless cached.
    pub fn populate(&self, image: &RasterImage, live: &dyn ImageEncoder) -> Result<PathBuf> {
        let path = self.path_for(image);
        if !path.exists() {
            fs::create_dir_all(&self.dir).map_err(|e| Error::at(&self.dir, e.into()))?;
            write_embedding(&path, &live.encode(image)?)?;
        }
        Ok(path)
    }
}

impl ImageEncoder for PrecomputedEmbeddingLoader {
    fn encode(&self, image: &RasterImage) -> Result<ImageEmbedding> {
        read_embedding(&self.path_for(image))
    }
}
