//! The segmentation model: frozen image encoder, prompt path and trainable
//! two-way decoder, all parameters held in one [`ParamStore`].

mod checkpoint;
mod decoder;
mod encoder;
mod layers;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, CheckpointHeader, TensorKind, TensorMeta, CHECKPOINT_VERSION};
pub use decoder::bilinear_matrix;
pub use encoder::{
    embedding_key, read_embedding, write_embedding, ImageEmbedding, ImageEncoder,
    PrecomputedEmbeddingLoader, ToyFrozenEncoder,
};

use crate::params::{Binder, ParamStore, Tag};
use crate::points::PointPromptSet;
use crate::prompt;
use crate::raster::{ClassCatalog, MultiChannelMask, RasterImage};
use crate::seed::{derive_seed, stream};
use crate::tape::Var;
use crate::{Error, Result};
use layers::Registrar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    /// Cross-attention projects into `d_model / attention_downsample` dims.
    pub attention_downsample: usize,
    pub mlp_hidden: usize,
    pub text_dim: usize,
    /// Channels after the first and second 2x upscaling stage.
    pub upscale_channels: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            patch_size: 8,
            d_model: 64,
            encoder_blocks: 1,
            encoder_heads: 4,
            decoder_blocks: 2,
            heads: 4,
            attention_downsample: 2,
            mlp_hidden: 128,
            text_dim: prompt::TEXT_DIM,
            upscale_channels: [16, 8],
        }
    }
}

impl ModelConfig {
    /// Decoder width used with full-size backbones.
    pub fn full_width() -> Self {
        Self {
            d_model: 256,
            heads: 8,
            mlp_hidden: 2048,
            upscale_channels: [64, 32],
            ..Self::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size.max(1);
        (g, g)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad(format!("d_model must be even and positive, got {}", self.d_model));
        }
        let inner = self.d_model / self.attention_downsample.max(1);
        if self.attention_downsample == 0
            || self.d_model % self.attention_downsample != 0
            || self.heads == 0
            || inner % self.heads != 0
            || self.encoder_heads == 0
            || self.d_model % self.encoder_heads != 0
        {
            return bad(format!(
                "d_model {} incompatible with heads {}/{} and downsample {}",
                self.d_model, self.heads, self.encoder_heads, self.attention_downsample
            ));
        }
        if self.upscale_channels.contains(&0) || self.mlp_hidden == 0 || self.text_dim == 0 {
            return bad("upscale_channels, mlp_hidden and text_dim must be positive".into());
        }
        Ok(())
    }
}

/// Conditioning for one output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassInput {
    pub group: String,
    /// Point embeddings, `k x d_model` (`k` may be 0).
    pub points: Array2<f64>,
    /// Raw text-encoder rows, `t_n x text_dim`; `None` disables the text path.
    pub text: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct GeoSam {
    pub config: ModelConfig,
    pub catalog: ClassCatalog,
    pub store: ParamStore,
}

impl GeoSam {
    pub fn new(config: ModelConfig, catalog: ClassCatalog, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::INIT, 0]));
        encoder::register(
            &mut Registrar {
                store: &mut store,
                rng: &mut rng,
                tag: Tag::Frozen,
            },
            &config,
        )?;
        prompt::register_params(
            &mut store,
            catalog.groups(),
            config.d_model,
            config.text_dim,
            derive_seed(seed, &[stream::INIT, 1]),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::INIT, 2]));
        decoder::register(
            &mut Registrar {
                store: &mut store,
                rng: &mut rng,
                tag: Tag::Trainable,
            },
            &config,
        )?;
        Ok(Self {
            config,
            catalog,
            store,
        })
    }

    pub fn encoder(&self) -> ToyFrozenEncoder<'_> {
        ToyFrozenEncoder {
            store: &self.store,
            config: &self.config,
        }
    }

    pub fn encode_image(&self, image: &RasterImage) -> Result<ImageEmbedding> {
        self.encoder().encode(image)
    }

    /// Hash identifying the frozen encoder (config and weights), used to key
    /// cached embeddings.
    pub fn encoder_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for p in self.store.iter().filter(|p| p.name.starts_with("encoder.")) {
            h.update(p.name.as_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        encoder::hex(&h.finalize())
    }

    /// Names of the parameters updated during fine-tuning.
    pub fn trainable_parameters(&self) -> Result<Vec<&str>> {
        self.store.trainable_parameters()
    }

    /// Builds class inputs from per-class point sets (in channel order) and
    /// optional raw text features.
    pub fn class_inputs(
        &self,
        points: &[PointPromptSet],
        texts: Option<&[Array2<f64>]>,
    ) -> Result<Vec<ClassInput>> {
        let groups = self.catalog.groups();
        if points.len() != groups.len() {
            return Err(Error::InvalidArgument(format!(
                "{} point prompt sets for {} classes",
                points.len(),
                groups.len()
            )));
        }
        let s = self.config.image_size;
        groups
            .iter()
            .enumerate()
            .map(|(c, g)| {
                Ok(ClassInput {
                    group: g.clone(),
                    points: prompt::encode_points(&self.store, &points[c], s, s)?,
                    text: texts.map(|t| t[c].clone()),
                })
            })
            .collect()
    }

    /// Logits for all classes stacked along rows: `(C * S) x S`.
    pub fn forward_on(
        &self,
        b: &mut Binder,
        emb: &ImageEmbedding,
        inputs: &[ClassInput],
    ) -> Result<Var> {
        let (gh, gw) = self.config.grid();
        if (emb.grid_h, emb.grid_w, emb.dim()) != (gh, gw, self.config.d_model) {
            return Err(Error::Shape(format!(
                "embedding {}x{}x{} does not match model grid {gh}x{gw}x{}",
                emb.grid_h,
                emb.grid_w,
                emb.dim(),
                self.config.d_model
            )));
        }
        if inputs.len() != self.catalog.num_channels() {
            return Err(Error::InvalidArgument(format!(
                "{} class inputs for {} classes",
                inputs.len(),
                self.catalog.num_channels()
            )));
        }
        let image = b.tape.constant(emb.tokens.clone());
        let pe = b.tape.constant(prompt::dense_pe(&self.store, gh, gw));
        let mut outs = Vec::with_capacity(inputs.len());
        for input in inputs {
            if input.points.ncols() != self.config.d_model {
                return Err(Error::Shape(format!(
                    "point embedding width {} vs d_model {}",
                    input.points.ncols(),
                    self.config.d_model
                )));
            }
            let mut rows = Vec::new();
            if input.points.nrows() > 0 {
                rows.push(b.tape.constant(input.points.clone()));
            }
            if let Some(raw) = &input.text {
                if raw.nrows() > 0 {
                    rows.push(prompt::encode_texts_on(b, &input.group, raw)?);
                }
            }
            let prompts = match rows.len() {
                0 => None,
                1 => Some(rows[0]),
                _ => Some(b.tape.concat_rows(&rows)),
            };
            outs.push(decoder::decode_on(b, &self.config, image, pe, prompts)?);
        }
        Ok(if outs.len() == 1 {
            outs[0]
        } else {
            b.tape.concat_rows(&outs)
        })
    }

    /// Logits for one class from an already-fused prompt matrix.
    pub fn decode(&self, emb: &ImageEmbedding, prompts: &Array2<f64>) -> Result<Array2<f64>> {
        let mut b = Binder::new(&self.store)?;
        let (gh, gw) = self.config.grid();
        let image = b.tape.constant(emb.tokens.clone());
        let pe = b.tape.constant(prompt::dense_pe(&self.store, gh, gw));
        let p = (prompts.nrows() > 0).then(|| b.tape.constant(prompts.clone()));
        let out = decoder::decode_on(&mut b, &self.config, image, pe, p)?;
        Ok(b.tape.value(out).clone())
    }

    /// Per-channel sigmoid probabilities, channels in catalog order.
    pub fn forward_multiclass(
        &self,
        emb: &ImageEmbedding,
        inputs: &[ClassInput],
    ) -> Result<MultiChannelMask> {
        let mut b = Binder::new(&self.store)?;
        let logits = self.forward_on(&mut b, emb, inputs)?;
        let s = self.config.image_size;
        let probs = b.tape.value(logits).mapv(crate::tape::sigmoid);
        let probs: Array3<f64> = probs
            .into_shape_with_order((inputs.len(), s, s))
            .map_err(|e| Error::Shape(e.to_string()))?;
        MultiChannelMask::probabilities(probs)
    }

    pub fn to_checkpoint(
        &self,
        run_config: serde_json::Value,
        state: serde_json::Value,
        extra: Vec<(String, TensorKind, Array2<f64>)>,
    ) -> Checkpoint {
        let mut tensors: Vec<(String, TensorKind, Array2<f64>)> = self
            .store
            .iter()
            .map(|p| {
                let kind = match p.tag {
                    Some(Tag::Trainable) => TensorKind::Trainable,
                    _ => TensorKind::Frozen,
                };
                (p.name.clone(), kind, p.value.clone())
            })
            .collect();
        tensors.extend(extra);
        Checkpoint::new(
            self.config.clone(),
            self.catalog.clone(),
            run_config,
            state,
            tensors,
        )
    }

    /// Rebuilds the model from a checkpoint; every parameter must be present
    /// with the expected shape and tag.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(ckpt.header.model.clone(), ckpt.header.catalog.clone(), 0)?;
        let names: Vec<String> = model.store.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let (meta, value) = ckpt
                .tensor(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks parameter `{name}`")))?;
            let want_tag = model.store.tag(&name)?;
            let got_tag = match meta.kind {
                TensorKind::Frozen => Tag::Frozen,
                TensorKind::Trainable => Tag::Trainable,
                TensorKind::Optimizer => {
                    return Err(Error::ConfigMismatch(format!(
                        "`{name}` stored as optimizer state"
                    )))
                }
            };
            let slot = model.store.get_mut(&name).expect("registered");
            if slot.dim() != value.dim() || want_tag != got_tag {
                return Err(Error::ConfigMismatch(format!(
                    "`{name}`: checkpoint {:?} {:?}, model expects {:?} {:?}",
                    value.dim(),
                    got_tag,
                    slot.dim(),
                    want_tag
                )));
            }
            slot.assign(value);
        }
        Ok(model)
    }
}

/// Splits stacked `(C * S) x S` values into a `C x S x S` array.
pub fn unstack(values: &Array2<f64>, channels: usize) -> Array3<f64> {
    let s = values.ncols();
    values
        .to_shape((channels, values.nrows() / channels.max(1), s))
        .expect("rows divisible by channel count")
        .to_owned()
}

/// Restacks `C x S x S` into `(C * S) x S`.
pub fn stack(values: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = values.dim();
    values.to_shape((c * h, w)).expect("contiguous").to_owned()
}
