//! In-memory rasters: RGB images, label maps and multi-channel masks.

mod catalog;
pub mod png_io;

use ndarray::{Array2, Array3, ArrayView2, Axis};

pub use catalog::{ClassCatalog, ClassEntry, Role};

use crate::{Error, Result};

/// Per-pixel boolean mask, indexed `[row, col]`.
pub type BinaryMask = Array2<bool>;

/// H×W×3 RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            rgb.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Interleaved RGB values, row-major.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// H×W map of class ids drawn from a [`ClassCatalog`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    data: Array2<u8>,
}

impl LabelMap {
    pub fn new(data: Array2<u8>, catalog: &ClassCatalog) -> Result<Self> {
        if let Some(&bad) = data.iter().find(|&&v| !catalog.contains(v)) {
            return Err(Error::UnknownLabel(bad));
        }
        Ok(Self { data })
    }

    /// A map filled with one class.
    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        Self {
            data: Array2::from_elem((height, width), id),
        }
    }

    #[cfg(test)]
    pub(crate) fn from_raw(data: Array2<u8>) -> Self {
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[[row, col]]
    }

    pub fn as_array(&self) -> &Array2<u8> {
        &self.data
    }

    pub(crate) fn as_array_mut(&mut self) -> &mut Array2<u8> {
        &mut self.data
    }

    /// Fraction of pixels whose label differs from `other`.
    pub fn disagreement(&self, other: &LabelMap) -> f64 {
        let differing = self
            .data
            .iter()
            .zip(other.data.iter())
            .filter(|(a, b)| a != b)
            .count();
        differing as f64 / self.data.len() as f64
    }
}

/// Foreground channels (one per catalog group) over an H×W grid. Background
/// is implicit: a pixel is background where every channel is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelMask {
    data: Array3<f64>,
    binary: bool,
}

impl MultiChannelMask {
    /// Probability maps, every value in `[0, 1]`.
    pub fn probabilities(data: Array3<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "probability {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            data,
            binary: false,
        })
    }

    /// Binary maps, every value exactly 0 or 1.
    pub fn binary(data: Array3<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("binary mask holds {v}")));
        }
        Ok(Self { data, binary: true })
    }

    pub fn from_binary_masks(masks: &[BinaryMask]) -> Result<Self> {
        let first = masks.first().ok_or(Error::Empty("mask channels"))?;
        let (h, w) = first.dim();
        let mut data = Array3::zeros((masks.len(), h, w));
        for (c, m) in masks.iter().enumerate() {
            if m.dim() != (h, w) {
                return Err(Error::Shape("channels differ in size".into()));
            }
            data.index_axis_mut(Axis(0), c)
                .zip_mut_with(m, |d, &b| *d = f64::from(u8::from(b)));
        }
        Ok(Self { data, binary: true })
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn num_channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), c)
    }

    pub fn channel_mask(&self, c: usize) -> BinaryMask {
        self.channel(c).mapv(|v| v >= 0.5)
    }

    pub fn as_array(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }
}

/// Per-group foreground masks plus the background mask; together they
/// partition the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub foreground: Vec<BinaryMask>,
    pub background: BinaryMask,
}

pub fn one_hot_encode(labels: &LabelMap, catalog: &ClassCatalog) -> Result<MultiChannelMask> {
    let (h, w) = labels.data.dim();
    let table = catalog.channel_table();
    let mut data = Array3::zeros((catalog.num_channels(), h, w));
    for ((r, c), &id) in labels.data.indexed_iter() {
        let slot = table
            .get(usize::from(id))
            .ok_or(Error::UnknownLabel(id))?;
        if let Some(ch) = slot {
            data[[*ch, r, c]] = 1.0;
        }
    }
    Ok(MultiChannelMask { data, binary: true })
}

/// 1 where `prob >= threshold`, else 0.
pub fn binarize(probs: &MultiChannelMask, threshold: f64) -> Result<MultiChannelMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    Ok(MultiChannelMask {
        data: probs
            .data
            .mapv(|p| if p >= threshold { 1.0 } else { 0.0 }),
        binary: true,
    })
}

pub fn decompose_pseudo_label(pseudo: &LabelMap, catalog: &ClassCatalog) -> Result<Decomposition> {
    let table = catalog.channel_table();
    let (h, w) = pseudo.data.dim();
    let mut foreground = vec![BinaryMask::from_elem((h, w), false); catalog.num_channels()];
    let mut background = BinaryMask::from_elem((h, w), false);
    for ((r, c), &id) in pseudo.data.indexed_iter() {
        match table.get(usize::from(id)).ok_or(Error::UnknownLabel(id))? {
            Some(ch) => foreground[*ch][[r, c]] = true,
            None => background[[r, c]] = true,
        }
    }
    Ok(Decomposition {
        foreground,
        background,
    })
}

/// Collapses a mask back to a label map: each pixel takes the representative
/// id of its strongest channel when that channel reaches `threshold`.
pub fn decode_labels(mask: &MultiChannelMask, catalog: &ClassCatalog, threshold: f64) -> LabelMap {
    let (_, h, w) = mask.data.dim();
    let bg = catalog.background_id();
    let data = Array2::from_shape_fn((h, w), |(r, c)| {
        let best = (0..mask.num_channels())
            .map(|ch| (ch, mask.data[[ch, r, c]]))
            .fold(None::<(usize, f64)>, |acc, (ch, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((ch, v)),
            });
        match best {
            Some((ch, v)) if v >= threshold => catalog.primary_id(ch),
            _ => bg,
        }
    });
    LabelMap { data }
}
