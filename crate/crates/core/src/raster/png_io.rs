//! PNG persistence. Label maps and binary masks are 8-bit paletted images
//! whose palette index is the class id; RGB images are 8-bit truecolor.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use png::{BitDepth, ColorType};

use super::{BinaryMask, ClassCatalog, LabelMap, RasterImage};
use crate::{Error, Result};

const MASK_PALETTE: [u8; 6] = [0, 0, 0, 255, 255, 255];

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: ColorType,
    palette: Option<&[u8]>,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::at(path, e.into()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p.to_vec());
    }
    let mut writer = enc.write_header()?;
    writer.write_image_data(data)?;
    writer.finish()?;
    Ok(())
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::at(path, e.into()))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::at(path, e.into()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::at(path, e.into()))?;
    if info.bit_depth != BitDepth::Eight {
        return Err(Error::at(
            path,
            Error::Png(format!("unsupported bit depth {:?}", info.bit_depth)),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        data: buf,
    })
}

fn single_channel(path: &Path, d: Decoded) -> Result<Array2<u8>> {
    match d.color {
        ColorType::Indexed | ColorType::Grayscale => {
            Ok(Array2::from_shape_vec((d.height, d.width), d.data).expect("buffer size"))
        }
        other => Err(Error::at(
            path,
            Error::Png(format!("expected paletted or grayscale PNG, got {other:?}")),
        )),
    }
}

pub fn write_label_map(path: &Path, labels: &LabelMap, catalog: &ClassCatalog) -> Result<()> {
    let data: Vec<u8> = labels.as_array().iter().copied().collect();
    write_png(
        path,
        labels.width(),
        labels.height(),
        ColorType::Indexed,
        Some(&catalog.palette()),
        &data,
    )
}

pub fn read_label_map(path: &Path, catalog: &ClassCatalog) -> Result<LabelMap> {
    let d = read_png(path)?;
    let arr = single_channel(path, d)?;
    LabelMap::new(arr, catalog).map_err(|e| Error::at(path, e))
}

pub fn write_binary_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let data: Vec<u8> = mask.iter().map(|&b| u8::from(b)).collect();
    write_png(
        path,
        mask.ncols(),
        mask.nrows(),
        ColorType::Indexed,
        Some(&MASK_PALETTE),
        &data,
    )
}

/// Any non-zero index or gray level reads as set.
pub fn read_binary_mask(path: &Path) -> Result<BinaryMask> {
    let d = read_png(path)?;
    Ok(single_channel(path, d)?.mapv(|v| v != 0))
}

pub fn write_rgb(path: &Path, image: &RasterImage) -> Result<()> {
    write_png(
        path,
        image.width(),
        image.height(),
        ColorType::Rgb,
        None,
        &image.to_rgb8(),
    )
}

pub fn read_rgb(path: &Path) -> Result<RasterImage> {
    let d = read_png(path)?;
    let rgb: Vec<u8> = match d.color {
        ColorType::Rgb => d.data,
        ColorType::Rgba => d
            .data
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        ColorType::Grayscale => d.data.iter().flat_map(|&g| [g, g, g]).collect(),
        other => {
            return Err(Error::at(
                path,
                Error::Png(format!("unsupported color type {other:?}")),
            ))
        }
    };
    RasterImage::from_rgb8(d.height, d.width, &rgb).map_err(|e| Error::at(path, e))
}
