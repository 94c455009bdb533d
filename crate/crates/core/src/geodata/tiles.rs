//! Web-mercator tile addressing and tile mosaics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::raster::RasterImage;
use crate::{Error, Result};

/// Latitude limit of the square web-mercator projection.
pub const MAX_LATITUDE: f64 = 85.051_128_779_806_59;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileCoord {
    pub zoom: u8,
    pub x: u32,
    pub y: u32,
}

pub fn tile_index(lon: f64, lat: f64, zoom: u8) -> Result<TileCoord> {
    if !lat.is_finite() || lat.abs() > MAX_LATITUDE {
        return Err(Error::LatitudeOutOfRange(lat));
    }
    if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::InvalidArgument(format!(
            "longitude {lon} outside [-180, 180]"
        )));
    }
    if zoom > 30 {
        return Err(Error::InvalidArgument(format!("zoom {zoom} above 30")));
    }
    let n = f64::from(1u32 << zoom);
    let max = (1u32 << zoom) - 1;
    let x = ((lon + 180.0) / 360.0 * n).floor();
    let phi = lat.to_radians();
    let y = ((1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / PI) / 2.0 * n).floor();
    Ok(TileCoord {
        zoom,
        x: (x.max(0.0) as u32).min(max),
        y: (y.max(0.0) as u32).min(max),
    })
}

/// North-west corner of a tile as `(lon, lat)`.
pub fn tile_origin(tile: TileCoord) -> (f64, f64) {
    let n = f64::from(1u32 << tile.zoom);
    let lon = f64::from(tile.x) / n * 360.0 - 180.0;
    let lat = (PI * (1.0 - 2.0 * f64::from(tile.y) / n)).sinh().atan().to_degrees();
    (lon, lat)
}

/// Row-major mosaic of equally sized tiles, copied without resampling.
pub fn stitch(tiles: &[Vec<RasterImage>]) -> Result<RasterImage> {
    let rows = tiles.len();
    let cols = tiles.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("tile grid"));
    }
    let (th, tw) = (tiles[0][0].height(), tiles[0][0].width());
    for (r, row) in tiles.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::Shape(format!(
                "ragged tile grid: row {r} has {} tiles, row 0 has {cols}",
                row.len()
            )));
        }
        for (c, t) in row.iter().enumerate() {
            if (t.height(), t.width()) != (th, tw) {
                return Err(Error::Shape(format!(
                    "tile ({r}, {c}) is {}x{}, expected {th}x{tw}",
                    t.height(),
                    t.width()
                )));
            }
        }
    }
    let (h, w) = (rows * th, cols * tw);
    let mut data = vec![0f32; h * w * 3];
    for (r, row) in tiles.iter().enumerate() {
        for (c, t) in row.iter().enumerate() {
            for y in 0..th {
                let src = &t.data()[y * tw * 3..(y + 1) * tw * 3];
                let start = ((r * th + y) * w + c * tw) * 3;
                data[start..start + tw * 3].copy_from_slice(src);
            }
        }
    }
    RasterImage::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_examples() {
        assert_eq!(tile_index(0.0, 10.0, 1).unwrap().x, 1);
        for z in 1..=20 {
            assert_eq!(tile_index(12.0, 0.0, z).unwrap().y, 1 << (z - 1));
        }
        assert!(matches!(tile_index(0.0, 86.0, 3), Err(Error::LatitudeOutOfRange(_))));
        assert_eq!(tile_index(180.0, 0.0, 2).unwrap().x, 3);
    }

    #[test]
    fn washington_corner_regression() {
        // Independent evaluation of the slippy-map formula.
        let (lat, lon, z) = (38.905788f64, -77.045019f64, 20u8);
        let n = 2f64.powi(z as i32);
        let x = ((lon + 180.0) / 360.0 * n).floor() as u32;
        let lr = lat.to_radians();
        let y = ((1.0 - (lr.tan() + 1.0 / lr.cos()).ln() / PI) / 2.0 * n).floor() as u32;
        let t = tile_index(lon, lat, z).unwrap();
        assert_eq!((t.x, t.y), (x, y));
        assert_eq!((t.x, t.y), (299_878, 401_096));
        let (olon, olat) = tile_origin(t);
        assert!(olon <= lon && olat >= lat);
    }

    #[test]
    fn monotone_in_longitude() {
        let mut prev = 0;
        for i in 0..=360 {
            let t = tile_index(-180.0 + i as f64, 45.0, 12).unwrap();
            assert!(t.x >= prev);
            prev = t.x;
        }
    }

    fn tile(h: usize, w: usize, tag: f32) -> RasterImage {
        let data = (0..h * w * 3).map(|i| ((i % 97) as f32 / 97.0 + tag) / 2.0).collect();
        RasterImage::new(h, w, data).unwrap()
    }

    #[test]
    fn stitch_layouts() {
        let grid: Vec<Vec<RasterImage>> = (0..2)
            .map(|r| (0..2).map(|c| tile(512, 512, (r * 2 + c) as f32 / 4.0)).collect())
            .collect();
        let m = stitch(&grid).unwrap();
        assert_eq!((m.height(), m.width()), (1024, 1024));
        assert_eq!(m.pixel(600, 3), grid[1][0].pixel(88, 3));
        assert_eq!(m.pixel(10, 1000), grid[0][1].pixel(10, 488));

        let grid4: Vec<Vec<RasterImage>> = (0..4)
            .map(|_| (0..4).map(|_| tile(256, 256, 0.5)).collect())
            .collect();
        let m = stitch(&grid4).unwrap();
        assert_eq!((m.height(), m.width()), (1024, 1024));

        let one = tile(5, 7, 0.1);
        assert_eq!(stitch(&[vec![one.clone()]]).unwrap(), one);
        assert!(stitch(&[vec![one.clone(), one.clone()], vec![one.clone()]]).is_err());
        assert!(stitch(&[vec![one, tile(5, 6, 0.0)]]).is_err());
    }
}
