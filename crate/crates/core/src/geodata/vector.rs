//! Vector features (lon/lat polylines and polygons) and their rasterization.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::raster::{ClassCatalog, LabelMap};
use crate::{Error, Result};

/// Meters per degree of latitude.
pub const METERS_PER_DEGREE: f64 = 111_320.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "coordinates")]
pub enum Geometry {
    /// Vertices as `[lon, lat]`.
    LineString(Vec<[f64; 2]>),
    /// Rings as `[lon, lat]` lists; filled with the even-odd rule.
    Polygon(Vec<Vec<[f64; 2]>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorFeature {
    pub class: String,
    pub geometry: Geometry,
    /// Stroke width for line strings, in meters.
    pub width_m: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoBounds {
    pub west: f64,
    pub south: f64,
    pub east: f64,
    pub north: f64,
}

impl GeoBounds {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.west, self.south, self.east, self.north]
            .iter()
            .all(|v| v.is_finite())
            && self.east > self.west
            && self.north > self.south;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "region {self:?} has zero or negative area"
            )))
        }
    }
}

// Minimal GeoJSON-shaped interchange: a FeatureCollection whose features carry
// `class` and optional `width_m` properties.
#[derive(Serialize, Deserialize)]
struct RawCollection {
    #[serde(rename = "type")]
    kind: String,
    features: Vec<RawFeature>,
}

#[derive(Serialize, Deserialize)]
struct RawFeature {
    #[serde(rename = "type", default = "feature_tag")]
    kind: String,
    properties: RawProps,
    geometry: Geometry,
}

fn feature_tag() -> String {
    "Feature".into()
}

#[derive(Serialize, Deserialize)]
struct RawProps {
    class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width_m: Option<f64>,
}

pub fn parse_features(src: &str) -> Result<Vec<VectorFeature>> {
    let raw: RawCollection = serde_json::from_str(src)?;
    if raw.kind != "FeatureCollection" {
        return Err(Error::InvalidArgument(format!(
            "expected a FeatureCollection, got {:?}",
            raw.kind
        )));
    }
    Ok(raw
        .features
        .into_iter()
        .map(|f| VectorFeature {
            class: f.properties.class,
            geometry: f.geometry,
            width_m: f.properties.width_m,
        })
        .collect())
}

pub fn features_to_json(features: &[VectorFeature]) -> String {
    let raw = RawCollection {
        kind: "FeatureCollection".into(),
        features: features
            .iter()
            .map(|f| RawFeature {
                kind: feature_tag(),
                properties: RawProps {
                    class: f.class.clone(),
                    width_m: f.width_m,
                },
                geometry: f.geometry.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&raw).expect("features serialize")
}

pub fn load_features(path: &Path) -> Result<Vec<VectorFeature>> {
    let src = fs::read_to_string(path).map_err(|e| Error::at(path, e.into()))?;
    parse_features(&src).map_err(|e| Error::at(path, e))
}

/// Sets `id` on pixels whose centers lie within `width / 2` of the polyline.
/// Coordinates are in pixels (`x` right, `y` down).
pub(crate) fn stroke(map: &mut Array2<u8>, pts: &[[f64; 2]], width: f64, id: u8) {
    let (h, w) = map.dim();
    let r = width / 2.0;
    for seg in pts.windows(2) {
        let ([x0, y0], [x1, y1]) = (seg[0], seg[1]);
        let ylo = ((y0.min(y1) - r).floor().max(0.0)) as usize;
        let yhi = ((y0.max(y1) + r).ceil().max(0.0) as usize).min(h);
        let xlo = ((x0.min(x1) - r).floor().max(0.0)) as usize;
        let xhi = ((x0.max(x1) + r).ceil().max(0.0) as usize).min(w);
        let (dx, dy) = (x1 - x0, y1 - y0);
        let len2 = dx * dx + dy * dy;
        for y in ylo..yhi {
            for x in xlo..xhi {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 > 0.0 {
                    (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (cx, cy) = (x0 + t * dx - px, y0 + t * dy - py);
                if cx * cx + cy * cy <= r * r {
                    map[[y, x]] = id;
                }
            }
        }
    }
}

/// Even-odd test of a point against every ring.
pub(crate) fn inside_even_odd(rings: &[Vec<[f64; 2]>], px: f64, py: f64) -> bool {
    let mut inside = false;
    for ring in rings {
        let n = ring.len();
        for i in 0..n {
            let [xi, yi] = ring[i];
            let [xj, yj] = ring[(i + n - 1) % n];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
        }
    }
    inside
}

/// Sets `id` on pixels whose centers fall inside the polygon (even-odd).
pub(crate) fn fill(map: &mut Array2<u8>, rings: &[Vec<[f64; 2]>], id: u8) {
    let (h, w) = map.dim();
    let all = rings.iter().flatten();
    let (mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut xlo, mut xhi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &[x, y] in all {
        ylo = ylo.min(y);
        yhi = yhi.max(y);
        xlo = xlo.min(x);
        xhi = xhi.max(x);
    }
    if !ylo.is_finite() {
        return;
    }
    let ys = (ylo.floor().max(0.0) as usize)..((yhi.ceil().max(0.0) as usize).min(h));
    let xs = (xlo.floor().max(0.0) as usize)..((xhi.ceil().max(0.0) as usize).min(w));
    for y in ys {
        for x in xs.clone() {
            if inside_even_odd(rings, x as f64 + 0.5, y as f64 + 0.5) {
                map[[y, x]] = id;
            }
        }
    }
}

/// Burns features into an `height x width` label map over `region`.
///
/// Features are drawn in catalog order of their class, so higher ids
/// overwrite lower ones where they overlap; ties keep input order.
pub fn rasterize(
    features: &[VectorFeature],
    region: &GeoBounds,
    height: usize,
    width: usize,
    catalog: &ClassCatalog,
) -> Result<LabelMap> {
    region.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("raster size must be positive".into()));
    }
    let mut order: Vec<(u8, &VectorFeature)> = features
        .iter()
        .map(|f| {
            let e = catalog
                .entry_by_name(&f.class)
                .ok_or_else(|| Error::Catalog(format!("unknown class `{}`", f.class)))?;
            Ok((e.id, f))
        })
        .collect::<Result<_>>()?;
    order.sort_by_key(|(id, _)| *id);

    let sx = width as f64 / (region.east - region.west);
    let sy = height as f64 / (region.north - region.south);
    let to_px = |[lon, lat]: [f64; 2]| [(lon - region.west) * sx, (region.north - lat) * sy];
    let mid_lat = ((region.north + region.south) / 2.0).to_radians();
    let m_per_px_y = (region.north - region.south) * METERS_PER_DEGREE / height as f64;
    let m_per_px_x = (region.east - region.west) * METERS_PER_DEGREE * mid_lat.cos() / width as f64;
    let m_per_px = (m_per_px_x + m_per_px_y) / 2.0;

    let mut map = Array2::from_elem((height, width), catalog.background_id());
    for (id, f) in order {
        match &f.geometry {
            Geometry::LineString(pts) => {
                if pts.len() < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "`{}` line string needs at least 2 vertices",
                        f.class
                    )));
                }
                let width_m = f.width_m.ok_or_else(|| {
                    Error::InvalidArgument(format!("`{}` line string lacks width_m", f.class))
                })?;
                if !(width_m > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "`{}` stroke width must be positive",
                        f.class
                    )));
                }
                let px: Vec<[f64; 2]> = pts.iter().copied().map(to_px).collect();
                stroke(&mut map, &px, width_m / m_per_px, id);
            }
            Geometry::Polygon(rings) => {
                if rings.is_empty() || rings.iter().any(|r| r.len() < 3) {
                    return Err(Error::InvalidArgument(format!(
                        "`{}` polygon rings need at least 3 vertices",
                        f.class
                    )));
                }
                let px: Vec<Vec<[f64; 2]>> = rings
                    .iter()
                    .map(|r| r.iter().copied().map(to_px).collect())
                    .collect();
                fill(&mut map, &px, id);
            }
        }
    }
    LabelMap::new(map, catalog)
}

#[cfg(test)]
mod tests {
    use super::*;

    const REGION: GeoBounds = GeoBounds {
        west: -77.05,
        south: 38.90,
        east: -77.04,
        north: 38.91,
    };

    fn rect(class: &str, w: f64, s: f64, e: f64, n: f64) -> VectorFeature {
        VectorFeature {
            class: class.into(),
            geometry: Geometry::Polygon(vec![vec![[w, s], [e, s], [e, n], [w, n]]]),
            width_m: None,
        }
    }

    #[test]
    fn empty_features_give_background() {
        let cat = ClassCatalog::default();
        let m = rasterize(&[], &REGION, 16, 16, &cat).unwrap();
        assert!(m.as_array().iter().all(|&v| v == 0));
        let flat = GeoBounds { north: 38.90, ..REGION };
        assert!(rasterize(&[], &flat, 16, 16, &cat).is_err());
    }

    #[test]
    fn left_half_rectangle() {
        let cat = ClassCatalog::default();
        let mid = (REGION.west + REGION.east) / 2.0;
        let f = rect("road", REGION.west - 1.0, REGION.south - 1.0, mid, REGION.north + 1.0);
        let m = rasterize(&[f], &REGION, 32, 32, &cat).unwrap();
        // Brute-force point-in-rectangle at pixel centers.
        for y in 0..32 {
            for x in 0..32 {
                let lon = REGION.west + (x as f64 + 0.5) / 32.0 * (REGION.east - REGION.west);
                let want = if lon <= mid { 1 } else { 0 };
                if (lon - mid).abs() > (REGION.east - REGION.west) / 32.0 {
                    assert_eq!(m.get(y, x), want, "pixel ({y}, {x})");
                }
            }
        }
        let road = m.as_array().iter().filter(|&&v| v == 1).count();
        assert!((road as i64 - 512).abs() <= 32);
    }

    #[test]
    fn later_class_overwrites_regardless_of_input_order() {
        let cat = ClassCatalog::default();
        let road = rect("road", -77.05, 38.90, -77.04, 38.91);
        let cross = rect("crosswalk", -77.046, 38.904, -77.044, 38.906);
        let m = rasterize(&[cross, road], &REGION, 20, 20, &cat).unwrap();
        assert_eq!(m.get(10, 10), 3);
        assert_eq!(m.get(1, 1), 1);
    }

    #[test]
    fn even_odd_hole() {
        let cat = ClassCatalog::default();
        let f = VectorFeature {
            class: "sidewalk".into(),
            geometry: Geometry::Polygon(vec![
                vec![[-77.05, 38.90], [-77.04, 38.90], [-77.04, 38.91], [-77.05, 38.91]],
                vec![[-77.047, 38.903], [-77.043, 38.903], [-77.043, 38.907], [-77.047, 38.907]],
            ]),
            width_m: None,
        };
        let m = rasterize(&[f], &REGION, 20, 20, &cat).unwrap();
        assert_eq!(m.get(10, 10), 0);
        assert_eq!(m.get(1, 1), 2);
    }

    #[test]
    fn stroke_width_in_meters() {
        let cat = ClassCatalog::default();
        let lat = (REGION.north + REGION.south) / 2.0;
        let f = VectorFeature {
            class: "road".into(),
            geometry: Geometry::LineString(vec![[REGION.west - 0.01, lat], [REGION.east + 0.01, lat]]),
            width_m: Some(100.0),
        };
        let m = rasterize(&[f], &REGION, 64, 64, &cat).unwrap();
        let col: usize = (0..64).filter(|&y| m.get(y, 32) == 1).count();
        let m_per_px_y = 0.01 * METERS_PER_DEGREE / 64.0;
        let m_per_px_x = 0.01 * METERS_PER_DEGREE * lat.to_radians().cos() / 64.0;
        let want = 100.0 / ((m_per_px_x + m_per_px_y) / 2.0);
        assert!((col as f64 - want).abs() <= 2.0, "{col} vs {want}");
    }

    #[test]
    fn resolution_consistency() {
        let cat = ClassCatalog::default();
        let feats = vec![
            rect("road", -77.048, 38.901, -77.042, 38.905),
            VectorFeature {
                class: "sidewalk".into(),
                geometry: Geometry::LineString(vec![[-77.049, 38.909], [-77.041, 38.902]]),
                width_m: Some(60.0),
            },
        ];
        let small = rasterize(&feats, &REGION, 32, 32, &cat).unwrap();
        let big = rasterize(&feats, &REGION, 64, 64, &cat).unwrap();
        let mut mismatched = Vec::new();
        for y in 0..32 {
            for x in 0..32 {
                let mut counts = [0; 4];
                for dy in 0..2 {
                    for dx in 0..2 {
                        counts[big.get(2 * y + dy, 2 * x + dx) as usize] += 1;
                    }
                }
                let best = (0..4).max_by_key(|&c| (counts[c], c)).unwrap() as u8;
                if best != small.get(y, x) {
                    mismatched.push((y, x));
                }
            }
        }
        // Every mismatch must sit on a class boundary of the coarse map.
        for (y, x) in mismatched {
            let v = small.get(y, x);
            let near_edge = (y.saturating_sub(1)..(y + 2).min(32))
                .flat_map(|yy| (x.saturating_sub(1)..(x + 2).min(32)).map(move |xx| (yy, xx)))
                .any(|(yy, xx)| small.get(yy, xx) != v);
            assert!(near_edge, "interior mismatch at ({y}, {x})");
        }
    }

    #[test]
    fn json_roundtrip() {
        let feats = vec![
            rect("road", 0.0, 0.0, 1.0, 1.0),
            VectorFeature {
                class: "sidewalk".into(),
                geometry: Geometry::LineString(vec![[0.0, 0.0], [1.0, 1.0]]),
                width_m: Some(3.0),
            },
        ];
        let text = features_to_json(&feats);
        assert!(text.contains("\"LineString\""));
        assert_eq!(parse_features(&text).unwrap(), feats);
        assert!(parse_features(r#"{"type":"Feature","features":[]}"#).is_err());
        let unknown = vec![rect("river", 0.0, 0.0, 1.0, 1.0)];
        assert!(rasterize(&unknown, &REGION, 4, 4, &ClassCatalog::default()).is_err());
    }
}
