//! Procedural street scenes: straight roads flanked by sidewalks, crosswalk
//! bands across the roads, and background look-alike patches.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vector::{fill, stroke};
use crate::raster::{ClassCatalog, LabelMap, RasterImage};
use crate::seed::{rng_for, stream};
use crate::{Error, Result};

const BACKGROUND_RGB: [f64; 3] = [0.36, 0.45, 0.26];
const ROAD_RGB: [f64; 3] = [0.28, 0.28, 0.30];
const SIDEWALK_RGB: [f64; 3] = [0.70, 0.68, 0.62];
const CROSSWALK_RGB: [f64; 3] = [0.93, 0.93, 0.90];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    /// Square side in pixels.
    pub size: usize,
    pub road_count: usize,
    /// Extra roads drawn identically (sidewalks and crosswalks included)
    /// but absent from the labels, like private or unsurveyed streets that
    /// vector data omits.
    pub unmapped_roads: usize,
    /// Inclusive range of road widths in pixels.
    pub road_width: [f64; 2],
    /// Strip of background between road edge and sidewalk, in pixels.
    pub sidewalk_offset: f64,
    pub sidewalk_width: f64,
    /// Distance between crosswalks along a road; 0 disables them.
    pub crosswalk_spacing: f64,
    /// Extent of a crosswalk along the road direction.
    pub crosswalk_width: f64,
    /// Standard deviation of per-pixel color noise.
    pub noise: f64,
    /// Background patches painted in road or sidewalk colors.
    pub distractor_count: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 128,
            road_count: 2,
            unmapped_roads: 1,
            road_width: [9.0, 14.0],
            sidewalk_offset: 2.0,
            sidewalk_width: 5.0,
            crosswalk_spacing: 40.0,
            crosswalk_width: 6.0,
            noise: 0.04,
            distractor_count: 3,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("scene spec: {m}")));
        if self.size == 0 {
            return bad("size must be positive");
        }
        let [lo, hi] = self.road_width;
        if !(lo > 0.0 && hi >= lo) {
            return bad("road_width must satisfy 0 < min <= max");
        }
        if !(self.sidewalk_width > 0.0 && self.sidewalk_width < lo) {
            return bad("sidewalk_width must be positive and narrower than any road");
        }
        if !(self.sidewalk_offset >= 0.0 && self.noise >= 0.0 && self.crosswalk_spacing >= 0.0) {
            return bad("offset, noise and crosswalk spacing must be non-negative");
        }
        if self.crosswalk_spacing > 0.0 && !(self.crosswalk_width > 0.0) {
            return bad("crosswalk_width must be positive");
        }
        Ok(())
    }
}

/// A road as an infinite-looking line: a point, a unit direction and a width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadLine {
    pub center: [f64; 2],
    pub dir: [f64; 2],
    pub width: f64,
    /// Present in the labels.
    pub mapped: bool,
}

impl RoadLine {
    fn endpoints(&self, reach: f64) -> [[f64; 2]; 2] {
        let [cx, cy] = self.center;
        let [dx, dy] = self.dir;
        [
            [cx - reach * dx, cy - reach * dy],
            [cx + reach * dx, cy + reach * dy],
        ]
    }

    fn distance(&self, [x, y]: [f64; 2]) -> f64 {
        let [cx, cy] = self.center;
        let [dx, dy] = self.dir;
        ((x - cx) * dy - (y - cy) * dx).abs()
    }
}

/// Geometry chosen for a scene before any pixels are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub roads: Vec<RoadLine>,
    /// Crossing rectangles with the `mapped` flag of their road.
    pub crosswalks: Vec<([[f64; 2]; 4], bool)>,
    /// Axis-aligned `[x0, y0, x1, y1]` with a flag for road-colored fill.
    pub distractors: Vec<([f64; 4], bool)>,
}

pub fn layout(spec: &SceneSpec) -> Result<SceneLayout> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, &[stream::SCENE]);
    let s = spec.size as f64;
    let half_corridor = |w: f64| w / 2.0 + spec.sidewalk_offset + spec.sidewalk_width;

    let mut roads: Vec<RoadLine> = Vec::new();
    for k in 0..spec.road_count + spec.unmapped_roads {
        let mut candidate = None;
        for _ in 0..64 {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let dir = [theta.cos(), theta.sin()];
            let center = [rng.random_range(0.2 * s..0.8 * s), rng.random_range(0.2 * s..0.8 * s)];
            let [lo, hi] = spec.road_width;
            let width = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let road = RoadLine {
                center,
                dir,
                width,
                mapped: k < spec.road_count,
            };
            // Keep roads at least 30 degrees apart so corridors stay distinct.
            let ok = roads.iter().all(|r| {
                let cos = (r.dir[0] * dir[0] + r.dir[1] * dir[1]).abs();
                cos < 30f64.to_radians().cos()
            });
            if ok {
                candidate = Some(road);
                break;
            }
        }
        if let Some(r) = candidate {
            roads.push(r);
        }
    }

    let mut crosswalks = Vec::new();
    if spec.crosswalk_spacing > 0.0 {
        for r in &roads {
            let offset = rng.random_range(0.0..spec.crosswalk_spacing);
            let across = half_corridor(r.width);
            let along = spec.crosswalk_width / 2.0;
            let [dx, dy] = r.dir;
            let (nx, ny) = (-dy, dx);
            let mut t = -2.0 * s + offset;
            while t < 2.0 * s {
                let c = [r.center[0] + t * dx, r.center[1] + t * dy];
                if (0.0..s).contains(&c[0]) && (0.0..s).contains(&c[1]) {
                    let corner = |a: f64, b: f64| [c[0] + a * dx + b * nx, c[1] + a * dy + b * ny];
                    let quad = [
                        corner(-along, -across),
                        corner(along, -across),
                        corner(along, across),
                        corner(-along, across),
                    ];
                    crosswalks.push((quad, r.mapped));
                }
                t += spec.crosswalk_spacing;
            }
        }
    }

    let mut distractors = Vec::new();
    let unit = s / 128.0;
    for i in 0..spec.distractor_count {
        for _ in 0..64 {
            let w = rng.random_range(12.0 * unit..=22.0 * unit);
            let h = rng.random_range(12.0 * unit..=22.0 * unit);
            if w >= s || h >= s {
                break;
            }
            let x0 = rng.random_range(0.0..s - w);
            let y0 = rng.random_range(0.0..s - h);
            let center = [x0 + w / 2.0, y0 + h / 2.0];
            let half_diag = (w * w + h * h).sqrt() / 2.0;
            let clear = roads.iter().all(|r| {
                r.distance(center) > half_corridor(r.width) + 3.0 * unit + half_diag
            });
            if clear {
                distractors.push(([x0, y0, x0 + w, y0 + h], i % 2 == 0));
                break;
            }
        }
    }
    Ok(SceneLayout {
        roads,
        crosswalks,
        distractors,
    })
}

fn id_of(catalog: &ClassCatalog, name: &str) -> u8 {
    catalog
        .entry_by_name(name)
        .unwrap_or_else(|| panic!("synthetic scenes need a `{name}` class"))
        .id
}

/// Draws a scene for the default catalog (classes `road`, `sidewalk`,
/// `crosswalk` plus background). Pixel values are quantized to 8 bits so
/// a PNG round trip is lossless.
pub fn synth_scene(spec: &SceneSpec) -> Result<(RasterImage, LabelMap)> {
    let catalog = ClassCatalog::default();
    let lay = layout(spec)?;
    let n = spec.size;
    let bg = catalog.background_id();
    let (road, sidewalk, crosswalk) = (
        id_of(&catalog, "road"),
        id_of(&catalog, "sidewalk"),
        id_of(&catalog, "crosswalk"),
    );
    // Appearance uses extra ids for look-alikes; their labels stay background.
    const ROAD_LOOK: u8 = 250;
    const WALK_LOOK: u8 = 251;
    const CROSS_LOOK: u8 = 252;
    let mut look = Array2::from_elem((n, n), bg);
    for &([x0, y0, x1, y1], road_like) in &lay.distractors {
        let ring = vec![vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]];
        fill(&mut look, &ring, if road_like { ROAD_LOOK } else { WALK_LOOK });
    }
    let reach = 2.0 * n as f64;
    let corridor = |r: &RoadLine, extra: f64| r.width + 2.0 * extra;
    let pick = |mapped: bool, real: u8, fake: u8| if mapped { real } else { fake };
    for r in &lay.roads {
        let pts = r.endpoints(reach);
        let width = corridor(r, spec.sidewalk_offset + spec.sidewalk_width);
        stroke(&mut look, &pts, width, pick(r.mapped, sidewalk, WALK_LOOK));
    }
    for r in &lay.roads {
        stroke(&mut look, &r.endpoints(reach), corridor(r, spec.sidewalk_offset), bg);
    }
    // Unmapped roads first so mapped ones stay intact where they cross.
    for mapped in [false, true] {
        for r in lay.roads.iter().filter(|r| r.mapped == mapped) {
            stroke(&mut look, &r.endpoints(reach), r.width, pick(mapped, road, ROAD_LOOK));
        }
        for (cw, _) in lay.crosswalks.iter().filter(|c| c.1 == mapped) {
            fill(&mut look, &[cw.to_vec()], pick(mapped, crosswalk, CROSS_LOOK));
        }
    }

    let labels = look.mapv(|v| if v >= ROAD_LOOK { bg } else { v });
    let mut rng = rng_for(spec.seed, &[stream::SCENE, 1]);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("valid std");
    let mut data = Vec::with_capacity(n * n * 3);
    for &v in look.iter() {
        let base = match v {
            _ if v == road || v == ROAD_LOOK => ROAD_RGB,
            _ if v == sidewalk || v == WALK_LOOK => SIDEWALK_RGB,
            _ if v == crosswalk || v == CROSS_LOOK => CROSSWALK_RGB,
            _ => BACKGROUND_RGB,
        };
        for c in base {
            let jitter = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let q = ((c + jitter).clamp(0.0, 1.0) * 255.0).round() / 255.0;
            data.push(q as f32);
        }
    }
    Ok((RasterImage::new(n, n, data)?, LabelMap::new(labels, &catalog)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic_and_seed_sensitive() {
        let spec = SceneSpec {
            seed: 4,
            ..Default::default()
        };
        assert_eq!(synth_scene(&spec).unwrap(), synth_scene(&spec).unwrap());
        let other = SceneSpec { seed: 5, ..spec };
        assert_ne!(synth_scene(&other).unwrap().1, synth_scene(&spec).unwrap().1);
    }

    #[test]
    fn noiseless_image_is_piecewise_constant() {
        let spec = SceneSpec {
            noise: 0.0,
            seed: 2,
            ..Default::default()
        };
        let (img, labels) = synth_scene(&spec).unwrap();
        let mut colors: HashSet<[u8; 3]> = HashSet::new();
        for y in 0..spec.size {
            for x in 0..spec.size {
                let p = img.pixel(y, x).map(|v| (v * 255.0).round() as u8);
                colors.insert(p);
                if labels.get(y, x) == 1 {
                    assert_eq!(p, ROAD_RGB.map(|v| (v * 255.0).round() as u8));
                }
            }
        }
        assert!(colors.len() <= 4);
    }

    #[test]
    fn default_scenes_have_all_roles() {
        for seed in 0..20 {
            let (_, labels) = synth_scene(&SceneSpec {
                seed,
                ..Default::default()
            })
            .unwrap();
            let ids: HashSet<u8> = labels.as_array().iter().copied().collect();
            assert!(ids.contains(&0) && ids.contains(&1), "seed {seed}");
            assert!(ids.contains(&2) || ids.contains(&3), "seed {seed}");
        }
    }

    /// Length of the line's chord through the `[0, s]` square.
    fn chord(r: &RoadLine, s: f64) -> f64 {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..2 {
            let (c, d) = (r.center[k], r.dir[k]);
            if d.abs() < 1e-12 {
                continue;
            }
            let (a, b) = ((0.0 - c) / d, (s - c) / d);
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
        (hi - lo).max(0.0)
    }

    #[test]
    fn road_fraction_matches_geometry() {
        let (mut measured, mut expected) = (0.0, 0.0);
        for seed in 0..50 {
            let spec = SceneSpec {
                seed,
                crosswalk_spacing: 0.0,
                ..Default::default()
            };
            let (_, labels) = synth_scene(&spec).unwrap();
            let s = spec.size as f64;
            let lay = layout(&spec).unwrap();
            let mapped: Vec<_> = lay.roads.iter().filter(|r| r.mapped).collect();
            let mut area: f64 = mapped.iter().map(|r| chord(r, s) * r.width).sum();
            for (i, a) in mapped.iter().enumerate() {
                for b in &mapped[i + 1..] {
                    let cross = a.dir[0] * b.dir[1] - a.dir[1] * b.dir[0];
                    let (ex, ey) = (b.center[0] - a.center[0], b.center[1] - a.center[1]);
                    let t = (ex * b.dir[1] - ey * b.dir[0]) / cross;
                    let (px, py) = (a.center[0] + t * a.dir[0], a.center[1] + t * a.dir[1]);
                    if (0.0..s).contains(&px) && (0.0..s).contains(&py) {
                        area -= a.width * b.width / cross.abs();
                    }
                }
            }
            expected += area / (s * s);
            measured += labels.as_array().iter().filter(|&&v| v == 1).count() as f64 / (s * s);
        }
        let ratio = measured / expected;
        assert!((0.9..=1.1).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn unmapped_roads_look_real_but_stay_background() {
        let base = SceneSpec {
            noise: 0.0,
            distractor_count: 0,
            seed: 11,
            ..Default::default()
        };
        let road_rgb = ROAD_RGB.map(|v| (v * 255.0).round() as u8);
        let unlabeled_road = |spec: &SceneSpec| {
            let (img, labels) = synth_scene(spec).unwrap();
            let mut n = 0;
            for y in 0..spec.size {
                for x in 0..spec.size {
                    let p = img.pixel(y, x).map(|v| (v * 255.0).round() as u8);
                    n += usize::from(p == road_rgb && labels.get(y, x) == 0);
                }
            }
            n
        };
        assert!(unlabeled_road(&base) > 200);
        let none = SceneSpec {
            unmapped_roads: 0,
            ..base.clone()
        };
        assert_eq!(unlabeled_road(&none), 0);
        // Labels of mapped roads are unaffected by the extra road.
        let lay = layout(&base).unwrap();
        assert_eq!(lay.roads.iter().filter(|r| !r.mapped).count(), 1);
        assert_eq!(lay.roads.iter().filter(|r| r.mapped).count(), 2);
    }

    #[test]
    fn invalid_specs_rejected() {
        let narrow = SceneSpec {
            sidewalk_width: 20.0,
            ..Default::default()
        };
        assert!(synth_scene(&narrow).is_err());
        let zero = SceneSpec {
            road_width: [0.0, 3.0],
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }
}
