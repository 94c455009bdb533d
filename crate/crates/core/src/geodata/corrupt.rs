//! Simulated pseudo-labels: ground truth degraded by random local edits
//! until a target fraction of pixels disagrees.

use log::warn;
use rand::Rng;

use crate::raster::{ClassCatalog, LabelMap};
use crate::seed::{rng_for, stream};
use crate::{Error, Result};

const MAX_EDITS: usize = 100_000;

/// Applies, in random order, patch dropouts (foreground set to background),
/// local boundary erosion, local boundary dilation and patch flips to a
/// random class. Edits stop once the disagreement with `gt` reaches `rate`;
/// a single edit touches at most a 16x16 window, so the overshoot is small.
///
/// Dropouts and erosion dominate the mix, which keeps most remaining
/// foreground pixels correct.
pub fn corrupt_labels(gt: &LabelMap, rate: f64, seed: u64, catalog: &ClassCatalog) -> Result<LabelMap> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "corruption rate must be in [0, 1), got {rate}"
        )));
    }
    let mut out = gt.clone();
    if rate == 0.0 {
        return Ok(out);
    }
    let bg = catalog.background_id();
    let n_classes = catalog.entries().len() as u8;
    let (h, w) = (gt.height(), gt.width());
    let total = (h * w) as f64;
    let mut rng = rng_for(seed, &[stream::CORRUPT]);
    let mut differing = 0usize;

    for _ in 0..MAX_EDITS {
        if differing as f64 / total >= rate {
            return Ok(out);
        }
        let map = out.as_array_mut();
        let fg: Vec<(usize, usize)> = map
            .indexed_iter()
            .filter(|(_, &v)| v != bg)
            .map(|(i, _)| i)
            .collect();
        let roll: f64 = rng.random();
        let anchor = |rng: &mut rand_chacha::ChaCha8Rng| {
            if fg.is_empty() || roll >= 0.9 {
                (rng.random_range(0..h), rng.random_range(0..w))
            } else {
                fg[rng.random_range(0..fg.len())]
            }
        };
        let (cy, cx) = anchor(&mut rng);
        let window = |half: usize| {
            (
                cy.saturating_sub(half)..(cy + half).min(h),
                cx.saturating_sub(half)..(cx + half).min(w),
            )
        };
        if fg.is_empty() || roll >= 0.9 {
            let half = rng.random_range(2..=5);
            let id = rng.random_range(0..n_classes);
            let (ys, xs) = window(half);
            for y in ys {
                for x in xs.clone() {
                    map[[y, x]] = id;
                }
            }
        } else if roll < 0.45 {
            let half = rng.random_range(2..=6);
            let (ys, xs) = window(half);
            for y in ys {
                for x in xs.clone() {
                    map[[y, x]] = bg;
                }
            }
        } else {
            let dilate = roll >= 0.75;
            let (ys, xs) = window(8);
            let snapshot = map.clone();
            for y in ys {
                for x in xs.clone() {
                    let v = snapshot[[y, x]];
                    let nb = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)]
                        .iter()
                        .map(|(dy, dx)| (y as i64 + dy, x as i64 + dx))
                        .filter(|&(yy, xx)| yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w)
                        .map(|(yy, xx)| snapshot[[yy as usize, xx as usize]]);
                    if dilate && v == bg {
                        if let Some(c) = nb.clone().find(|&c| c != bg) {
                            map[[y, x]] = c;
                        }
                    } else if !dilate && v != bg && nb.clone().any(|c| c == bg) {
                        map[[y, x]] = bg;
                    }
                }
            }
        }
        differing = map
            .iter()
            .zip(gt.as_array().iter())
            .filter(|(a, b)| a != b)
            .count();
    }
    warn!("label corruption stopped after {MAX_EDITS} edits short of rate {rate}");
    Ok(out)
}
