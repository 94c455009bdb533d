//! Binary morphology for mask refinement: erosion, dilation and their
//! opening/closing composites with rectangular all-ones elements.
//!
//! Pixels outside the image count as background for both operations.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::raster::BinaryMask;
use crate::{Error, Result};

/// All-ones rectangle anchored at `(height / 2, width / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuringElement {
    pub height: usize,
    pub width: usize,
}

impl StructuringElement {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "structuring element must be non-empty, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }

    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, size)
    }

    /// Offset ranges `(rows, cols)` covered relative to the anchor.
    pub fn offsets(&self) -> ((isize, isize), (isize, isize)) {
        let ay = (self.height / 2) as isize;
        let ax = (self.width / 2) as isize;
        (
            (-ay, self.height as isize - 1 - ay),
            (-ax, self.width as isize - 1 - ax),
        )
    }

    fn reflected_offsets(&self) -> ((isize, isize), (isize, isize)) {
        let ((r0, r1), (c0, c1)) = self.offsets();
        ((-r1, -r0), (-c1, -c0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MorphOp {
    Erode,
    Dilate,
    Open,
    Close,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphConfig {
    pub element: StructuringElement,
    /// Repetitions of each elementary op inside a step.
    pub iterations: usize,
    pub sequence: Vec<MorphOp>,
}

impl MorphConfig {
    /// 10x10 element, 10 iterations, opening then closing (1024x1024 imagery).
    pub fn full_scale() -> Self {
        Self {
            element: StructuringElement {
                height: 10,
                width: 10,
            },
            iterations: 10,
            sequence: vec![MorphOp::Open, MorphOp::Close],
        }
    }

    /// 3x3 element, one iteration; suited to 128x128 tiles.
    pub fn desk() -> Self {
        Self {
            element: StructuringElement {
                height: 3,
                width: 3,
            },
            iterations: 1,
            sequence: vec![MorphOp::Open, MorphOp::Close],
        }
    }
}

impl Default for MorphConfig {
    fn default() -> Self {
        Self::desk()
    }
}

type Range2 = ((isize, isize), (isize, isize));

/// Separable window reduction. `all = true` is AND (erosion), otherwise OR.
/// Out-of-image pixels read as `false`.
fn window(mask: &BinaryMask, ((r0, r1), (c0, c1)): Range2, all: bool) -> BinaryMask {
    let (h, w) = mask.dim();
    let pass = |src: &BinaryMask, lo: isize, hi: isize, along_rows: bool| -> BinaryMask {
        let mut out = Array2::from_elem((h, w), false);
        let len = if along_rows { w } else { h } as isize;
        let lines = if along_rows { h } else { w };
        for line in 0..lines {
            let get = |i: isize| -> bool {
                if i < 0 || i >= len {
                    false
                } else if along_rows {
                    src[[line, i as usize]]
                } else {
                    src[[i as usize, line]]
                }
            };
            // Running count of set pixels inside the sliding window.
            let mut count = (lo..=hi).filter(|&d| get(d)).count();
            let size = (hi - lo + 1) as usize;
            for i in 0..len {
                if i > 0 {
                    if get(i - 1 + lo) {
                        count -= 1;
                    }
                    if get(i + hi) {
                        count += 1;
                    }
                }
                let v = if all { count == size } else { count > 0 };
                if along_rows {
                    out[[line, i as usize]] = v;
                } else {
                    out[[i as usize, line]] = v;
                }
            }
        }
        out
    };
    let tmp = pass(mask, c0, c1, true);
    pass(&tmp, r0, r1, false)
}

/// `E(x) = 1` iff every `x + b`, `b` in the element, is set.
pub fn erode(mask: &BinaryMask, element: &StructuringElement) -> BinaryMask {
    window(mask, element.offsets(), true)
}

/// `D(x) = 1` iff some `x + b`, `b` in the element, is set.
pub fn dilate(mask: &BinaryMask, element: &StructuringElement) -> BinaryMask {
    window(mask, element.offsets(), false)
}

fn repeat(mask: &BinaryMask, n: usize, f: impl Fn(&BinaryMask) -> BinaryMask) -> BinaryMask {
    (0..n).fold(mask.clone(), |m, _| f(&m))
}

// Inside the composites the dilation uses the reflected element, so opening
// is the union of element translates fitting in the mask. For odd sizes the
// reflection is the element itself.
fn dilate_reflected(mask: &BinaryMask, element: &StructuringElement) -> BinaryMask {
    window(mask, element.reflected_offsets(), false)
}

/// `n` erosions followed by `n` dilations.
pub fn opening(mask: &BinaryMask, element: &StructuringElement, n: usize) -> BinaryMask {
    let e = repeat(mask, n, |m| erode(m, element));
    repeat(&e, n, |m| dilate_reflected(m, element))
}

/// `n` dilations followed by `n` erosions.
pub fn closing(mask: &BinaryMask, element: &StructuringElement, n: usize) -> BinaryMask {
    let d = repeat(mask, n, |m| dilate_reflected(m, element));
    repeat(&d, n, |m| erode(m, element))
}

pub fn refine(mask: &BinaryMask, config: &MorphConfig) -> BinaryMask {
    let (el, n) = (&config.element, config.iterations);
    config.sequence.iter().fold(mask.clone(), |m, op| match op {
        MorphOp::Erode => repeat(&m, n, |x| erode(x, el)),
        MorphOp::Dilate => repeat(&m, n, |x| dilate(x, el)),
        MorphOp::Open => opening(&m, el, n),
        MorphOp::Close => closing(&m, el, n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force neighborhood min/max with zero padding.
    fn naive(mask: &BinaryMask, ((r0, r1), (c0, c1)): Range2, all: bool) -> BinaryMask {
        let (h, w) = mask.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut hits = 0;
            let mut total = 0;
            for dy in r0..=r1 {
                for dx in c0..=c1 {
                    total += 1;
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && mask[[yy as usize, xx as usize]] {
                        hits += 1;
                    }
                }
            }
            if all {
                hits == total
            } else {
                hits > 0
            }
        })
    }

    fn random_mask(seed: u64, h: usize, w: usize, p: f64) -> BinaryMask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random_bool(p))
    }

    #[test]
    fn erode_all_ones_keeps_center() {
        let m = Array2::from_elem((3, 3), true);
        let e = erode(&m, &StructuringElement::square(3).unwrap());
        let mut want = Array2::from_elem((3, 3), false);
        want[[1, 1]] = true;
        assert_eq!(e, want);
    }

    #[test]
    fn dilate_single_pixel_gives_block() {
        let mut m = Array2::from_elem((5, 5), false);
        m[[2, 2]] = true;
        let d = dilate(&m, &StructuringElement::square(3).unwrap());
        let want = Array2::from_shape_fn((5, 5), |(y, x)| (1..=3).contains(&y) && (1..=3).contains(&x));
        assert_eq!(d, want);
    }

    #[test]
    fn empty_stays_empty() {
        let m = Array2::from_elem((6, 7), false);
        let el = StructuringElement::new(2, 3).unwrap();
        assert_eq!(erode(&m, &el), m);
        assert_eq!(dilate(&m, &el), m);
    }

    #[test]
    fn matches_naive_oracle() {
        let sizes = [(3, 3), (10, 10), (2, 5), (4, 1), (1, 1)];
        for seed in 0..100u64 {
            let m = random_mask(seed, 32, 32, 0.3 + 0.4 * (seed % 2) as f64);
            let (h, w) = sizes[seed as usize % sizes.len()];
            let el = StructuringElement::new(h, w).unwrap();
            assert_eq!(erode(&m, &el), naive(&m, el.offsets(), true));
            assert_eq!(dilate(&m, &el), naive(&m, el.offsets(), false));
        }
    }

    #[test]
    fn refine_matches_sequence_oracle() {
        let cfg = MorphConfig {
            element: StructuringElement::new(4, 3).unwrap(),
            iterations: 2,
            sequence: vec![MorphOp::Open, MorphOp::Close],
        };
        let el = cfg.element;
        let refl = el.reflected_offsets();
        for seed in 0..10 {
            let m = random_mask(seed, 24, 24, 0.5);
            let mut o = m.clone();
            for _ in 0..2 {
                o = naive(&o, el.offsets(), true);
            }
            for _ in 0..2 {
                o = naive(&o, refl, false);
            }
            for _ in 0..2 {
                o = naive(&o, refl, false);
            }
            for _ in 0..2 {
                o = naive(&o, el.offsets(), true);
            }
            assert_eq!(refine(&m, &cfg), o);
        }
    }

    #[test]
    fn speck_removed_by_opening() {
        let mut m = Array2::from_elem((40, 40), false);
        for y in 20..22 {
            for x in 20..22 {
                m[[y, x]] = true;
            }
        }
        let cfg = MorphConfig {
            iterations: 1,
            ..MorphConfig::full_scale()
        };
        assert!(refine(&m, &cfg).iter().all(|&b| !b));
        assert!(refine(&m, &MorphConfig::full_scale()).iter().all(|&b| !b));
    }

    #[test]
    fn parallel_segments_joined_by_closing() {
        // Two 20-pixel-wide vertical bands with a 5-pixel gap.
        let m = Array2::from_shape_fn((80, 80), |(_, x)| (20..40).contains(&x) || (45..65).contains(&x));
        let el = StructuringElement::square(10).unwrap();
        let closed = closing(&m, &el, 1);
        for y in 10..70 {
            assert!((40..45).all(|x| closed[[y, x]]), "gap open at row {y}");
        }
        let cfg = MorphConfig {
            iterations: 1,
            ..MorphConfig::full_scale()
        };
        let refined = refine(&m, &cfg);
        assert!((40..45).all(|x| refined[[40, x]]));
    }

    #[test]
    fn zero_iterations_is_identity() {
        let m = random_mask(3, 16, 16, 0.5);
        let cfg = MorphConfig {
            iterations: 0,
            ..MorphConfig::full_scale()
        };
        assert_eq!(refine(&m, &cfg), m);
    }

    proptest! {
        #[test]
        fn morphology_laws(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, n in 1usize..3) {
            let m = random_mask(seed, 20, 20, 0.5);
            let el = StructuringElement::new(h, w).unwrap();
            let e = erode(&m, &el);
            let d = dilate(&m, &el);
            for ((a, b), c) in e.iter().zip(m.iter()).zip(d.iter()) {
                prop_assert!(!*a || *b);
                prop_assert!(!*b || *c);
            }
            // Duality away from the border.
            let dual = dilate(&m.mapv(|b| !b), &el).mapv(|b| !b);
            for y in h..20 - h {
                for x in w..20 - w {
                    prop_assert_eq!(e[[y, x]], dual[[y, x]]);
                }
            }
            let o = opening(&m, &el, n);
            prop_assert_eq!(&opening(&o, &el, n), &o);
            let c = closing(&m, &el, n);
            prop_assert_eq!(&closing(&c, &el, n), &c);
        }
    }
}
