//! IoU and average precision for binary segmentation, plus class means.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::raster::BinaryMask;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouScore {
    pub value: f64,
    /// Both masks were empty; `value` is 1.0 by convention.
    pub degenerate: bool,
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<IouScore> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 {
        IouScore {
            value: 1.0,
            degenerate: true,
        }
    } else {
        IouScore {
            value: inter as f64 / union as f64,
            degenerate: false,
        }
    })
}

/// `(recall, precision)` after each distinct threshold, highest score first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<(f64, f64)>,
}

impl PrCurve {
    /// `sum_n (R_n - R_{n-1}) P_n` with `R_0 = 0`.
    pub fn average_precision(&self) -> f64 {
        let mut prev = 0.0;
        let mut ap = 0.0;
        for &(r, p) in &self.points {
            ap += (r - prev) * p;
            prev = r;
        }
        ap
    }
}

/// A pixel is predicted positive at threshold `t` when its score is `>= t`.
pub fn pr_curve(scores: ArrayView2<f64>, gt: &BinaryMask) -> Result<PrCurve> {
    if scores.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "scores {:?} vs ground truth {:?}",
            scores.dim(),
            gt.dim()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(gt.iter().copied()).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(PrCurve { points })
}

pub fn average_precision(scores: ArrayView2<f64>, gt: &BinaryMask) -> Result<f64> {
    Ok(pr_curve(scores, gt)?.average_precision())
}

/// Arithmetic mean of per-class scores (mIoU, mAP).
pub fn aggregate(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::Empty("per-class score list"));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_examples() {
        let pred = array![[true, true, true, false]];
        let gt = array![[false, false, true, true]];
        assert_eq!(iou(&pred, &gt).unwrap().value, 0.25);
        assert_eq!(iou(&pred, &pred).unwrap().value, 1.0);
        let disjoint = array![[false, false, false, true]];
        assert_eq!(iou(&pred, &disjoint).unwrap().value, 0.0);
        let empty = Array2::from_elem((1, 4), false);
        let s = iou(&empty, &empty).unwrap();
        assert!(s.degenerate && s.value == 1.0);
        assert!(iou(&pred, &Array2::from_elem((2, 2), false)).is_err());
    }

    #[test]
    fn ap_examples() {
        let scores = array![[0.9, 0.8, 0.1]];
        let gt = array![[true, false, true]];
        assert_abs_diff_eq!(
            average_precision(scores.view(), &gt).unwrap(),
            0.5 + 0.5 * 2.0 / 3.0,
            epsilon = 1e-12
        );
        let ranked = array![[0.9, 0.7, 0.2, 0.1]];
        let gt = array![[true, true, false, false]];
        assert_eq!(average_precision(ranked.view(), &gt).unwrap(), 1.0);
        let none = Array2::from_elem((1, 4), false);
        assert!(matches!(
            average_precision(ranked.view(), &none),
            Err(Error::NoPositives)
        ));
    }

    #[test]
    fn aggregate_examples() {
        assert_abs_diff_eq!(aggregate(&[0.70, 0.39]).unwrap(), 0.545, epsilon = 1e-12);
        assert_eq!(aggregate(&[0.3]).unwrap(), 0.3);
        assert!(aggregate(&[]).is_err());
    }

    /// Recomputes precision and recall from scratch at every distinct score.
    fn brute_force_ap(scores: &[f64], gt: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = gt.iter().filter(|&&g| g).count() as f64;
        let mut prev_r = 0.0;
        let mut ap = 0.0;
        for t in thresholds {
            let tp = scores.iter().zip(gt).filter(|(&s, &g)| s >= t && g).count() as f64;
            let pp = scores.iter().filter(|&&s| s >= t).count() as f64;
            let r = tp / pos;
            ap += (r - prev_r) * (tp / pp);
            prev_r = r;
        }
        ap
    }

    #[test]
    fn ap_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            // Quantized scores force ties.
            let scores = Array2::from_shape_fn((16, 16), |_| (rng.random::<f64>() * 20.0).floor() / 20.0);
            let mut gt = Array2::from_shape_fn((16, 16), |_| rng.random_bool(0.3));
            gt[[0, 0]] = true;
            let got = average_precision(scores.view(), &gt).unwrap();
            let want = brute_force_ap(scores.as_slice().unwrap(), gt.as_slice().unwrap());
            assert_abs_diff_eq!(got, want, epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn iou_properties(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((7, 5), |_| rng.random_bool(0.4));
            let b = Array2::from_shape_fn((7, 5), |_| rng.random_bool(0.4));
            let ab = iou(&a, &b).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&b, &a).unwrap().value);
            let at = a.t().to_owned();
            let bt = b.t().to_owned();
            prop_assert_eq!(ab, iou(&at, &bt).unwrap().value);
        }

        #[test]
        fn ap_bounds_and_separation(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores = Array2::from_shape_fn((6, 6), |_| rng.random::<f64>());
            let mut gt = Array2::from_shape_fn((6, 6), |_| rng.random_bool(0.5));
            gt[[2, 2]] = true;
            let ap = average_precision(scores.view(), &gt).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
            let min_pos = scores.iter().zip(gt.iter()).filter(|(_, &g)| g).map(|(&s, _)| s).fold(f64::INFINITY, f64::min);
            let max_neg = scores.iter().zip(gt.iter()).filter(|(_, &g)| !g).map(|(&s, _)| s).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(min_pos > max_neg, (ap - 1.0).abs() < 1e-12);
        }
    }
}
