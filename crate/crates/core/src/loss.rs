//! Dice + focal objective over per-channel probability maps.
//!
//! Inputs are `C x H x W`: `s` holds probabilities, `g` holds 0/1 targets.

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Balancing factor, shared by all classes.
    pub alpha: f64,
    /// Focusing exponent.
    pub gamma: f64,
    /// Smoothing inside logs and the Dice denominator.
    pub epsilon: f64,
    /// Adds the `(1 - alpha) s^gamma (1 - g) log(1 - s)` negative-pixel term.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            gamma: 2.0,
            epsilon: 1e-6,
            symmetric: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

fn check(s: &ArrayView3<f64>, g: &ArrayView3<f64>) -> Result<()> {
    if s.dim() != g.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            s.dim(),
            g.dim()
        )));
    }
    Ok(())
}

fn dice_parts(s: &ArrayView3<f64>, g: &ArrayView3<f64>, eps: f64) -> (f64, f64) {
    let inter: f64 = Zip::from(s).and(g).fold(0.0, |acc, &a, &b| acc + a * b);
    let denom = s.iter().map(|v| v.abs()).sum::<f64>()
        + g.iter().map(|v| v.abs()).sum::<f64>()
        + eps * s.shape()[0] as f64;
    (inter, denom)
}

/// `1 - 2 sum_c <S_c, G_c> / sum_c (|S_c|_1 + |G_c|_1 + eps)`.
pub fn dice_loss(s: ArrayView3<f64>, g: ArrayView3<f64>, eps: f64) -> Result<f64> {
    check(&s, &g)?;
    let (inter, denom) = dice_parts(&s, &g, eps);
    Ok(1.0 - 2.0 * inter / denom)
}

fn focal_pixel(s: f64, g: f64, cfg: &LossConfig) -> f64 {
    let mut v = -cfg.alpha * (1.0 - s).powf(cfg.gamma) * g * (s + cfg.epsilon).ln();
    if cfg.symmetric {
        v -= (1.0 - cfg.alpha) * s.powf(cfg.gamma) * (1.0 - g) * (1.0 - s + cfg.epsilon).ln();
    }
    v
}

fn focal_pixel_grad(s: f64, g: f64, cfg: &LossConfig) -> f64 {
    let (a, gm, eps) = (cfg.alpha, cfg.gamma, cfg.epsilon);
    let mut d = 0.0;
    if g != 0.0 {
        let dmod = if gm == 0.0 {
            0.0
        } else {
            -gm * (1.0 - s).powf(gm - 1.0)
        };
        d -= a * g * (dmod * (s + eps).ln() + (1.0 - s).powf(gm) / (s + eps));
    }
    if cfg.symmetric && g != 1.0 {
        let dmod = if gm == 0.0 { 0.0 } else { gm * s.powf(gm - 1.0) };
        d -= (1.0 - a)
            * (1.0 - g)
            * (dmod * (1.0 - s + eps).ln() - s.powf(gm) / (1.0 - s + eps));
    }
    d
}

/// Focal term summed over channels and pixels, divided by the per-channel
/// pixel count `H * W`.
pub fn focal_loss(s: ArrayView3<f64>, g: ArrayView3<f64>, cfg: &LossConfig) -> Result<f64> {
    check(&s, &g)?;
    let n = (s.shape()[1] * s.shape()[2]).max(1) as f64;
    let sum = Zip::from(&s)
        .and(&g)
        .fold(0.0, |acc, &a, &b| acc + focal_pixel(a, b, cfg));
    Ok(sum / n)
}

pub fn dice_focal(s: ArrayView3<f64>, g: ArrayView3<f64>, cfg: &LossConfig) -> Result<f64> {
    Ok(dice_loss(s, g, cfg.epsilon)? + focal_loss(s, g, cfg)?)
}

/// Loss value and its gradient with respect to `s`.
pub fn dice_focal_with_grad(
    s: ArrayView3<f64>,
    g: ArrayView3<f64>,
    cfg: &LossConfig,
) -> Result<(f64, Array3<f64>)> {
    let value = dice_focal(s, g, cfg)?;
    let (inter, denom) = dice_parts(&s, &g, cfg.epsilon);
    let n = (s.shape()[1] * s.shape()[2]).max(1) as f64;
    let mut grad = Array3::zeros(s.dim());
    Zip::from(&mut grad).and(&s).and(&g).for_each(|d, &sv, &gv| {
        let sign = if sv < 0.0 { -1.0 } else { 1.0 };
        let ddice = -2.0 * (gv * denom - inter * sign) / (denom * denom);
        *d = ddice + focal_pixel_grad(sv, gv, cfg) / n;
    });
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent per-pixel loop over nested vectors.
    fn oracle(s: &[Vec<Vec<f64>>], g: &[Vec<Vec<f64>>], a: f64, gm: f64, eps: f64) -> f64 {
        let (mut inter, mut denom, mut focal) = (0.0, 0.0, 0.0);
        let n = (s[0].len() * s[0][0].len()) as f64;
        for c in 0..s.len() {
            let (mut ss, mut gs) = (0.0, 0.0);
            for i in 0..s[c].len() {
                for j in 0..s[c][i].len() {
                    let (p, t) = (s[c][i][j], g[c][i][j]);
                    inter += p * t;
                    ss += p;
                    gs += t;
                    if t == 1.0 {
                        focal += a * (1.0 - p).powf(gm) * (p + eps).ln();
                    }
                }
            }
            denom += ss + gs + eps;
        }
        1.0 - 2.0 * inter / denom - focal / n
    }

    fn random_pair(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> (Array3<f64>, Array3<f64>) {
        let s = Array3::from_shape_fn((c, h, w), |_| rng.random::<f64>());
        let g = Array3::from_shape_fn((c, h, w), |_| f64::from(u8::from(rng.random_bool(0.4))));
        (s, g)
    }

    fn nested(a: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
        a.outer_iter()
            .map(|m| m.rows().into_iter().map(|r| r.to_vec()).collect())
            .collect()
    }

    #[test]
    fn dice_examples() {
        let s = Array3::from_shape_vec((1, 1, 4), vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let g = Array3::from_shape_vec((1, 1, 4), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(dice_loss(s.view(), g.view(), 1e-6).unwrap(), 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(dice_loss(g.view(), g.view(), 1e-6).unwrap(), 0.0, epsilon = 1e-6);
        let d = Array3::from_shape_vec((1, 1, 4), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(dice_loss(d.view(), g.view(), 1e-6).unwrap(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn focal_examples() {
        let cfg = LossConfig::default();
        let s = Array3::from_elem((1, 1, 1), 0.5);
        let g = Array3::from_elem((1, 1, 1), 1.0);
        let want = 0.8 * 0.25 * 2f64.ln();
        assert_abs_diff_eq!(focal_loss(s.view(), g.view(), &cfg).unwrap(), want, epsilon = 1e-5);
        assert_abs_diff_eq!(want, 0.13863, epsilon = 1e-5);

        let ones = Array3::from_elem((2, 3, 3), 1.0);
        assert_abs_diff_eq!(focal_loss(ones.view(), ones.view(), &cfg).unwrap(), 0.0, epsilon = 1e-6);
        let zeros = Array3::zeros((2, 3, 3));
        let anything = Array3::from_elem((2, 3, 3), 0.3);
        assert_eq!(focal_loss(anything.view(), zeros.view(), &cfg).unwrap(), 0.0);
    }

    #[test]
    fn perfect_prediction_and_additivity() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (s, g) = random_pair(&mut rng, 2, 8, 8);
        assert_abs_diff_eq!(dice_focal(g.view(), g.view(), &cfg).unwrap(), 0.0, epsilon = 1e-6);
        let total = dice_focal(s.view(), g.view(), &cfg).unwrap();
        let parts = dice_loss(s.view(), g.view(), cfg.epsilon).unwrap()
            + focal_loss(s.view(), g.view(), &cfg).unwrap();
        assert_eq!(total, parts);
    }

    #[test]
    fn matches_scalar_oracle() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (s, g) = random_pair(&mut rng, 2, 8, 8);
            let got = dice_focal(s.view(), g.view(), &cfg).unwrap();
            let want = oracle(&nested(&s), &nested(&g), 0.8, 2.0, 1e-6);
            assert_abs_diff_eq!(got, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Array3::zeros((1, 2, 2));
        let b = Array3::zeros((2, 2, 2));
        assert!(matches!(dice_loss(a.view(), b.view(), 1e-6), Err(Error::Shape(_))));
        assert!(focal_loss(a.view(), b.view(), &LossConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { gamma: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
    }

    fn fd_check(cfg: &LossConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, g) = random_pair(&mut rng, 2, 4, 4);
        let s = s.mapv(|v| 0.05 + 0.9 * v);
        let (_, grad) = dice_focal_with_grad(s.view(), g.view(), cfg).unwrap();
        let h = 1e-6;
        for idx in 0..s.len() {
            let mut plus = s.clone();
            let mut minus = s.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let num = (dice_focal(plus.view(), g.view(), cfg).unwrap()
                - dice_focal(minus.view(), g.view(), cfg).unwrap())
                / (2.0 * h);
            let ana = grad.as_slice().unwrap()[idx];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-4, "idx {idx}: analytic {ana} numeric {num}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        fd_check(&LossConfig::default(), 3);
        fd_check(&LossConfig { symmetric: true, ..Default::default() }, 4);
        fd_check(&LossConfig { gamma: 0.0, ..Default::default() }, 5);
    }

    proptest! {
        #[test]
        fn nonnegative_and_monotone_toward_target(seed in any::<u64>(), t in 0.0f64..1.0) {
            let cfg = LossConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, g) = random_pair(&mut rng, 2, 6, 6);
            let before = dice_focal(s.view(), g.view(), &cfg).unwrap();
            prop_assert!(before >= -1e-9);
            let step = &s + &((&g - &s) * t);
            let after = dice_focal(step.view(), g.view(), &cfg).unwrap();
            prop_assert!(after <= before + 1e-9);
        }
    }
}
