//! Segmentation losses on probability maps.
//!
//! Targets may be soft (calibrated pseudo-labels) or binary.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Probability clip applied inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
/// Additive smoothing in the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

fn check(pred: &[impl Copy], target: &[impl Copy]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("prediction has {} pixels, target {}", pred.len(), target.len())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy with probabilities clipped to `[eps, 1-eps]`.
pub fn bce_loss<T: Real>(pred: &[T], target: &[T]) -> Result<T> {
    check(pred, target)?;
    Ok(bce_slice(pred, target))
}

/// `1 - (2 sum(p t) + s) / (sum p + sum t + s)`.
pub fn dice_loss<T: Real>(pred: &[T], target: &[T]) -> Result<T> {
    check(pred, target)?;
    Ok(dice_slice(pred, target))
}

pub fn combined_loss<T: Real>(pred: &[T], target: &[T], w_bce: T, w_dice: T) -> Result<T> {
    check(pred, target)?;
    Ok(combined_loss_slice(pred, target, w_bce, w_dice))
}

fn bce_slice<T: Real>(pred: &[T], target: &[T]) -> T {
    let eps = T::from_f64_lossy(BCE_EPS);
    let hi = T::one() - eps;
    let n = T::from_usize(pred.len()).unwrap();
    let s: T = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.max(eps).min(hi);
            -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
        })
        .sum();
    s / n
}

fn dice_slice<T: Real>(pred: &[T], target: &[T]) -> T {
    let s = T::from_f64_lossy(DICE_SMOOTH);
    let two = T::from_f64_lossy(2.0);
    let inter: T = pred.iter().zip(target).map(|(&p, &t)| p * t).sum();
    let sp: T = pred.iter().copied().sum();
    let st: T = target.iter().copied().sum();
    T::one() - (two * inter + s) / (sp + st + s)
}

/// Unchecked weighted sum; lengths must agree.
pub(crate) fn combined_loss_slice<T: Real>(pred: &[T], target: &[T], w_bce: T, w_dice: T) -> T {
    let mut l = T::zero();
    if w_bce != T::zero() {
        l += w_bce * bce_slice(pred, target);
    }
    if w_dice != T::zero() {
        l += w_dice * dice_slice(pred, target);
    }
    l
}

/// Gradient of [`combined_loss`] with respect to `pred`. Clipped pixels get
/// zero cross-entropy gradient.
pub(crate) fn combined_loss_grad<T: Real>(pred: &[T], target: &[T], w_bce: T, w_dice: T) -> Vec<T> {
    let eps = T::from_f64_lossy(BCE_EPS);
    let hi = T::one() - eps;
    let n = T::from_usize(pred.len()).unwrap();
    let s = T::from_f64_lossy(DICE_SMOOTH);
    let two = T::from_f64_lossy(2.0);
    let inter: T = pred.iter().zip(target).map(|(&p, &t)| p * t).sum();
    let sp: T = pred.iter().copied().sum();
    let st: T = target.iter().copied().sum();
    let den = sp + st + s;
    let num = two * inter + s;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let mut g = T::zero();
            if w_bce != T::zero() && p > eps && p < hi {
                g += w_bce * (-t / p + (T::one() - t) / (T::one() - p)) / n;
            }
            if w_dice != T::zero() {
                g += w_dice * -(two * t * den - num) / (den * den);
            }
            g
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_reference_values() {
        let ones = vec![1.0f64; 16];
        assert!(bce_loss(&ones, &ones).unwrap() < 1e-6);
        let half = vec![0.5f64; 9];
        let t: Vec<f64> = (0..9).map(|i| i as f64 / 8.0).collect();
        assert!((bce_loss(&half, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(&[0.9f64], &[1.0]).unwrap() - 0.105_360_515_657_826_3).abs() < 1e-15);
    }

    #[test]
    fn dice_reference_values() {
        let ones = vec![1.0f64; 100];
        let zeros = vec![0.0f64; 100];
        assert_eq!(dice_loss(&ones, &ones).unwrap(), 0.0);
        assert!((dice_loss(&zeros, &ones).unwrap() - (1.0 - 1.0 / 101.0)).abs() < 1e-15);
        assert!((dice_loss(&zeros, &ones).unwrap() - 0.990_099_009_900_990_1).abs() < 1e-15);
        assert_eq!(dice_loss(&zeros, &zeros).unwrap(), 0.0);
    }

    #[test]
    fn combined_weights_select_components() {
        let p = [0.2f64, 0.7, 0.9, 0.4];
        let t = [0.0f64, 1.0, 0.5, 1.0];
        let b = bce_loss(&p, &t).unwrap();
        let d = dice_loss(&p, &t).unwrap();
        assert_eq!(combined_loss(&p, &t, 1.0, 0.0).unwrap(), b);
        assert_eq!(combined_loss(&p, &t, 0.0, 1.0).unwrap(), d);
        assert!((combined_loss(&p, &t, 1.0, 1.0).unwrap() - (b + d)).abs() < 1e-15);
        let ones = [1.0f64; 4];
        assert!(combined_loss(&ones, &ones, 1.0, 1.0).unwrap() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(matches!(bce_loss(&[0.5f64; 3], &[0.5; 4]), Err(Error::Shape(_))));
        assert!(dice_loss(&[0.5f64; 3], &[0.5; 2]).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = vec![0.13f64, 0.52, 0.91, 0.33, 0.77];
        let t = vec![0.0f64, 0.25, 1.0, 0.6, 1.0];
        let g = combined_loss_grad(&p, &t, 1.0, 1.0);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut a = p.clone();
            a[i] += h;
            let mut b = p.clone();
            b[i] -= h;
            let num = (combined_loss_slice(&a, &t, 1.0, 1.0) - combined_loss_slice(&b, &t, 1.0, 1.0)) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-8, "{i}: {num} vs {}", g[i]);
        }
    }
}
