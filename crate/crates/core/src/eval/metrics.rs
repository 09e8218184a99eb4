//! Pixel-level saliency metrics and box localisation.

use super::bbox::BoundingBox;
use super::EvalError;
use crate::tensor_io::MaskImage;

/// Weight of precision relative to recall in F-beta.
pub const BETA2: f64 = 0.3;

/// Number of binarisation thresholds in the F-beta sweep (`i / 255`).
pub const THRESHOLDS: usize = 256;

fn check_dims(a: &MaskImage, b: &MaskImage) -> Result<(), EvalError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(EvalError::DimMismatch {
            left: (a.width(), a.height()),
            right: (b.width(), b.height()),
        });
    }
    Ok(())
}

/// Pixel accuracy and foreground IoU. Two empty foregrounds have IoU 1.
pub fn saliency_metrics(pred: &MaskImage, gt: &MaskImage) -> Result<(f64, f64), EvalError> {
    check_dims(pred, gt)?;
    let (mut agree, mut inter, mut union) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        let (p, g) = (p != 0, g != 0);
        agree += (p == g) as usize;
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    let acc = agree as f64 / pred.values().len() as f64;
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok((acc, iou))
}

/// F-beta from confusion counts. Zero true positives score 0 unless both
/// prediction and ground truth are empty, which scores 1.
pub fn f_beta(tp: usize, fp: usize, fn_: usize, beta2: f64) -> f64 {
    if tp == 0 {
        return if fp == 0 && fn_ == 0 { 1.0 } else { 0.0 };
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    (1.0 + beta2) * precision * recall / (beta2 * precision + recall)
}

/// A soft prediction map in [0, 1] paired with its dimensions.
#[derive(Clone, Debug)]
pub struct SoftMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Dataset-level maximum F-beta over a single shared threshold.
///
/// At each threshold `i / 255` every map is binarised with `value > t`,
/// per-image F-beta is computed, and the images are averaged; the best mean
/// and its threshold are returned.
pub fn max_f_beta(preds: &[SoftMap], gts: &[MaskImage], beta2: f64) -> Result<(f64, f64), EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if preds.len() != gts.len() {
        return Err(EvalError::CountMismatch(preds.len(), gts.len()));
    }
    // Per-image histograms of foreground/background pixels per threshold
    // bucket make the sweep linear in pixels.
    let mut sums = vec![0.0; THRESHOLDS];
    for (pred, gt) in preds.iter().zip(gts) {
        if pred.width != gt.width() || pred.height != gt.height() {
            return Err(EvalError::DimMismatch {
                left: (pred.width, pred.height),
                right: (gt.width(), gt.height()),
            });
        }
        // bucket b holds values v with (b-1)/255 < v <= b/255, i.e. pixels that
        // are foreground for thresholds i < b
        let mut pos = vec![0usize; THRESHOLDS + 1];
        let mut neg = vec![0usize; THRESHOLDS + 1];
        let mut total_pos = 0usize;
        for (&v, &g) in pred.values.iter().zip(gt.values()) {
            let b = bucket(v);
            if g != 0 {
                pos[b] += 1;
                total_pos += 1;
            } else {
                neg[b] += 1;
            }
        }
        // pixels foreground at threshold i are those with bucket > i
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut tp_at = vec![0usize; THRESHOLDS];
        let mut fp_at = vec![0usize; THRESHOLDS];
        for i in (0..THRESHOLDS).rev() {
            tp += pos[i + 1];
            fp += neg[i + 1];
            tp_at[i] = tp;
            fp_at[i] = fp;
        }
        for i in 0..THRESHOLDS {
            sums[i] += f_beta(tp_at[i], fp_at[i], total_pos - tp_at[i], beta2);
        }
    }
    let n = preds.len() as f64;
    let (best_i, best) = sums
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &s)| if s / n > acc.1 { (i, s / n) } else { acc });
    Ok((best, best_i as f64 / 255.0))
}

/// Smallest `b` with `v <= b / 255`, so `v > i / 255` exactly when `b > i`.
fn bucket(v: f64) -> usize {
    if !(v > 0.0) {
        return 0;
    }
    let mut b = (v * 255.0).ceil() as usize;
    // guard against rounding in v * 255
    while b > 0 && v <= (b - 1) as f64 / 255.0 {
        b -= 1;
    }
    while b < THRESHOLDS && v > b as f64 / 255.0 {
        b += 1;
    }
    b.min(THRESHOLDS)
}

/// IoU of two inclusive pixel boxes.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix0 = a.x0.max(b.x0);
    let iy0 = a.y0.max(b.y0);
    let ix1 = a.x1.min(b.x1);
    let iy1 = a.y1.min(b.y1);
    let inter = if ix0 <= ix1 && iy0 <= iy1 {
        (ix1 - ix0 + 1) * (iy1 - iy0 + 1)
    } else {
        0
    };
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Fraction of images whose predicted box has IoU strictly above 0.5 with at
/// least one ground-truth box. Images without a prediction count as misses.
pub fn corloc(preds: &[Option<BoundingBox>], gts: &[Vec<BoundingBox>]) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if preds.len() != gts.len() {
        return Err(EvalError::CountMismatch(preds.len(), gts.len()));
    }
    let correct = preds
        .iter()
        .zip(gts)
        .filter(|(p, gt)| p.is_some_and(|p| gt.iter().any(|g| box_iou(&p, g) > 0.5)))
        .count();
    Ok(correct as f64 / preds.len() as f64)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn mask(w: usize, h: usize) -> impl Strategy<Value = MaskImage> {
        prop::collection::vec(any::<bool>(), w * h).prop_map(move |b| MaskImage::from_bools(w, h, &b))
    }

    /// Soft maps on the 1/255 grid whose used levels include 0 and 255, plus
    /// a strictly increasing remapping of those levels that fixes both ends.
    fn leveled_maps() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<usize>, Vec<usize>)> {
        (2usize..10).prop_flat_map(|k| {
            (
                prop::sample::subsequence((1..255).collect::<Vec<usize>>(), k - 2),
                prop::sample::subsequence((1..255).collect::<Vec<usize>>(), k - 2),
                prop::collection::vec(prop::collection::vec(0..k, 36), 1..4),
            )
                .prop_map(|(from, to, maps)| {
                    let wrap = |mid: Vec<usize>| [vec![0], mid, vec![255]].concat();
                    (maps, wrap(from), wrap(to))
                })
        })
    }

    proptest! {
        #[test]
        fn acc_and_iou_symmetric(a in mask(5, 4), b in mask(5, 4)) {
            prop_assert_eq!(saliency_metrics(&a, &b).unwrap(), saliency_metrics(&b, &a).unwrap());
        }

        #[test]
        fn max_f_beta_ignores_monotone_rescaling(
            (maps, from, to) in leveled_maps(),
            gts in prop::collection::vec(mask(6, 6), 3),
        ) {
            let soft = |levels: &[usize]| -> Vec<SoftMap> {
                maps.iter()
                    .map(|m| SoftMap {
                        width: 6,
                        height: 6,
                        values: m.iter().map(|&i| levels[i] as f64 / 255.0).collect(),
                    })
                    .collect()
            };
            let gts = &gts[..maps.len()];
            let a = max_f_beta(&soft(&from), gts, BETA2).unwrap().0;
            let b = max_f_beta(&soft(&to), gts, BETA2).unwrap().0;
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }
}
