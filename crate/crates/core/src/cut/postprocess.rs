//! Mask clean-up after the cut: morphological open/close, hole filling,
//! small-component removal, and resampling to the output size.

use std::collections::VecDeque;

use crate::eval::components::{label_components, Connectivity};
use crate::resize::resize_binary;
use crate::tensor_io::MaskImage;

/// Components smaller than this fraction of the largest are dropped.
pub const MIN_COMPONENT_FRACTION: f64 = 0.1;

fn morph(mask: &[bool], w: usize, h: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let v = mask[ny * w + nx];
                    if dilate {
                        acc |= v;
                    } else {
                        acc &= v;
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// 3x3 erosion; pixels outside the image are ignored.
pub fn erode(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    morph(mask, w, h, false)
}

/// 3x3 dilation; pixels outside the image are ignored.
pub fn dilate(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    morph(mask, w, h, true)
}

pub fn open(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    dilate(&erode(mask, w, h), w, h)
}

pub fn close(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    erode(&dilate(mask, w, h), w, h)
}

/// Set every background pixel that is not 4-connected to the image border.
pub fn fill_holes(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            let border = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            if border && !mask[y * w + x] {
                outside[y * w + x] = true;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let mut visit = |nx: usize, ny: usize| {
            let i = ny * w + nx;
            if !mask[i] && !outside[i] {
                outside[i] = true;
                queue.push_back((nx, ny));
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < w {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < h {
            visit(x, y + 1);
        }
    }
    outside.iter().map(|&o| !o).collect()
}

/// Drop 8-connected components with area below `fraction` of the largest.
pub fn drop_small_components(mask: &[bool], w: usize, h: usize, fraction: f64) -> Vec<bool> {
    let comps = label_components(mask, w, h, Connectivity::Eight);
    let Some(largest) = comps.areas.iter().copied().max() else {
        return mask.to_vec();
    };
    let min_area = fraction * largest as f64;
    comps
        .labels
        .iter()
        .map(|l| l.is_some_and(|c| comps.areas[c] as f64 >= min_area))
        .collect()
}

/// Open, close, fill holes, drop small components, then resample to
/// `target_w x target_h` with a strict 0.5 threshold.
pub fn postprocess(mask: &[bool], w: usize, h: usize, target_w: usize, target_h: usize) -> MaskImage {
    if !mask.iter().any(|&v| v) {
        let up = resize_binary(mask, h, w, target_h, target_w);
        return MaskImage::from_bools(target_w, target_h, &up);
    }
    let m = open(mask, w, h);
    let m = close(&m, w, h);
    let m = fill_holes(&m, w, h);
    let m = drop_small_components(&m, w, h, MIN_COMPONENT_FRACTION);
    let up = resize_binary(&m, h, w, target_h, target_w);
    MaskImage::from_bools(target_w, target_h, &up)
}
