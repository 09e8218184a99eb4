//! Per-image dataset statistics: object size, box centre, colour contrast,
//! and polygon complexity.

use std::fmt::Write as _;

use super::bbox::mask_to_bbox;
use super::polygon::{polygon_stats, shape_diversity, Polygon};
use super::EvalError;
use crate::cut::image_at_size;
use crate::tensor_io::{load_image, read_mask, DatasetManifest, MaskImage, RgbImage};

const HIST_BINS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageStats {
    pub index: usize,
    /// Foreground pixels over total pixels.
    pub size: f64,
    pub cx: f64,
    pub cy: f64,
    /// Chi-square distance between foreground and background colour
    /// histograms.
    pub contrast: f64,
    pub sc: Option<usize>,
    pub pl: Option<f64>,
    /// Simplified, normalised outline of the largest component.
    pub polygon: Option<Polygon>,
}

/// Concatenated per-channel histograms (16 bins each) of the selected
/// pixels, normalised to sum to 1.
pub fn color_histogram(image: &RgbImage, select: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut hist = vec![0.0; 3 * HIST_BINS];
    let mut count = 0usize;
    for p in (0..image.width * image.height).filter(|&p| select(p)) {
        for (c, v) in image.pixel(p).into_iter().enumerate() {
            let b = ((v.clamp(0.0, 1.0) * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
            hist[c * HIST_BINS + b] += 1.0;
        }
        count += 1;
    }
    if count > 0 {
        let total = 3.0 * count as f64;
        hist.iter_mut().for_each(|v| *v /= total);
    }
    hist
}

/// `0.5 * sum (a - b)^2 / (a + b)` over bins where `a + b > 0`.
pub fn chi_square(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .filter(|(x, y)| *x + *y > 0.0)
        .map(|(x, y)| (x - y).powi(2) / (x + y))
        .sum::<f64>()
}

/// Statistics for one image/mask pair. An image of a different size is
/// resampled to the mask first.
pub fn image_stats(index: usize, image: &RgbImage, mask: &MaskImage) -> ImageStats {
    let (w, h) = (mask.width(), mask.height());
    let resampled;
    let image = if (image.width, image.height) != (w, h) {
        resampled = image_at_size(image, w, h);
        &resampled
    } else {
        image
    };
    let fg = mask.to_bools();
    let n_fg = fg.iter().filter(|&&v| v).count();
    let size = n_fg as f64 / fg.len() as f64;
    let (cx, cy) = mask_to_bbox(mask).map_or((0.5, 0.5), |b| b.center(w, h));
    let contrast = if n_fg == 0 || n_fg == fg.len() {
        0.0
    } else {
        chi_square(&color_histogram(image, |p| fg[p]), &color_histogram(image, |p| !fg[p]))
    };
    let poly = polygon_stats(mask).ok();
    ImageStats {
        index,
        size,
        cx,
        cy,
        contrast,
        sc: poly.as_ref().map(|p| p.sc),
        pl: poly.as_ref().map(|p| p.pl),
        polygon: poly.map(|p| p.polygon),
    }
}

/// Statistics for every manifest entry with a ground-truth mask. Returns the
/// records and the number of entries skipped.
pub fn dataset_stats(manifest: &DatasetManifest) -> Result<(Vec<ImageStats>, usize), EvalError> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (i, e) in manifest.entries.iter().enumerate() {
        let Some(mask_path) = &e.gt_mask else {
            skipped += 1;
            continue;
        };
        let mask = read_mask(mask_path)?;
        let image = load_image(&e.image)?;
        out.push(image_stats(i, &image, &mask));
    }
    Ok((out, skipped))
}

pub fn stats_csv(stats: &[ImageStats]) -> String {
    let mut s = String::from("index,size,cx,cy,contrast,SC,PL\n");
    for r in stats {
        let sc = r.sc.map_or(String::new(), |v| v.to_string());
        let pl = r.pl.map_or(String::new(), |v| format!("{v:.6}"));
        writeln!(s, "{},{:.6},{:.6},{:.6},{:.6},{},{}", r.index, r.size, r.cx, r.cy, r.contrast, sc, pl).unwrap();
    }
    s
}

/// Dataset-level means plus shape diversity over all valid outlines.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsSummary {
    pub images: usize,
    pub skipped: usize,
    pub mean_size: f64,
    pub mean_cx: f64,
    pub mean_cy: f64,
    pub mean_contrast: f64,
    pub mean_sc: Option<f64>,
    pub mean_pl: Option<f64>,
    pub sd: Option<f64>,
}

pub fn summarize(stats: &[ImageStats], skipped: usize) -> StatsSummary {
    let n = stats.len().max(1) as f64;
    let mean = |f: &dyn Fn(&ImageStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
    let polys: Vec<Polygon> = stats.iter().filter_map(|s| s.polygon.clone()).collect();
    let sc: Vec<f64> = stats.iter().filter_map(|s| s.sc.map(|v| v as f64)).collect();
    let pl: Vec<f64> = stats.iter().filter_map(|s| s.pl).collect();
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    StatsSummary {
        images: stats.len(),
        skipped,
        mean_size: mean(&|s| s.size),
        mean_cx: mean(&|s| s.cx),
        mean_cy: mean(&|s| s.cy),
        mean_contrast: mean(&|s| s.contrast),
        mean_sc: avg(&sc),
        mean_pl: avg(&pl),
        sd: shape_diversity(&polys).ok(),
    }
}

impl StatsSummary {
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        writeln!(s, "images    {} ({} without mask skipped)", self.images, self.skipped).unwrap();
        writeln!(s, "size      {:.4}", self.mean_size).unwrap();
        writeln!(s, "center    ({:.4}, {:.4})", self.mean_cx, self.mean_cy).unwrap();
        writeln!(s, "contrast  {:.4}", self.mean_contrast).unwrap();
        writeln!(s, "SC        {}", opt(self.mean_sc)).unwrap();
        writeln!(s, "PL        {}", opt(self.mean_pl)).unwrap();
        writeln!(s, "SD        {}", opt(self.sd)).unwrap();
        s
    }
}
