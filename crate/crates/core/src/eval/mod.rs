//! Evaluation: saliency metrics, box localisation, geometry and dataset
//! statistics.

pub mod bbox;
pub mod components;
pub mod metrics;
pub mod polygon;
pub mod stats;

use std::fmt::Write as _;

use thiserror::Error;

pub use bbox::{mask_to_bbox, BoundingBox};
pub use metrics::{box_iou, corloc, f_beta, max_f_beta, saliency_metrics, SoftMap, BETA2};
pub use polygon::{chamfer_distance, polygon_stats, shape_diversity, Polygon, PolygonStats};
pub use stats::{dataset_stats, stats_csv, summarize, ImageStats, StatsSummary};

use crate::tensor_io::{MaskImage, TensorIoError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask dimensions differ: {left:?} vs {right:?}")]
    DimMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{0} predictions for {1} ground truths")]
    CountMismatch(usize, usize),
    #[error("mask has no foreground")]
    EmptyMask,
    #[error("polygon degenerates to {0} point(s)")]
    DegeneratePolygon(usize),
    #[error("need at least two polygons, got {0}")]
    TooFewPolygons(usize),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub index: usize,
    pub acc: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_acc: f64,
    pub mean_iou: f64,
    pub max_f_beta: f64,
    pub f_beta_threshold: f64,
    pub corloc: Option<f64>,
}

impl MetricsReport {
    /// Evaluate binary predictions against ground truth. `indices` label the
    /// rows (typically manifest positions). Box localisation is included when
    /// `gt_boxes` is given.
    pub fn compute(
        indices: &[usize],
        preds: &[MaskImage],
        gts: &[MaskImage],
        gt_boxes: Option<&[Vec<BoundingBox>]>,
    ) -> Result<Self, EvalError> {
        if preds.is_empty() {
            return Err(EvalError::EmptyDataset);
        }
        if preds.len() != gts.len() || preds.len() != indices.len() {
            return Err(EvalError::CountMismatch(preds.len(), gts.len()));
        }
        let per_image = preds
            .iter()
            .zip(gts)
            .zip(indices)
            .map(|((p, g), &index)| {
                let (acc, iou) = saliency_metrics(p, g)?;
                Ok(ImageMetrics { index, acc, iou })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        let n = per_image.len() as f64;
        let soft: Vec<SoftMap> = preds
            .iter()
            .map(|p| SoftMap {
                width: p.width(),
                height: p.height(),
                values: p.values().iter().map(|&v| v as f64 / 255.0).collect(),
            })
            .collect();
        let (max_f, thr) = max_f_beta(&soft, gts, BETA2)?;
        let corloc = match gt_boxes {
            Some(boxes) => {
                let pred_boxes: Vec<Option<BoundingBox>> = preds.iter().map(mask_to_bbox).collect();
                Some(corloc(&pred_boxes, boxes)?)
            }
            None => None,
        };
        Ok(Self {
            mean_acc: per_image.iter().map(|m| m.acc).sum::<f64>() / n,
            mean_iou: per_image.iter().map(|m| m.iou).sum::<f64>() / n,
            per_image,
            max_f_beta: max_f,
            f_beta_threshold: thr,
            corloc,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "images    {}", self.per_image.len()).unwrap();
        writeln!(s, "Acc       {:.4}", self.mean_acc).unwrap();
        writeln!(s, "IoU       {:.4}", self.mean_iou).unwrap();
        writeln!(s, "maxFbeta  {:.4} (threshold {:.4})", self.max_f_beta, self.f_beta_threshold).unwrap();
        if let Some(c) = self.corloc {
            writeln!(s, "CorLoc    {:.4}", c).unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,acc,iou\n");
        for m in &self.per_image {
            writeln!(s, "{},{:.6},{:.6}", m.index, m.acc, m.iou).unwrap();
        }
        writeln!(s, "mean,{:.6},{:.6}", self.mean_acc, self.mean_iou).unwrap();
        writeln!(s, "# max_f_beta,{:.6},{:.6}", self.max_f_beta, self.f_beta_threshold).unwrap();
        if let Some(c) = self.corloc {
            writeln!(s, "# corloc,{:.6}", c).unwrap();
        }
        s
    }
}
