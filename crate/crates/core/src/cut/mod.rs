//! Training-free mask generation from aggregated attention.
//!
//! Pipeline for one image:
//!
//! 1. threshold the cross-attention `a_c` (Otsu or fixed `tau`) and sample
//!    seeds on the boundary of the foreground;
//! 2. average the self-attention rows of the seeds into a refined map `r`;
//! 3. unary costs from `s = a_c + lambda_phi * r`;
//! 4. pairwise coherence `psi = a_s + lambda_psi * exp(-D)` on 8-connected
//!    edges plus the strongest long-range self-attention pairs;
//! 5. minimum cut of `E = sum unary + lambda * sum_{cut} psi`;
//! 6. morphological clean-up and resampling to the image size.

pub mod geodesic;
pub mod graph;
pub mod maxflow;
pub mod objectness;
pub mod postprocess;
pub mod seeds;

use std::str::FromStr;

use thiserror::Error;

pub use geodesic::{coherence_weight, geodesic_distance_map};
pub use graph::{CoherenceGraph, CoherenceTerms};
pub use maxflow::{energy, minimize_energy, CutResult, FlowNetwork};
pub use objectness::{objectness, refine_map, ObjectnessField};
pub use postprocess::postprocess;
pub use seeds::{otsu_threshold, select_boundary_seeds, SeedSet};

use crate::attention::{min_max_normalize, AggregatedAttention};
use crate::resize::{resize, resize_channels};
use crate::tensor_io::{MaskImage, RgbImage};

#[derive(Debug, Error, PartialEq)]
pub enum CutError {
    #[error("no foreground above the threshold")]
    EmptyForeground,
    #[error("empty seed set")]
    EmptySeeds,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauMode {
    Otsu,
    Fixed(f64),
}

impl FromStr for TauMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "otsu" => Ok(Self::Otsu),
            "fixed" => Ok(Self::Fixed(0.5)),
            other => Err(format!("unknown tau mode {other:?} (expected otsu or fixed)")),
        }
    }
}

/// Which terms of the energy are active. The default enables everything;
/// the other settings reproduce component ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutTerms {
    pub cross: bool,
    pub refine: bool,
    pub coherence: CoherenceTerms,
}

impl CutTerms {
    pub const FULL: Self = Self {
        cross: true,
        refine: true,
        coherence: CoherenceTerms::ALL,
    };
    /// Cross-attention only.
    pub const CROSS_ONLY: Self = Self {
        cross: true,
        refine: false,
        coherence: CoherenceTerms::NONE,
    };
    /// Refined map only.
    pub const REFINE_ONLY: Self = Self {
        cross: false,
        refine: true,
        coherence: CoherenceTerms::NONE,
    };
    /// Cross-attention and refined map, no pairwise term.
    pub const OBJECTNESS: Self = Self {
        cross: true,
        refine: true,
        coherence: CoherenceTerms::NONE,
    };
    /// Objectness plus spatial (geodesic) coherence.
    pub const SPATIAL: Self = Self {
        cross: true,
        refine: true,
        coherence: CoherenceTerms {
            semantic: false,
            spatial: true,
        },
    };
    /// Objectness plus semantic (self-attention) coherence.
    pub const SEMANTIC: Self = Self {
        cross: true,
        refine: true,
        coherence: CoherenceTerms {
            semantic: true,
            spatial: false,
        },
    };

    /// The six ablation rows in order: cross only, refine only, cross +
    /// refine, + spatial, + semantic, full.
    pub const ABLATIONS: [Self; 6] = [
        Self::CROSS_ONLY,
        Self::REFINE_ONLY,
        Self::OBJECTNESS,
        Self::SPATIAL,
        Self::SEMANTIC,
        Self::FULL,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutParams {
    pub tau_mode: TauMode,
    pub n_seeds: usize,
    pub rng_seed: u64,
    pub lambda_phi: f64,
    pub lambda_psi: f64,
    pub lambda: f64,
    pub long_range_k: usize,
    pub terms: CutTerms,
}

impl Default for CutParams {
    fn default() -> Self {
        Self {
            tau_mode: TauMode::Otsu,
            n_seeds: 32,
            rng_seed: 0,
            lambda_phi: 0.16,
            lambda_psi: 2.5,
            lambda: 0.1,
            long_range_k: 8,
            terms: CutTerms::FULL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutWarning {
    /// Cross-attention had no foreground; the mask is all background.
    EmptyForeground,
}

#[derive(Clone, Debug)]
pub struct CutOutcome {
    /// Final mask at the image size.
    pub mask: MaskImage,
    /// Raw cut labelling at the base self-attention resolution.
    pub raw: Vec<bool>,
    pub energy: f64,
    pub flow: f64,
    pub tau: f64,
    pub seeds: Vec<usize>,
    pub warning: Option<CutWarning>,
}

/// Scale a self-attention matrix so its largest off-diagonal entry is 1.
pub fn scale_self_attention(a_s: &[f64], n: usize) -> Vec<f64> {
    let mut peak = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                peak = peak.max(a_s[i * n + j]);
            }
        }
    }
    if peak > 0.0 {
        a_s.iter().map(|v| v / peak).collect()
    } else {
        a_s.to_vec()
    }
}

/// Image resampled to a `side x side` grid.
pub fn image_at(image: &RgbImage, side: usize) -> RgbImage {
    image_at_size(image, side, side)
}

/// Image resampled to `width x height`.
pub fn image_at_size(image: &RgbImage, width: usize, height: usize) -> RgbImage {
    let src: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
    let out = resize_channels(&src, image.height, image.width, 3, height, width);
    RgbImage::new(width, height, out.into_iter().map(|v| v as f32).collect())
}

fn empty_outcome(image: &RgbImage, side: usize, tau: f64) -> CutOutcome {
    CutOutcome {
        mask: MaskImage::empty(image.width, image.height),
        raw: vec![false; side * side],
        energy: 0.0,
        flow: 0.0,
        tau,
        seeds: Vec::new(),
        warning: Some(CutWarning::EmptyForeground),
    }
}

/// Full mask generation for one image.
pub fn attention_cut(agg: &AggregatedAttention, image: &RgbImage, params: &CutParams) -> Result<CutOutcome, CutError> {
    let side = agg.r_s;
    let n = side * side;
    if agg.a_s.dims() != [n, n] {
        return Err(CutError::DimMismatch(format!(
            "self-attention dims {:?} do not match base resolution {side}",
            agg.a_s.dims()
        )));
    }
    if agg.a_c.dims() != [agg.r, agg.r] {
        return Err(CutError::DimMismatch(format!(
            "cross-attention dims {:?} do not match resolution {}",
            agg.a_c.dims(),
            agg.r
        )));
    }
    let a_c = min_max_normalize(&resize(&agg.a_c.to_f64(), agg.r, agg.r, side, side));
    let tau = match params.tau_mode {
        TauMode::Otsu => otsu_threshold(&a_c),
        TauMode::Fixed(t) => t,
    };
    if a_c.iter().all(|&v| v == 0.0) {
        return Ok(empty_outcome(image, side, tau));
    }
    let seeds = match select_boundary_seeds(&a_c, side, side, tau, params.n_seeds, params.rng_seed) {
        Ok(s) => s.seeds,
        Err(CutError::EmptyForeground) => return Ok(empty_outcome(image, side, tau)),
        Err(e) => return Err(e),
    };
    let a_s = scale_self_attention(&agg.a_s.to_f64(), n);
    let terms = params.terms;

    let r = if terms.refine {
        refine_map(&a_s, n, &seeds)?
    } else {
        vec![0.0; n]
    };
    let field = match (terms.cross, terms.refine) {
        (true, _) => objectness(&a_c, &r, side, side, if terms.refine { params.lambda_phi } else { 0.0 })?,
        (false, true) => ObjectnessField::from_probability(side, side, &min_max_normalize(&r), params.lambda_phi),
        (false, false) => {
            return Err(CutError::InvalidParam("at least one unary term must be enabled".into()));
        }
    };

    let small = image_at(image, side);
    let graph = CoherenceGraph::build(&a_s, &small, params.lambda_psi, params.long_range_k, terms.coherence);
    let cut = minimize_energy(&field, &graph, params.lambda);
    let mask = postprocess(&cut.labels, side, side, image.width, image.height);
    Ok(CutOutcome {
        mask,
        raw: cut.labels,
        energy: cut.energy,
        flow: cut.flow,
        tau,
        seeds,
        warning: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::Tensor;

    fn agg_from(a_c: Vec<f64>, side: usize) -> AggregatedAttention {
        let n = side * side;
        AggregatedAttention {
            a_c: Tensor::from_f64(vec![side, side], &a_c).unwrap(),
            a_s: Tensor::from_f64(vec![n, n], &vec![1.0 / n as f64; n * n]).unwrap(),
            f: vec![],
            r: side,
            r_s: side,
            k: 1,
            layers: 1,
            steps: 1,
        }
    }

    #[test]
    fn constant_cross_attention_warns() {
        let agg = agg_from(vec![0.0; 64], 8);
        let img = RgbImage::new(8, 8, vec![0.5; 192]);
        let out = attention_cut(&agg, &img, &CutParams::default()).unwrap();
        assert_eq!(out.warning, Some(CutWarning::EmptyForeground));
        assert_eq!(out.mask.count_foreground(), 0);
    }

    #[test]
    fn square_blob_is_recovered_and_deterministic() {
        let side = 12;
        let inside = |i: usize| (3..9).contains(&(i % side)) && (3..9).contains(&(i / side));
        let a_c: Vec<f64> = (0..side * side).map(|i| if inside(i) { 0.9 } else { 0.05 }).collect();
        let agg = agg_from(a_c, side);
        let img = RgbImage::new(
            side,
            side,
            (0..side * side).flat_map(|i| if inside(i) { [0.9, 0.2, 0.2] } else { [0.1, 0.1, 0.6] }).collect(),
        );
        let p = CutParams::default();
        let a = attention_cut(&agg, &img, &p).unwrap();
        let b = attention_cut(&agg, &img, &p).unwrap();
        assert_eq!(a.mask, b.mask);
        let expect: Vec<bool> = (0..side * side).map(inside).collect();
        assert_eq!(a.mask.to_bools(), expect);
        assert!((a.energy - a.flow).abs() < 1e-9);
    }

    #[test]
    fn self_attention_scaling() {
        let a = vec![5.0, 0.5, 0.25, 5.0];
        assert_eq!(scale_self_attention(&a, 2), vec![10.0, 1.0, 0.5, 10.0]);
    }
}
