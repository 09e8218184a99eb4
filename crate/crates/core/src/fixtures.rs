//! Procedural scenes with known ground truth: an RGB image, an attention
//! bundle shaped like a diffusion model's, and the object mask.
//!
//! The object is a union of one to three anisotropic Gaussian blobs
//! thresholded at 0.5. Cross-attention is the blurred mask with extra
//! attenuation within two pixels of the object boundary, so thresholding it
//! alone is slightly too tight. Self-attention comes from per-pixel
//! embeddings that separate object from background; features are the
//! embeddings plus noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::attention::{write_bundle, AttentionError, AttentionRecord, BundleMeta};
use crate::eval::components::{label_components, Connectivity};
use crate::eval::bbox::component_boxes;
use crate::eval::BoundingBox;
use crate::rng::split_seed;
use crate::tensor_io::{save_png, write_manifest, write_mask, DatasetManifest, ManifestEntry, MaskImage, RgbImage, Tensor, TensorIoError};

pub const MIN_DIMS: usize = 32;
pub const DEFAULT_DIMS: usize = 64;
pub const DEFAULT_STEPS: usize = 4;
pub const DEFAULT_LAYERS: usize = 6;
pub const EMBED_DIM: usize = 8;
/// Seed of the embedding directions shared by every scene.
const EMBED_SEED: u64 = 0x5eed_0b1e;

/// Cross-attention on object pixels within `BOUNDARY_BAND` pixels of the
/// boundary is multiplied by this.
pub const BOUNDARY_ATTENUATION: f64 = 0.85;
pub const BOUNDARY_BAND: f64 = 2.0;

const LABELS: [&str; 8] = ["dog", "cat", "bird", "car", "flower", "horse", "boat", "chair"];

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("fixture dims must be at least {MIN_DIMS}, got {0}")]
    TooSmall(usize),
    #[error("need at least one step, one layer and one scene")]
    Empty,
    #[error("cannot create {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub sx: f64,
    pub sy: f64,
    pub angle: f64,
    pub amplitude: f64,
}

impl Blob {
    fn value(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (c * dx + s * dy) / self.sx;
        let v = (-s * dx + c * dy) / self.sy;
        self.amplitude * (-0.5 * (u * u + v * v)).exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureScene {
    pub rng_seed: u64,
    pub dims: usize,
    pub blobs: Vec<Blob>,
    pub fg_color: [f64; 3],
    pub bg_color: [f64; 3],
    pub noise: f64,
    pub label: String,
}

impl FixtureScene {
    /// Union of the blob fields (pointwise maximum).
    pub fn field(&self, x: f64, y: f64) -> f64 {
        self.blobs.iter().map(|b| b.value(x, y)).fold(0.0, f64::max)
    }

    /// Ground truth at pixel centres: field above 0.5.
    pub fn mask(&self) -> Vec<bool> {
        let d = self.dims;
        (0..d * d)
            .map(|p| self.field((p % d) as f64 + 0.5, (p / d) as f64 + 0.5) > 0.5)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Fixture {
    pub scene: FixtureScene,
    pub image: RgbImage,
    pub gt: MaskImage,
    pub boxes: Vec<BoundingBox>,
    pub meta: BundleMeta,
    pub records: Vec<AttentionRecord>,
}

/// Two layers each at 1/8, 1/4 and 1/2 of the image size (cycling for more
/// than six layers).
pub fn layer_resolutions(dims: usize, layers: usize) -> Vec<(usize, usize)> {
    (0..layers)
        .map(|l| {
            let side = (dims >> (3 - (l / 2) % 3)).max(1);
            (side, side)
        })
        .collect()
}

fn random_scene(seed: u64, dims: usize) -> FixtureScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims as f64;
    let n_blobs = rng.gen_range(1..=3);
    let mut blobs: Vec<Blob> = Vec::with_capacity(n_blobs);
    for i in 0..n_blobs {
        let (sx, sy) = (rng.gen_range(0.12..0.20) * d, rng.gen_range(0.12..0.20) * d);
        let (cx, cy) = if i == 0 {
            (rng.gen_range(0.38..0.62) * d, rng.gen_range(0.38..0.62) * d)
        } else {
            // attach to the first blob so the object stays mostly connected
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = rng.gen_range(0.6..1.2) * blobs[0].sx.max(blobs[0].sy);
            let clamp = |v: f64| v.clamp(0.25 * d, 0.75 * d);
            (clamp(blobs[0].cx + r * a.cos()), clamp(blobs[0].cy + r * a.sin()))
        };
        blobs.push(Blob {
            cx,
            cy,
            sx,
            sy,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            amplitude: 1.0,
        });
    }
    let fg_color = [rng.gen_range(0.55..0.95), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let bg_color = [rng.gen_range(0.05..0.35), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    FixtureScene {
        rng_seed: seed,
        dims,
        blobs,
        fg_color,
        bg_color,
        noise: 0.04,
        label: LABELS[rng.gen_range(0..LABELS.len())].to_string(),
    }
}

/// Separable Gaussian blur with reflected borders.
fn blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * src[y * w + reflect(x as i64 + k as i64 - radius, w)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(y as i64 + k as i64 - radius, h) * w + x])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// Area-average a `dims x dims` map down to `side x side`.
fn area_downsample(src: &[f64], dims: usize, side: usize) -> Vec<f64> {
    let mut sum = vec![0.0; side * side];
    let mut count = vec![0usize; side * side];
    for y in 0..dims {
        let sy = (y * side) / dims;
        for x in 0..dims {
            let sx = (x * side) / dims;
            sum[sy * side + sx] += src[y * dims + x];
            count[sy * side + sx] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c.max(1) as f64).collect()
}

/// Distance (in pixels) from each pixel to the nearest pixel of the other
/// class, capped at `cap`.
fn boundary_distance(mask: &[bool], dims: usize, cap: f64) -> Vec<f64> {
    let r = cap.ceil() as i64;
    (0..dims * dims)
        .map(|p| {
            let (x, y) = ((p % dims) as i64, (p / dims) as i64);
            let mut best = f64::INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= dims as i64 || ny >= dims as i64 {
                        continue;
                    }
                    if mask[ny as usize * dims + nx as usize] != mask[p] {
                        best = best.min(((dx * dx + dy * dy) as f64).sqrt());
                    }
                }
            }
            best
        })
        .collect()
}

fn softmax_row(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Build one scene and its attention bundle in memory.
pub fn generate_fixture(rng_seed: u64, dims: usize, steps: usize, layers: usize) -> Result<Fixture, FixtureError> {
    if dims < MIN_DIMS {
        return Err(FixtureError::TooSmall(dims));
    }
    if steps == 0 || layers == 0 {
        return Err(FixtureError::Empty);
    }
    let scene = random_scene(rng_seed, dims);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(rng_seed, 1));
    let gt_bools = scene.mask();
    let gt = MaskImage::from_bools(dims, dims, &gt_bools);
    let pixel_noise = Normal::new(0.0, scene.noise).unwrap();
    let image_data: Vec<f32> = gt_bools
        .iter()
        .flat_map(|&fg| {
            
            if fg { scene.fg_color } else { scene.bg_color }
        })
        .map(|c| (c + pixel_noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    let image = RgbImage::new(dims, dims, image_data);

    // cross-attention source at full resolution
    let gt_f: Vec<f64> = gt_bools.iter().map(|&b| b as u8 as f64).collect();
    let dist = boundary_distance(&gt_bools, dims, BOUNDARY_BAND);
    let cross_full: Vec<f64> = blur(&gt_f, dims, dims, 1.0)
        .into_iter()
        .zip(dist.iter().zip(&gt_bools))
        .map(|(v, (&d, &fg))| if fg && d <= BOUNDARY_BAND { v * BOUNDARY_ATTENUATION } else { v })
        .collect();

    // embeddings: object/background centroids shared across scenes up to a
    // per-scene perturbation, plus a weak position code
    let mut shared = ChaCha8Rng::seed_from_u64(EMBED_SEED);
    let base = unit_vector(&mut shared, EMBED_DIM - 2);
    let centroid = |sign: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let jitter = unit_vector(rng, EMBED_DIM - 2);
        let v: Vec<f64> = base.iter().zip(&jitter).map(|(b, j)| sign * b + 0.3 * j).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| 1.5 * x / n).collect()
    };
    let mu_fg = centroid(1.0, &mut rng);
    let mu_bg = centroid(-1.0, &mut rng);
    let resolutions = layer_resolutions(dims, layers);
    let embed_noise = Normal::new(0.0, 0.1).unwrap();
    let step_noise = Normal::new(0.0, 0.05).unwrap();
    let cross_noise = Normal::new(0.0, 0.04).unwrap();
    let feat_noise = Normal::new(0.0, 0.2).unwrap();

    let mut records = Vec::with_capacity(steps * layers);
    for (li, &(side, _)) in resolutions.iter().enumerate() {
        let cross_base = area_downsample(&cross_full, dims, side);
        let frac = area_downsample(&gt_f, dims, side);
        let m = side * side;
        let embed: Vec<f64> = (0..m)
            .flat_map(|p| {
                let g = frac[p];
                let (x, y) = ((p % side) as f64 + 0.5, (p / side) as f64 + 0.5);
                let mut e: Vec<f64> = mu_fg.iter().zip(&mu_bg).map(|(a, b)| g * a + (1.0 - g) * b).collect();
                e.push(x / side as f64);
                e.push(y / side as f64);
                e
            })
            .map(|v| v + embed_noise.sample(&mut rng))
            .collect();
        for t in 0..steps {
            let cross: Vec<f64> = cross_base
                .iter()
                .map(|v| (v + cross_noise.sample(&mut rng)).max(0.0))
                .collect();
            let e_t: Vec<f64> = embed.iter().map(|v| v + step_noise.sample(&mut rng)).collect();
            let mut self_attn = vec![0.0; m * m];
            for p in 0..m {
                let ep = &e_t[p * EMBED_DIM..(p + 1) * EMBED_DIM];
                let row = &mut self_attn[p * m..(p + 1) * m];
                for (q, v) in row.iter_mut().enumerate() {
                    let eq = &e_t[q * EMBED_DIM..(q + 1) * EMBED_DIM];
                    *v = -ep.iter().zip(eq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                }
                softmax_row(row);
            }
            let features: Vec<f64> = embed.iter().map(|v| v + feat_noise.sample(&mut rng)).collect();
            records.push(AttentionRecord {
                t,
                layer: li + 1,
                cross: Tensor::from_f64(vec![side, side], &cross)?,
                self_attn: Tensor::from_f64(vec![m, m], &self_attn)?,
                features: Tensor::from_f64(vec![side, side, EMBED_DIM], &features)?,
            });
        }
    }
    records.sort_by_key(|r| (r.t, r.layer));

    let comps = label_components(&gt_bools, dims, dims, Connectivity::Eight);
    let mut boxes = component_boxes(&comps, dims);
    boxes.sort_by_key(|b| (b.y0, b.x0));

    let meta = BundleMeta {
        steps,
        layers,
        resolutions,
        channels: vec![EMBED_DIM; layers],
        token_index: 0,
        label: scene.label.clone(),
    };
    Ok(Fixture {
        scene,
        image,
        gt,
        boxes,
        meta,
        records,
    })
}

/// Seed of scene `index` in a set generated from `master`.
pub fn scene_seed(master: u64, index: usize) -> u64 {
    split_seed(master, index as u64)
}

/// Generate `n` scenes in memory.
pub fn generate_fixtures(n: usize, master_seed: u64, dims: usize, steps: usize, layers: usize) -> Result<Vec<Fixture>, FixtureError> {
    if n == 0 {
        return Err(FixtureError::Empty);
    }
    (0..n)
        .into_par_iter()
        .map(|i| generate_fixture(scene_seed(master_seed, i), dims, steps, layers))
        .collect()
}

/// Write `n` scenes under `out_dir` (`scene_XXX.png`, `scene_XXX_gt.pgm`,
/// `scene_XXX/` bundle) plus `manifest.txt`, and return the manifest.
pub fn generate_fixture_set(
    n: usize,
    master_seed: u64,
    dims: usize,
    steps: usize,
    layers: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest, FixtureError> {
    if n == 0 {
        return Err(FixtureError::Empty);
    }
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|source| FixtureError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let f = generate_fixture(scene_seed(master_seed, i), dims, steps, layers)?;
            let stem = format!("scene_{i:03}");
            let image = out.join(format!("{stem}.png"));
            let attn = out.join(&stem);
            let gt_mask = out.join(format!("{stem}_gt.pgm"));
            save_png(&f.image, &image)?;
            write_mask(&f.gt, &gt_mask)?;
            write_bundle(&attn, &f.meta, &f.records)?;
            Ok(ManifestEntry {
                image,
                attn,
                gt_mask: Some(gt_mask),
                gt_boxes: Some(f.boxes),
                label: f.scene.label,
            })
        })
        .collect::<Result<Vec<_>, FixtureError>>()?;
    let manifest = DatasetManifest { entries };
    write_manifest(&manifest, out.join("manifest.txt"))?;
    Ok(manifest)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn self_attention_rows_are_distributions(seed in any::<u64>()) {
            let f = generate_fixture(seed, MIN_DIMS, 1, 2).unwrap();
            for r in &f.records {
                let n = r.height() * r.width();
                for row in r.self_attn.data().chunks_exact(n) {
                    let s: f64 = row.iter().map(|&v| v as f64).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-4);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }
}
