//! Three-layer per-pixel segment decoder over aggregated diffusion features,
//! trained with binary cross-entropy and Adam.
//!
//! Every layer is a 1x1 convolution, so the network is an MLP applied to each
//! pixel's concatenated feature vector: `c_in -> hidden -> hidden -> 1`, ReLU
//! after the first two layers and a sigmoid on the output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::resize::{resize_binary, resize_channels};
use crate::tensor_io::{read_tensor, write_tensor, MaskImage, Tensor, TensorIoError};

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LR: f64 = 0.001;
pub const DEFAULT_BATCH: usize = 10;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("features have {got} channels, decoder expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("{features} feature pixels for {targets} targets")]
    SizeMismatch { features: usize, targets: usize },
    #[error("no training samples")]
    EmptyDataset,
    #[error("invalid decoder size: c_in={c_in}, hidden={hidden}")]
    InvalidSize { c_in: usize, hidden: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

pub type Result<T> = std::result::Result<T, DecoderError>;

/// Weights, biases and Adam state. Parameters live in one flat vector laid
/// out as `W1 (hidden x c_in), b1, W2 (hidden x hidden), b2, W3 (1 x hidden),
/// b3`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub c_in: usize,
    pub hidden: usize,
    pub theta: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
}

/// Offsets of each parameter block in the flat vector.
#[derive(Clone, Copy, Debug)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl Layout {
    fn new(c_in: usize, hidden: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + hidden * c_in;
        let w2 = b1 + hidden;
        let b2 = w2 + hidden * hidden;
        let w3 = b2 + hidden;
        let b3 = w3 + hidden;
        Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len: b3 + 1,
        }
    }
}

const BLOCKS: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

impl DecoderParams {
    /// Weights uniform in `+-sqrt(1 / fan_in)`, zero biases, zero moments.
    pub fn init(rng_seed: u64, c_in: usize, hidden: usize) -> Result<Self> {
        if c_in == 0 || hidden == 0 {
            return Err(DecoderError::InvalidSize { c_in, hidden });
        }
        let l = Layout::new(c_in, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut theta = vec![0.0; l.len];
        for (range, fan_in) in [(l.w1..l.b1, c_in), (l.w2..l.b2, hidden), (l.w3..l.b3, hidden)] {
            let bound = (1.0 / fan_in as f64).sqrt();
            for v in &mut theta[range] {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        Ok(Self {
            c_in,
            hidden,
            m: vec![0.0; l.len],
            v: vec![0.0; l.len],
            theta,
            step: 0,
            lr: DEFAULT_LR,
        })
    }

    fn layout(&self) -> Layout {
        Layout::new(self.c_in, self.hidden)
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// `(rows, cols)` and flat range of each block.
    fn blocks(&self) -> [(usize, usize, std::ops::Range<usize>); 6] {
        let l = self.layout();
        let (c, h) = (self.c_in, self.hidden);
        [
            (h, c, l.w1..l.b1),
            (h, 1, l.b1..l.w2),
            (h, h, l.w2..l.b2),
            (h, 1, l.b2..l.w3),
            (1, h, l.w3..l.b3),
            (1, 1, l.b3..l.len),
        ]
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.c_in {
            return Err(DecoderError::ChannelMismatch {
                expected: self.c_in,
                got: c,
            });
        }
        Ok(())
    }

    /// Output logits for `n` pixels of `c_in` features each.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        let (c, h) = (self.c_in, self.hidden);
        if !features.len().is_multiple_of(c) {
            return Err(DecoderError::ChannelMismatch {
                expected: c,
                got: features.len(),
            });
        }
        let mut h1 = vec![0.0; h];
        let mut h2 = vec![0.0; h];
        Ok(features
            .chunks_exact(c)
            .map(|x| self.pixel_forward(x, &mut h1, &mut h2))
            .collect())
    }

    /// Probabilities in (0, 1) for each pixel.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits(features)?.into_iter().map(sigmoid).collect())
    }

    fn pixel_forward(&self, x: &[f64], h1: &mut [f64], h2: &mut [f64]) -> f64 {
        let l = self.layout();
        let (c, h) = (self.c_in, self.hidden);
        let t = &self.theta;
        for (j, out) in h1.iter_mut().enumerate() {
            let w = &t[l.w1 + j * c..l.w1 + (j + 1) * c];
            *out = (t[l.b1 + j] + dot(w, x)).max(0.0);
        }
        for (j, out) in h2.iter_mut().enumerate() {
            let w = &t[l.w2 + j * h..l.w2 + (j + 1) * h];
            *out = (t[l.b2 + j] + dot(w, h1)).max(0.0);
        }
        t[l.b3] + dot(&t[l.w3..l.b3], h2)
    }

    /// Mean binary cross-entropy over all pixels and its gradient with
    /// respect to `theta`.
    pub fn loss_and_grad(&self, features: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (c, h) = (self.c_in, self.hidden);
        let n = targets.len();
        if n == 0 {
            return Err(DecoderError::EmptyDataset);
        }
        if features.len() != n * c {
            return Err(DecoderError::SizeMismatch {
                features: features.len() / c.max(1),
                targets: n,
            });
        }
        let l = self.layout();
        let t = &self.theta;
        let (w2, w3) = (&t[l.w2..l.b2], &t[l.w3..l.b3]);
        let mut grad = vec![0.0; l.len];
        let mut loss = 0.0;
        {
            let (gw1, rest) = grad.split_at_mut(l.b1);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, rest) = rest.split_at_mut(h * h);
            let (gb2, rest) = rest.split_at_mut(h);
            let (gw3, gb3) = rest.split_at_mut(h);
            let (mut h1, mut h2) = (vec![0.0; h], vec![0.0; h]);
            let (mut d1, mut d2) = (vec![0.0; h], vec![0.0; h]);
            let inv_n = 1.0 / n as f64;
            for (x, &y) in features.chunks_exact(c).zip(targets) {
                let z = self.pixel_forward(x, &mut h1, &mut h2);
                loss += bce_with_logit(z, y);
                let dz = (sigmoid(z) - y) * inv_n;
                // layer 3
                gb3[0] += dz;
                for (((g, d), &a), &w) in gw3.iter_mut().zip(d2.iter_mut()).zip(&h2).zip(w3) {
                    *g += dz * a;
                    *d = if a > 0.0 { dz * w } else { 0.0 };
                }
                // layer 2
                d1.fill(0.0);
                for (j, &g) in d2.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    gb2[j] += g;
                    let grow = &mut gw2[j * h..(j + 1) * h];
                    let wrow = &w2[j * h..(j + 1) * h];
                    for (((gr, dd), &a), &w) in grow.iter_mut().zip(d1.iter_mut()).zip(&h1).zip(wrow) {
                        *gr += g * a;
                        *dd += g * w;
                    }
                }
                // layer 1
                for (j, (&a, &g)) in h1.iter().zip(&d1).enumerate() {
                    if a <= 0.0 || g == 0.0 {
                        continue;
                    }
                    gb1[j] += g;
                    for (gr, &xi) in gw1[j * c..(j + 1) * c].iter_mut().zip(x) {
                        *gr += g * xi;
                    }
                }
            }
        }
        Ok((loss / n as f64, grad))
    }

    /// Mean binary cross-entropy without the gradient.
    pub fn loss(&self, features: &[f64], targets: &[f64]) -> Result<f64> {
        let logits = self.logits(features)?;
        if logits.len() != targets.len() {
            return Err(DecoderError::SizeMismatch {
                features: logits.len(),
                targets: targets.len(),
            });
        }
        Ok(logits.iter().zip(targets).map(|(&z, &y)| bce_with_logit(z, y)).sum::<f64>() / targets.len() as f64)
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, grad: &[f64]) {
        assert_eq!(grad.len(), self.theta.len(), "gradient shape mismatch");
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..self.theta.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            self.theta[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }

    /// Binary mask at the feature resolution: probability strictly above 0.5
    /// is foreground.
    pub fn predict_grid(&self, features: &[f64]) -> Result<Vec<bool>> {
        // sigmoid(z) > 0.5 exactly when z > 0
        Ok(self.logits(features)?.into_iter().map(|z| z > 0.0).collect())
    }

    /// Predict on an `r x r x c_in` feature grid and resample to the target
    /// size.
    pub fn predict(&self, sample: &DecoderSample, width: usize, height: usize) -> Result<MaskImage> {
        self.check_channels(sample.channels)?;
        let grid = self.predict_grid(&sample.features)?;
        let up = resize_binary(&grid, sample.side, sample.side, height, width);
        Ok(MaskImage::from_bools(width, height, &up))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| TensorIoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for (name, (rows, cols, range)) in BLOCKS.iter().zip(self.blocks()) {
            for (prefix, src) in [("", &self.theta), ("m_", &self.m), ("v_", &self.v)] {
                let t = Tensor::from_f64(vec![rows, cols], &src[range.clone()])?;
                write_tensor(&t, dir.join(format!("{prefix}{name}")))?;
            }
        }
        let mut meta = String::new();
        writeln!(meta, "c_in={}", self.c_in).unwrap();
        writeln!(meta, "hidden={}", self.hidden).unwrap();
        writeln!(meta, "step={}", self.step).unwrap();
        writeln!(meta, "lr={}", self.lr).unwrap();
        let path = dir.join("meta.txt");
        fs::write(&path, meta).map_err(|source| TensorIoError::Io { path, source })?;
        Ok(())
    }

    /// Load a checkpoint. Values pass through f32 on disk.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("meta.txt");
        let text = fs::read_to_string(&path).map_err(|source| TensorIoError::Io { path, source })?;
        let get = |key: &str| -> Result<String> {
            text.lines()
                .find_map(|l| l.split_once('=').filter(|(k, _)| k.trim() == key).map(|(_, v)| v.trim().to_string()))
                .ok_or_else(|| DecoderError::Checkpoint(format!("missing {key}")))
        };
        let parse_err = |key: &str| DecoderError::Checkpoint(format!("bad {key}"));
        let c_in: usize = get("c_in")?.parse().map_err(|_| parse_err("c_in"))?;
        let hidden: usize = get("hidden")?.parse().map_err(|_| parse_err("hidden"))?;
        let step: u64 = get("step")?.parse().map_err(|_| parse_err("step"))?;
        let lr: f64 = get("lr")?.parse().map_err(|_| parse_err("lr"))?;
        let mut p = Self::init(0, c_in, hidden)?;
        p.step = step;
        p.lr = lr;
        for (name, (rows, cols, range)) in BLOCKS.iter().zip(p.blocks()) {
            for prefix in ["", "m_", "v_"] {
                let t = read_tensor(dir.join(format!("{prefix}{name}")))?;
                if t.dims() != [rows, cols] {
                    return Err(DecoderError::Checkpoint(format!(
                        "{prefix}{name} has dims {:?}, expected [{rows}, {cols}]",
                        t.dims()
                    )));
                }
                let dst = match prefix {
                    "" => &mut p.theta,
                    "m_" => &mut p.m,
                    _ => &mut p.v,
                };
                dst[range.clone()].copy_from_slice(&t.to_f64());
            }
        }
        Ok(p)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-y ln s(z) - (1 - y) ln(1 - s(z))`, computed stably from the logit.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// One image's decoder input: concatenated features on a `side x side` grid
/// and (for training) a binary target on the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSample {
    pub side: usize,
    pub channels: usize,
    /// `side * side * channels`, channels-last.
    pub features: Vec<f64>,
    pub target: Option<Vec<f64>>,
}

impl DecoderSample {
    /// Upsample each per-layer feature tensor (`H_l x W_l x C_l`) to
    /// `side x side` and concatenate along channels.
    pub fn from_features(layers: &[Tensor], side: usize) -> Self {
        let channels: usize = layers.iter().map(|t| t.dims()[2]).sum();
        let n = side * side;
        let mut features = vec![0.0; n * channels];
        let mut offset = 0;
        for t in layers {
            let &[h, w, c] = t.dims() else {
                panic!("feature tensors are H x W x C");
            };
            let up = resize_channels(&t.to_f64(), h, w, c, side, side);
            for p in 0..n {
                features[p * channels + offset..p * channels + offset + c].copy_from_slice(&up[p * c..(p + 1) * c]);
            }
            offset += c;
        }
        Self {
            side,
            channels,
            features,
            target: None,
        }
    }

    /// Attach a target mask resampled to the feature grid.
    pub fn with_target(mut self, mask: &MaskImage) -> Self {
        let grid = resize_binary(&mask.to_bools(), mask.height(), mask.width(), self.side, self.side);
        self.target = Some(grid.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect());
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: DEFAULT_BATCH,
            lr: DEFAULT_LR,
            shuffle_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean loss over the whole training set before any update.
    pub initial_loss: f64,
    /// Mean minibatch loss per epoch (measured before each update).
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the whole training set after the last update.
    pub final_loss: f64,
}

/// Mean loss over samples with targets.
pub fn dataset_loss(params: &DecoderParams, samples: &[DecoderSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let target = s.target.as_ref().ok_or(DecoderError::EmptyDataset)?;
        total += params.loss(&s.features, target)?;
    }
    Ok(total / samples.len() as f64)
}

/// Minibatch training. Each step averages the per-image losses of the batch;
/// batches are drawn from a seeded shuffle every epoch.
pub fn train(params: &mut DecoderParams, samples: &[DecoderSample], tp: TrainParams) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(DecoderError::EmptyDataset);
    }
    for s in samples {
        params.check_channels(s.channels)?;
        if s.target.is_none() {
            return Err(DecoderError::EmptyDataset);
        }
    }
    params.lr = tp.lr;
    let initial_loss = dataset_loss(params, samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tp.shuffle_seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tp.epochs);
    for _ in 0..tp.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tp.batch_size.max(1)) {
            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &samples[i];
                let (l, g) = params.loss_and_grad(&s.features, s.target.as_ref().unwrap())?;
                batch_loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            let k = batch.len() as f64;
            grad.iter_mut().for_each(|g| *g /= k);
            params.adam_step(&grad);
            epoch_loss += batch_loss;
        }
        epoch_losses.push(epoch_loss / samples.len() as f64);
    }
    let final_loss = dataset_loss(params, samples)?;
    Ok(TrainReport {
        initial_loss,
        epoch_losses,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_features(seed: u64, n: usize, c: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Straight-line evaluation with explicit nested loops over named
    /// layers.
    fn reference_forward(p: &DecoderParams, x: &[f64]) -> f64 {
        let (c, h) = (p.c_in, p.hidden);
        let t = &p.theta;
        let w1 = |j: usize, i: usize| t[j * c + i];
        let b1 = |j: usize| t[h * c + j];
        let w2 = |j: usize, i: usize| t[h * c + h + j * h + i];
        let b2 = |j: usize| t[h * c + h + h * h + j];
        let w3 = |i: usize| t[h * c + 2 * h + h * h + i];
        let b3 = t[h * c + 3 * h + h * h];
        let mut a1 = vec![0.0; h];
        for j in 0..h {
            let mut s = b1(j);
            for i in 0..c {
                s += w1(j, i) * x[i];
            }
            a1[j] = if s > 0.0 { s } else { 0.0 };
        }
        let mut a2 = vec![0.0; h];
        for j in 0..h {
            let mut s = b2(j);
            for i in 0..h {
                s += w2(j, i) * a1[i];
            }
            a2[j] = if s > 0.0 { s } else { 0.0 };
        }
        let mut z = b3;
        for i in 0..h {
            z += w3(i) * a2[i];
        }
        1.0 / (1.0 + (-z).exp())
    }

    #[test]
    fn init_shapes_and_bounds() {
        let p = DecoderParams::init(3, 1, 1).unwrap();
        assert_eq!(p.len(), 1 + 1 + 1 + 1 + 1 + 1);
        let p = DecoderParams::init(3, 5, 7).unwrap();
        assert_eq!(p.len(), 7 * 5 + 7 + 7 * 7 + 7 + 7 + 1);
        assert_eq!(p.m.len(), p.len());
        assert_eq!(p, DecoderParams::init(3, 5, 7).unwrap());
        let l = p.layout();
        assert!(p.theta[l.w1..l.b1].iter().all(|v| v.abs() <= (1.0f64 / 5.0).sqrt()));
        assert!(p.theta[l.w2..l.b2].iter().all(|v| v.abs() <= (1.0f64 / 7.0).sqrt()));
        assert!(p.theta[l.b1..l.w2].iter().all(|&v| v == 0.0));
        assert!(DecoderParams::init(0, 0, 3).is_err());
    }

    #[test]
    fn zero_net_outputs_half() {
        let mut p = DecoderParams::init(0, 3, 4).unwrap();
        p.theta.fill(0.0);
        let out = p.forward(&random_features(1, 5, 3)).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
        // ties break to background
        assert!(p.predict_grid(&random_features(1, 5, 3)).unwrap().iter().all(|&b| !b));
    }

    #[test]
    fn forward_matches_reference() {
        let p = DecoderParams::init(11, 6, 5).unwrap();
        let x = random_features(2, 20, 6);
        let out = p.forward(&x).unwrap();
        for (px, &o) in x.chunks_exact(6).zip(&out) {
            assert!((reference_forward(&p, px) - o).abs() < 1e-12);
        }
        assert!(matches!(p.forward(&x[..7]), Err(DecoderError::ChannelMismatch { .. })));
    }

    #[test]
    fn final_weight_moves_logit_monotonically() {
        let mut p = DecoderParams::init(4, 3, 4).unwrap();
        let x = random_features(5, 1, 3);
        let l = p.layout();
        let (mut h1, mut h2) = (vec![0.0; 4], vec![0.0; 4]);
        p.pixel_forward(&x, &mut h1, &mut h2);
        let Some(j) = (0..4).find(|&j| h2[j] > 0.0) else {
            return;
        };
        let base = p.logits(&x).unwrap()[0];
        p.theta[l.w3 + j] += 1.0;
        assert!(p.logits(&x).unwrap()[0] > base);
    }

    #[test]
    fn loss_at_half_is_ln2() {
        let mut p = DecoderParams::init(0, 2, 3).unwrap();
        p.theta.fill(0.0);
        let x = random_features(6, 9, 2);
        let y: Vec<f64> = (0..9).map(|i| (i % 2) as f64).collect();
        let (loss, _) = p.loss_and_grad(&x, &y).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_has_tiny_loss() {
        let mut p = DecoderParams::init(0, 1, 1).unwrap();
        p.theta.fill(0.0);
        let l = p.layout();
        p.theta[l.b3] = 40.0;
        let (loss, _) = p.loss_and_grad(&[0.3, -0.2], &[1.0, 1.0]).unwrap();
        assert!(loss < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut p = DecoderParams::init(8, 3, 3).unwrap();
        let l = p.layout();
        // keep every unit active so no kink sits near the evaluation point
        for b in l.b1..l.w2 {
            p.theta[b] = 0.5;
        }
        for b in l.b2..l.w3 {
            p.theta[b] = 0.5;
        }
        let x = random_features(9, 9, 3);
        let y: Vec<f64> = (0..9).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let (_, g) = p.loss_and_grad(&x, &y).unwrap();
        let h = 1e-4;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.theta[i] += h;
            let mut minus = p.clone();
            minus.theta[i] -= h;
            let num = (plus.loss_and_grad(&x, &y).unwrap().0 - minus.loss_and_grad(&x, &y).unwrap().0) / (2.0 * h);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: analytic {} numeric {num}", g[i]);
        }
    }

    #[test]
    fn first_adam_step() {
        let mut p = DecoderParams::init(0, 1, 1).unwrap();
        let before = p.theta.clone();
        let mut g = vec![0.0; p.len()];
        g[0] = 1.0;
        p.adam_step(&g);
        assert!((p.theta[0] - before[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(&p.theta[1..], &before[1..]);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn zero_lr_and_zero_epochs_are_identity() {
        let sample = DecoderSample {
            side: 2,
            channels: 2,
            features: random_features(1, 4, 2),
            target: Some(vec![1.0, 0.0, 0.0, 1.0]),
        };
        let p0 = DecoderParams::init(1, 2, 4).unwrap();
        let mut p = p0.clone();
        train(&mut p, &[sample.clone()], TrainParams { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(p.theta, p0.theta);
        let mut p = p0.clone();
        train(&mut p, &[sample], TrainParams { lr: 0.0, ..Default::default() }).unwrap();
        assert_eq!(p.theta, p0.theta);
    }

    #[test]
    fn batch_order_does_not_change_the_step() {
        let samples: Vec<DecoderSample> = (0..3)
            .map(|k| DecoderSample {
                side: 2,
                channels: 2,
                features: random_features(k, 4, 2),
                target: Some(vec![1.0, 0.0, (k % 2) as f64, 1.0]),
            })
            .collect();
        let p0 = DecoderParams::init(2, 2, 4).unwrap();
        let grad_sum = |order: &[usize]| {
            let mut g = vec![0.0; p0.len()];
            for &i in order {
                let (_, gi) = p0.loss_and_grad(&samples[i].features, samples[i].target.as_ref().unwrap()).unwrap();
                g.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
            }
            g
        };
        let a = grad_sum(&[0, 1, 2]);
        let b = grad_sum(&[2, 0, 1]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn memorises_a_single_sample() {
        let side = 8;
        let target: Vec<f64> = (0..side * side).map(|p| ((p % side) < 4) as u8 as f64).collect();
        let features: Vec<f64> = (0..side * side)
            .flat_map(|p| {
                let (x, y) = ((p % side) as f64 / side as f64, (p / side) as f64 / side as f64);
                [x, y, x * y]
            })
            .collect();
        let sample = DecoderSample {
            side,
            channels: 3,
            features,
            target: Some(target.clone()),
        };
        let mut p = DecoderParams::init(0, 3, 16).unwrap();
        let report = train(&mut p, &[sample.clone()], TrainParams { epochs: 200, lr: 0.01, ..Default::default() }).unwrap();
        assert!(report.final_loss < report.initial_loss);
        let mask = p.predict(&sample, side, side).unwrap();
        let gt = MaskImage::from_bools(side, side, &target.iter().map(|&t| t > 0.5).collect::<Vec<_>>());
        let (_, iou) = crate::eval::saliency_metrics(&mask, &gt).unwrap();
        assert!(iou > 0.9, "iou {iou}");
    }

    #[test]
    fn training_is_deterministic() {
        let samples: Vec<DecoderSample> = (0..4)
            .map(|k| DecoderSample {
                side: 2,
                channels: 2,
                features: random_features(k, 4, 2),
                target: Some(vec![1.0, 0.0, 0.0, 1.0]),
            })
            .collect();
        let run = || {
            let mut p = DecoderParams::init(5, 2, 4).unwrap();
            let r = train(&mut p, &samples, TrainParams { epochs: 3, batch_size: 3, ..Default::default() }).unwrap();
            (p, r)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = DecoderParams::init(7, 3, 4).unwrap();
        let g = vec![0.1; p.len()];
        p.adam_step(&g);
        p.save(dir.path()).unwrap();
        let q = DecoderParams::load(dir.path()).unwrap();
        assert_eq!((q.c_in, q.hidden, q.step, q.lr), (3, 4, 1, p.lr));
        for (a, b) in p.theta.iter().zip(&q.theta) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn sample_concatenates_upsampled_layers() {
        let a = Tensor::new(vec![2, 2, 1], vec![1.0; 4]).unwrap();
        let b = Tensor::new(vec![4, 4, 2], (0..32).map(|i| i as f32).collect()).unwrap();
        let s = DecoderSample::from_features(&[a, b], 4);
        assert_eq!(s.channels, 3);
        assert_eq!(s.features.len(), 48);
        assert_eq!(&s.features[0..3], &[1.0, 0.0, 1.0]);
        assert_eq!(&s.features[45..48], &[1.0, 30.0, 31.0]);
    }
}
