//! Deterministic (eta = 0) diffusion inversion and reconstruction.
//!
//! With `f(x_t) = (x_t - sqrt(1 - ab_t) * eps) / sqrt(ab_t)` the forward and
//! reverse steps are
//!
//! ```text
//! x_{t+1} = sqrt(ab_{t+1}) * f(x_t) + sqrt(1 - ab_{t+1}) * eps(x_t, t, y)
//! x_{t-1} = sqrt(ab_{t-1}) * f(x_t) + sqrt(1 - ab_{t-1}) * eps(x_t, t, y)
//! ```
//!
//! where `ab` is the cumulative product of `1 - beta`. Latents are stored
//! channels-last, `H x W x C`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{AttentionRecord, BundleMeta};
use crate::resize::resize_channels;
use crate::tensor_io::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum InversionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} out of range for {steps} steps")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("non-finite latent at step {step} (t = {t})")]
    NonFinite { step: usize, t: usize },
    #[error("latent must be H x W x C, got {0:?}")]
    BadLatent(Vec<usize>),
    #[error("unknown predictor {0:?} (expected zero, linear:<c> or random:<seed>)")]
    UnknownPredictor(String),
}

pub type Result<T> = std::result::Result<T, InversionError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spacing {
    Linear,
    /// Linear in `sqrt(beta)`, the latent-diffusion convention.
    ScaledLinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Always 0: every step is deterministic.
    pub eta: f64,
}

/// Base training schedule length.
pub const BASE_STEPS: usize = 1000;
/// Stride between sampled base steps.
pub const SAMPLE_STRIDE: usize = 8;
pub const BETA_START: f64 = 0.00085;
pub const BETA_END: f64 = 0.012;

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, spacing: Spacing) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(InversionError::InvalidSchedule("need at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(InversionError::InvalidSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if steps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (steps - 1) as f64
        }
    };
    let beta: Vec<f64> = (0..steps)
        .map(|i| match spacing {
            Spacing::Linear => lerp(beta_start, beta_end, i),
            Spacing::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
        })
        .collect();
    Ok(NoiseSchedule::from_beta(beta))
}

impl NoiseSchedule {
    pub fn from_beta(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self {
            beta,
            alpha,
            alpha_bar,
            eta: 0.0,
        }
    }

    /// Every `stride`-th step of a base schedule, `steps` of them. The betas
    /// are re-derived so the cumulative products match the base schedule at
    /// the sampled steps.
    pub fn subsampled(base: &NoiseSchedule, stride: usize, steps: usize) -> Result<Self> {
        if steps == 0 || stride == 0 || (steps - 1) * stride >= base.steps() {
            return Err(InversionError::InvalidSchedule(format!(
                "{steps} steps at stride {stride} exceed the {}-step base schedule",
                base.steps()
            )));
        }
        let ab: Vec<f64> = (0..steps).map(|i| base.alpha_bar[i * stride]).collect();
        let beta = (0..steps)
            .map(|i| if i == 0 { 1.0 - ab[0] } else { 1.0 - ab[i] / ab[i - 1] })
            .collect();
        let mut s = Self::from_beta(beta);
        // keep the base values exactly rather than re-multiplied ones
        s.alpha_bar = ab;
        Ok(s)
    }

    /// Scaled-linear schedule over 1000 base steps, sampled every 8th step.
    pub fn default_for(steps: usize) -> Result<Self> {
        let base = make_schedule(BASE_STEPS, BETA_START, BETA_END, Spacing::ScaledLinear)?;
        Self::subsampled(&base, SAMPLE_STRIDE, steps)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub x: Tensor,
    pub t: usize,
}

/// `eps(x, t, y)`. Implementations must be deterministic.
pub trait NoisePredictor: Sync {
    fn predict(&self, x: &Tensor, t: usize, y: &str) -> Tensor;

    /// Attention/feature snapshots taken while predicting at `t`; empty for
    /// predictors that expose none.
    fn record(&self, _x: &Tensor, _t: usize, _y: &str) -> Vec<AttentionRecord> {
        Vec::new()
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Box<P> {
    fn predict(&self, x: &Tensor, t: usize, y: &str) -> Tensor {
        (**self).predict(x, t, y)
    }

    fn record(&self, x: &Tensor, t: usize, y: &str) -> Vec<AttentionRecord> {
        (**self).record(x, t, y)
    }
}

/// `eps = 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, x: &Tensor, _t: usize, _y: &str) -> Tensor {
        Tensor::zeros(x.dims().to_vec())
    }
}

/// `eps = c * x`.
#[derive(Clone, Copy, Debug)]
pub struct LinearPredictor {
    pub c: f64,
}

impl NoisePredictor for LinearPredictor {
    fn predict(&self, x: &Tensor, _t: usize, _y: &str) -> Tensor {
        let data = x.data().iter().map(|&v| (self.c * v as f64) as f32).collect();
        Tensor::new(x.dims().to_vec(), data).expect("same shape")
    }
}

/// A fixed random per-pixel channel-mixing map `eps(p) = M x(p)`.
#[derive(Clone, Debug)]
pub struct RandomLinearPredictor {
    pub channels: usize,
    /// Row-major `C x C`.
    pub matrix: Vec<f64>,
}

impl RandomLinearPredictor {
    /// Entries uniform in `[-scale / C, scale / C]`, so the operator norm is
    /// at most `scale`.
    pub fn new(seed: u64, channels: usize, scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = scale / channels as f64;
        let matrix = (0..channels * channels).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { channels, matrix }
    }
}

impl NoisePredictor for RandomLinearPredictor {
    fn predict(&self, x: &Tensor, _t: usize, _y: &str) -> Tensor {
        let c = self.channels;
        assert_eq!(x.dims().last(), Some(&c), "channel mismatch");
        let mut out = vec![0.0f32; x.len()];
        for (src, dst) in x.data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            for (i, d) in dst.iter_mut().enumerate() {
                let row = &self.matrix[i * c..(i + 1) * c];
                *d = row.iter().zip(src).map(|(m, &v)| m * v as f64).sum::<f64>() as f32;
            }
        }
        Tensor::new(x.dims().to_vec(), out).expect("same shape")
    }
}

/// Parse `zero`, `linear:<c>` or `random:<seed>`.
pub fn predictor_from_spec(spec: &str, channels: usize) -> Result<Box<dyn NoisePredictor>> {
    let bad = || InversionError::UnknownPredictor(spec.to_string());
    match spec.split_once(':') {
        None if spec == "zero" => Ok(Box::new(ZeroPredictor)),
        Some(("linear", c)) => Ok(Box::new(LinearPredictor {
            c: c.parse().map_err(|_| bad())?,
        })),
        Some(("random", seed)) => Ok(Box::new(RandomLinearPredictor::new(
            seed.parse().map_err(|_| bad())?,
            channels,
            0.05,
        ))),
        _ => Err(bad()),
    }
}

/// Wraps a predictor and synthesises per-layer attention from the latent:
/// features are the latent resampled to each layer's resolution, cross
/// attention is a spatial softmax of the channel mean, and self-attention is
/// a row softmax of negative squared feature distances.
pub struct RecordingPredictor<P> {
    pub inner: P,
    /// `(h, w)` per layer.
    pub resolutions: Vec<(usize, usize)>,
}

impl<P: NoisePredictor> RecordingPredictor<P> {
    pub fn new(inner: P, resolutions: Vec<(usize, usize)>) -> Self {
        Self { inner, resolutions }
    }

    /// Two layers each at quarter, half and full latent resolution, in that
    /// order (deduplicated sizes are kept; sides never drop below 1).
    pub fn pyramid(inner: P, h: usize, w: usize) -> Self {
        let res = [4, 4, 2, 2, 1, 1].map(|d| ((h / d).max(1), (w / d).max(1))).to_vec();
        Self::new(inner, res)
    }

    pub fn meta(&self, steps: usize, channels: usize, label: &str) -> BundleMeta {
        BundleMeta {
            steps,
            layers: self.resolutions.len(),
            resolutions: self.resolutions.clone(),
            channels: vec![channels; self.resolutions.len()],
            token_index: 0,
            label: label.to_string(),
        }
    }
}

fn softmax(values: &mut [f64]) {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    values.iter_mut().for_each(|v| *v /= sum);
}

impl<P: NoisePredictor> NoisePredictor for RecordingPredictor<P> {
    fn predict(&self, x: &Tensor, t: usize, y: &str) -> Tensor {
        self.inner.predict(x, t, y)
    }

    fn record(&self, x: &Tensor, t: usize, _y: &str) -> Vec<AttentionRecord> {
        let &[h, w, c] = x.dims() else {
            panic!("latent must be H x W x C");
        };
        let src = x.to_f64();
        self.resolutions
            .iter()
            .enumerate()
            .map(|(i, &(lh, lw))| {
                let feat = resize_channels(&src, h, w, c, lh, lw);
                let n = lh * lw;
                let mut cross: Vec<f64> = feat.chunks_exact(c).map(|p| p.iter().sum::<f64>() / c as f64).collect();
                softmax(&mut cross);
                let mut self_attn = vec![0.0; n * n];
                for p in 0..n {
                    let fp = &feat[p * c..(p + 1) * c];
                    let row = &mut self_attn[p * n..(p + 1) * n];
                    for (q, v) in row.iter_mut().enumerate() {
                        let fq = &feat[q * c..(q + 1) * c];
                        *v = -fp.iter().zip(fq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    }
                    softmax(row);
                }
                AttentionRecord {
                    t,
                    layer: i + 1,
                    cross: Tensor::from_f64(vec![lh, lw], &cross).expect("shape"),
                    self_attn: Tensor::from_f64(vec![n, n], &self_attn).expect("shape"),
                    features: Tensor::from_f64(vec![lh, lw, c], &feat).expect("shape"),
                }
            })
            .collect()
    }
}

fn check_latent(x: &Tensor) -> Result<()> {
    match x.dims() {
        [_, _, _] => Ok(()),
        d => Err(InversionError::BadLatent(d.to_vec())),
    }
}

/// Move from `t` to `to` along the deterministic trajectory using the noise
/// predicted at `t`.
fn transfer(x: &Tensor, eps: &Tensor, ab_from: f64, ab_to: f64) -> Tensor {
    let (sa, sb) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (ta, tb) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&xv, &ev)| {
            let (xv, ev) = (xv as f64, ev as f64);
            let f = (xv - sb * ev) / sa;
            (ta * f + tb * ev) as f32
        })
        .collect();
    Tensor::new(x.dims().to_vec(), data).expect("same shape")
}

pub fn invert_step(state: &LatentState, predictor: &dyn NoisePredictor, schedule: &NoiseSchedule, y: &str) -> Result<LatentState> {
    let t = state.t;
    if t + 1 >= schedule.steps() {
        return Err(InversionError::StepOutOfRange { t, steps: schedule.steps() });
    }
    let eps = predictor.predict(&state.x, t, y);
    Ok(LatentState {
        x: transfer(&state.x, &eps, schedule.alpha_bar[t], schedule.alpha_bar[t + 1]),
        t: t + 1,
    })
}

pub fn denoise_step(state: &LatentState, predictor: &dyn NoisePredictor, schedule: &NoiseSchedule, y: &str) -> Result<LatentState> {
    let t = state.t;
    if t == 0 || t >= schedule.steps() {
        return Err(InversionError::StepOutOfRange { t, steps: schedule.steps() });
    }
    let eps = predictor.predict(&state.x, t, y);
    Ok(LatentState {
        x: transfer(&state.x, &eps, schedule.alpha_bar[t], schedule.alpha_bar[t - 1]),
        t: t - 1,
    })
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub x_t: Tensor,
    pub reconstruction: Tensor,
    /// Records taken at every reverse-pass step `t = T-1, ..., 0`.
    pub records: Vec<AttentionRecord>,
}

/// Invert `x0` to the last timestep, then denoise back, recording attention
/// at each reverse-pass step.
pub fn invert_and_collect(x0: &Tensor, predictor: &dyn NoisePredictor, schedule: &NoiseSchedule, y: &str) -> Result<Inversion> {
    check_latent(x0)?;
    let finite = |s: &LatentState, step: usize| {
        if s.x.data().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(InversionError::NonFinite { step, t: s.t })
        }
    };
    let mut state = LatentState { x: x0.clone(), t: 0 };
    finite(&state, 0)?;
    let mut step = 0;
    while state.t + 1 < schedule.steps() {
        state = invert_step(&state, predictor, schedule, y)?;
        step += 1;
        finite(&state, step)?;
    }
    let x_t = state.x.clone();
    let mut records = Vec::new();
    loop {
        records.extend(predictor.record(&state.x, state.t, y));
        if state.t == 0 {
            break;
        }
        state = denoise_step(&state, predictor, schedule, y)?;
        step += 1;
        finite(&state, step)?;
    }
    Ok(Inversion {
        x_t,
        reconstruction: state.x,
        records,
    })
}

/// `max |a - b| / max |a|`.
pub fn relative_error(reference: &Tensor, other: &Tensor) -> f64 {
    let num = reference
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0, f64::max);
    let den = reference.data().iter().map(|&a| (a as f64).abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}
