//! Attention bundles and their aggregation over timesteps and layers.
//!
//! A bundle holds, for every reverse step `t` and layer `l`, the
//! cross-attention at the category token (`H_l x W_l`), the spatial
//! self-attention (`N_l x N_l`), and intermediate features
//! (`H_l x W_l x C_l`). Aggregation produces:
//!
//! - `a_c`: the mean cross-attention over all timesteps of the `k` layers
//!   whose time-averaged maps have the largest standard deviation, resized to
//!   `R x R` and min-max normalised;
//! - `a_s`: the mean self-attention over all timesteps and layers, resized to
//!   `R_s^2 x R_s^2` and symmetrised;
//! - `f`: per-layer features averaged over timesteps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::resize::{resize, resize_pairwise};
use crate::tensor_io::{read_tensor, write_tensor, Tensor, TensorIoError};

pub const META_FILE: &str = "meta.txt";
const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("no attention records")]
    Empty,
    #[error("top-k must be at least 1")]
    ZeroK,
    #[error("top-k of {k} exceeds the {layers} available layers")]
    KTooLarge { k: usize, layers: usize },
    #[error("record (t={t}, l={l}): {message}")]
    InvalidRecord { t: usize, l: usize, message: String },
    #[error("missing record for t={t}, l={l}")]
    MissingPair { t: usize, l: usize },
    #[error("duplicate record for t={t}, l={l}")]
    DuplicatePair { t: usize, l: usize },
    #[error("layer {l} has inconsistent feature dims: {first:?} vs {other:?}")]
    InconsistentDims {
        l: usize,
        first: Vec<usize>,
        other: Vec<usize>,
    },
    #[error("bundle metadata in {path}: {message}")]
    Meta { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] TensorIoError),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// One (timestep, layer) snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub t: usize,
    /// 1-based layer index.
    pub layer: usize,
    pub cross: Tensor,
    pub self_attn: Tensor,
    pub features: Tensor,
}

impl AttentionRecord {
    pub fn height(&self) -> usize {
        self.cross.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.cross.dims()[1]
    }

    /// Check shapes, non-negativity of cross-attention, and row normalisation
    /// of self-attention.
    pub fn validate(&self) -> Result<()> {
        let err = |message: String| AttentionError::InvalidRecord {
            t: self.t,
            l: self.layer,
            message,
        };
        if self.layer == 0 {
            return Err(err("layer indices start at 1".into()));
        }
        let (h, w) = match self.cross.dims() {
            &[h, w] => (h, w),
            d => return Err(err(format!("cross dims {d:?} are not 2-D"))),
        };
        let n = h * w;
        if self.self_attn.dims() != [n, n] {
            return Err(err(format!(
                "self-attention dims {:?}, expected [{n}, {n}]",
                self.self_attn.dims()
            )));
        }
        match self.features.dims() {
            &[fh, fw, _] if fh == h && fw == w => {}
            d => return Err(err(format!("feature dims {d:?} do not match {h}x{w}xC"))),
        }
        if let Some(v) = self.cross.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(err(format!("negative or NaN cross-attention value {v}")));
        }
        for (i, row) in self.self_attn.data().chunks_exact(n).enumerate() {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(err(format!("self-attention row {i} sums to {s}")));
            }
        }
        Ok(())
    }
}

/// Time/layer-aggregated attention for one image.
#[derive(Clone, Debug)]
pub struct AggregatedAttention {
    /// `R x R`, min-max normalised to [0, 1].
    pub a_c: Tensor,
    /// `R_s^2 x R_s^2`, exactly symmetric.
    pub a_s: Tensor,
    /// Per-layer `H_l x W_l x C_l`, in layer order.
    pub f: Vec<Tensor>,
    pub r: usize,
    pub r_s: usize,
    pub k: usize,
    pub layers: usize,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregationParams {
    pub k: usize,
    pub r: usize,
    pub r_s: usize,
}

impl Default for AggregationParams {
    fn default() -> Self {
        Self {
            k: 4,
            r: 64,
            r_s: 64,
        }
    }
}

fn sorted(records: &[AttentionRecord]) -> Vec<&AttentionRecord> {
    let mut v: Vec<&AttentionRecord> = records.iter().collect();
    v.sort_by_key(|r| (r.layer, r.t));
    v
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Min-max normalise to [0, 1]; a constant map becomes all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

/// Time-averaged cross-attention per layer at `r x r`, keyed by layer.
fn layer_means(records: &[AttentionRecord], r: usize) -> BTreeMap<usize, Vec<f64>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for rec in sorted(records) {
        let map = resize(&rec.cross.to_f64(), rec.height(), rec.width(), r, r);
        let entry = sums.entry(rec.layer).or_insert_with(|| (vec![0.0; r * r], 0));
        for (s, v) in entry.0.iter_mut().zip(map) {
            *s += v;
        }
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(l, (s, count))| (l, s.into_iter().map(|v| v / count as f64).collect()))
        .collect()
}

/// Layers ranked by the standard deviation of their time-averaged map,
/// largest first; ties go to the lower layer index.
pub fn rank_layers_by_std(records: &[AttentionRecord], r: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = layer_means(records, r)
        .into_iter()
        .map(|(l, m)| (l, population_std(&m)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Mean cross-attention of the top-`k` layers before normalisation, plus the
/// selected layer indices.
pub fn top_k_cross_mean(records: &[AttentionRecord], k: usize, r: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if records.is_empty() {
        return Err(AttentionError::Empty);
    }
    if k == 0 {
        return Err(AttentionError::ZeroK);
    }
    let means = layer_means(records, r);
    if k > means.len() {
        return Err(AttentionError::KTooLarge {
            k,
            layers: means.len(),
        });
    }
    let mut ranked: Vec<(usize, f64)> = means.iter().map(|(&l, m)| (l, population_std(m))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut selected: Vec<usize> = ranked[..k].iter().map(|&(l, _)| l).collect();
    selected.sort_unstable();
    let mut acc = vec![0.0; r * r];
    for l in &selected {
        for (a, v) in acc.iter_mut().zip(&means[l]) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|v| *v /= k as f64);
    Ok((acc, selected))
}

pub fn aggregate_cross_attention(records: &[AttentionRecord], k: usize, r: usize) -> Result<Tensor> {
    let (mean, _) = top_k_cross_mean(records, k, r)?;
    Ok(Tensor::from_f64(vec![r, r], &min_max_normalize(&mean))?)
}

/// Mean self-attention over all records at `r_s`, symmetrised as
/// `(A + A^T) / 2`.
pub fn aggregate_self_attention(records: &[AttentionRecord], r_s: usize) -> Result<Tensor> {
    if records.is_empty() {
        return Err(AttentionError::Empty);
    }
    let m = r_s * r_s;
    // resampling is linear, so sum at native resolution and resample once
    // per distinct resolution
    let mut by_res: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for rec in sorted(records) {
        let sum = by_res
            .entry((rec.height(), rec.width()))
            .or_insert_with(|| vec![0.0; rec.self_attn.len()]);
        for (a, &v) in sum.iter_mut().zip(rec.self_attn.data()) {
            *a += v as f64;
        }
    }
    let mut acc = vec![0.0f64; m * m];
    for ((h, w), sum) in by_res {
        for (a, v) in acc.iter_mut().zip(resize_pairwise(&sum, h, w, r_s, r_s)) {
            *a += v;
        }
    }
    let count = records.len() as f64;
    acc.iter_mut().for_each(|v| *v /= count);
    for i in 0..m {
        for j in (i + 1)..m {
            let s = 0.5 * (acc[i * m + j] + acc[j * m + i]);
            acc[i * m + j] = s;
            acc[j * m + i] = s;
        }
    }
    Ok(Tensor::from_f64(vec![m, m], &acc)?)
}

/// Distinct (T, L) covered by the records, checking that every pair
/// `t in [0, T)`, `l in [1, L]` appears exactly once.
pub fn check_coverage(records: &[AttentionRecord]) -> Result<(usize, usize)> {
    if records.is_empty() {
        return Err(AttentionError::Empty);
    }
    let steps = records.iter().map(|r| r.t).max().unwrap() + 1;
    let layers = records.iter().map(|r| r.layer).max().unwrap();
    let mut seen = BTreeSet::new();
    for r in records {
        if r.layer == 0 {
            return Err(AttentionError::InvalidRecord {
                t: r.t,
                l: 0,
                message: "layer indices start at 1".into(),
            });
        }
        if !seen.insert((r.t, r.layer)) {
            return Err(AttentionError::DuplicatePair { t: r.t, l: r.layer });
        }
    }
    for t in 0..steps {
        for l in 1..=layers {
            if !seen.contains(&(t, l)) {
                return Err(AttentionError::MissingPair { t, l });
            }
        }
    }
    Ok((steps, layers))
}

/// Per-layer features averaged over timesteps, resolutions preserved.
pub fn aggregate_features(records: &[AttentionRecord]) -> Result<Vec<Tensor>> {
    let (steps, layers) = check_coverage(records)?;
    let mut out: Vec<Option<(Vec<usize>, Vec<f64>)>> = vec![None; layers];
    for rec in sorted(records) {
        let slot = &mut out[rec.layer - 1];
        match slot {
            None => *slot = Some((rec.features.dims().to_vec(), rec.features.to_f64())),
            Some((dims, acc)) => {
                if dims.as_slice() != rec.features.dims() {
                    return Err(AttentionError::InconsistentDims {
                        l: rec.layer,
                        first: dims.clone(),
                        other: rec.features.dims().to_vec(),
                    });
                }
                for (a, &v) in acc.iter_mut().zip(rec.features.data()) {
                    *a += v as f64;
                }
            }
        }
    }
    out.into_iter()
        .map(|slot| {
            let (dims, acc) = slot.expect("coverage checked");
            let mean: Vec<f64> = acc.into_iter().map(|v| v / steps as f64).collect();
            Ok(Tensor::from_f64(dims, &mean)?)
        })
        .collect()
}

pub fn aggregate(records: &[AttentionRecord], params: AggregationParams) -> Result<AggregatedAttention> {
    let (steps, layers) = check_coverage(records)?;
    Ok(AggregatedAttention {
        a_c: aggregate_cross_attention(records, params.k, params.r)?,
        a_s: aggregate_self_attention(records, params.r_s)?,
        f: aggregate_features(records)?,
        r: params.r,
        r_s: params.r_s,
        k: params.k,
        layers,
        steps,
    })
}

/// Bundle metadata, stored as `key=value` lines in `meta.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleMeta {
    pub steps: usize,
    pub layers: usize,
    /// `(height, width)` per layer, in layer order.
    pub resolutions: Vec<(usize, usize)>,
    pub channels: Vec<usize>,
    pub token_index: usize,
    pub label: String,
}

impl BundleMeta {
    pub fn to_text(&self) -> String {
        let res: Vec<String> = self.resolutions.iter().map(|(h, w)| format!("{h}x{w}")).collect();
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let mut s = String::new();
        writeln!(s, "steps={}", self.steps).unwrap();
        writeln!(s, "layers={}", self.layers).unwrap();
        writeln!(s, "resolutions={}", res.join(",")).unwrap();
        writeln!(s, "channels={}", ch.join(",")).unwrap();
        writeln!(s, "token_index={}", self.token_index).unwrap();
        writeln!(s, "label={}", self.label).unwrap();
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |message: String| AttentionError::Meta {
            path: path.to_path_buf(),
            message,
        };
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("line {line:?} is not key=value")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| err(format!("missing key {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|e| err(format!("bad value for {k}: {e}")))
        };
        let resolutions = get("resolutions")?
            .split(',')
            .map(|s| {
                let (h, w) = s.split_once('x').ok_or_else(|| err(format!("bad resolution {s:?}")))?;
                Ok((
                    h.parse().map_err(|_| err(format!("bad resolution {s:?}")))?,
                    w.parse().map_err(|_| err(format!("bad resolution {s:?}")))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let channels = match kv.get("channels") {
            Some(c) if !c.is_empty() => c
                .split(',')
                .map(|s| s.parse().map_err(|_| err(format!("bad channel count {s:?}"))))
                .collect::<Result<Vec<usize>>>()?,
            _ => Vec::new(),
        };
        let meta = Self {
            steps: num("steps")?,
            layers: num("layers")?,
            resolutions,
            channels,
            token_index: kv.get("token_index").map_or(Ok(0), |_| num("token_index"))?,
            label: kv.get("label").cloned().unwrap_or_default(),
        };
        if meta.resolutions.len() != meta.layers {
            return Err(err(format!(
                "{} resolutions listed for {} layers",
                meta.resolutions.len(),
                meta.layers
            )));
        }
        Ok(meta)
    }
}

pub fn record_file(kind: &str, t: usize, l: usize) -> String {
    format!("{kind}_t{t}_l{l}")
}

pub fn write_bundle(dir: impl AsRef<Path>, meta: &BundleMeta, records: &[AttentionRecord]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| TensorIoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for rec in records {
        write_tensor(&rec.cross, dir.join(record_file("cross", rec.t, rec.layer)))?;
        write_tensor(&rec.self_attn, dir.join(record_file("self", rec.t, rec.layer)))?;
        write_tensor(&rec.features, dir.join(record_file("feat", rec.t, rec.layer)))?;
    }
    let path = dir.join(META_FILE);
    fs::write(&path, meta.to_text()).map_err(|source| TensorIoError::Io { path, source })?;
    Ok(())
}

pub fn read_bundle_meta(dir: impl AsRef<Path>) -> Result<BundleMeta> {
    let path = dir.as_ref().join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|source| TensorIoError::Io {
        path: path.clone(),
        source,
    })?;
    BundleMeta::parse(&text, &path)
}

/// Read every record listed by the metadata and validate it against the
/// declared resolutions.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<(BundleMeta, Vec<AttentionRecord>)> {
    let dir = dir.as_ref();
    let meta = read_bundle_meta(dir)?;
    let mut records = Vec::with_capacity(meta.steps * meta.layers);
    for t in 0..meta.steps {
        for l in 1..=meta.layers {
            let rec = AttentionRecord {
                t,
                layer: l,
                cross: read_tensor(dir.join(record_file("cross", t, l)))?,
                self_attn: read_tensor(dir.join(record_file("self", t, l)))?,
                features: read_tensor(dir.join(record_file("feat", t, l)))?,
            };
            rec.validate()?;
            if (rec.height(), rec.width()) != meta.resolutions[l - 1] {
                return Err(AttentionError::InvalidRecord {
                    t,
                    l,
                    message: format!(
                        "resolution {}x{} differs from metadata {:?}",
                        rec.height(),
                        rec.width(),
                        meta.resolutions[l - 1]
                    ),
                });
            }
            records.push(rec);
        }
    }
    Ok((meta, records))
}
