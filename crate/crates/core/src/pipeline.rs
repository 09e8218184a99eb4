//! Manifest-level driver: aggregate each entry's attention bundle, turn it
//! into a mask, write the mask, then evaluate against ground truth.
//!
//! Entries are processed on a worker pool. Each entry is a pure function of
//! the config and its input files, and results are reassembled in manifest
//! order, so outputs do not depend on scheduling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::attention::{aggregate, aggregate_features, read_bundle, AggregationParams, AttentionError, AttentionRecord};
use crate::config::{Config, ConfigError, Mode};
use crate::cut::{attention_cut, CutError};
use crate::decoder::{DecoderError, DecoderParams, DecoderSample};
use crate::eval::{BoundingBox, EvalError, MetricsReport};
use crate::tensor_io::{load_image, load_manifest, DatasetManifest, read_mask, write_mask, ManifestEntry, MaskImage, TensorIoError};

pub const MASK_DIR: &str = "masks";
pub const ENTRIES_CSV: &str = "entries.csv";
pub const REPORT_CSV: &str = "report.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Errors that stop the whole run.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("decoder mode needs a checkpoint")]
    NoCheckpoint,
    #[error("loading decoder checkpoint: {0}")]
    Checkpoint(DecoderError),
    #[error("manifest has no entries")]
    EmptyManifest,
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Errors confined to one manifest entry.
#[derive(Debug, Error)]
pub enum EntryError {
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error(transparent)]
    Cut(#[from] CutError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    GtSize { pred: (usize, usize), gt: (usize, usize) },
}

#[derive(Clone, Debug)]
pub struct EntryOutput {
    pub index: usize,
    pub mask_path: PathBuf,
    pub mask: MaskImage,
    /// Non-fatal note, e.g. an all-background mask from empty attention.
    pub warning: Option<String>,
}

#[derive(Clone, Debug)]
pub struct EntryFailure {
    pub index: usize,
    pub source: PathBuf,
    pub message: String,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub outputs: Vec<EntryOutput>,
    pub failures: Vec<EntryFailure>,
    /// Present when at least one written mask has ground truth.
    pub report: Option<MetricsReport>,
    pub total: usize,
}

impl PipelineOutput {
    /// 0 when every entry produced a mask, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        writeln!(s, "masks written: {}/{}", self.outputs.len(), self.total).unwrap();
        for f in &self.failures {
            writeln!(s, "FAILED entry {} ({}): {}", f.index, f.source.display(), f.message).unwrap();
        }
        if let Some(r) = &self.report {
            s.push_str(&r.to_table());
        }
        s
    }

    pub fn entries_csv(&self) -> String {
        let mut rows: Vec<(usize, String)> = self
            .outputs
            .iter()
            .map(|o| {
                let note = o.warning.as_deref().unwrap_or("");
                (o.index, format!("{},ok,{},{}", o.index, o.mask_path.display(), csv_field(note)))
            })
            .chain(self.failures.iter().map(|f| {
                (f.index, format!("{},failed,,{}", f.index, csv_field(&f.message)))
            }))
            .collect();
        rows.sort_by_key(|(i, _)| *i);
        let mut s = String::from("index,status,mask,message\n");
        for (_, row) in rows {
            s.push_str(&row);
            s.push('\n');
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Output file name for entry `index`.
pub fn mask_file_name(index: usize, entry: &ManifestEntry) -> String {
    let stem = entry
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    format!("{index:04}_{stem}.pgm")
}

/// Clamp the self-attention base resolution to the largest recorded
/// self-attention map so it is never upsampled past its source.
pub fn effective_params(records: &[AttentionRecord], params: AggregationParams) -> AggregationParams {
    let largest = records.iter().map(|r| r.height().max(r.width())).max().unwrap_or(params.r_s);
    AggregationParams {
        r_s: params.r_s.min(largest),
        ..params
    }
}

/// Mask for one entry, at the entry image's size.
pub fn process_entry(
    entry: &ManifestEntry,
    cfg: &Config,
    decoder: Option<&DecoderParams>,
) -> Result<(MaskImage, Option<String>), EntryError> {
    let (_, records) = read_bundle(&entry.attn)?;
    let agg = aggregate(&records, effective_params(&records, cfg.aggregation))?;
    let image = load_image(&entry.image)?;
    match decoder {
        Some(dec) => {
            let sample = DecoderSample::from_features(&agg.f, agg.r);
            Ok((dec.predict(&sample, image.width, image.height)?, None))
        }
        None => {
            let out = attention_cut(&agg, &image, &cfg.cut)?;
            let warning = out.warning.map(|w| format!("{w:?}"));
            Ok((out.mask, warning))
        }
    }
}

/// Evaluate written masks that have ground truth. Failures to read or match
/// a ground-truth mask are returned as entry failures.
fn evaluate(
    entries: &[ManifestEntry],
    outputs: &[EntryOutput],
) -> (Option<Result<MetricsReport, EvalError>>, Vec<EntryFailure>) {
    let mut failures = Vec::new();
    let mut indices = Vec::new();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut boxes: Vec<Vec<BoundingBox>> = Vec::new();
    let mut all_boxes = true;
    for o in outputs {
        let entry = &entries[o.index];
        let Some(gt_path) = &entry.gt_mask else { continue };
        let gt = match read_mask(gt_path) {
            Ok(gt) => gt,
            Err(e) => {
                failures.push(EntryFailure {
                    index: o.index,
                    source: gt_path.clone(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        let (pw, ph) = (o.mask.width(), o.mask.height());
        if (gt.width(), gt.height()) != (pw, ph) {
            failures.push(EntryFailure {
                index: o.index,
                source: gt_path.clone(),
                message: EntryError::GtSize {
                    pred: (pw, ph),
                    gt: (gt.width(), gt.height()),
                }
                .to_string(),
            });
            continue;
        }
        match &entry.gt_boxes {
            Some(b) => boxes.push(b.clone()),
            None => all_boxes = false,
        }
        indices.push(o.index);
        preds.push(o.mask.clone());
        gts.push(gt);
    }
    if preds.is_empty() {
        return (None, failures);
    }
    let boxes = all_boxes.then_some(boxes.as_slice());
    (Some(MetricsReport::compute(&indices, &preds, &gts, boxes)), failures)
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))
}

/// Run the configured manifest end to end, writing masks, `entries.csv`,
/// `report.csv` (when ground truth exists) and the resolved config under
/// `cfg.out`.
pub fn run_pipeline(cfg: &Config) -> Result<PipelineOutput, PipelineError> {
    let manifest = load_manifest(cfg.manifest()?)?;
    if manifest.is_empty() {
        return Err(PipelineError::EmptyManifest);
    }
    let decoder = match cfg.mode {
        Mode::AttentionCut => None,
        Mode::Decoder => {
            let path = cfg.checkpoint.as_ref().ok_or(PipelineError::NoCheckpoint)?;
            Some(DecoderParams::load(path).map_err(PipelineError::Checkpoint)?)
        }
    };
    let mask_dir = cfg.out.join(MASK_DIR);
    fs::create_dir_all(&mask_dir).map_err(|e| TensorIoError::io(&mask_dir, e))?;

    let pool = build_pool(cfg.workers)?;
    let results: Vec<Result<EntryOutput, EntryFailure>> = pool.install(|| {
        manifest
            .entries
            .par_iter()
            .enumerate()
            .map(|(index, entry)| {
                let fail = |message: String| EntryFailure {
                    index,
                    source: entry.attn.clone(),
                    message,
                };
                let (mask, warning) = process_entry(entry, cfg, decoder.as_ref()).map_err(|e| fail(e.to_string()))?;
                let mask_path = mask_dir.join(mask_file_name(index, entry));
                write_mask(&mask, &mask_path).map_err(|e| fail(e.to_string()))?;
                Ok(EntryOutput {
                    index,
                    mask_path,
                    mask,
                    warning,
                })
            })
            .collect()
    });

    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(o) => {
                if let Some(w) = &o.warning {
                    log::warn!("entry {}: {w}", o.index);
                }
                outputs.push(o);
            }
            Err(f) => {
                log::error!("entry {} failed: {}", f.index, f.message);
                failures.push(f);
            }
        }
    }

    let (report, eval_failures) = evaluate(&manifest.entries, &outputs);
    failures.extend(eval_failures);
    failures.sort_by_key(|f| f.index);
    let report = report.transpose()?;

    let out = PipelineOutput {
        total: manifest.len(),
        outputs,
        failures,
        report,
    };
    write_text(&cfg.out.join(ENTRIES_CSV), &out.entries_csv())?;
    write_text(&cfg.out.join(CONFIG_FILE), &cfg.to_text())?;
    if let Some(r) = &out.report {
        write_text(&cfg.out.join(REPORT_CSV), &r.to_csv())?;
    }
    Ok(out)
}

/// Decoder training samples (features on an `r x r` grid plus the
/// ground-truth target) for every entry with a ground-truth mask. Entries
/// without one are counted as skipped; unreadable ones are failures.
pub fn training_samples(
    manifest: &DatasetManifest,
    r: usize,
) -> (Vec<(usize, DecoderSample)>, Vec<EntryFailure>, usize) {
    let results: Vec<Option<Result<(usize, DecoderSample), EntryFailure>>> = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(index, entry)| {
            let gt_path = entry.gt_mask.as_ref()?;
            let load = || -> Result<DecoderSample, EntryError> {
                let (_, records) = read_bundle(&entry.attn)?;
                let f = aggregate_features(&records)?;
                Ok(DecoderSample::from_features(&f, r).with_target(&read_mask(gt_path)?))
            };
            Some(load().map(|s| (index, s)).map_err(|e| EntryFailure {
                index,
                source: entry.attn.clone(),
                message: e.to_string(),
            }))
        })
        .collect();
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r {
            None => skipped += 1,
            Some(Ok(s)) => samples.push(s),
            Some(Err(f)) => failures.push(f),
        }
    }
    (samples, failures, skipped)
}

/// Evaluate a directory of masks written by [`run_pipeline`] against the
/// manifest's ground truth. Missing or unreadable masks are failures.
pub fn evaluate_mask_dir(
    manifest: &DatasetManifest,
    mask_dir: &Path,
) -> Result<(Option<MetricsReport>, Vec<EntryFailure>), PipelineError> {
    let mut outputs = Vec::new();
    let mut failures = Vec::new();
    for (index, entry) in manifest.entries.iter().enumerate() {
        if entry.gt_mask.is_none() {
            continue;
        }
        let mask_path = mask_dir.join(mask_file_name(index, entry));
        match read_mask(&mask_path) {
            Ok(mask) => outputs.push(EntryOutput {
                index,
                mask_path,
                mask,
                warning: None,
            }),
            Err(e) => failures.push(EntryFailure {
                index,
                source: mask_path,
                message: e.to_string(),
            }),
        }
    }
    let (report, eval_failures) = evaluate(&manifest.entries, &outputs);
    failures.extend(eval_failures);
    failures.sort_by_key(|f| f.index);
    Ok((report.transpose()?, failures))
}

fn write_text(path: &Path, text: &str) -> Result<(), TensorIoError> {
    fs::write(path, text).map_err(|e| TensorIoError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::generate_fixture_set;
    use crate::tensor_io::write_manifest;

    fn config(manifest: &Path, out: &Path) -> Config {
        let mut cfg = Config::default();
        cfg.manifest = Some(manifest.to_path_buf());
        cfg.out = out.to_path_buf();
        cfg.workers = 2;
        cfg.aggregation.r = 32;
        cfg.aggregation.r_s = 16;
        cfg
    }

    #[test]
    fn runs_fixtures_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        generate_fixture_set(3, 11, 32, 2, 6, dir.path()).unwrap();
        let out = dir.path().join("out");
        let res = run_pipeline(&config(&dir.path().join("manifest.txt"), &out)).unwrap();
        assert_eq!(res.exit_code(), 0);
        assert_eq!(res.outputs.len(), 3);
        let report = res.report.as_ref().unwrap();
        assert!(report.mean_iou > 0.5, "{}", report.mean_iou);
        assert!(report.corloc.is_some());
        assert!(out.join(MASK_DIR).join("0000_scene_000.pgm").exists());
        assert!(out.join(REPORT_CSV).exists());
        let entries = fs::read_to_string(out.join(ENTRIES_CSV)).unwrap();
        assert_eq!(entries.lines().count(), 4);
    }

    #[test]
    fn missing_bundle_is_a_per_entry_failure() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = generate_fixture_set(3, 12, 32, 2, 6, dir.path()).unwrap();
        m.entries[1].attn = dir.path().join("nope");
        let path = dir.path().join("broken.txt");
        write_manifest(&m, &path).unwrap();
        let res = run_pipeline(&config(&path, &dir.path().join("out"))).unwrap();
        assert_eq!(res.exit_code(), 2);
        assert_eq!(res.outputs.len(), 2);
        assert_eq!(res.failures.len(), 1);
        assert_eq!(res.failures[0].index, 1);
        assert!(res.summary().contains("FAILED entry 1"));
        assert_eq!(res.report.unwrap().per_image.len(), 2);
    }

    #[test]
    fn r_s_clamped_to_recorded_resolution() {
        let f = crate::fixtures::generate_fixture(3, 32, 1, 6).unwrap();
        let p = effective_params(&f.records, AggregationParams::default());
        assert_eq!(p.r_s, 16);
        let q = effective_params(&f.records, AggregationParams { r_s: 8, ..Default::default() });
        assert_eq!(q.r_s, 8);
    }

    #[test]
    fn mask_dir_evaluation_matches_run() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_fixture_set(2, 14, 32, 1, 6, dir.path()).unwrap();
        let out = dir.path().join("out");
        let run = run_pipeline(&config(&dir.path().join("manifest.txt"), &out)).unwrap();
        let (report, failures) = evaluate_mask_dir(&m, &out.join(MASK_DIR)).unwrap();
        assert!(failures.is_empty());
        assert_eq!(report, run.report);
        fs::remove_file(&run.outputs[0].mask_path).unwrap();
        let (report, failures) = evaluate_mask_dir(&m, &out.join(MASK_DIR)).unwrap();
        assert_eq!(failures.len(), 1);
        assert_eq!(report.unwrap().per_image.len(), 1);
    }

    #[test]
    fn training_samples_skip_entries_without_gt() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = generate_fixture_set(3, 15, 32, 1, 6, dir.path()).unwrap();
        m.entries[2].gt_mask = None;
        let (samples, failures, skipped) = training_samples(&m, 16);
        assert_eq!((samples.len(), failures.len(), skipped), (2, 0, 1));
        assert_eq!(samples[0].1.side, 16);
        assert!(samples[0].1.target.is_some());
    }

    #[test]
    fn decoder_mode_requires_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        generate_fixture_set(1, 13, 32, 1, 6, dir.path()).unwrap();
        let mut cfg = config(&dir.path().join("manifest.txt"), &dir.path().join("out"));
        cfg.mode = Mode::Decoder;
        assert!(matches!(run_pipeline(&cfg), Err(PipelineError::NoCheckpoint)));
    }
}
