use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use attncut::attention::{aggregate_features, read_bundle, write_bundle};
use attncut::config::Config;
use attncut::decoder::{self, DecoderParams, DecoderSample, TrainParams};
use attncut::eval::{dataset_stats, stats_csv, summarize};
use attncut::fixtures::{self, generate_fixture_set};
use attncut::inversion::{invert_and_collect, predictor_from_spec, relative_error, NoiseSchedule, RecordingPredictor};
use attncut::pipeline::{evaluate_mask_dir, run_pipeline, training_samples, EntryFailure};
use attncut::tensor_io::{load_image, load_manifest, read_tensor, write_mask, write_tensor};

#[derive(Parser)]
#[command(name = "attncut", version, about = "Attention bundles to object masks via graph cuts and a segment decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural scenes with attention bundles and ground truth.
    Fixtures(FixturesArgs),
    /// Produce masks for every manifest entry and evaluate them.
    Run(RunArgs),
    /// Evaluate a directory of masks against the manifest's ground truth.
    Eval(EvalArgs),
    /// Per-image dataset statistics (size, centre, contrast, geometry).
    Stats(StatsArgs),
    /// Deterministic inversion of a latent tensor with a toy predictor,
    /// writing an attention bundle.
    Invert(InvertArgs),
    /// Train the segment decoder on a manifest with ground-truth masks.
    Train(TrainArgs),
    /// Predict one mask with a trained decoder.
    Predict(PredictArgs),
}

#[derive(Args)]
struct FixturesArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = fixtures::DEFAULT_DIMS)]
    dims: usize,
    #[arg(long)]
    out: PathBuf,
    /// Recorded timesteps per scene.
    #[arg(long, default_value_t = fixtures::DEFAULT_STEPS)]
    steps: usize,
    /// Recorded layers per timestep.
    #[arg(long, default_value_t = fixtures::DEFAULT_LAYERS)]
    layers: usize,
}

/// Every config key is also a flag of the same name; flags override the file.
#[derive(Args)]
struct RunArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// attentioncut or decoder.
    #[arg(long)]
    mode: Option<String>,
    /// Decoder checkpoint directory.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Worker threads (0 = all logical cores).
    #[arg(long)]
    workers: Option<String>,
    /// otsu or fixed.
    #[arg(long = "tau_mode")]
    tau_mode: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long = "n_seeds")]
    n_seeds: Option<String>,
    #[arg(long = "rng_seed")]
    rng_seed: Option<String>,
    #[arg(long = "lambda_phi")]
    lambda_phi: Option<String>,
    #[arg(long = "lambda_psi")]
    lambda_psi: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long = "long_range_k")]
    long_range_k: Option<String>,
    /// full, cross, refine, objectness, spatial or semantic.
    #[arg(long)]
    terms: Option<String>,
    /// Cross-attention layers kept by variance ranking.
    #[arg(long = "top_k")]
    top_k: Option<String>,
    /// Cross-attention / feature grid side.
    #[arg(long)]
    r: Option<String>,
    /// Self-attention base resolution (clamped to the recorded maximum).
    #[arg(long = "r_s")]
    r_s: Option<String>,
}

impl RunArgs {
    fn flags(&self) -> Vec<(&'static str, &str)> {
        [
            ("manifest", &self.manifest),
            ("out", &self.out),
            ("mode", &self.mode),
            ("checkpoint", &self.checkpoint),
            ("workers", &self.workers),
            ("tau_mode", &self.tau_mode),
            ("tau", &self.tau),
            ("n_seeds", &self.n_seeds),
            ("rng_seed", &self.rng_seed),
            ("lambda_phi", &self.lambda_phi),
            ("lambda_psi", &self.lambda_psi),
            ("lambda", &self.lambda),
            ("long_range_k", &self.long_range_k),
            ("terms", &self.terms),
            ("top_k", &self.top_k),
            ("r", &self.r),
            ("r_s", &self.r_s),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of masks named as `run` writes them.
    #[arg(long)]
    masks: PathBuf,
    /// Write the machine-readable report here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct InvertArgs {
    /// H x W x C latent tensor.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 40)]
    steps: usize,
    /// zero, linear:<c> or random:<seed>.
    #[arg(long, default_value = "linear:0.01")]
    predictor: String,
    /// Bundle directory.
    #[arg(long)]
    out: PathBuf,
    /// Conditioning label.
    #[arg(long, default_value = "object")]
    label: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = decoder::DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = decoder::DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = decoder::DEFAULT_HIDDEN)]
    hidden: usize,
    /// Feature grid side.
    #[arg(long, default_value_t = 64)]
    r: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Image whose size the mask takes; otherwise use --width/--height.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Feature grid side (as used in training).
    #[arg(long, default_value_t = 64)]
    r: usize,
    /// Output mask (PGM).
    #[arg(long)]
    out: PathBuf,
}

fn print_failures(failures: &[EntryFailure]) {
    for f in failures {
        eprintln!("FAILED entry {} ({}): {}", f.index, f.source.display(), f.message);
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn fixtures_cmd(a: FixturesArgs) -> Result<u8> {
    let m = generate_fixture_set(a.n, a.seed, a.dims, a.steps, a.layers, &a.out)?;
    println!("wrote {} scenes and {}", m.len(), a.out.join("manifest.txt").display());
    Ok(0)
}

fn run_cmd(a: RunArgs) -> Result<u8> {
    let cfg = Config::resolve(a.config.as_deref(), a.flags())?;
    let out = run_pipeline(&cfg)?;
    print!("{}", out.summary());
    Ok(out.exit_code() as u8)
}

fn eval_cmd(a: EvalArgs) -> Result<u8> {
    let manifest = load_manifest(&a.manifest)?;
    let (report, failures) = evaluate_mask_dir(&manifest, &a.masks)?;
    print_failures(&failures);
    let Some(report) = report else {
        bail!("no entry has both a mask and ground truth");
    };
    print!("{}", report.to_table());
    if let Some(csv) = &a.csv {
        write_text(csv, &report.to_csv())?;
    }
    Ok(if failures.is_empty() { 0 } else { 2 })
}

fn stats_cmd(a: StatsArgs) -> Result<u8> {
    let manifest = load_manifest(&a.manifest)?;
    let (stats, skipped) = dataset_stats(&manifest)?;
    let csv = stats_csv(&stats);
    match &a.csv {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    eprint!("{}", summarize(&stats, skipped).to_table());
    Ok(0)
}

fn invert_cmd(a: InvertArgs) -> Result<u8> {
    let x0 = read_tensor(&a.input)?;
    let &[h, w, c] = x0.dims() else {
        bail!("input must be H x W x C, got dims {:?}", x0.dims());
    };
    let predictor = RecordingPredictor::pyramid(predictor_from_spec(&a.predictor, c)?, h, w);
    let schedule = NoiseSchedule::default_for(a.steps)?;
    let inv = invert_and_collect(&x0, &predictor, &schedule, &a.label)?;
    write_bundle(&a.out, &predictor.meta(a.steps, c, &a.label), &inv.records)?;
    write_tensor(&inv.x_t, a.out.join("latent_T"))?;
    write_tensor(&inv.reconstruction, a.out.join("reconstruction"))?;
    println!(
        "wrote {} records to {}; reconstruction relative error {:.3e}",
        inv.records.len(),
        a.out.display(),
        relative_error(&x0, &inv.reconstruction)
    );
    Ok(0)
}

fn train_cmd(a: TrainArgs) -> Result<u8> {
    let manifest = load_manifest(&a.manifest)?;
    let (samples, failures, skipped) = training_samples(&manifest, a.r);
    print_failures(&failures);
    if skipped > 0 {
        eprintln!("skipped {skipped} entries without ground truth");
    }
    let samples: Vec<DecoderSample> = samples.into_iter().map(|(_, s)| s).collect();
    let Some(first) = samples.first() else {
        bail!("no usable training samples");
    };
    let mut params = DecoderParams::init(a.seed, first.channels, a.hidden)?;
    let tp = TrainParams {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        shuffle_seed: a.seed,
    };
    let report = decoder::train(&mut params, &samples, tp)?;
    println!("initial loss {:.6}", report.initial_loss);
    for (i, l) in report.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {:.6}", i + 1, l);
    }
    println!("final loss {:.6}", report.final_loss);
    params.save(&a.out)?;
    println!("checkpoint written to {}", a.out.display());
    Ok(if failures.is_empty() { 0 } else { 2 })
}

fn predict_cmd(a: PredictArgs) -> Result<u8> {
    let params = DecoderParams::load(&a.checkpoint)?;
    let (_, records) = read_bundle(&a.bundle)?;
    let features = aggregate_features(&records)?;
    let (width, height) = match (&a.image, a.width, a.height) {
        (Some(path), _, _) => {
            let img = load_image(path)?;
            (img.width, img.height)
        }
        (None, Some(w), Some(h)) => (w, h),
        _ => bail!("give --image or both --width and --height"),
    };
    let mask = params.predict(&DecoderSample::from_features(&features, a.r), width, height)?;
    write_mask(&mask, &a.out)?;
    println!("wrote {} ({} foreground pixels)", a.out.display(), mask.count_foreground());
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fixtures(a) => fixtures_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Stats(a) => stats_cmd(a),
        Command::Invert(a) => invert_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict_cmd(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
