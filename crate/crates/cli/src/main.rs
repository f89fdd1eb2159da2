//! `cmpfcn`: layout to topography pipeline, one subcommand per stage.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 data format, shape
//! or I/O error, 4 non-finite training loss.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cmpfcn::evaluation::{cross_section_csv, evaluate, evaluate_dataset, timed_predict, PredictMode};
use cmpfcn::layout::{parse_layout, rasterize};
use cmpfcn::persistence::{load_checkpoint, load_grid, save_checkpoint, save_grid, GridDtype};
use cmpfcn::preprocess::{build_dataset, load_dataset, save_dataset, DatasetConfig, SmoothingConfig};
use cmpfcn::synth::{generate, OracleConfig};
use cmpfcn::training::{train_with_observer, Optimizer, TrainConfig};
use cmpfcn::unet::{ModelState, UNetConfig};
use cmpfcn::{Error, Parallelism};

use manifest::{manifest_path, RunManifest};

#[derive(Parser)]
#[command(name = "cmpfcn", version, about = "Predict post-CMP die topography from layouts with a U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a CMPRECT layout into a binary CMPG grid.
    Rasterize(RasterizeArgs),
    /// Generate a synthetic height map (nm) from a binary raster.
    Synth(SynthArgs),
    /// Tile, split, normalize and augment a raster/height pair into a dataset directory.
    Dataset(DatasetArgs),
    /// Train a U-Net on a dataset; writes history.csv and best.cmpw.
    Train(TrainArgs),
    /// Predict a height map (nm) for a raster of any size.
    Predict(PredictArgs),
    /// Score predictions in nm; prints the summary line and writes metrics.csv.
    Eval(EvalArgs),
    /// Extract one grid row (optionally two grids) as a cross-section CSV.
    Xsec(XsecArgs),
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("{v} must be a positive number")),
        Err(e) => Err(e.to_string()),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("{v} must be non-negative")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args)]
struct RasterizeArgs {
    #[arg(long)]
    layout: PathBuf,
    /// Pixel pitch in nm.
    #[arg(long, value_parser = positive)]
    pitch: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Binary raster (CMPG).
    #[arg(long)]
    raster: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Planarization length: Gaussian sigma in pixels.
    #[arg(long, default_value_t = 8.0, value_parser = positive)]
    sigma: f64,
    #[arg(long, default_value_t = 40.0, value_parser = non_negative)]
    max_erosion: f64,
    #[arg(long, default_value_t = 3.0, value_parser = non_negative)]
    dishing: f64,
    /// Half-width of the uniform noise in nm.
    #[arg(long, default_value_t = 0.5, value_parser = non_negative)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    raster: PathBuf,
    /// Height map in nm (CMPG), same size as the raster.
    #[arg(long)]
    heights: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    frame: usize,
    #[arg(long, default_value_t = 128)]
    stride: usize,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Smoothing window rows (odd).
    #[arg(long, default_value_t = 5)]
    smooth_m: usize,
    /// Smoothing window columns (odd).
    #[arg(long, default_value_t = 5)]
    smooth_n: usize,
    /// Train/test split seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for history.csv and best.cmpw.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Shuffle seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Weight initialization seed.
    #[arg(long, default_value_t = 42)]
    init_seed: u64,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Tiled,
    Full,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    raster: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `tiled` stitches training-size frames; `full` runs one pass over the whole grid.
    #[arg(long, value_enum, default_value_t = ModeArg::Tiled)]
    mode: ModeArg,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Score the test split of --dataset with this checkpoint.
    #[arg(long, requires = "dataset", conflicts_with_all = ["pred", "truth"])]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    dataset: Option<PathBuf>,
    /// Score a predicted grid against --truth.
    #[arg(long, requires = "truth")]
    pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    truth: Option<PathBuf>,
    /// Where to write the per-sample table.
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct XsecArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Optional second grid, written as the `height2_nm` column.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    row: usize,
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(context: &Path, err: Error) -> Failure {
    let code = match err {
        Error::Parse { .. } | Error::Invalid { .. } => 2,
        Error::Format(_) | Error::Shape(_) | Error::Io(_) => 3,
        Error::NonFinite { .. } => 4,
    };
    let message = match &err {
        Error::Parse { line, message } => format!("{}:{line}: {message}", context.display()),
        other => format!("{}: {other}", context.display()),
    };
    Failure { code, message }
}

trait Context<T> {
    fn at(self, path: &Path) -> Result<T, Failure>;
}

impl<T> Context<T> for cmpfcn::Result<T> {
    fn at(self, path: &Path) -> Result<T, Failure> {
        self.map_err(|e| fail(path, e))
    }
}

impl<T> Context<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T, Failure> {
        self.map_err(|e| fail(path, Error::Io(e)))
    }
}

fn parallelism(sequential: bool) -> Parallelism {
    if sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Parallel
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn cmd_rasterize(a: RasterizeArgs) -> Result<(), Failure> {
    let mut run = RunManifest::start("rasterize");
    let text = fs::read_to_string(&a.layout).at(&a.layout)?;
    let layout = parse_layout(&text).at(&a.layout)?;
    let grid = rasterize(&layout, a.pitch).at(&a.layout)?;
    save_grid(&grid, GridDtype::U8, &a.out).at(&a.out)?;
    run.param("pitch_nm", a.pitch).param("height", grid.height()).param("width", grid.width());
    run.input(&a.layout).output(&a.out).commit(&manifest_path(&a.out)).at(&a.out)
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let mut run = RunManifest::start("synth");
    let cfg = OracleConfig {
        planarization_sigma: a.sigma,
        max_erosion_nm: a.max_erosion,
        dishing_amp_nm: a.dishing,
        noise_amp_nm: a.noise,
        seed: a.seed,
    };
    let raster = load_grid(&a.raster).at(&a.raster)?;
    let heights = generate(&raster, &cfg).at(&a.raster)?;
    save_grid(&heights, GridDtype::F32, &a.out).at(&a.out)?;
    let sidecar = a.out.parent().unwrap_or(Path::new("")).join("oracle.txt");
    fs::write(&sidecar, cfg.manifest()).at(&sidecar)?;
    run.param("sigma", a.sigma)
        .param("max_erosion_nm", a.max_erosion)
        .param("dishing_amp_nm", a.dishing)
        .param("noise_amp_nm", a.noise)
        .param("seed", a.seed);
    run.input(&a.raster).output(&a.out).output(&sidecar).commit(&manifest_path(&a.out)).at(&a.out)
}

fn cmd_dataset(a: DatasetArgs) -> Result<(), Failure> {
    let mut run = RunManifest::start("dataset");
    let smoothing = SmoothingConfig::new(a.smooth_m, a.smooth_n).at(Path::new("--smooth-m/--smooth-n"))?;
    let cfg = DatasetConfig {
        frame_size: a.frame,
        stride: a.stride,
        test_fraction: a.test_fraction,
        smoothing,
        seed: a.seed,
    };
    let raster = load_grid(&a.raster).at(&a.raster)?;
    let heights = load_grid(&a.heights).at(&a.heights)?;
    let ds = build_dataset(&raster, &heights, &cfg).at(&a.heights)?;
    save_dataset(&ds, &a.out).at(&a.out)?;
    run.param("frame", a.frame)
        .param("stride", a.stride)
        .param("test_fraction", a.test_fraction)
        .param("smooth_m", a.smooth_m)
        .param("smooth_n", a.smooth_n)
        .param("seed", a.seed)
        .param("samples", ds.samples.len());
    run.input(&a.raster).input(&a.heights).output(&a.out).commit(&manifest_path(&a.out)).at(&a.out)
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut run = RunManifest::start("train");
    let ds = load_dataset(&a.dataset).at(&a.dataset)?;
    let net = UNetConfig {
        depth: a.depth,
        base_channels: a.base_channels,
        kernel: a.kernel,
        frame_size: ds.config.frame_size,
    };
    let model = ModelState::init(net, a.init_seed).at(Path::new("--depth/--base-channels/--kernel"))?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        max_epochs: a.epochs,
        patience: a.patience,
        beta1: a.beta1,
        beta2: a.beta2,
        epsilon: a.epsilon,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
        seed: a.seed,
        parallelism: parallelism(a.sequential),
    };
    let (best, history) = train_with_observer(&ds, model, &cfg, |e| {
        eprintln!("epoch {:>4}  train {:.6}  test {:.6}", e.epoch, e.train_loss, e.test_loss)
    })
    .at(&a.dataset)?;
    fs::create_dir_all(&a.out).at(&a.out)?;
    let history_path = a.out.join("history.csv");
    let checkpoint_path = a.out.join("best.cmpw");
    fs::write(&history_path, history.to_csv()).at(&history_path)?;
    save_checkpoint(&best, &checkpoint_path).at(&checkpoint_path)?;
    eprintln!("best epoch {} (test loss {:.6})", history.best_epoch, history.best_test_loss().unwrap_or(f64::NAN));
    run.param("depth", a.depth)
        .param("base_channels", a.base_channels)
        .param("kernel", a.kernel)
        .param("frame", net.frame_size)
        .param("lr", a.lr)
        .param("batch", a.batch)
        .param("epochs", a.epochs)
        .param("patience", a.patience)
        .param("beta1", a.beta1)
        .param("beta2", a.beta2)
        .param("epsilon", a.epsilon)
        .param("optimizer", format!("{:?}", cfg.optimizer).to_lowercase())
        .param("seed", a.seed)
        .param("init_seed", a.init_seed)
        .param("best_epoch", history.best_epoch);
    run.input(&a.dataset).output(&history_path).output(&checkpoint_path);
    run.commit(&manifest_path(&a.out)).at(&a.out)
}

fn cmd_predict(a: PredictArgs) -> Result<(), Failure> {
    let mut run = RunManifest::start("predict");
    let model = load_checkpoint(&a.checkpoint).at(&a.checkpoint)?;
    let raster = load_grid(&a.raster).at(&a.raster)?;
    let mode = match a.mode {
        ModeArg::Tiled => PredictMode::Tiled,
        ModeArg::Full => PredictMode::Full,
    };
    let pred = timed_predict(&model, &raster, mode, parallelism(a.sequential)).at(&a.raster)?;
    warn_all(&pred.warnings);
    save_grid(&pred.grid, GridDtype::F32, &a.out).at(&a.out)?;
    eprintln!("predicted {}x{} in {:.3}s", pred.grid.height(), pred.grid.width(), pred.seconds);
    run.param("mode", format!("{mode:?}").to_lowercase());
    run.input(&a.checkpoint).input(&a.raster).output(&a.out).commit(&manifest_path(&a.out)).at(&a.out)
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let mut run = RunManifest::start("eval");
    let metrics = match (&a.checkpoint, &a.dataset, &a.pred, &a.truth) {
        (Some(ckpt), Some(dir), None, None) => {
            let model = load_checkpoint(ckpt).at(ckpt)?;
            let ds = load_dataset(dir).at(dir)?;
            run.input(ckpt).input(dir);
            evaluate_dataset(&model, &ds, parallelism(a.sequential)).at(dir)?
        }
        (None, None, Some(pred), Some(truth)) => {
            let p = load_grid(pred).at(pred)?;
            let t = load_grid(truth).at(truth)?;
            run.input(pred).input(truth);
            evaluate(&[p], &[t]).at(pred)?
        }
        _ => {
            return Err(Failure {
                code: 2,
                message: "eval needs either --checkpoint with --dataset, or --pred with --truth".into(),
            })
        }
    };
    fs::write(&a.out, metrics.to_csv()).at(&a.out)?;
    println!("{}", metrics.summary());
    run.param("l1_nm", metrics.l1_nm).param("rmse_nm", metrics.rmse_nm).param("samples", metrics.sample_count);
    run.output(&a.out).commit(&manifest_path(&a.out)).at(&a.out)
}

fn cmd_xsec(a: XsecArgs) -> Result<(), Failure> {
    let mut run = RunManifest::start("xsec");
    let first = load_grid(&a.pred).at(&a.pred)?;
    run.input(&a.pred);
    let second = match &a.truth {
        Some(p) => {
            run.input(p);
            Some(load_grid(p).at(p)?)
        }
        None => None,
    };
    let csv = cross_section_csv(&first, second.as_ref(), a.row).at(&a.pred)?;
    fs::write(&a.out, csv).at(&a.out)?;
    run.param("row", a.row).output(&a.out).commit(&manifest_path(&a.out)).at(&a.out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Rasterize(a) => cmd_rasterize(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Dataset(a) => cmd_dataset(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Xsec(a) => cmd_xsec(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
