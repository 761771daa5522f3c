use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use evrwkv::bench::{bench_wkv, BenchOptions};
use evrwkv::events::{normalize_voxel, parse_events, voxelize, EventFormat, NormalizeMode};
use evrwkv::gradcheck::{model_gradcheck, GradcheckOptions};
use evrwkv::image_io::{read_pnm, write_atomic, write_pnm};
use evrwkv::model::event_voxels;
use evrwkv::pipeline::{as_rgb, enhance_files, load_checkpoint, save_checkpoint, write_json, EnhanceRequest, Metrics};
use evrwkv::train::{train_toy, ToyPair};
use evrwkv::wkv::WkvExponent;
use evrwkv::{Error, EvRwkv, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "evrwkv", version, about = "Event-guided low-light image enhancement")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[arg(long, global = true)]
    no_eisfe: bool,
    #[arg(long, global = true)]
    no_spatial_mix: bool,
    #[arg(long, global = true)]
    no_channel_mix: bool,
    #[arg(long, global = true)]
    no_ms_ssim: bool,
    #[arg(long, global = true, value_parser = parse_exponent)]
    wkv_exponent: Option<WkvExponent>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn parse_exponent(s: &str) -> Result<WkvExponent, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_normalize(s: &str) -> Result<NormalizeMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> Result<EventFormat, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug, Clone, Copy)]
struct Window {
    /// Start of the event window in microseconds.
    #[arg(long, requires = "t_end")]
    t_start: Option<u64>,
    /// End of the event window in microseconds.
    #[arg(long, requires = "t_start")]
    t_end: Option<u64>,
    /// Event file format; inferred from the extension (.csv) otherwise.
    #[arg(long, value_parser = parse_format)]
    event_format: Option<EventFormat>,
}

impl Window {
    fn range(&self) -> Option<(u64, u64)> {
        self.t_start.zip(self.t_end)
    }

    fn format(&self, path: &Path) -> EventFormat {
        self.event_format.unwrap_or_else(|| EventFormat::from_path(path))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bin an event stream into a voxel grid (written as JSON).
    Voxelize {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long, value_parser = parse_normalize)]
        normalize: Option<NormalizeMode>,
        #[command(flatten)]
        window: Window,
    },
    /// Enhance one low-light image with its events.
    Enhance {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        events: PathBuf,
        /// Trained weights; a fresh seeded initialization otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reference image; adds a metrics.json next to the output.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[command(flatten)]
        window: Window,
    },
    /// Overfit the model to a single image pair.
    TrainToy {
        #[arg(long)]
        low: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Describe every loss term and how it is computed.
        #[arg(long)]
        loss_report: bool,
        #[command(flatten)]
        window: Window,
    },
    /// Time the quadratic and linear Bi-WKV evaluations.
    BenchWkv {
        #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048, 4096])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Finite-difference check of every parameter group on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        samples: usize,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// PSNR, SSIM and MS-SSIM of enhanced images against references.
    Metrics {
        /// Alternating enhanced and reference images.
        #[arg(required = true, num_args = 2.., value_names = ["PRED", "GT"])]
        images: Vec<PathBuf>,
    },
    /// Print the parameter ledger and the effective configuration.
    Describe {
        /// Print only the parameter total.
        #[arg(long)]
        total: bool,
    },
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numerical() { 2 } else { 1 },
            msg: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

type Outcome = Result<(), Failure>;

fn run_config(g: &Global) -> Result<RunConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(m) = g.wkv_exponent {
        cfg.wkv_exponent = m;
    }
    cfg.eisfe &= !g.no_eisfe;
    cfg.spatial_mix &= !g.no_spatial_mix;
    cfg.channel_mix &= !g.no_channel_mix;
    cfg.ms_ssim &= !g.no_ms_ssim;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct VoxelFile<'a> {
    bins: usize,
    height: usize,
    width: usize,
    t_start: u64,
    t_end: u64,
    dropped: usize,
    normalize: NormalizeMode,
    /// Row-major `bins × height × width`.
    data: &'a [f64],
}

fn voxelize_cmd(
    cfg: &RunConfig,
    out: &Path,
    events: &Path,
    (h, w): (usize, usize),
    bins: Option<usize>,
    normalize: Option<NormalizeMode>,
    window: Window,
) -> Outcome {
    let stream = parse_events(events, window.format(events), Some((h, w)))?;
    let (t0, t1) = window
        .range()
        .or_else(|| stream.default_window())
        .ok_or_else(|| usage("event stream is empty; pass --t-start and --t-end"))?;
    let bins = bins.unwrap_or(cfg.bins);
    let mode = normalize.unwrap_or(cfg.voxel_normalize);
    let grid = normalize_voxel(voxelize(&stream.events, bins, h, w, t0, t1)?, mode);
    let path = out.join("voxels.json");
    write_json(
        &path,
        &VoxelFile {
            bins,
            height: h,
            width: w,
            t_start: grid.t_start,
            t_end: grid.t_end,
            dropped: grid.dropped,
            normalize: mode,
            data: grid.data.data(),
        },
    )?;
    println!("{} events → {bins}×{h}×{w} grid ({} dropped), wrote {}", stream.len(), grid.dropped, path.display());
    Ok(())
}

fn enhance_cmd(cfg: &RunConfig, out: &Path, image: &Path, events: &Path, ckpt: Option<&Path>, gt: Option<&Path>, window: Window) -> Outcome {
    let req = EnhanceRequest {
        checkpoint: ckpt,
        window: window.range(),
        event_format: Some(window.format(events)),
        ground_truth: gt,
    };
    let res = enhance_files(image, events, cfg, &req)?;
    let path = out.join("enhanced.ppm");
    write_pnm(&path, &res.image)?;
    println!("wrote {}", path.display());
    if let Some(m) = res.metrics {
        write_json(&out.join("metrics.json"), &m)?;
        println!("{}", serde_json::to_string(&m).map_err(Error::from)?);
    }
    Ok(())
}

const LOSS_REPORT: &str = "\
loss terms (weights from `lambda`):
  charbonnier  mean over pixels of sqrt(d^2 + eps^2); `charbonnier_global` uses sqrt(||d||_2^2 + eps^2) over the image
  perceptual   sum over stages of the mean absolute feature difference through a frozen, randomly
               initialized 3-stage conv stack (8, 16, 32 channels, 3x3 stride 2, leaky ReLU, seed 0).
               This is a stand-in: no pretrained network is bundled, so the term is not comparable
               with published perceptual losses.
  ssim         1 - SSIM, 11x11 Gaussian window (sigma 1.5)
  ms_ssim      1 - MS-SSIM over as many scales as the image supports (at most 5), weights renormalized";

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    learning_rate: f64,
    initial_psnr: f64,
    final_psnr: f64,
    psnr_gain: f64,
    initial_ssim: f64,
    final_ssim: f64,
    final_loss: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    mut cfg: RunConfig,
    out: &Path,
    low: &Path,
    gt: &Path,
    events: &Path,
    steps: Option<usize>,
    lr: Option<f64>,
    loss_report: bool,
    window: Window,
) -> Outcome {
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(l) = lr {
        cfg.learning_rate = l;
    }
    cfg.validate()?;
    let low = as_rgb(read_pnm(low)?)?;
    let gt = as_rgb(read_pnm(gt)?)?;
    let (_, h, w) = low.dims3()?;
    let stream = parse_events(events, window.format(events), Some((h, w)))?;
    let voxels = event_voxels(&stream, &cfg, window.range(), h, w)?;
    let (model, params) = EvRwkv::new(&cfg)?;
    let report = train_toy(&model, params, &ToyPair { low, gt, voxels }, &cfg)?;
    report.write_loss_csv(&out.join("loss.csv"))?;
    save_checkpoint(&out.join("checkpoint.ckpt"), &report.params)?;
    let summary = TrainSummary {
        steps: cfg.steps,
        learning_rate: cfg.learning_rate,
        initial_psnr: report.initial_psnr,
        final_psnr: report.final_psnr,
        psnr_gain: report.psnr_gain(),
        initial_ssim: report.initial_ssim,
        final_ssim: report.final_ssim,
        final_loss: report.history.last().map_or(f64::NAN, |r| r.total()),
    };
    write_json(&out.join("train.json"), &summary)?;
    println!(
        "PSNR {:.2} → {:.2} dB ({:+.2}), SSIM {:.4} → {:.4}",
        summary.initial_psnr, summary.final_psnr, summary.psnr_gain, summary.initial_ssim, summary.final_ssim
    );
    if loss_report {
        println!("{LOSS_REPORT}");
    }
    Ok(())
}

fn bench_cmd(out: &Path, lengths: Vec<usize>, channels: usize, repeats: usize, seed: u64) -> Outcome {
    let opts = BenchOptions {
        lengths,
        channels,
        repeats,
        seed,
        ..Default::default()
    };
    let r = bench_wkv(&opts)?;
    let path = out.join("bench_wkv.csv");
    write_atomic(&path, r.csv().as_bytes())?;
    print!("{}", r.csv());
    println!(
        "log-log slope: naive {:.3}, scan {:.3}; max relative disagreement {:.1e}",
        r.naive_slope, r.scan_slope, r.max_rel_diff
    );
    if r.max_rel_diff >= 1e-8 {
        return Err(Error::NonFinite(format!("implementations disagree by {:.1e}", r.max_rel_diff)).into());
    }
    Ok(())
}

fn gradcheck_cmd(cfg: &RunConfig, out: &Path, samples: usize, tolerance: f64) -> Outcome {
    let opts = GradcheckOptions {
        samples_per_param: samples,
        tolerance,
        seed: cfg.seed,
        ..Default::default()
    };
    let report = model_gradcheck(cfg, &opts)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            msg: format!("gradient check failed (max {:.2e})", report.max_rel_error()),
        })
    }
}

#[derive(Serialize)]
struct PairMetrics {
    pred: PathBuf,
    gt: PathBuf,
    #[serde(flatten)]
    metrics: Metrics,
}

fn metrics_cmd(out: &Path, images: &[PathBuf]) -> Outcome {
    if !images.len().is_multiple_of(2) {
        return Err(usage("metrics expects PRED GT pairs"));
    }
    let mut rows = Vec::new();
    for pair in images.chunks(2) {
        let pred = as_rgb(read_pnm(&pair[0])?)?;
        let gt = as_rgb(read_pnm(&pair[1])?)?;
        rows.push(PairMetrics {
            pred: pair[0].clone(),
            gt: pair[1].clone(),
            metrics: Metrics::compute(&pred, &gt)?,
        });
    }
    write_json(&out.join("metrics.json"), &rows)?;
    println!("{}", serde_json::to_string_pretty(&rows).map_err(Error::from)?);
    Ok(())
}

fn describe_cmd(cfg: &RunConfig, total: bool) -> Outcome {
    let (_, params) = EvRwkv::new(cfg)?;
    if total {
        println!("{}", params.count());
    } else {
        print!("{}", params.ledger());
        println!("\nconfig:\n{}", cfg.to_json());
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let cfg = run_config(&cli.global)?;
    let out = cli.global.out.as_path();
    let needs_out = !matches!(cli.command, Command::Describe { .. });
    if needs_out {
        std::fs::create_dir_all(out)?;
    }
    match cli.command {
        Command::Voxelize {
            events,
            height,
            width,
            bins,
            normalize,
            window,
        } => voxelize_cmd(&cfg, out, &events, (height, width), bins, normalize, window),
        Command::Enhance {
            image,
            events,
            checkpoint,
            gt,
            window,
        } => {
            if let Some(c) = &checkpoint {
                // fail early on an incompatible checkpoint
                load_checkpoint(c, &EvRwkv::new(&cfg)?.1)?;
            }
            enhance_cmd(&cfg, out, &image, &events, checkpoint.as_deref(), gt.as_deref(), window)
        }
        Command::TrainToy {
            low,
            gt,
            events,
            steps,
            lr,
            loss_report,
            window,
        } => train_cmd(cfg, out, &low, &gt, &events, steps, lr, loss_report, window),
        Command::BenchWkv {
            lengths,
            channels,
            repeats,
        } => bench_cmd(out, lengths, channels, repeats, cfg.seed),
        Command::Gradcheck { samples, tolerance } => gradcheck_cmd(&cfg, out, samples, tolerance),
        Command::Metrics { images } => metrics_cmd(out, &images),
        Command::Describe { total } => describe_cmd(&cfg, total),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
