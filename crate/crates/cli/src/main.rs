use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use stereodiff::attention::{AttentionMode, AttentionPlan};
use stereodiff::codec::CodecConfig;
use stereodiff::denoiser::{
    load_checkpoint, save_checkpoint, train_toy, Condition, ToyUNet, ToyUNetConfig, TrainConfig,
};
use stereodiff::diffusion::{sampling_schedule, ScheduleKind};
use stereodiff::disparity::{normalize, DisparityField};
use stereodiff::eval::{baseline_warp, run_benchmark, BenchmarkConfig, Fill, Method, Metric};
use stereodiff::inversion::{
    ddim_invert, ddim_sample, null_text_optimize, Guidance, NullTextConfig,
};
use stereodiff::io::{
    compose_output, fit_disparity, fit_to_working, generate_corpus, load_corpus, read_disparity,
    read_image, training_pairs, write_corpus, write_image, Layout, SyntheticWorldSpec,
};
use stereodiff::pipeline::{
    generate_stereo, DisparitySource, Provenance, StereoInputs, StereoMode, StereoRunConfig,
};
use stereodiff::stereo::{ShiftConfig, ShiftDirection};

/// Default checkpoint path when `--checkpoint` is absent.
const CHECKPOINT_ENV: &str = "STEREODIFF_CHECKPOINT";

#[derive(Parser)]
#[command(
    name = "stereodiff",
    version,
    about = "Training-free stereo image generation with a toy latent diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stereo pair (text-, depth- or image-conditioned).
    Generate(GenerateArgs),
    /// DDIM-invert an image, optionally with null-text optimization.
    Invert(InvertArgs),
    /// Forward-warp an image by a disparity map (classical baselines).
    Warp(WarpArgs),
    /// Benchmark right-view methods on a scene corpus.
    Eval(EvalArgs),
    /// Train the toy denoiser on the synthetic stereo world.
    TrainToy(TrainArgs),
    /// Write a synthetic scene corpus with manifest.
    MakeCorpus(CorpusArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Toy denoiser checkpoint; falls back to $STEREODIFF_CHECKPOINT.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "t2si")]
    mode: StereoMode,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Fraction of the steps taken before the shift.
    #[arg(long, default_value_t = 0.2)]
    shift_frac: f64,
    /// Latent-site shift of the nearest surface.
    #[arg(long, default_value_t = 3.0)]
    scale_s: f64,
    /// Shift direction, +1 or -1.
    #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
    sign: i64,
    #[arg(long, default_value = "uni")]
    attention: AttentionMode,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    spsmd: bool,
    #[arg(long, default_value_t = 1)]
    spsmd_interval: usize,
    #[arg(long)]
    deblur: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Condition token.
    #[arg(long, default_value_t = 0)]
    condition: usize,
    /// Classifier-free guidance scale; above 1 enables null-text optimization in i2si.
    #[arg(long, default_value_t = 1.0)]
    guidance: f64,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value = "side_by_side")]
    layout: Layout,
    /// Composed output image; left and right views are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Disparity map (.pfm or KITTI .png), min-max normalized after fitting.
    #[arg(long)]
    disparity: Option<PathBuf>,
    /// Input image for i2si.
    #[arg(long)]
    image: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    image: PathBuf,
    /// Guidance scale of the reconstruction; null-text runs when it is not 1.
    #[arg(long, default_value_t = 3.0)]
    w: f64,
    /// Null-text iterations per step.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    condition: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Reconstructed image.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    image: PathBuf,
    /// Pixel disparity map (.pfm or KITTI .png).
    #[arg(long)]
    disparity: PathBuf,
    #[arg(long, default_value = "stretch")]
    fill: Fill,
    /// Multiplier on the pixel disparity.
    #[arg(long, default_value_t = 1.0)]
    scale_s: f64,
    #[arg(long, default_value_t = 1, allow_negative_numbers = true)]
    sign: i64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest file, or a directory containing manifest.csv.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "ours,ours_no_spsmd,leave_blank,stretch")]
    methods: String,
    #[arg(long, default_value = "psnr,ssim,pd")]
    metrics: String,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.2)]
    shift_frac: f64,
    #[arg(long, default_value_t = 1.0)]
    guidance: f64,
    /// Working size scenes are fitted to; defaults to their stored size.
    #[arg(long, requires = "width")]
    height: Option<usize>,
    #[arg(long, requires = "height")]
    width: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Synthetic scenes used for training (both views of each); their seeds
    /// start 10000 above --seed, clear of make-corpus seeds.
    #[arg(long, default_value_t = 200)]
    scenes: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    factor: usize,
    /// Depth levels of the synthetic world; the nearest shifts factor·levels pixels.
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 32)]
    base_width: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    factor: usize,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
}

enum Failure {
    Usage(String),
    Runtime(stereodiff::Error),
}

impl From<stereodiff::Error> for Failure {
    fn from(e: stereodiff::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let res = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Invert(a) => invert(a),
        Command::Warp(a) => warp(a),
        Command::Eval(a) => eval(a),
        Command::TrainToy(a) => train(a),
        Command::MakeCorpus(a) => make_corpus(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `stereodiff --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn direction(sign: i64) -> CliResult<ShiftDirection> {
    match sign {
        1 => Ok(ShiftDirection::Positive),
        -1 => Ok(ShiftDirection::Negative),
        s => Err(usage(format!("--sign must be 1 or -1, got {s}"))),
    }
}

fn load_model(args: &ModelArgs) -> CliResult<ToyUNet> {
    let path = args
        .checkpoint
        .clone()
        .or_else(|| std::env::var_os(CHECKPOINT_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            usage(format!(
                "no checkpoint: pass --checkpoint or set {CHECKPOINT_ENV}"
            ))
        })?;
    Ok(load_checkpoint(path)?)
}

/// Codec matching a network's latent channel count.
fn codec_for(net: &ToyUNet) -> CliResult<CodecConfig> {
    let per_site = net.config().latent_channels / 3;
    let factor = (per_site as f64).sqrt().round() as usize;
    if factor * factor * 3 != net.config().latent_channels {
        return Err(Failure::Runtime(stereodiff::Error::InvalidArgument(
            format!(
                "checkpoint has {} latent channels, not an RGB codec",
                net.config().latent_channels
            ),
        )));
    }
    Ok(CodecConfig::new(factor, 3)?)
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".provenance.txt");
    PathBuf::from(s)
}

fn write_sidecar(out: &Path, mut prov: Provenance) -> CliResult {
    prov.entries.insert(
        0,
        (
            "command".into(),
            std::env::args().collect::<Vec<_>>().join(" "),
        ),
    );
    prov.entries
        .insert(1, ("version".into(), env!("CARGO_PKG_VERSION").into()));
    std::fs::write(sidecar_path(out), prov.to_text())?;
    Ok(())
}

fn with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("png");
    out.with_file_name(format!("{stem}_{suffix}.{ext}"))
}

fn load_disparity(path: &Path, height: usize, width: usize) -> CliResult<DisparityField> {
    let d = read_disparity(path)?;
    Ok(normalize(&fit_disparity(&d, height, width)?)?)
}

fn generate(a: GenerateArgs) -> CliResult {
    let net = load_model(&a.model)?;
    let codec = codec_for(&net)?;
    let cfg = StereoRunConfig {
        mode: a.mode,
        steps: a.steps,
        shift_fraction: a.shift_frac,
        shift: ShiftConfig::new(a.scale_s, direction(a.sign)?),
        spsmd: a.spsmd,
        spsmd_interval: a.spsmd_interval,
        deblur: a.deblur,
        attention: AttentionPlan::new(a.attention),
        seed: a.seed,
        condition: a.condition,
        guidance: a.guidance,
        codec,
        height: a.height,
        width: a.width,
        ..StereoRunConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let image = match (&a.image, a.mode) {
        (Some(p), StereoMode::I2si) => {
            Some(fit_to_working(&read_image(p)?, None, a.height, a.width)?.0)
        }
        (None, StereoMode::I2si) => return Err(usage("--mode i2si needs --image")),
        (Some(_), _) => return Err(usage("--image is only used with --mode i2si")),
        (None, _) => None,
    };
    let disparity = match &a.disparity {
        Some(p) => load_disparity(p, a.height, a.width)?,
        None => {
            return Err(usage(format!(
                "--mode {} needs --disparity (no depth estimator is bundled)",
                a.mode
            )))
        }
    };
    let inputs = StereoInputs {
        disparity: Some(DisparitySource::Field(disparity)),
        image,
    };
    let pair = generate_stereo(&cfg, &inputs, &net)?;
    write_image(&compose_output(&pair.left, &pair.right, a.layout)?, &a.out)?;
    write_image(&pair.left, with_suffix(&a.out, "left"))?;
    write_image(&pair.right, with_suffix(&a.out, "right"))?;
    write_sidecar(&a.out, pair.provenance)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn invert(a: InvertArgs) -> CliResult {
    let net = load_model(&a.model)?;
    let codec = codec_for(&net)?;
    let (image, _) = fit_to_working(&read_image(&a.image)?, None, a.height, a.width)?;
    let image = stereodiff::io::to_rgb(&image);
    let schedule = sampling_schedule(ScheduleKind::LinearBeta, a.steps)?;
    let cond = Condition::token(a.condition);
    let norm = net.latent_normalizer();
    let x0 = norm.standardize(&codec.encode(&image)?)?;
    let started = Instant::now();
    let pivot = ddim_invert(&x0, &cond, &net, &schedule, 1.0)?;
    let mut prov = Provenance::default();
    for (k, v) in [
        ("steps", a.steps.to_string()),
        ("w", a.w.to_string()),
        ("iters", a.iters.to_string()),
        ("lr", a.lr.to_string()),
        ("condition", a.condition.to_string()),
        ("height", a.height.to_string()),
        ("width", a.width.to_string()),
    ] {
        prov.push(k, v);
    }
    let plain = ddim_sample(
        pivot.end(),
        a.steps,
        &schedule,
        &Guidance::new(cond.clone(), a.w),
        &net,
        None,
    )?;
    let latent = if a.w != 1.0 {
        let nt = NullTextConfig {
            guidance: a.w,
            iters: a.iters,
            learning_rate: a.lr,
            ..NullTextConfig::default()
        };
        let state = null_text_optimize(&pivot, &net, &schedule, &nt)?;
        prov.push(
            "null_text_initial_loss",
            format!("{:.6e}", state.mean_initial_loss()),
        );
        prov.push(
            "null_text_final_loss",
            format!("{:.6e}", state.mean_final_loss()),
        );
        println!(
            "null-text mean per-step loss {:.4e} -> {:.4e}",
            state.mean_initial_loss(),
            state.mean_final_loss()
        );
        state.reconstruction
    } else {
        plain.clone()
    };
    prov.push("latent_mse_default_null", format!("{:.6e}", plain.mse(&x0)));
    prov.push("latent_mse", format!("{:.6e}", latent.mse(&x0)));
    prov.push("time_total_ms", started.elapsed().as_millis());
    let out = codec.decode(&norm.destandardize(&latent)?)?.clamped();
    let psnr = stereodiff::eval::psnr(&out, &image, 1.0)?;
    prov.push("psnr", format!("{psnr:.4}"));
    println!("reconstruction PSNR {psnr:.2} dB");
    write_image(&out, &a.out)?;
    write_sidecar(&a.out, prov)?;
    Ok(())
}

fn warp(a: WarpArgs) -> CliResult {
    let image = read_image(&a.image)?;
    let disparity = read_disparity(&a.disparity)?;
    if (disparity.height(), disparity.width()) != (image.height(), image.width()) {
        return Err(usage(format!(
            "disparity is {}x{} but the image is {}x{}",
            disparity.width(),
            disparity.height(),
            image.width(),
            image.height()
        )));
    }
    // the warp takes a normalized field and the pixel shift of value 1
    let peak = disparity.valid_range().map_or(0.0, |(_, hi)| hi.max(0.0));
    if disparity
        .values()
        .iter()
        .zip(disparity.validity())
        .any(|(&v, &ok)| ok && v < 0.0)
    {
        return Err(usage("warp expects non-negative pixel disparity"));
    }
    let unit = if peak > 0.0 {
        disparity.scaled(1.0 / peak)
    } else {
        disparity
    };
    let shift = ShiftConfig::new(a.scale_s * peak, direction(a.sign)?);
    let out = baseline_warp(&image, &unit, &shift, a.fill)?;
    write_image(&out, &a.out)?;
    let mut prov = Provenance::default();
    prov.push("fill", format!("{:?}", a.fill));
    prov.push("scale_s", a.scale_s);
    prov.push("sign", a.sign);
    write_sidecar(&a.out, prov)?;
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let manifest = if a.corpus.is_dir() {
        a.corpus.join("manifest.csv")
    } else {
        a.corpus.clone()
    };
    let base = StereoRunConfig {
        steps: a.steps,
        shift_fraction: a.shift_frac,
        guidance: a.guidance,
        ..StereoRunConfig::default()
    };
    base.validate().map_err(|e| usage(e.to_string()))?;
    let methods = a
        .methods
        .split(',')
        .map(|m| Method::from_name(m.trim(), &base))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(e.to_string()))?;
    let metrics = a
        .metrics
        .split(',')
        .map(|m| m.trim().parse::<Metric>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(e.to_string()))?;
    let needs_model = metrics.contains(&Metric::Pd)
        || methods
            .iter()
            .any(|m| matches!(m, Method::Diffusion { .. }));
    let net = if needs_model {
        Some(load_model(&a.model)?)
    } else {
        None
    };
    let codec = match &net {
        Some(n) => codec_for(n)?,
        None => CodecConfig::default(),
    };
    let working = a.height.zip(a.width);
    let (corpus, skipped) = load_corpus(&manifest, working)?;
    if skipped > 0 {
        eprintln!("warning: {skipped} scene(s) could not be loaded");
    }
    let started = Instant::now();
    let result = run_benchmark(
        &corpus,
        &methods,
        &metrics,
        &BenchmarkConfig {
            codec,
            jobs: a.jobs,
        },
        net.as_ref(),
    )?;
    println!("{}", result.table());
    if let Some(csv) = &a.csv {
        std::fs::write(csv, result.to_csv())?;
        let mut prov = Provenance::default();
        prov.push("corpus", manifest.display());
        prov.push("methods", &a.methods);
        prov.push("metrics", &a.metrics);
        prov.push("steps", a.steps);
        prov.push("shift_fraction", a.shift_frac);
        prov.push("guidance", a.guidance);
        prov.push("scenes", corpus.len());
        prov.push("skipped", result.skipped + skipped);
        prov.push("time_total_ms", started.elapsed().as_millis());
        write_sidecar(csv, prov)?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let codec = CodecConfig::new(a.factor, 3).map_err(|e| usage(e.to_string()))?;
    let spec = SyntheticWorldSpec {
        codec_factor: a.factor,
        depth_levels: a.levels,
        ..SyntheticWorldSpec::default()
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let data = training_pairs(&spec, a.scenes, a.seed)?;
    let net_cfg = ToyUNetConfig {
        latent_channels: codec.latent_channels(),
        base_width: a.base_width,
        seed: a.seed,
        ..ToyUNetConfig::default()
    };
    let train_cfg = TrainConfig {
        steps: a.steps,
        learning_rate: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let (net, report) = train_toy(&data, net_cfg, &train_cfg)?;
    save_checkpoint(&net, &a.out)?;
    let n = report.losses.len();
    let head = report.mean_loss(0..n.min(50));
    let tail = report.mean_loss(n.saturating_sub(50)..n);
    println!(
        "trained {} steps in {:.1}s, loss {head:.4} -> {tail:.4}",
        a.steps,
        started.elapsed().as_secs_f64()
    );
    let mut prov = Provenance::default();
    prov.push("scenes", a.scenes);
    prov.push("steps", a.steps);
    prov.push("seed", a.seed);
    prov.push("lr", a.lr);
    prov.push("factor", a.factor);
    prov.push("levels", a.levels);
    prov.push("base_width", a.base_width);
    prov.push("loss_head", format!("{head:.6}"));
    prov.push("loss_tail", format!("{tail:.6}"));
    write_sidecar(&a.out, prov)?;
    Ok(())
}

fn make_corpus(a: CorpusArgs) -> CliResult {
    let spec = SyntheticWorldSpec {
        codec_factor: a.factor,
        depth_levels: a.levels,
        height: a.height,
        width: a.width,
        seed: a.seed,
        ..SyntheticWorldSpec::default()
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let scenes = generate_corpus(&spec, a.n)?;
    let manifest = write_corpus(&a.dir, &scenes)?;
    let mut prov = Provenance::default();
    prov.push("n", a.n);
    prov.push("seed", a.seed);
    prov.push("factor", a.factor);
    prov.push("levels", a.levels);
    prov.push("height", a.height);
    prov.push("width", a.width);
    write_sidecar(&manifest, prov)?;
    println!("wrote {} scenes to {}", scenes.len(), a.dir.display());
    Ok(())
}
