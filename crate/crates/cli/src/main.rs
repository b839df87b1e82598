use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use uhdres_core::bench::{bench_csv, bench_forward, thread_count, with_threads, DEFAULT_REPEATS, DEFAULT_WARMUP};
use uhdres_core::data::{read_image, read_image_dir, synthetic_dataset, write_image, Dataset, Degradation, ImageBuffer};
use uhdres_core::selftest::run_selftest;
use uhdres_core::spectral::{perturb_csv, perturbation_experiment};
use uhdres_core::trainer::Trainer;
use uhdres_core::{BnInference, Real, RunConfig, SeededRng, UHDResModel};

#[derive(Parser)]
#[command(name = "uhdres", version, about = "UHDRes image restorer: training, inference and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on `<data>/lq/*.ppm` paired with `<data>/gt/*.ppm`.
    Train(TrainArgs),
    /// Restore one PPM image.
    Infer(InferArgs),
    /// Amplitude-vs-phase perturbation experiment over a folder of PPM images.
    Perturb(PerturbArgs),
    /// Latency and estimated peak memory across square resolutions.
    Bench(BenchArgs),
    /// Parameter count, total and per block.
    Params(ParamsArgs),
    /// Gradient checks, spectral identities and persistence checks.
    Selftest,
    /// Write a synthetic paired dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint stem (`.../step_000500`) to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Network config the checkpoint was trained with; defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3")]
    eps: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, conflicts_with = "random_init", required_unless_present = "random_init")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    random_init: bool,
    #[arg(long, value_delimiter = ',', default_value = "128,256,512")]
    sizes: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = DEFAULT_REPEATS)]
    repeats: usize,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Lowlight,
    Blur,
    Noise,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, value_enum, default_value = "lowlight")]
    kind: Kind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Bad input supplied by the caller; exits with status 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(Usage(msg.into()).into())
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("--config: reading {}", path.display()))?;
    match RunConfig::parse(&text) {
        Ok(cfg) => Ok(cfg),
        Err(e) => usage(format!("--config {}: {e}", path.display())),
    }
}

fn build_model(cfg: &RunConfig) -> anyhow::Result<UHDResModel<Real>> {
    match UHDResModel::<Real>::build(&cfg.model, cfg.train.seed) {
        Ok(m) => Ok(m),
        Err(e @ uhdres_core::Error::Config(_)) => usage(format!("--config: {e} (key `dtype`)")),
        Err(e) => Err(e.into()),
    }
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let dataset = Dataset::open(&a.data).with_context(|| format!("--data {}", a.data.display()))?;
    if dataset.is_empty() {
        return usage(format!("--data {}: no image pairs found", a.data.display()));
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("--out: creating {}", a.out.display()))?;
    std::fs::write(a.out.join("config.txt"), cfg.to_text()).with_context(|| format!("--out: writing {}", a.out.display()))?;
    let model = build_model(&cfg)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    if let Some(stem) = &a.resume {
        trainer.resume(stem).with_context(|| format!("--resume {}", stem.display()))?;
    }
    let logs = trainer.run(&dataset, Some(&a.out))?;
    if let Some(last) = logs.last() {
        println!("step {} l_total {:.6} (pixel {:.6}, freq {:.6})", last.step, last.total, last.pixel, last.freq);
    }
    println!("wrote {}", a.out.join("final.ckpt").display());
    Ok(())
}

fn infer(a: InferArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let mut model = build_model(&cfg)?;
    model.load_weights(&a.ckpt).with_context(|| format!("--ckpt {}", a.ckpt.display()))?;
    let img = read_image(&a.input).with_context(|| format!("--in {}", a.input.display()))?;
    if img.height < 8 || img.width < 8 {
        return usage(format!("--in {}: image is {}x{}, need at least 8x8", a.input.display(), img.height, img.width));
    }
    let y = match model.infer(&img.to_tensor::<Real>()) {
        Err(e @ uhdres_core::Error::NonFinite { .. }) if cfg.model.bn_inference == BnInference::Running => {
            return Err(anyhow::Error::new(e).context("output overflowed with running BN statistics; try `bn_inference = batch` in --config"));
        }
        r => r?,
    };
    write_image(&ImageBuffer::from_tensor(&y)?, &a.out).with_context(|| format!("--out {}", a.out.display()))?;
    Ok(())
}

fn perturb(a: PerturbArgs) -> anyhow::Result<()> {
    if let Some(e) = a.eps.iter().find(|e| !(**e >= 0.0)) {
        return usage(format!("--eps: {e} is negative"));
    }
    let images = read_image_dir::<f64>(&a.images).with_context(|| format!("--images {}", a.images.display()))?;
    if images.is_empty() {
        return usage(format!("--images {}: no .ppm files", a.images.display()));
    }
    let rows = perturbation_experiment(&images, &a.eps, &a.seeds)?;
    std::fs::write(&a.out, perturb_csv(&rows)).with_context(|| format!("--out {}", a.out.display()))?;
    println!("{} rows over {} images -> {}", rows.len(), images.len(), a.out.display());
    Ok(())
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    if let Some(s) = a.sizes.iter().find(|&&s| s < 8) {
        return usage(format!("--sizes: {s} is below the minimum of 8"));
    }
    if a.repeats == 0 {
        return usage("--repeats: must be at least 1");
    }
    let cfg = load_config(a.config.as_deref())?;
    let mut model = build_model(&cfg)?;
    if let Some(ckpt) = &a.ckpt {
        model.load_weights(ckpt).with_context(|| format!("--ckpt {}", ckpt.display()))?;
    }
    let res: Vec<(usize, usize)> = a.sizes.iter().map(|&s| (s, s)).collect();
    let records = bench_forward(&model, &res, a.warmup, a.repeats)?;
    let csv = bench_csv(&records);
    std::fs::write(&a.out, &csv).with_context(|| format!("--out {}", a.out.display()))?;
    print!("{csv}");
    Ok(())
}

fn params(a: ParamsArgs) -> anyhow::Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let model = build_model(&cfg)?;
    println!("{}", model.param_breakdown());
    Ok(())
}

fn selftest() -> anyhow::Result<()> {
    let results = run_selftest();
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", results.len());
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    if a.size < 8 || a.count == 0 {
        return usage("--size must be >= 8 and --count >= 1");
    }
    let mut rng = SeededRng::new(a.seed);
    let kind = match a.kind {
        Kind::Lowlight => Degradation::random_lowlight(&mut rng),
        Kind::Blur => Degradation::random_blur(&mut rng),
        Kind::Noise => Degradation::noise(),
    };
    let ds = synthetic_dataset(a.count, a.size, a.size, kind, a.seed)?;
    ds.save(&a.out).with_context(|| format!("--out {}", a.out.display()))?;
    println!("wrote {} pairs ({kind:?}) to {}", ds.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = match thread_count() {
        Ok(n) => n,
        Err(e) => return usage(e.to_string()),
    };
    with_threads(threads, move || match cli.command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Perturb(a) => perturb(a),
        Command::Bench(a) => bench(a),
        Command::Params(a) => params(a),
        Command::Selftest => selftest(),
        Command::Synth(a) => synth(a),
    })?
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
