use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vdvae::arch::{BlockSpec, Parameters, Vdvae};
use vdvae::checks::{dmol_histogram_check, dmol_mass_check, grad_suite, prop1_suite, prop2_suite};
use vdvae::config::RunConfig;
use vdvae::data::{load_checkpoint, load_cifar10_binary, load_raw_splits, write_ppm_grid, Dataset, RgbImage, RAW_MAGIC};
use vdvae::diagnostics::{
    depth_ablation, kl_per_layer, layer_distribution_ablation, partial_reconstruct, sample, AblationResult,
    AblationSettings, PixelReadout, PARTIAL_TEMPERATURE,
};
use vdvae::dist::nats_to_bpd;
use vdvae::trainer::{evaluate, train, TrainState};

/// Marks errors caused by the invocation rather than by the run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "vdvae", version, about = "Train, evaluate and inspect very deep hierarchical VAEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key=value run configuration.
    Train(TrainArgs),
    /// Report the ELBO of a checkpoint on a data split.
    Eval(EvalArgs),
    /// Write a grid of unconditional samples.
    Sample(SampleArgs),
    /// Decode with posterior latents up to a resolution and prior latents above it.
    Reconstruct(ReconstructArgs),
    /// Diagnostics of a trained model.
    #[command(subcommand)]
    Diag(DiagCommand),
    /// Train grids of models that differ in depth or layer placement.
    #[command(subcommand)]
    Ablate(AblateCommand),
    /// Run a verification suite; exits 1 if anything fails.
    #[command(subcommand)]
    Check(CheckCommand),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// key=value applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct DataArgs {
    /// CIFAR-10 batch directory, VDVT file, or run config naming the data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    /// Seed of the validation holdout; must match the training run.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Evaluate the averaged weights instead of the raw ones.
    #[arg(long)]
    use_ema: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the raw weights instead of the averaged ones.
    #[arg(long)]
    no_ema: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Highest resolution taking posterior latents; 0 samples from the prior.
    /// Defaults to every decoder resolution in turn.
    #[arg(long, value_delimiter = ',')]
    up_to: Vec<usize>,
    #[arg(long, default_value_t = PARTIAL_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_ema: bool,
}

#[derive(Subcommand)]
enum DiagCommand {
    /// Per-layer KL in bits per dim, with collapsed layers flagged.
    Kl(DiagKlArgs),
}

#[derive(Args)]
struct DiagKlArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long)]
    no_ema: bool,
}

#[derive(Subcommand)]
enum AblateCommand {
    /// Vary the number of decoder blocks sharing an input.
    Depth(AblateDepthArgs),
    /// Vary how a fixed number of decoder blocks is spread over resolutions.
    Layers(AblateLayersArgs),
}

#[derive(Args)]
struct AblateCommon {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Training seeds, one run per seed and grid cell.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Score the averaged weights on the validation split.
    #[arg(long)]
    use_ema: bool,
    #[arg(long, default_value_t = 100)]
    eval_batch: usize,
}

#[derive(Args)]
struct AblateDepthArgs {
    #[command(flatten)]
    common: AblateCommon,
    /// Group sizes; each must tile every resolution's block count.
    #[arg(long, value_delimiter = ',', default_value = "1,8")]
    ks: Vec<usize>,
}

#[derive(Args)]
struct AblateLayersArgs {
    #[command(flatten)]
    common: AblateCommon,
    /// Decoder specs separated by ';', all with the same block total.
    #[arg(long)]
    specs: String,
}

#[derive(Subcommand)]
enum CheckCommand {
    /// Finite-difference gradients of every differentiable op.
    Grads(CheckArgs),
    /// ELBO/likelihood equivalence and triangular prior Jacobians.
    Props(CheckArgs),
    /// Mixture-of-logistics normalization and sampler histogram.
    Dmol(CheckArgs),
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per op or property.
    #[arg(long)]
    count: Option<usize>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<vdvae::Error>(), Some(vdvae::Error::Config(_)));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train(a) => cmd_train(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => cmd_eval(a).map(|_| ExitCode::SUCCESS),
        Command::Sample(a) => cmd_sample(a).map(|_| ExitCode::SUCCESS),
        Command::Reconstruct(a) => cmd_reconstruct(a).map(|_| ExitCode::SUCCESS),
        Command::Diag(DiagCommand::Kl(a)) => cmd_diag_kl(a).map(|_| ExitCode::SUCCESS),
        Command::Ablate(a) => cmd_ablate(a).map(|_| ExitCode::SUCCESS),
        Command::Check(c) => cmd_check(c),
    }
}

fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_run_config(&a.config, &a.overrides)?;
    let splits = cfg.load_data()?;
    let mut state = match &a.resume {
        Some(path) => {
            let mut state = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            if state.model != cfg.model {
                return Err(usage(format!(
                    "model settings in {} differ from checkpoint {}",
                    a.config.display(),
                    path.display()
                )));
            }
            state.config = cfg.train.clone();
            state
        }
        None => TrainState::new(
            cfg.model.clone(),
            cfg.train.clone(),
            vdvae::trainer::NormStats::compute(&splits.train)?,
        )?,
    };
    let model = Vdvae::new(cfg.model.clone())?;
    println!(
        "training {} parameters, {} stochastic layers, from step {} to {}",
        state.params.count(),
        model.num_layers(),
        state.step,
        state.config.total_steps
    );
    let summary = train(&mut state, &model, &splits.train, Some(&splits.val), &a.out)?;
    println!(
        "done: {} steps, {} applied, {} skipped",
        summary.steps, summary.applied, summary.skipped
    );
    if let Some(v) = summary.val {
        println!("validation (ema): {:.6} nats/subpixel, {:.6} bits/dim", v.loss, v.loss_bpd());
    }
    Ok(())
}

/// Resolve `--data` into the requested split for a model of the given shape.
fn load_split(args: &DataArgs, state: &TrainState) -> Result<Dataset> {
    let path = &args.data;
    let splits = if path.is_dir() {
        load_cifar10_binary(path, args.data_seed)?
    } else {
        let head = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        if head.starts_with(RAW_MAGIC) {
            load_raw_splits(path, args.data_seed)?
        } else {
            let cfg = RunConfig::load(path)?;
            cfg.validate()?;
            cfg.load_data()?
        }
    };
    let ds = match args.split {
        Split::Train => splits.train,
        Split::Val => splits.val,
        Split::Test => splits
            .test
            .ok_or_else(|| usage(format!("{} has no test split", path.display())))?,
    };
    let (s, c) = (state.model.image_size, state.model.image_channels);
    if (ds.height(), ds.width(), ds.channels()) != (s, s, c) {
        return Err(usage(format!(
            "data is {}x{}x{} but the checkpoint expects {s}x{s}x{c}",
            ds.height(),
            ds.width(),
            ds.channels()
        )));
    }
    Ok(ds)
}

fn open_checkpoint(path: &Path) -> Result<(TrainState, Vdvae)> {
    let state = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let model = Vdvae::new(state.model.clone())?;
    Ok((state, model))
}

fn pick(state: &TrainState, ema: bool) -> &Parameters<f32> {
    if ema {
        &state.ema
    } else {
        &state.params
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (state, model) = open_checkpoint(&a.ckpt)?;
    let ds = load_split(&a.data, &state)?;
    let v = evaluate(pick(&state, a.use_ema), &model, &state.norm, &ds, a.batch, a.seed)?;
    let bpd = v.loss_bpd();
    // The two units must describe the same number.
    assert!((bpd * std::f64::consts::LN_2 - v.loss).abs() <= 1e-12 * v.loss.abs().max(1.0));
    println!("images: {}", ds.len());
    println!("weights: {}", if a.use_ema { "ema" } else { "raw" });
    println!("elbo: {:.6} nats/subpixel", v.loss);
    println!("elbo: {:.6} bits/dim", bpd);
    println!("reconstruction: {:.6} bits/dim", nats_to_bpd(v.nll));
    println!("kl: {:.6} bits/dim", nats_to_bpd(v.kl));
    let profile = vdvae::diagnostics::RateProfile::from_nats(&v.kl_layers, &model.layer_resolutions());
    for r in &profile.rows {
        println!("layer {:>3} res {:>3}: {:.6} bits/dim", r.layer, r.resolution, r.kl_bpd);
    }
    Ok(())
}

fn images(bytes: &[u8], n: usize, size: usize, channels: usize) -> Result<Vec<RgbImage>> {
    let len = size * size * channels;
    (0..n)
        .map(|i| Ok(RgbImage::from_channels(size, size, channels, &bytes[i * len..(i + 1) * len])?))
        .collect()
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let (state, model) = open_checkpoint(&a.ckpt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let px = sample(pick(&state, !a.no_ema), &model, a.n, a.temperature, &mut rng)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(format!("samples-t{}.ppm", a.temperature));
    write_ppm_grid(&path, &images(&px, a.n, state.model.image_size, state.model.image_channels)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs) -> Result<()> {
    let (state, model) = open_checkpoint(&a.ckpt)?;
    let ds = load_split(&a.data, &state)?;
    let n = a.n.min(ds.len());
    if n == 0 {
        return Err(usage("no images to reconstruct"));
    }
    let idx: Vec<usize> = (0..n).collect();
    let pixels = ds.gather(&idx);
    let (s, c) = (state.model.image_size, state.model.image_channels);
    let levels = if a.up_to.is_empty() {
        let mut l: Vec<usize> = state.model.dec_spec.resolutions().collect();
        l.dedup();
        l
    } else {
        a.up_to.clone()
    };
    fs::create_dir_all(&a.out)?;
    write_ppm_grid(&a.out.join("originals.ppm"), &images(&pixels, n, s, c)?)?;
    for up_to in levels {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let px = partial_reconstruct(
            pick(&state, !a.no_ema),
            &model,
            &state.norm,
            &pixels,
            n,
            up_to,
            a.temperature,
            PixelReadout::Sample,
            &mut rng,
        )
        .map_err(|e| match e {
            vdvae::Error::Invalid(m) => usage(m),
            e => e.into(),
        })?;
        let path = a.out.join(format!("recon-upto{up_to}.ppm"));
        write_ppm_grid(&path, &images(&px, n, s, c)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_diag_kl(a: DiagKlArgs) -> Result<()> {
    let (state, model) = open_checkpoint(&a.ckpt)?;
    let ds = load_split(&a.data, &state)?;
    let profile = kl_per_layer(pick(&state, !a.no_ema), &model, &state.norm, &ds, a.batch, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("rate.csv");
    fs::write(&path, profile.to_csv())?;
    println!("total kl: {:.6} bits/dim", profile.total_bpd());
    let collapsed = profile.collapsed_layers();
    println!("collapsed layers: {} of {} {:?}", collapsed.len(), profile.rows.len(), collapsed);
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_ablate(cmd: AblateCommand) -> Result<()> {
    let common = match &cmd {
        AblateCommand::Depth(a) => &a.common,
        AblateCommand::Layers(a) => &a.common,
    };
    let cfg = load_run_config(&common.config, &common.overrides)?;
    if common.seeds.is_empty() {
        return Err(usage("--seeds must not be empty"));
    }
    let splits = cfg.load_data()?;
    let settings = AblationSettings {
        train: cfg.train.clone(),
        use_ema: common.use_ema,
        eval_batch: common.eval_batch,
    };
    let result: AblationResult = match &cmd {
        AblateCommand::Depth(a) => depth_ablation(&cfg.model, &a.ks, &common.seeds, &settings, &splits)?,
        AblateCommand::Layers(a) => {
            let specs = a
                .specs
                .split(';')
                .map(|s| BlockSpec::parse(s.trim()))
                .collect::<vdvae::Result<Vec<_>>>()
                .map_err(|e| usage(e.to_string()))?;
            layer_distribution_ablation(&cfg.model, &specs, &common.seeds, &settings, &splits)?
        }
    };
    fs::create_dir_all(&common.out)?;
    let path = common.out.join("ablation.csv");
    fs::write(&path, result.to_csv())?;
    let mut labels: Vec<&str> = result.rows.iter().map(|r| r.config.as_str()).collect();
    labels.dedup();
    for l in labels {
        println!("{l}: mean val {:.6} bits/dim", result.mean_loss(l).unwrap_or(f64::NAN));
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_check(cmd: CheckCommand) -> Result<ExitCode> {
    let (args, lines, ok) = match cmd {
        CheckCommand::Grads(a) => {
            let results = grad_suite(a.count.unwrap_or(20), a.seed)?;
            let mut lines = Vec::new();
            let mut ok = true;
            for r in &results {
                ok &= r.passed;
                if !r.passed {
                    lines.push(format!(
                        "FAIL {}: rel err {:.3e} (tol {:.0e})",
                        r.report.case, r.report.max_rel_err, r.tolerance
                    ));
                }
            }
            let worst = results.iter().map(|r| r.report.max_rel_err / r.tolerance).fold(0.0, f64::max);
            lines.push(format!(
                "{} gradient checks, {} failed, worst error/tolerance {:.3e}",
                results.len(),
                results.iter().filter(|r| !r.passed).count(),
                worst
            ));
            (a, lines, ok)
        }
        CheckCommand::Props(a) => {
            let n = a.count.unwrap_or(100);
            let gap = prop1_suite(n, 6, a.seed)?;
            let reports = prop2_suite((n / 10).max(1), 3, 2, 1e-9, a.seed)?;
            let p1 = gap < 1e-12;
            let p2 = reports.iter().all(|r| r.passed());
            let upper = reports.iter().map(|r| r.max_upper.max(r.max_block_offdiag)).fold(0.0, f64::max);
            let lines = vec![
                format!("{} elbo = log-likelihood on {n} AR models: max gap {gap:.3e}", verdict(p1)),
                format!(
                    "{} block lower triangular prior Jacobian at {} inits: max off-structure {upper:.3e}",
                    verdict(p2),
                    reports.len()
                ),
            ];
            (a, lines, p1 && p2)
        }
        CheckCommand::Dmol(a) => {
            let mass = dmol_mass_check(a.count.unwrap_or(1000), a.seed)?;
            let hist = dmol_histogram_check(0.1, -3.0, 100_000, a.seed)?;
            let m = mass <= 1e-5;
            let h = hist.passed();
            let lines = vec![
                format!("{} bin masses sum to one: max deviation {mass:.3e}", verdict(m)),
                format!(
                    "{} sampler histogram over {} draws: chi2 {:.1} on {} dof, largest bin deviation {:.2} sigma",
                    verdict(h),
                    hist.samples,
                    hist.chi2,
                    hist.dof,
                    hist.max_sigma
                ),
            ];
            (a, lines, m && h)
        }
    };
    let report = lines.join("\n") + "\n";
    print!("{report}");
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("check.txt"), &report)?;
    }
    if !ok {
        bail!("check failed");
    }
    Ok(ExitCode::SUCCESS)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
