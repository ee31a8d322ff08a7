//! `bfr`: synthesize training pairs, train, restore and evaluate.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use bfr_core::config::{RunConfig, CONFIG_ENV};
use bfr_core::degradation::{list_images, synthesize_pairs, SynthesisJob};
use bfr_core::image::{load_image, resize, save_image, ImageFormat, ResizeMethod};
use bfr_core::metrics::{evaluate_dirs, niqe_fit_dir, render_table, write_report};
use bfr_core::trainer::{self, load_restorer, Dataset, Trainer};
use bfr_core::Error;
use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bfr", version, about = "Blind face restoration toolkit")]
struct Cli {
    /// Run configuration (TOML). Defaults to the desk preset.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Built-in preset used when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,

    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override one config key, e.g. `--set train.total_iterations=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", action = ArgAction::Append)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Degrade HQ faces into paired LQ/HQ training data.
    Synthesize(SynthesizeArgs),
    /// Train the restoration network.
    Train(TrainArgs),
    /// Restore images with a trained checkpoint.
    Restore(RestoreArgs),
    /// Score restored images.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[arg(long)]
    hq_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    count: usize,
    /// Resize HQ images to this square side first (defaults to the codec resolution).
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Synthesized pair directory (overrides `paths.data_dir`).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Landmark file (overrides `paths.landmarks`).
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// Output directory (overrides `paths.out_dir`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Resume even if the checkpoint was written under another config.
    #[arg(long, requires = "resume")]
    allow_config_change: bool,
    /// Plain residual blocks instead of MMRB.
    #[arg(long)]
    no_mmrb: bool,
    /// Drop the facial-region discriminators.
    #[arg(long)]
    no_local_d: bool,
    /// Keep the generator prior frozen.
    #[arg(long)]
    no_finetune: bool,
    /// Train every discriminator layer.
    #[arg(long)]
    no_freeze_d: bool,
}

#[derive(Args, Debug)]
struct RestoreArgs {
    /// Image file or directory.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output file (for a file input) or directory.
    #[arg(long)]
    output: PathBuf,
    /// Bicubic-resize inputs to the model resolution first.
    #[arg(long)]
    upscale: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    restored: PathBuf,
    /// Ground-truth directory paired by file name.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Pristine corpus for fitting the NIQE model.
    #[arg(long)]
    pristine: Option<PathBuf>,
    /// Directory receiving metrics.json and metrics.txt.
    #[arg(long)]
    out: PathBuf,
}

/// Error raised by the CLI itself before any module runs.
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

fn set_key(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let value = raw
        .parse::<toml::Value>()
        .or_else(|_| {
            format!("v = {raw}")
                .parse::<toml::Table>()
                .map(|t| t["v"].clone())
        })
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| usage(format!("{key}: {part} is not a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => match cli.preset {
            Preset::Desk => RunConfig::desk(),
            Preset::Paper => RunConfig::paper(),
        },
    };
    if !cli.overrides.is_empty() {
        let mut value = toml::Value::try_from(&cfg).context("serializing config")?;
        for o in &cli.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| usage(format!("override {o:?} is not KEY=VALUE")))?;
            set_key(&mut value, k.trim(), v.trim())?;
        }
        cfg = RunConfig::from_toml(&toml::to_string(&value).context("serializing config")?)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synthesize(cfg: &RunConfig, args: &SynthesizeArgs) -> Result<()> {
    let job = SynthesisJob {
        count: args.count,
        seed: cfg.seed,
        resolution: Some(args.resolution.unwrap_or(cfg.codec.base_resolution)),
        ranges: cfg.degradation.clone(),
    };
    let manifest = synthesize_pairs(&args.hq_dir, &args.out_dir, &job)?;
    println!(
        "wrote {} pairs, manifest {}",
        args.count,
        manifest.display()
    );
    Ok(())
}

fn train(mut cfg: RunConfig, args: &TrainArgs) -> Result<()> {
    cfg.ablation.use_mmrb &= !args.no_mmrb;
    cfg.ablation.use_local_d &= !args.no_local_d;
    cfg.ablation.finetune_prior &= !args.no_finetune;
    cfg.ablation.freeze_d &= !args.no_freeze_d;
    if let Some(d) = &args.data_dir {
        cfg.paths.data_dir = Some(d.clone());
    }
    if let Some(l) = &args.landmarks {
        cfg.paths.landmarks = Some(l.clone());
    }
    if let Some(o) = &args.out_dir {
        cfg.paths.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    let data_dir = cfg
        .paths
        .data_dir
        .clone()
        .ok_or_else(|| usage("no data directory: pass --data-dir or set paths.data_dir"))?;
    let out_dir = cfg
        .paths
        .out_dir
        .clone()
        .ok_or_else(|| usage("no output directory: pass --out-dir or set paths.out_dir"))?;
    let data = Dataset::load(&data_dir, cfg.paths.landmarks.as_deref())?;
    let mut t = match &args.resume {
        Some(ckpt) => Trainer::resume(cfg, ckpt, args.allow_config_change)?,
        None => Trainer::new(cfg)?,
    };
    let start = t.iteration();
    let last = trainer::run(&mut t, &data, &out_dir)?;
    println!(
        "trained iterations {start}..{}, final checkpoint {}",
        t.iteration(),
        last.display()
    );
    Ok(())
}

fn restore(args: &RestoreArgs) -> Result<()> {
    let (_, restorer, params) = load_restorer(&args.checkpoint)?;
    let r = restorer.resolution();
    let jobs: Vec<(PathBuf, PathBuf)> = if args.input.is_dir() {
        let files = list_images(&args.input)?;
        if files.is_empty() {
            return Err(Error::Invalid(format!("no images in {}", args.input.display())).into());
        }
        files
            .into_iter()
            .map(|f| {
                let out = args.output.join(f.file_name().expect("listed file"));
                (f, out)
            })
            .collect()
    } else {
        vec![(args.input.clone(), args.output.clone())]
    };
    let mut inputs = Vec::with_capacity(jobs.len());
    for (input, _) in &jobs {
        let mut img = load_image(input)?;
        if img.height() != r || img.width() != r {
            if !args.upscale {
                return Err(Error::Invalid(format!(
                    "{} is {}x{} but the model expects {r}x{r}; pass --upscale to resize it",
                    input.display(),
                    img.height(),
                    img.width()
                ))
                .into());
            }
            img = resize(&img, r, r, ResizeMethod::Bicubic)?;
        }
        inputs.push(img);
    }
    let outputs = restorer.restore(&params, &inputs)?;
    if args.input.is_dir() {
        std::fs::create_dir_all(&args.output)
            .with_context(|| format!("creating {}", args.output.display()))?;
    }
    for ((_, out_path), img) in jobs.iter().zip(&outputs) {
        let format = ImageFormat::from_path(out_path).unwrap_or(ImageFormat::Png);
        save_image(img, out_path, format, None)?;
    }
    println!("restored {} image(s)", outputs.len());
    Ok(())
}

fn evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<()> {
    let model = args
        .pristine
        .as_deref()
        .map(|p| niqe_fit_dir(p, &cfg.metrics.niqe))
        .transpose()?;
    let report = evaluate_dirs(
        &args.restored,
        args.reference.as_deref(),
        model.as_ref(),
        &cfg.metrics,
    )?;
    write_report(&report, &args.out)?;
    print!("{}", render_table(&report));
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 2,
                Error::NonFinite { .. } => 4,
                _ => 3,
            };
        }
    }
    1
}

fn key_listing() -> String {
    let mut s = String::from("Config keys (TOML, dotted for --set):\n");
    for k in RunConfig::keys() {
        s.push_str("  ");
        s.push_str(&k);
        s.push('\n');
    }
    s
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::Restore(args) = &cli.command {
        return restore(args);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synthesize(args) => synthesize(&cfg, args),
        Command::Train(args) => train(cfg, args),
        Command::Evaluate(args) => evaluate(&cfg, args),
        Command::Restore(_) => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command().after_long_help(key_listing()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
