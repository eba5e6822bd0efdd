mod commands;
mod failure;
mod inputs;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iwgae::pipeline::Method;
use iwgae::GaeConfig;

use failure::{Exit, Failure};
use inputs::Inputs;

#[derive(Parser)]
#[command(name = "iwgae", version, about = "Group accuracy estimation under covariate shift")]
struct Cli {
    /// key=value configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "iwgae-out")]
    out: PathBuf,
    /// Comma-separated method names.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Apply the union-bound correction to the per-bin interval level.
    #[arg(long, global = true)]
    union_bound: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrated target confidences for every calibration method.
    Calibrate {
        /// Labeled source validation predictions.
        #[arg(long)]
        source: PathBuf,
        /// Target predictions.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        source_features: Option<PathBuf>,
        #[arg(long)]
        target_features: Option<PathBuf>,
    },
    /// Rank candidate models by estimated target accuracy.
    Select {
        /// CSV `model_id,source_file,target_file[,source_features,target_features]`.
        #[arg(long)]
        candidates: PathBuf,
    },
    /// ECE of a confidence file against a labeled target file.
    Evaluate {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        confidences: PathBuf,
    },
    /// Per-group bound diagnostics on directories written by `synth`.
    Diagnose {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Write a synthetic Gaussian-shift problem.
    Synth {
        /// Samples per domain.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Target mean, comma-separated (source mean is the origin).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [0.8, -0.4])]
        shift: Vec<f64>,
        /// Multiplier on target logits.
        #[arg(long, default_value_t = 1.0)]
        logit_scale: f64,
        /// Label flip probability.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Calibrate { .. } => "calibrate",
            Command::Select { .. } => "select",
            Command::Evaluate { .. } => "evaluate",
            Command::Diagnose { .. } => "diagnose",
            Command::Synth { .. } => "synth",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("IWGAE_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn parse_methods(names: &Option<Vec<String>>, allowed: &[Method]) -> Result<Vec<Method>, Failure> {
    let Some(names) = names else {
        return Ok(allowed.to_vec());
    };
    let mut out = Vec::new();
    for name in names {
        let m = Method::parse(name)
            .filter(|m| allowed.contains(m))
            .ok_or_else(|| {
                let known: Vec<&str> = allowed.iter().map(|m| m.as_str()).collect();
                anyhow::anyhow!("unknown method {name:?} for this command; expected one of {}", known.join(", "))
            })
            .input()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let started = manifest::Clock::start();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(anyhow::anyhow!("--threads must be positive")).input();
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().output()?;
    }
    let mut inputs = Inputs::default();
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = inputs.read_text(path)?;
            iwgae::io::parse_config(&text)
                .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
                .input()?
        }
        None => GaeConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.union_bound {
        cfg.union_bound = true;
    }
    cfg.validate().input()?;

    std::fs::create_dir_all(&cli.out)
        .map_err(|e| anyhow::anyhow!("cannot create {}: {e}", cli.out.display()))
        .output()?;
    let out = &cli.out;
    let outputs = match &cli.command {
        Command::Calibrate {
            source,
            target,
            source_features,
            target_features,
        } => {
            let methods = parse_methods(&cli.methods, &Method::CALIBRATION)?;
            commands::calibrate::run(
                &mut inputs,
                commands::calibrate::Args {
                    source,
                    target,
                    source_features: source_features.as_deref(),
                    target_features: target_features.as_deref(),
                },
                &methods,
                &cfg,
                out,
            )?
        }
        Command::Select { candidates } => {
            let methods = parse_methods(&cli.methods, &Method::SELECTION)?;
            commands::select::run(&mut inputs, candidates, &methods, &cfg, out)?
        }
        Command::Evaluate { target, confidences } => {
            commands::evaluate::run(&mut inputs, target, confidences, cli.methods.as_deref(), &cfg, out)?
        }
        Command::Diagnose { dirs } => commands::diagnose::run(&mut inputs, dirs, &cfg, out)?,
        Command::Synth {
            n,
            shift,
            logit_scale,
            noise,
        } => commands::synth::run(*n, shift, *logit_scale, *noise, &cfg, out)?,
    };
    manifest::write(out, cli.command.name(), &cfg, inputs, outputs, started).output()
}
