use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tiltflow_cli::commands::{
    cmd_demo2d, cmd_diagnose, cmd_interpolate, cmd_sample, cmd_train_ebm, cmd_train_flow, cmd_train_nce,
};
use tiltflow_cli::config::SamplerKind;
use tiltflow_cli::{CliError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "tiltflow", version, about = "Energy-based models as exponential tilts of a normalizing flow")]
struct Cli {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// latent-hmc, data-langevin or data-hmc.
    #[arg(long, global = true)]
    sampler: Option<String>,
    /// Flow size preset: small, medium or large.
    #[arg(long, global = true)]
    size: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the flow by maximum likelihood.
    TrainFlow,
    /// Learn the energy tilt by maximum likelihood with latent HMC.
    TrainEbm,
    /// Learn the energy tilt by noise-contrastive estimation.
    TrainNce,
    /// Draw chains from the tilted model.
    Sample,
    /// Mixing diagnostics for chain dumps.
    Diagnose {
        /// Chain CSV files; defaults to the sampler output in --out.
        paths: Vec<PathBuf>,
    },
    /// Low-energy path between two latent points.
    Interpolate,
    /// Full 2-D pipeline with density grids and diagnostics.
    Demo2d,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(s) = &cli.sampler {
        if SamplerKind::parse(s).is_none() {
            return Err(CliError::Usage(format!("unknown sampler {s:?}")));
        }
        cfg.sample.sampler = s.clone();
    }
    if let Some(s) = &cli.size {
        cfg.flow.size = s.clone();
        cfg.flow.depth = None;
        cfg.flow.width = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::TrainFlow => {
            let r = cmd_train_flow(&cfg)?;
            println!("final NLL {:.4}", r.losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainEbm => {
            let r = cmd_train_ebm(&cfg)?;
            println!("final energy gap {:.4}", r.trace.energy_gap.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainNce => {
            let r = cmd_train_nce(&cfg)?;
            println!("final NCE loss {:.4}  bias {:.4}", r.losses.last().copied().unwrap_or(f64::NAN), r.bias);
        }
        Command::Sample => {
            let r = cmd_sample(&cfg)?;
            println!("{} chains x {} records ({})", r.z.chains(), r.z.len(), r.kind.name());
        }
        Command::Diagnose { paths } => {
            for r in cmd_diagnose(&cfg, &paths)? {
                print!("{}", r.summary);
            }
        }
        Command::Interpolate => print!("{}", cmd_interpolate(&cfg)?.summary),
        Command::Demo2d => print!("{}", cmd_demo2d(&cfg)?.summary),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
