use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dlspf::config::ExperimentConfig;
use dlspf::pipeline::{cmd_evaluate, cmd_filter, cmd_simulate, cmd_train_ae, cmd_train_dyn, FilterMode};
use dlspf::{DlspfError, Result};

#[derive(Parser)]
#[command(name = "dlspf", version, about = "Latent-space particle filtering for PDE surrogates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the particle count
    #[arg(long, global = true)]
    particles: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Mode::Latent)]
    mode: Mode,
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads; falls back to DLSPF_WORKERS, then the config
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    Simulate,
    TrainAe,
    TrainDyn,
    Filter,
    Evaluate,
    /// Prints a default configuration
    DefaultConfig {
        #[arg(value_enum, default_value_t = Preset::Burgers)]
        preset: Preset,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Hf,
    Latent,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Burgers,
    LinearGaussian,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| DlspfError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.particles {
        cfg.filter.particles = n;
    }
    let env = std::env::var("DLSPF_WORKERS").ok();
    let workers = match (cli.workers, env) {
        (Some(w), _) => Some(w),
        (None, Some(v)) => Some(v.parse().map_err(|_| DlspfError::Config(format!("DLSPF_WORKERS={v:?} is not a count")))?),
        (None, None) => None,
    };
    if let Some(w) = workers {
        cfg.filter.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::DefaultConfig { preset } = cli.command {
        let cfg = match preset {
            Preset::Burgers => ExperimentConfig::burgers_desk(),
            Preset::LinearGaussian => ExperimentConfig::linear_gaussian(),
        };
        println!("{}", cfg.to_json()?);
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let out = &cli.out;
    match cli.command {
        Command::Simulate => {
            let m = cmd_simulate(&cfg, out)?;
            log::info!("wrote {} train and {} test trajectories", m.n_train, m.n_test);
        }
        Command::TrainAe => {
            let m = cmd_train_ae(&cfg, out)?;
            log::info!("autoencoder loss {:.4e} -> {:.4e}, held-out error {:.4}", m.first_loss, m.final_loss, m.heldout_rel_error);
        }
        Command::TrainDyn => {
            let m = cmd_train_dyn(&cfg, out)?;
            log::info!("stepper loss {:.4e} -> {:.4e}, rollout error {:.4}", m.first_loss, m.final_loss, m.test_rollout_rel_error);
        }
        Command::Filter => {
            let mode = match cli.mode {
                Mode::Hf => FilterMode::Hf,
                Mode::Latent => FilterMode::Latent,
            };
            let (m, t) = cmd_filter(&cfg, mode, out)?;
            let resamples = m.resampled.iter().filter(|r| **r).count();
            log::info!("{} filter: {} steps, {} resamples, {:.3} s", mode.name(), m.n_obs, resamples, t.total);
        }
        Command::Evaluate => {
            let r = cmd_evaluate(&cfg, out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::DefaultConfig { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
