use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedbatch::dynamics::{Recipe, Task};
use fedbatch::exec::{self, Execution};
use fedbatch::harness::{self, HarnessConfig, HarnessError, CHECKPOINT_FILE};

/// Output directory override, below `--out` and above the config file.
const OUT_ENV: &str = "FEDBATCH_OUT";

const EXIT_PARTIAL: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_TRAINING: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "fedbatch",
    version,
    about = "Fed-batch penicillin simulation, meta-training and BO benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for training and predictive sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one batch and write its trajectory.
    Simulate {
        /// Recipe override: B0,P0,S0,V0,F,t_stop.
        #[arg(long, value_delimiter = ',')]
        recipe: Option<Vec<f64>>,
        /// Kinetic parameter override: k_b,k_p,k_m,mu_max,rho_max,m_s.
        #[arg(long, value_delimiter = ',')]
        task: Option<Vec<f64>>,
    },
    /// Meta-train SANODEP (resumes from an existing checkpoint in the output directory).
    Train,
    /// Forecast MSE per testing distribution.
    MseSweep {
        /// Defaults to `<out>/sanodep.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the strategy × task × seed campaign matrix.
    Benchmark {
        /// Defaults to `<out>/sanodep.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn array<const N: usize>(flag: &str, v: &[f64]) -> Result<[f64; N], HarnessError> {
    v.try_into().map_err(|_| {
        HarnessError::Config(format!(
            "--{flag} takes {N} comma-separated values, got {}",
            v.len()
        ))
    })
}

fn load_config(cli: &Cli) -> Result<HarnessConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Command::Simulate { recipe, task } = &cli.command {
        if let Some(r) = recipe {
            cfg.simulate.recipe = Recipe::from_array(array("recipe", r)?);
        }
        if let Some(t) = task {
            cfg.simulate.task = Task::from_array(array("task", t)?);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(arg: &Option<PathBuf>, out: &Path) -> PathBuf {
    arg.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE))
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = load_config(cli)?;
    let out = cfg.output_dir.clone();
    let mode = if cli.jobs == 1 {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    exec::with_jobs(cli.jobs, || match &cli.command {
        Command::Simulate { .. } => {
            let path = harness::cmd_simulate(&cfg, &out)?;
            log::info!("wrote {}", path.display());
            Ok(())
        }
        Command::Train => {
            let path = harness::cmd_train(&cfg, &out, mode)?;
            log::info!("wrote {}", path.display());
            Ok(())
        }
        Command::MseSweep { checkpoint } => {
            let sweep =
                harness::cmd_mse_sweep(&cfg, &checkpoint_path(checkpoint, &out), &out, mode)?;
            log::info!(
                "{} forecast rows written to {}",
                sweep.rows.len(),
                out.display()
            );
            Ok(())
        }
        Command::Benchmark { checkpoint } => {
            let ck = checkpoint_path(checkpoint, &out);
            let outcome = harness::cmd_benchmark(&cfg, Some(&ck), &out, mode)?;
            log::info!(
                "{} of {} campaigns written to {}",
                outcome.campaigns.len(),
                outcome.total,
                out.display()
            );
            Ok(())
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(match e {
                HarnessError::Config(_) => EXIT_CONFIG,
                HarnessError::TrainingAbort(_) => EXIT_TRAINING,
                HarnessError::Partial { .. } => EXIT_PARTIAL,
                _ => 1,
            })
        }
    }
}
