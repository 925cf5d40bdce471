use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mpdit::harness::{self, RunConfig};
use mpdit::tensor::parallel;
use mpdit::{cost, Error, Result};

#[derive(Parser)]
#[command(name = "mpdit", version, about = "Train, sample and analyze multi-patch diffusion transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print and write the parameter / GFLOPs report.
    Analyze(Common),
    /// Train, optionally resuming from --ckpt.
    Train(Common),
    /// Sample from a checkpoint (default: the run's latest).
    Sample(Common),
    /// Finite-difference check of every network parameter.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// Run config (TOML). `analyze` accepts several.
    #[arg(long, required = true, num_args = 1..)]
    config: Vec<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Overrides `train.seed` (train, gradcheck) or `sample.seed` (sample).
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution. Same as
    /// MPDIT_DETERMINISTIC=1.
    #[arg(long)]
    deterministic: bool,
}

impl Common {
    fn single(&self) -> Result<RunConfig> {
        match self.config.as_slice() {
            [p] => RunConfig::load(p),
            _ => Err(Error::Config(format!("expected one --config, got {}", self.config.len()))),
        }
    }
}

fn with_seed(mut run: RunConfig, seed: Option<u64>, sampling: bool) -> Result<RunConfig> {
    if let Some(s) = seed {
        if sampling {
            run.sample.seed = s;
        } else {
            run.train.seed = s;
        }
        run.validate()?;
    }
    Ok(run)
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Analyze(c) | Command::Train(c) | Command::Sample(c) | Command::Gradcheck(c) => c,
    };
    let env = std::env::var("MPDIT_DETERMINISTIC").is_ok_and(|v| v == "1");
    if common.deterministic || env {
        parallel::set_deterministic(true);
    }
    let mut out = std::io::stdout().lock();
    match &cli.command {
        Command::Analyze(c) => {
            let runs = c.config.iter().map(|p| RunConfig::load(p)).collect::<Result<Vec<_>>>()?;
            let reports = harness::analyze(&runs)?;
            let _ = write!(out, "{}", cost::to_text(&reports));
        }
        Command::Train(c) => {
            let run = with_seed(c.single()?, c.seed, false)?;
            let done = harness::train(&run, c.ckpt.as_deref(), &mut out)?;
            let _ = writeln!(
                out,
                "checkpoint {}",
                harness::checkpoint_path(&run, done.state.step).display()
            );
        }
        Command::Sample(c) => {
            let run = with_seed(c.single()?, c.seed, true)?;
            let ckpt = c.ckpt.clone().unwrap_or_else(|| harness::latest_checkpoint(&run));
            let grid = harness::sample(&run, &ckpt)?;
            let _ = writeln!(
                out,
                "{} samples written to {}",
                grid.keys.len(),
                run.paths.output_dir.join("samples.mpdt").display()
            );
        }
        Command::Gradcheck(c) => {
            let run = with_seed(c.single()?, c.seed, false)?;
            let r = harness::gradcheck(&run)?;
            let _ = writeln!(
                out,
                "coordinates {}  max relative error {:.3e}  (tolerance {:e})",
                r.coords_checked,
                r.max_rel_error,
                harness::GRADCHECK_TOL
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
