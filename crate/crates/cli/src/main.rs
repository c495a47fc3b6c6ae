mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "tsddp", version, about = "Tube stochastic DDP: nominal solves, Monte Carlo campaigns, checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the nominal problem and write the trajectory, policies and log.
    Solve(Common),
    /// Run a Monte Carlo campaign.
    Montecarlo(Common),
    /// Run the built-in oracle checks.
    Validate {
        /// Offset added to the centre sigma weight; makes the UT check fail.
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb_ut_weights: f64,
    },
}

#[derive(Args)]
struct Common {
    /// double_integrator or low_thrust.
    #[arg(long)]
    problem: Option<String>,
    /// solve: ddp or tsddp. montecarlo: ddp_reopt, tsddp_reopt or tsddp_policy.
    #[arg(long)]
    mode: Option<String>,
    /// Fraction of the control bound available after the first stage.
    #[arg(long)]
    duty: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with overrides of the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Clamp applied controls onto the bound.
    #[arg(long)]
    saturate: bool,
}

impl Common {
    fn resolve(&self, mc: bool) -> Result<RunConfig, ConfigError> {
        let flags = Overrides {
            problem: self.problem.clone(),
            mode: self.mode.clone(),
            duty: self.duty,
            samples: self.samples,
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            saturate: self.saturate,
        };
        RunConfig::resolve(self.config.as_deref(), &flags, mc)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Solve(c) => c.resolve(false).map_err(run::Failure::from).and_then(|cfg| run::solve(&cfg)),
        Command::Montecarlo(c) => c
            .resolve(true)
            .map_err(run::Failure::from)
            .and_then(|cfg| run::montecarlo(&cfg)),
        Command::Validate { perturb_ut_weights } => run::validate(perturb_ut_weights),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
