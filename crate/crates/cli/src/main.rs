use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sparse_lpv::analysis::NormKind;
use sparse_lpv_cli::commands::{cmd_design, cmd_model, cmd_simulate, cmd_verify};
use sparse_lpv_cli::sweep::cmd_sweep;
use sparse_lpv_cli::{ModelKind, Overrides, RunConfig, EXIT_OK, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "sparse-lpv", version, about = "Sparse-actuation LPV controller design, verification and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for disturbances and random verification samples
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    kind: Option<Kind>,
    #[arg(long, global = true, value_enum)]
    model: Option<Model>,
    #[arg(long, global = true, value_name = "X")]
    gamma0: Option<f64>,
    #[arg(long = "gamma-ub-sqrt", global = true, value_name = "X")]
    gamma_ub_sqrt: Option<f64>,
    /// Controller JSON for simulate and verify
    #[arg(long, global = true, value_name = "PATH")]
    controller: Option<PathBuf>,
    /// Simulate without feedback
    #[arg(long = "open-loop", global = true)]
    open_loop: bool,
    /// Override a config field by its dot-separated JSON path, e.g. wing.n=3
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write the design model JSON
    Model,
    /// Reweighted l1 design, pruning and certified re-solve
    Design,
    /// Simulate the nonlinear wing
    Simulate,
    /// Frozen-parameter norm check of a controller
    Verify,
    /// Design and simulate over the sweep lists
    Sweep,
}

#[derive(ValueEnum, Clone, Copy)]
enum Kind {
    Hinf,
    H2,
}

#[derive(ValueEnum, Clone, Copy)]
enum Model {
    Lti,
    Lpv,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    let overrides = Overrides {
        set: cli.set,
        out: cli.out,
        seed: cli.seed,
        kind: cli.kind.map(|k| match k {
            Kind::Hinf => NormKind::Hinf,
            Kind::H2 => NormKind::H2,
        }),
        model: cli.model.map(|m| match m {
            Model::Lti => ModelKind::Lti,
            Model::Lpv => ModelKind::Lpv,
        }),
        gamma0: cli.gamma0,
        gamma_ub_sqrt: cli.gamma_ub_sqrt,
        controller: cli.controller,
        open_loop: cli.open_loop,
    };
    let run = RunConfig::load(cli.config.as_deref(), &overrides).and_then(|cfg| match cli.command {
        Command::Model => cmd_model(&cfg),
        Command::Design => cmd_design(&cfg),
        Command::Simulate => cmd_simulate(&cfg),
        Command::Verify => cmd_verify(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
    });
    let code = match run {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if let Some(e) = &outcome.failure {
                eprintln!("error: {e}");
            }
            outcome.code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    };
    ExitCode::from(code as u8)
}
