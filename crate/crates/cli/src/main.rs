use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cvr_cli::commands;
use cvr_cli::config::Config;

#[derive(Parser)]
#[command(name = "cvr", version, about = "Distributed CVR dispatch experiments")]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(short, long, global = true, default_value = "cvr.toml")]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set admm.rho0=0.1`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the feeder and the scenario series.
    Generate,
    /// Run the configured strategies over the scenario.
    Run {
        /// Comma separated strategies (base, ccvr, dscvr, dacvr, dacvr:K).
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        /// Number of steps from the start of the window.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Partial barrier and latency sweep at one operating point.
    Sweep,
    /// Convergence run with the configured failure windows.
    Trace,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, cvr_core::CvrError> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Command::Run { strategies, steps } = &cli.command {
        if !strategies.is_empty() {
            let list: Vec<String> = strategies.iter().map(|s| format!("\"{s}\"")).collect();
            overrides.push(format!("strategies=[{}]", list.join(",")));
        }
        if let Some(n) = steps {
            overrides.push(format!("scenario.steps={n}"));
        }
    }
    let cfg = Config::load(&cli.config, &overrides)?;
    let dir = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    match cli.command {
        Command::Generate => {
            for p in commands::generate(&cfg, &dir)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Run { .. } => {
            let reports = commands::run(&cfg, &dir)?;
            let base = reports.iter().find(|r| r.strategy == "base");
            for r in &reports {
                println!("{}", commands::describe(r, base));
            }
            println!("reports in {}", dir.display());
            if reports.iter().any(|r| r.failed_at.is_some()) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Sweep => {
            for r in commands::sweep(&cfg, &dir)? {
                let first = r.first_below_tol.map_or("-".to_string(), |x| x.to_string());
                println!(
                    "barrier {:>2} latency {:>2}: {} iterations, converged {}, first below tol {first}",
                    r.partial_barrier, r.latency, r.iterations, r.converged
                );
            }
        }
        Command::Trace => {
            let r = commands::trace(&cfg, &dir)?;
            let last = r.records.last().map_or(f64::NAN, |x| x.r_norm);
            println!("{} iterations, converged {}, final ‖r‖ {last:e}", r.iterations, r.converged);
            if !r.converged {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
