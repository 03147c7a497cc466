use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bonus_malus_cli::check::{run_check, CheckReport};
use bonus_malus_cli::config::Artifact;
use bonus_malus_cli::output::{describe, OutputSet};
use bonus_malus_cli::{figures, load_config, parse_init, read_config, run_simulate, run_solve, CliError, PolicyArg, RunSpec};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bonus-malus", version, about = "Optimal claim reporting under a two-class bonus-malus system")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the value function and barriers; write the fields.
    Solve {
        config: PathBuf,
        /// Output directory (overrides outputs.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo value of a reporting rule from one state.
    Simulate {
        config: PathBuf,
        /// `grid` for the solved barrier, or `const:B` (B may be `inf`).
        #[arg(long)]
        policy: PolicyArg,
        /// Initial state `i,t,s,x`.
        #[arg(long, value_parser = parse_init)]
        init: bonus_malus::Init,
    },
    /// Write the figure series and run metadata.
    Figures {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance criteria and write check_report.json.
    Check {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn env(name: &str) -> Option<String> {
    std::env::var(name).ok()
}

fn out_dir(spec: &RunSpec, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| spec.outputs.dir.clone())
}

fn write_report(report: &CheckReport, dir: &Path) -> Result<(), CliError> {
    let mut set = OutputSet::new();
    set.add("check_report.json", report.to_json());
    let paths = set.commit(dir)?;
    eprintln!("wrote {}", describe(&paths));
    Ok(())
}

fn check(config: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let spec = match load_config(config, env) {
        Ok(spec) => spec,
        Err(err) => {
            let partial = read_config(config).ok();
            let report = CheckReport::invalid(partial.as_ref(), &err);
            print!("{}", report.summary());
            if let Some(dir) = out.clone().or_else(|| partial.map(|s| s.outputs.dir)) {
                write_report(&report, &dir)?;
            }
            return Err(err);
        }
    };
    let report = run_check(&spec, |c| {
        eprintln!("criterion {} {}: {}", c.id, c.name, if c.passed { "pass" } else { "FAIL" })
    })?;
    print!("{}", report.summary());
    if spec.outputs.artifacts.contains(&Artifact::CheckReport) || out.is_some() {
        write_report(&report, &out_dir(&spec, out))?;
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .criteria
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.id.to_string())
            .collect();
        Err(CliError::Acceptance(format!("criteria {} failed", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Solve { config, out } => {
            let spec = load_config(&config, env)?;
            let paths = run_solve(&spec, &out_dir(&spec, out))?;
            eprintln!("wrote {}", describe(&paths));
        }
        Command::Simulate { config, policy, init } => {
            let spec = load_config(&config, env)?;
            let report = run_simulate(&spec, policy, init)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Figures { config, out } => {
            let spec = load_config(&config, env)?;
            let paths = figures::run_figures(&spec, &out_dir(&spec, out))?;
            eprintln!("wrote {}", describe(&paths));
        }
        Command::Check { config, out } => check(&config, out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
