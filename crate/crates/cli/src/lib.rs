//! Command-line front end of the bonus-malus solver: configuration loading,
//! solving, simulation, figure export and the acceptance check.

pub mod check;
pub mod config;
pub mod figures;
pub mod output;

use std::path::{Path, PathBuf};

use bonus_malus::{
    estimate_value, iterate, BarrierMode, Class, Control, Init, McResult, Policy, Solution,
};
use serde::Serialize;

pub use config::{load_config, parse_config, read_config, RunSpec};
pub use output::{fmt_num, OutputSet};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Model(#[from] bonus_malus::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("refusing to write non-finite value {0}")]
    NonFiniteOutput(f64),

    #[error("acceptance failed: {0}")]
    Acceptance(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 1 validation, 2 numerical failure, 3 acceptance failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Model(e) if e.is_validation() => 1,
            CliError::Model(_) | CliError::NonFiniteOutput(_) => 2,
            CliError::Acceptance(_) => 3,
        }
    }
}

/// Solve with the control of the configuration.
pub fn solve(spec: &RunSpec) -> Result<Solution, CliError> {
    let grid = spec.build_grid()?;
    Ok(iterate(&spec.params(), grid, &spec.control()?)?)
}

/// Solve in optimize mode, keeping the configured stop rule.
pub fn solve_optimal(spec: &RunSpec, control: Control) -> Result<Solution, CliError> {
    let grid = spec.build_grid()?;
    let control = Control {
        mode: BarrierMode::Optimize,
        ..control
    };
    Ok(iterate(&spec.params(), grid, &control)?)
}

/// Value and barrier fields on the wealth window, plus a summary.
pub fn run_solve(spec: &RunSpec, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let sol = solve(spec)?;
    let mut set = OutputSet::new();
    let grid = sol.value.grid().clone();
    let (lo, hi) = grid.window;
    let wants = |a| spec.outputs.artifacts.contains(&a);

    if wants(config::Artifact::ValueField) {
        let mut csv = String::from("class,t,s,x,value\n");
        for (class, k_t, k_s, row) in sol.value.rows() {
            for (j, v) in row.iter().enumerate().take(hi + 1).skip(lo) {
                output::push_row(
                    &mut csv,
                    &[class.number() as f64, grid.t(k_t), grid.t(k_s), grid.x(j), *v],
                )?;
            }
        }
        set.add("value_field.csv", csv);
    }
    if let (true, Some(b)) = (wants(config::Artifact::BarrierField), sol.barrier.as_ref()) {
        let mut csv = String::from("class,t,s,x,barrier\n");
        for class in Class::ALL {
            for k_t in 0..=grid.n_t {
                for k_s in 0..=grid.max_k_s(class, k_t) {
                    for j in lo..=hi {
                        output::push_row(
                            &mut csv,
                            &[class.number() as f64, grid.t(k_t), grid.t(k_s), grid.x(j), b.get(class, k_t, k_s, j)?],
                        )?;
                    }
                }
            }
        }
        set.add("barrier_field.csv", csv);
    }
    let summary = serde_json::json!({
        "iterations": sol.iterations,
        "sup_change_history": sol.sup_change_history,
        "max_increase_history": sol.max_increase_history,
        "value_at_origin": {
            "class1_x2.5": sol.value.interp(Class::One, 0.0, 0.0, 2.5)?,
            "class2_x2.5": sol.value.interp(Class::Two, 0.0, 0.0, 2.5)?,
        },
        "config": spec,
    });
    set.add("solve_summary.json", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    set.commit(out)
}

/// Reporting rule requested on the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyArg {
    Grid,
    Constant(f64),
}

impl std::str::FromStr for PolicyArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "grid" {
            return Ok(PolicyArg::Grid);
        }
        let b = s
            .strip_prefix("const:")
            .ok_or_else(|| format!("policy must be \"grid\" or \"const:B\", got \"{s}\""))?;
        let v = match b {
            "inf" => f64::INFINITY,
            _ => b.parse::<f64>().map_err(|_| format!("bad barrier \"{b}\""))?,
        };
        if v >= 0.0 {
            Ok(PolicyArg::Constant(v))
        } else {
            Err(format!("barrier must be >= 0, got {b}"))
        }
    }
}

/// Parse `i,t,s,x`.
pub fn parse_init(s: &str) -> Result<Init, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(format!("expected i,t,s,x, got \"{s}\""));
    }
    let class = match parts[0] {
        "1" => Class::One,
        "2" => Class::Two,
        other => return Err(format!("class must be 1 or 2, got \"{other}\"")),
    };
    let num = |p: &str| p.parse::<f64>().map_err(|_| format!("not a number: \"{p}\""));
    Ok(Init::new(class, num(parts[1])?, num(parts[2])?, num(parts[3])?))
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub policy: String,
    pub init: [f64; 4],
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Monte Carlo value of a policy from `init`.
pub fn run_simulate(spec: &RunSpec, policy: PolicyArg, init: Init) -> Result<SimulateReport, CliError> {
    let params = spec.params();
    let (label, mc): (String, McResult) = match policy {
        PolicyArg::Constant(b) => {
            let p = Policy::Constant(b);
            (p.label(), estimate_value(&params, &p, init, spec.mc.n_paths, spec.mc.seed)?)
        }
        PolicyArg::Grid => {
            let sol = solve_optimal(spec, spec.control()?)?;
            let field = sol.barrier.as_ref().expect("optimize mode returns barriers");
            let p = Policy::Grid(field);
            (p.label(), estimate_value(&params, &p, init, spec.mc.n_paths, spec.mc.seed)?)
        }
    };
    Ok(SimulateReport {
        policy: label,
        init: [init.class.number() as f64, init.t, init.s, init.x],
        mean: mc.mean,
        stderr: mc.stderr,
        n_paths: mc.n_paths,
        seed: mc.seed,
    })
}
