mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "limval", version, about = "Limit values and uniform controls for long-run average optimal control")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Built-in example (ex1..ex5).
    #[arg(long, global = true)]
    example: Option<String>,
    /// Problem JSON file.
    #[arg(long, global = true)]
    problem: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON run configuration; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Grid cells per axis, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    cells: Option<Vec<usize>>,
    /// Control and value step.
    #[arg(long, global = true)]
    step: Option<f64>,
    /// Shifts m, comma separated.
    #[arg(long = "m-grid", global = true, value_delimiter = ',')]
    m_grid: Option<Vec<f64>>,
    /// Horizons t, comma separated.
    #[arg(long = "t-grid", global = true, value_delimiter = ',')]
    t_grid: Option<Vec<f64>>,
    #[arg(long = "beam-width", global = true)]
    beam_width: Option<usize>,
    #[arg(long, global = true)]
    restarts: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the Lipschitz, growth and cost-range hypotheses.
    Validate {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Finite-horizon values V_t by backward recursion.
    Value {
        /// Largest horizon.
        #[arg(long = "T")]
        horizon: Option<f64>,
        /// State to tabulate (default y0).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        at: Option<Vec<f64>>,
        /// Also write the whole grid at the largest horizon.
        #[arg(long)]
        full: bool,
    },
    /// Tables V_{m,t}, W_{m,n} and the grid-level inequality checks.
    Aux {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        z: Option<Vec<f64>>,
        /// Skip the W searches.
        #[arg(long = "no-w")]
        no_w: bool,
        #[arg(long = "n-grid", value_delimiter = ',')]
        n_grid: Option<Vec<f64>>,
    },
    /// The limit value estimate V* = sup_t inf_m V_{m,t}.
    Vstar {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        z: Option<Vec<f64>>,
        /// Bracket V* from above with the W table.
        #[arg(long = "with-w")]
        with_w: bool,
    },
    /// Nonexpansivity checks on sampled state pairs.
    Check {
        /// scalar or delta.
        #[arg(long)]
        condition: Option<String>,
        /// squared_euclidean, euclidean, l1 or zero.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        centers: Option<usize>,
        #[arg(long = "reach-m")]
        reach_m: Option<f64>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Greedy shadow control for a second start state.
    Shadow {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        y1: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        y2: Option<Vec<f64>>,
        /// Constant control index applied from y1.
        #[arg(long)]
        control: Option<usize>,
        #[arg(long = "T")]
        horizon: Option<f64>,
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Staged construction of a uniformly good control.
    Synth {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        z: Option<Vec<f64>>,
        #[arg(long)]
        slack: Option<f64>,
    },
    /// Reference values and hypothesis flags against computed ones.
    Report,
    /// Write the problem (and its reference data) as JSON.
    ExportExample,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate { .. } => "validate",
            Command::Value { .. } => "value",
            Command::Aux { .. } => "aux",
            Command::Vstar { .. } => "vstar",
            Command::Check { .. } => "check",
            Command::Shadow { .. } => "shadow",
            Command::Synth { .. } => "synth",
            Command::Report => "report",
            Command::ExportExample => "export-example",
        }
    }

    /// Writes the subcommand's flags into the configuration.
    fn apply(&self, c: &mut RunConfig) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        match self {
            Command::Validate { samples } => set(&mut c.validate.samples, samples),
            Command::Value { horizon, at, full } => {
                set(&mut c.horizon, horizon);
                if at.is_some() {
                    c.value.at = at.clone();
                }
                c.value.full |= *full;
            }
            Command::Aux { z, no_w, n_grid } => {
                if z.is_some() {
                    c.aux.z = z.clone();
                }
                if *no_w {
                    c.aux.compute_w = false;
                }
                set(&mut c.aux.n_grid, n_grid);
            }
            Command::Vstar { z, with_w } => {
                if z.is_some() {
                    c.aux.z = z.clone();
                }
                c.aux.compute_w = *with_w;
            }
            Command::Check {
                condition,
                metric,
                pairs,
                centers,
                reach_m,
                tol,
            } => {
                set(&mut c.check.condition, condition);
                if metric.is_some() {
                    c.check.metric = metric.clone();
                }
                set(&mut c.check.random_pairs, pairs);
                set(&mut c.check.max_centers, centers);
                set(&mut c.check.reach_m, reach_m);
                set(&mut c.check.tolerance, tol);
            }
            Command::Shadow {
                y1,
                y2,
                control,
                horizon,
                metric,
                tol,
            } => {
                if y1.is_some() {
                    c.shadow.y1 = y1.clone();
                }
                if y2.is_some() {
                    c.shadow.y2 = y2.clone();
                }
                set(&mut c.shadow.control, control);
                set(&mut c.shadow.t, horizon);
                if metric.is_some() {
                    c.shadow.metric = metric.clone();
                }
                set(&mut c.shadow.tolerance, tol);
            }
            Command::Synth { alpha, z, slack } => {
                set(&mut c.synth.alpha, alpha);
                if z.is_some() {
                    c.synth.z = z.clone();
                }
                if slack.is_some() {
                    c.synth.slack = *slack;
                }
            }
            Command::Report | Command::ExportExample => {}
        }
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<config::Loaded> {
    let g = &cli.global;
    let mut loaded = config::load(g.example.as_deref(), g.problem.as_deref(), g.config.as_deref())?;
    let c = &mut loaded.config;
    if let Some(v) = &g.out {
        c.out = v.clone();
    }
    if let Some(v) = g.seed {
        c.seed = v;
    }
    if g.threads.is_some() {
        c.threads = g.threads;
    }
    if let Some(v) = &g.cells {
        c.cells_per_axis = v.clone();
    }
    if let Some(v) = g.step {
        c.step = v;
    }
    if let Some(v) = &g.m_grid {
        c.m_grid = v.clone();
    }
    if let Some(v) = &g.t_grid {
        c.t_grid = v.clone();
    }
    if let Some(v) = g.beam_width {
        c.beam_width = v;
    }
    if let Some(v) = g.restarts {
        c.restarts = v;
    }
    cli.command.apply(c);
    Ok(loaded)
}

fn main() -> ExitCode {
    // usage errors exit with 1; 2 is reserved for refutations
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let loaded = match resolve(&cli) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match commands::run(cli.command.name(), loaded) {
        Ok(commands::Outcome::Ok) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Refuted) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
