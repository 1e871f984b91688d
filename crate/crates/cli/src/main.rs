use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rfa_core::aggregation::{AggregatorSpec, Estimator, Method, Weighting};
use rfa_core::sim::{
    aggregate_file, bound_experiment, run_experiment, sweep, write_bound, write_metrics, write_sweep, BoundConfig,
    ExperimentConfig, SweepGrid,
};

#[derive(Parser)]
#[command(name = "rfa", version, about = "Robust federated aggregation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write per-round metrics as CSV.
    Run {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV; defaults to the config's `output`, then stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the config over a lambda x delta x attacker-count grid.
    Sweep {
        config: PathBuf,
        #[arg(long = "lambda", value_delimiter = ',')]
        lambdas: Vec<f64>,
        #[arg(long = "delta", value_delimiter = ',')]
        deltas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        attackers: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate the rows of an update file into a one-row update file.
    Aggregate(AggregateArgs),
    /// Median error of the single-parameter estimator over an (S, K) grid.
    Bound {
        #[arg(long = "S", value_delimiter = ',', default_values_t = [100, 400, 1600])]
        samples: Vec<usize>,
        #[arg(long = "K", value_delimiter = ',', default_values_t = [10, 20, 40])]
        devices: Vec<usize>,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Value reported by every corrupted device.
        #[arg(long, default_value_t = 1e3)]
        adversarial: f64,
        #[arg(long, default_value_t = 2.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    estimator: Option<Estimator>,
    #[arg(long)]
    weighting: Option<Weighting>,
    #[arg(long)]
    trim: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

impl AggregateArgs {
    fn spec(&self) -> AggregatorSpec {
        let mut spec = AggregatorSpec::with_method(self.method);
        if let Some(v) = self.lambda {
            spec.lambda = v;
        }
        if let Some(v) = self.delta {
            spec.delta = v;
        }
        if let Some(v) = self.gamma {
            spec.gamma = v;
        }
        if let Some(v) = self.estimator {
            spec.estimator = v;
        }
        if let Some(v) = self.weighting {
            spec.weighting = v;
        }
        if let Some(v) = self.trim {
            spec.trim_fraction = v;
        }
        spec
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            repeat,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let rows = run_experiment(&cfg, repeat, config.parent())?;
            let target = out.or_else(|| cfg.output.clone());
            write_metrics(open_output(target.as_deref())?, &rows)?;
        }
        Command::Sweep {
            config,
            lambdas,
            deltas,
            attackers,
            repeat,
            out,
        } => {
            let cfg = load_config(&config)?;
            let grid = SweepGrid {
                lambdas,
                deltas,
                attackers,
            };
            let rows = sweep(&cfg, &grid, repeat, config.parent())?;
            write_sweep(open_output(out.as_deref())?, &rows)?;
        }
        Command::Aggregate(args) => {
            let agg = aggregate_file(&args.input, &args.spec(), &args.out)?;
            if let Some(report) = agg.report {
                let weights: Vec<String> = report.normalized_weights.iter().map(f64::to_string).collect();
                println!("normalized_weights: {}", weights.join(","));
            }
        }
        Command::Bound {
            samples,
            devices,
            alpha,
            trials,
            seed,
            adversarial,
            lambda,
            delta,
            out,
        } => {
            if !(0.0..0.5).contains(&alpha) {
                bail!("alpha must lie in [0, 0.5), got {alpha}");
            }
            let cfg = BoundConfig {
                samples,
                devices,
                alpha,
                trials,
                seed,
                adversarial_value: adversarial,
                lambda,
                delta,
                ..BoundConfig::default()
            };
            write_bound(open_output(out.as_deref())?, &bound_experiment(&cfg)?)?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
