//! `epigraph`: ingest regional case counts, train graph forecasters, score
//! them against baselines over rolling origins, and roll forecasts forward.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "epigraph", version, about)]
struct Cli {
    /// TOML run configuration. Command-line flags take precedence over it.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// 0 prints errors only, 1 adds summaries, 2 adds per-run details.
    #[arg(long, global = true, env = "EPIGRAPH_VERBOSITY", default_value_t = 1)]
    verbosity: u8,

    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Directory for reports, checkpoints and forecasts.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,

    /// Dataset bundle written by `ingest` [default: <output>/bundle.json].
    #[arg(long, global = true)]
    bundle: Option<PathBuf>,

    /// Base seed; every run derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Forecast horizons in days.
    #[arg(long, global = true, value_delimiter = ',')]
    horizons: Option<Vec<usize>>,

    /// Worker threads for independent trainings; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Model kinds: mpnn, mgnn, mpnn_lstm, atmgnn, lstm.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,

    #[arg(long)]
    max_epochs: Option<usize>,

    #[arg(long)]
    hidden: Option<usize>,

    #[arg(long)]
    window: Option<usize>,
}

#[derive(Debug, Args)]
struct RollingArgs {
    /// Baselines: avg, avg_window, last_day, lin_reg, const_mean.
    #[arg(long, value_delimiter = ',')]
    baselines: Option<Vec<String>>,

    /// Number of rolling forecast origins.
    #[arg(long)]
    origins: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a dataset bundle from a case file and a border edge list.
    Ingest {
        #[arg(long)]
        cases: Option<PathBuf>,
        /// `u,v` border pairs, one per line.
        #[arg(long)]
        adjacency: Option<PathBuf>,
        /// One region label per line, fixing the set and order of regions.
        #[arg(long)]
        regions: Option<PathBuf>,
        /// `region,category,value` indicators.
        #[arg(long, requires = "mapping")]
        economic: Option<PathBuf>,
        /// `health_region,economic_region,mode` with mode sum or avg.
        #[arg(long, requires = "economic")]
        mapping: Option<PathBuf>,
        #[arg(long)]
        start: Option<NaiveDate>,
        #[arg(long)]
        end: Option<NaiveDate>,
    },
    /// Train one checkpoint per model and horizon on all available data.
    Train {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score models and baselines over rolling origins.
    Evaluate {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        rolling: RollingArgs,
        /// Score saved checkpoints from this directory instead of training.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Score the baselines only; no training.
    Baselines {
        #[command(flatten)]
        rolling: RollingArgs,
    },
    /// Roll trained checkpoints forward, feeding back their own forecasts.
    Forecast {
        /// Checkpoint files [default: every checkpoint under <output>/checkpoints].
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Days to forecast [default: 30].
        #[arg(long)]
        steps: Option<usize>,
        /// Reveal true counts this many days late (0 to 9); omit for a free rollout.
        #[arg(long)]
        lag: Option<usize>,
        /// Use only the first this-many bundle days as history; later days feed the lag.
        #[arg(long)]
        seed_days: Option<usize>,
    },
}

impl TrainArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.models, self.models);
        set(&mut cfg.train.max_epochs, self.max_epochs);
        set(&mut cfg.model.hidden, self.hidden);
        set(&mut cfg.model.window, self.window);
    }
}

impl RollingArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.baselines, self.baselines);
        set(&mut cfg.rolling.origins, self.origins);
    }
}

fn set<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let c = cli.common;
    set(&mut cfg.paths.output, c.output);
    set(&mut cfg.paths.bundle, c.bundle);
    set(&mut cfg.seed, c.seed);
    set(&mut cfg.horizons, c.horizons);
    set(&mut cfg.threads, c.threads);
    let out = commands::Printer(cli.verbosity);

    match cli.command {
        Command::Ingest {
            cases,
            adjacency,
            regions,
            economic,
            mapping,
            start,
            end,
        } => {
            set(&mut cfg.paths.cases, cases);
            set(&mut cfg.paths.adjacency, adjacency);
            set(&mut cfg.paths.regions, regions);
            set(&mut cfg.paths.economic, economic);
            set(&mut cfg.paths.mapping, mapping);
            set(&mut cfg.ingest.start, start);
            set(&mut cfg.ingest.end, end);
            commands::ingest(&cfg, out)
        }
        Command::Train { train } => {
            train.apply(&mut cfg);
            commands::train(&cfg, out)
        }
        Command::Evaluate {
            train,
            rolling,
            checkpoints,
        } => {
            train.apply(&mut cfg);
            rolling.apply(&mut cfg);
            commands::evaluate(&cfg, checkpoints.as_deref(), true, out)
        }
        Command::Baselines { rolling } => {
            rolling.apply(&mut cfg);
            commands::evaluate(&cfg, None, false, out)
        }
        Command::Forecast {
            checkpoints,
            steps,
            lag,
            seed_days,
        } => {
            set(&mut cfg.forecast.steps, steps);
            set(&mut cfg.forecast.lag, lag);
            set(&mut cfg.forecast.seed_days, seed_days);
            commands::forecast(&cfg, &checkpoints, out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
