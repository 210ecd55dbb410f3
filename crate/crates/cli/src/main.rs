use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use roadblock_cli::{run_compare, run_eval, run_train, Algo, CliError, EvalRequest, Overrides, RunConfig};
use roadblock_core::env::Scenario;

/// Multi-agent roadblock avoidance: train, evaluate and compare learners.
#[derive(Debug, Parser)]
#[command(name = "roadblock", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train MADDPG or DQN; writes config.json, episodes.csv and checkpoint.json.
    Train {
        /// JSON run config; defaults are used for anything it omits.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        scenario: Option<Scenario>,
        #[arg(long)]
        algo: Option<Algo>,
        /// Output directory (default: $ROADBLOCK_OUT/<run name> or runs/<run name>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy rollouts of a saved checkpoint; writes an eval CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        agents: usize,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: Option<u64>,
        /// Run config supplying environment settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV path (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train both algorithms per seed under one budget; writes compare.csv and plot_data.json.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        scenario: Option<Scenario>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    path.map_or_else(|| Ok(RunConfig::default()), |p| RunConfig::load(p))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            episodes,
            steps,
            agents,
            seed,
            scenario,
            algo,
            out,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            cfg.apply(&Overrides {
                episodes,
                steps,
                agents,
                seed: Some(seed),
                scenario,
                algo,
                out,
            });
            let report = run_train(&cfg)?;
            println!("{}", report.summary_line(&cfg));
        }
        Command::Eval {
            checkpoint,
            agents,
            episodes,
            seed,
            steps,
            config,
            out,
        } => {
            let config = config.as_deref().map(RunConfig::load).transpose()?;
            let report = run_eval(&EvalRequest {
                checkpoint,
                n_agents: agents,
                episodes,
                seed,
                steps,
                config,
                out,
            })?;
            let speeds: Vec<f64> = report.logs.iter().map(|l| l.harmonic_speed_mean).collect();
            let rewards: Vec<f64> = report.logs.iter().map(|l| l.mean_reward).collect();
            println!(
                "eval checkpoint={} agents={agents} episodes={} mean_reward={:.3} harmonic_speed={:.3} csv={}",
                report.checkpoint_id,
                report.logs.len(),
                roadblock_core::train::mean(&rewards),
                roadblock_core::train::mean(&speeds),
                report.csv_path.display()
            );
        }
        Command::Compare {
            config,
            seeds,
            episodes,
            steps,
            agents,
            scenario,
            out,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            cfg.apply(&Overrides {
                episodes,
                steps,
                agents,
                scenario,
                out,
                ..Default::default()
            });
            let report = run_compare(&cfg, &seeds)?;
            for row in &report.rows {
                println!(
                    "seed={} algo={} first20={:.3} final20={:.3}",
                    row.seed, row.algo, row.first20_mean_reward, row.final20_mean_reward
                );
            }
            println!(
                "maddpg >= dqn on {}/{} seeds; out={}",
                report.maddpg_wins,
                seeds.len(),
                report.out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
