use std::path::PathBuf;
use std::process::ExitCode;

use agmarl_cli::*;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agmarl", version, about = "Stress-aware multi-agent pod placement: train, evaluate, serve, report")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train agents on the simulated cluster and write weights plus a log CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Weights file; defaults to `<output_dir>/weights.agmw`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario with the learned policy and the spreading baseline.
    Evaluate {
        #[arg(long)]
        scenario: u32,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run seeds `seed..seed+N`, one summary per seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        outdir: Option<PathBuf>,
        /// Simulated seconds per wall-clock second; unpaced when omitted.
        #[arg(long)]
        time_scale: Option<f64>,
    },
    /// Serve the scheduler-extender endpoints.
    Serve {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = agmarl_extender::DEFAULT_PORT)]
        port: u16,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Re-analyse stored frames and print mean ± stdev per scalar.
    Report {
        #[arg(long)]
        outdir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::Train { config, seed, out } => {
            let cfg = GlobalConfig::load_or_default(config.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("weights.agmw"));
            let log = cmd_train(&cfg, seed, &out)?;
            if let Some(last) = log.last() {
                println!("trained {} episodes, final mean reward {:.4}, weights {}", log.len(), last.mean_reward, out.display());
            }
            Ok(())
        }
        Command::Evaluate { scenario, weights, config, seed, seeds, outdir, time_scale } => {
            if !(1..=2).contains(&scenario) {
                return Err(CliError::Usage(format!("scenario must be 1 or 2, got {scenario}")));
            }
            let cfg = GlobalConfig::load_or_default(config.as_deref())?;
            let outdir = outdir.unwrap_or_else(|| cfg.output_dir.clone());
            let args = EvaluateArgs { scenario, weights: &weights, seed, seeds, outdir: &outdir, time_scale };
            for s in cmd_evaluate(&cfg, &args)? {
                println!(
                    "{} seed {}: packing {:.4} vs {:.4}, max restarts/node {} vs {}, cost {:.2} vs {:.2}",
                    s.scenario, s.seed, s.agmarl.packing_index, s.baseline.packing_index, s.agmarl.max_restarts_per_node, s.baseline.max_restarts_per_node, s.agmarl.total_cost, s.baseline.total_cost
                );
            }
            Ok(())
        }
        Command::Serve { weights, port, config } => {
            let cfg = GlobalConfig::load_or_default(config.as_deref())?;
            cmd_serve(&cfg, &weights, port)
        }
        Command::Report { outdir } => {
            let r = cmd_report(&outdir)?;
            print!("{}", format_report(&r));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AGMARL_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 64 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("agmarl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
