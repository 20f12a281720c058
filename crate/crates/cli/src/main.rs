//! Command-line entry point: train experiments, verify operator identities,
//! replay saved policies, and dump effective configs.
//!
//! Exit codes: 0 success, 2 bad configuration or usage, 3 numerical failure
//! (contraction violation or an identity residual above threshold).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use powr_core::harness::{self, path_equivalence_discrepancy};
use powr_core::model_io;
use powr_core::oracle;
use powr_core::Error;

#[derive(Parser)]
#[command(name = "powr", version, about = "Policy mirror descent on an operator world model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path override, e.g. --override kernel.sigma=0.2 (repeatable).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run only this seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Parallel seed jobs (defaults to the number of cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory (overrides the config's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Numerically verify the operator identities and print max residuals.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random MDP instances.
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Replay a saved policy and report evaluation returns.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the effective config after applying overrides.
    DumpConfig {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) | Error::InvalidArgument(_) | Error::Io(_) => ExitCode::from(2),
                Error::Numerical(_) | Error::ContractionViolation { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    raw.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not of the form key=value")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train { config, overrides, seed, jobs, out } => {
            let overrides = parse_overrides(&overrides)?;
            let mut cfg = harness::load_config(&config, &overrides)?;
            if let Some(seed) = seed {
                cfg.seeds = vec![seed];
            }
            if let Some(out) = out {
                cfg.out = Some(out.display().to_string());
            }
            let runs = match jobs {
                Some(jobs) => {
                    let pool = rayon::ThreadPoolBuilder::new()
                        .num_threads(jobs.max(1))
                        .build()
                        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
                    pool.install(|| harness::run_all(&cfg))?
                }
                None => harness::run_all(&cfg)?,
            };
            for run in &runs {
                let last = run.curve.points.last().expect("at least one round");
                println!(
                    "seed {}: timesteps {} mean {:.4} min {:.4} max {:.4}",
                    run.seed, last.timesteps, last.mean, last.min, last.max
                );
                if cli.verbose > 0 {
                    for p in &run.curve.points {
                        println!(
                            "  t={} mean={:.4} min={:.4} max={:.4} wall={:.1}s",
                            p.timesteps, p.mean, p.min, p.max, p.wall_s
                        );
                    }
                }
            }
            if let Some(dir) = &cfg.out {
                harness::write_outputs(std::path::Path::new(dir), &runs)?;
                println!("wrote outputs to {dir}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { seed, instances } => {
            const THRESHOLD: f64 = 1e-10;
            let report = oracle::identity_suite(seed, instances)?;
            let path = path_equivalence_discrepancy(50)?;
            let rows = [
                ("performance-difference", report.performance_difference),
                ("simulation (transfer)", report.simulation_plain),
                ("simulation (transfer+reward)", report.simulation_reward),
                ("inverse swap", report.inverse_swap),
                ("markov row sums", report.markov_rows),
                ("markov monotonicity", report.markov_monotone),
                ("update-path equivalence", path),
            ];
            println!("identity residuals over {instances} random MDPs (seed {seed}):");
            let mut ok = true;
            for (name, value) in rows {
                let pass = value < THRESHOLD;
                ok &= pass;
                println!("  {name:<30} {value:.3e}  {}", if pass { "ok" } else { "FAIL" });
            }
            if ok {
                println!("all residuals below {THRESHOLD:.0e}");
                Ok(ExitCode::SUCCESS)
            } else {
                Err(Error::Numerical("identity residuals above threshold".into()))
            }
        }
        Command::Eval { policy, episodes, seed } => {
            let artifact = model_io::load_policy(&policy)?;
            let env = powr_core::env::by_id(&artifact.env_id)?;
            let policy_fn =
                |x: &powr_core::env::State| artifact.probs(x).expect("policy evaluation");
            let (mean, min, max) = harness::evaluate(&policy_fn, env.as_ref(), episodes, seed)?;
            println!(
                "env {} episodes {episodes} seed {seed}: mean {mean:.4} min {min:.4} max {max:.4}",
                artifact.env_id
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpConfig { config, overrides } => {
            let overrides = parse_overrides(&overrides)?;
            let cfg = harness::load_config(&config, &overrides)?;
            let text = toml::to_string_pretty(&cfg)
                .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
