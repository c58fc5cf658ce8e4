use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use marlcomm_core::config::ExperimentConfig;
use marlcomm_core::harness::{self, OUTPUT_ROOT_ENV, SUITES};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "marlcomm", version, about = "Train and evaluate communicating agents over a simulated wireless channel")]
#[command(after_help = format!("Relative run.output_dir paths are resolved under ${OUTPUT_ROOT_ENV} when it is set."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every seed of a configuration and write metrics, checkpoints and a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `section.key=value`, value parsed as TOML (bare words become strings).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue a single seed from a checkpoint, appending to its metrics.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
        /// Seed to resume; defaults to the only seed of the config.
        #[arg(long, requires = "resume")]
        seed: Option<u64>,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2000)]
        episodes: usize,
        /// Seed of the evaluation episode stream.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a named experiment suite and write comparison.csv.
    Suite {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
        name: String,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// List the tensors stored in a checkpoint.
    InspectCheckpoint { path: PathBuf },
    /// Parse and validate a configuration, printing the resolved form.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn load(config: &std::path::Path, overrides: &[String]) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(config, overrides)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            resume,
            seed,
        } => {
            let cfg = load(&config, &overrides)?;
            match resume {
                Some(ckpt) => {
                    let seed = match (seed, cfg.run.seeds.as_slice()) {
                        (Some(s), _) => s,
                        (None, [s]) => *s,
                        (None, _) => bail!("--resume with several configured seeds needs --seed"),
                    };
                    let dir = harness::resolve_output_dir(&cfg.run)
                        .join(&cfg.run.name)
                        .join(format!("seed_{seed}"));
                    let out = harness::train_seed(&cfg, seed, &dir, Some(&ckpt))
                        .with_context(|| format!("resuming seed {seed} from {}", ckpt.display()))?;
                    println!("{}", serde_json::to_string_pretty(&out.final_eval)?);
                }
                None => {
                    let out = harness::train(&cfg)?;
                    let s = &out.summary;
                    println!(
                        "{}: steps {:.2} ± {:.2}, reward {:.3} ± {:.3}, alpha {:.3} ± {:.3} over {} seed(s)",
                        s.name,
                        s.steps.mean,
                        s.steps.std,
                        s.reward.mean,
                        s.reward.std,
                        s.alpha.mean,
                        s.alpha.std,
                        s.seeds.len()
                    );
                    println!("outputs in {}", out.dir.display());
                }
            }
        }
        Command::Eval {
            config,
            checkpoint,
            episodes,
            seed,
            overrides,
        } => {
            let cfg = load(&config, &overrides)?;
            let summary = harness::evaluate_checkpoint(&cfg, &checkpoint, episodes, seed)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Suite { name, overrides } => {
            let report = harness::run_suite(&name, &overrides)?;
            print!("{}", std::fs::read_to_string(&report.csv_path)?);
            println!("comparison table: {}", report.csv_path.display());
        }
        Command::InspectCheckpoint { path } => {
            let entries = harness::inspect_checkpoint(&path)?;
            let scalars: usize = entries.iter().map(|e| e.shape[0] * e.shape[1]).sum();
            for e in &entries {
                println!("{:<48} {:>4} x {:<4} [{:.4}, {:.4}]", e.name, e.shape[0], e.shape[1], e.min, e.max);
            }
            println!("{} tensors, {scalars} values", entries.len());
        }
        Command::ValidateConfig { config, overrides } => {
            let cfg = load(&config, &overrides)?;
            print!("{}", cfg.to_toml()?);
            eprintln!("config ok, hash {}", cfg.hash());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let is_config = err
                .chain()
                .any(|c| c.downcast_ref::<marlcomm_core::Error>().is_some_and(|e| e.is_config()));
            ExitCode::from(if is_config { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
