use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rcmsim_cli::check::{run_checks, CheckOptions};
use rcmsim_cli::commands::SimulateOptions;
use rcmsim_cli::{
    analyze, calibrate_pivot, simulate, thread_budget, CliError, PivotSource, THREADS_ENV,
};

#[derive(Parser)]
#[command(
    name = "rcmsim",
    version,
    about = "Virtual-RCM laparoscopic arm simulator and analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the targeting experiment described by a config file.
    Simulate {
        config: PathBuf,
        /// Output directory (defaults to `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-tick traces under <out>/trace.
        #[arg(long)]
        trace: bool,
    },
    /// Compute the statistics report and figure tables for a trials file.
    Analyze {
        trials: PathBuf,
        /// Output directory (defaults to the directory of the trials file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Least-squares pivot calibration from flange poses.
    CalibratePivot {
        #[arg(required_unless_present = "synthesize", conflicts_with = "synthesize")]
        poses: Option<PathBuf>,
        /// Generate a demo dataset: seed and noise RMS in mm.
        #[arg(long, num_args = 2, value_names = ["SEED", "NOISE_MM"])]
        synthesize: Option<Vec<String>>,
        /// Write the poses used to this CSV file.
        #[arg(long)]
        poses_out: Option<PathBuf>,
    },
    /// Run the invariant battery.
    Check {
        #[arg(long)]
        fast: bool,
    },
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Simulate { config, out, trace } => {
            let threads = thread_budget(std::env::var(THREADS_ENV).ok().as_deref())?;
            let result = simulate(
                &config,
                &SimulateOptions {
                    out,
                    trace,
                    threads,
                },
            )?;
            println!(
                "{} records, {} events -> {}",
                result.dataset.records.len(),
                result.dataset.events.len(),
                result.dir.display()
            );
            for entry in &result.manifest.outputs {
                println!("  {} sha256 {}", entry.file, entry.sha256);
            }
        }
        Command::Analyze { trials, out } => {
            let (report, written) = analyze(&trials, out.as_deref())?;
            for row in &report.summary {
                let mean = |m: &Option<rcmsim_core::report::MeanSd>| {
                    m.as_ref()
                        .map_or("n/a".to_string(), |m| format!("{:.2}", m.mean))
                };
                println!(
                    "{:<8} error {} mm, time {} s",
                    row.condition.as_str(),
                    mean(&row.error_mm),
                    mean(&row.time_s)
                );
            }
            for t in &report.tests {
                match (&t.result, &t.skipped) {
                    (Some(r), _) => {
                        println!("{:<22} p = {:.3e}  ({})", t.name, r.p_value, t.subject)
                    }
                    (None, Some(reason)) => {
                        println!("{:<22} skipped: {reason}  ({})", t.name, t.subject)
                    }
                    (None, None) => {}
                }
            }
            println!("wrote {} files", written.len());
        }
        Command::CalibratePivot {
            poses,
            synthesize,
            poses_out,
        } => {
            let source = match (poses, synthesize) {
                (Some(path), None) => PivotSource::File(path),
                (None, Some(args)) => {
                    let seed = args[0]
                        .parse()
                        .map_err(|_| CliError::Usage(format!("invalid seed {:?}", args[0])))?;
                    let noise_mm = args[1]
                        .parse()
                        .map_err(|_| CliError::Usage(format!("invalid noise {:?}", args[1])))?;
                    PivotSource::Synthesize { seed, noise_mm }
                }
                _ => return Err(CliError::Usage("give a poses file or --synthesize".into())),
            };
            print!(
                "{}",
                calibrate_pivot(&source, poses_out.as_deref())?.render()
            );
        }
        Command::Check { fast } => {
            let results = run_checks(&CheckOptions::new(fast));
            for r in &results {
                println!("{r}");
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
