use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pbtrack::{out_dir, preset, run_props, run_scenario_file, run_scenario_source, CliError, RunOutcome, PRESETS};
use pbtrack_core::props::PropertyConfig;
use pbtrack_core::Execution;

#[derive(Parser)]
#[command(name = "pbtrack", version, about = "Passivity-based PI tracking control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        /// Output directory [default: $PBTRACK_OUT/<file stem> or pbtrack-out/<file stem>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a bundled scenario.
    Preset {
        /// Preset name; omit to list the available presets.
        name: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the preset file instead of running it.
        #[arg(long)]
        print: bool,
    },
    /// Randomized dissipation / Lyapunov / convergence property suite.
    Props {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Writes props.json here when given.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the cases on the calling thread only.
        #[arg(long)]
        sequential: bool,
    },
}

fn report_run(outcome: &RunOutcome, dir: &std::path::Path) {
    let s = &outcome.summary;
    println!("plant {}  steps {}  runtime {:.2} s", s.plant, s.integration_steps, s.runtime_s);
    match serde_json::to_string_pretty(&s.metrics) {
        Ok(m) => println!("{m}"),
        Err(e) => eprintln!("cannot render metrics: {e}"),
    }
    println!("artifacts written to {}", dir.display());
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { scenario, out } => {
            let stem = scenario.file_stem().map_or("scenario".into(), |s| s.to_string_lossy().into_owned());
            let dir = out_dir(out.as_deref(), &stem);
            let outcome = run_scenario_file(&scenario, &dir)?;
            report_run(&outcome, &dir);
        }
        Command::Preset { name: None, .. } => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
        }
        Command::Preset {
            name: Some(name),
            out,
            print,
        } => {
            let src = preset(&name)?;
            if print {
                print!("{src}");
                return Ok(());
            }
            let dir = out_dir(out.as_deref(), &name);
            let outcome = run_scenario_source(src, &format!("preset:{name}"), &dir)?;
            report_run(&outcome, &dir);
        }
        Command::Props {
            seed,
            count,
            out,
            sequential,
        } => {
            let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
            let report = run_props(&PropertyConfig::new(seed, count), exec, out.as_deref())?;
            println!(
                "cases {}  dissipation violations {}  lyapunov violations {}  convergence failures {}  errors {}",
                count, report.dissipation_failures, report.lyapunov_failures, report.convergence_failures, report.errors
            );
            println!(
                "rank test passed on {} cases; broken-certificate control flagged: {}",
                report.rank_full_cases, report.negative_control.flagged
            );
            if !report.passed() {
                return Err(CliError::Numeric("property suite failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
