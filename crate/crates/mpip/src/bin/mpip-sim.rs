//! Command line front end: run a scenario (canned or from a file), check
//! one for errors, or list what ships built in.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mpip::scenario::{self, Scenario};
use mpip::World;

#[derive(Parser)]
#[command(name = "mpip-sim", about = "deterministic multipath network simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write metrics.csv, events.csv and summary.txt
    Run {
        /// canned scenario name or path to a scenario file
        scenario: String,
        /// override the seed baked into the scenario
        #[arg(long)]
        seed: Option<u64>,
        /// output directory, created if missing
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Parse a scenario file and report the first error, if any
    Validate { file: PathBuf },
    /// List the canned scenarios
    ListScenarios,
}

fn load(name: &str) -> Result<Scenario, String> {
    if let Some(text) = scenario::canned_text(name) {
        return scenario::parse(text).map_err(|e| format!("canned scenario {name}: {e}"));
    }
    let text = fs::read_to_string(name).map_err(|e| format!("{name}: {e}"))?;
    scenario::parse(&text).map_err(|e| format!("{name}: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { scenario, seed, out } => {
            let scn = match load(&scenario) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            };
            let seed = seed.unwrap_or(scn.seed);
            let log = World::new(&scn, seed).run();
            if let Err(e) = fs::create_dir_all(&out) {
                eprintln!("error: {}: {e}", out.display());
                return ExitCode::FAILURE;
            }
            let writes = [
                ("metrics.csv", log.to_metrics_csv()),
                ("events.csv", log.to_events_csv()),
                ("summary.txt", log.to_summary_text()),
            ];
            for (name, body) in writes {
                let path = out.join(name);
                if let Err(e) = fs::write(&path, body) {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::FAILURE;
                }
            }
            println!("{}", log.to_summary_text());
            println!("wrote metrics.csv, events.csv, summary.txt under {}", out.display());
            ExitCode::SUCCESS
        }
        Cmd::Validate { file } => match fs::read_to_string(&file) {
            Err(e) => {
                eprintln!("error: {}: {e}", file.display());
                ExitCode::FAILURE
            }
            Ok(text) => match scenario::parse(&text) {
                Ok(s) => {
                    println!(
                        "ok: {} nodes, {} links, {} sessions, {} ms",
                        s.nodes.len(),
                        s.links.len(),
                        s.sessions.len(),
                        s.duration_ms
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            },
        },
        Cmd::ListScenarios => {
            for (name, _) in scenario::canned() {
                println!("{name}");
            }
            ExitCode::SUCCESS
        }
    }
}
