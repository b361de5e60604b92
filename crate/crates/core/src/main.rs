//! Command-line entry point: run scenario scripts, fuzz the bridge, or run
//! the built-in demo.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gcbridge::scenario::{self, ExecOptions, FuzzConfig};

#[derive(Parser)]
#[command(
    name = "gcbridge",
    about = "Deterministic refcount/tracing GC bridge simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario script.
    Run {
        /// Path to the scenario file.
        file: PathBuf,
        /// Enable the native reference monitor (also via GCBRIDGE_MEM_DEBUG=1).
        #[arg(long)]
        mem_debug: bool,
        /// Output format.
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Run a seeded fuzz campaign with oracle checking.
    Fuzz {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        steps: u64,
        /// Disable unreported (silent) graph mutations.
        #[arg(long)]
        no_silent: bool,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Print and run the built-in demonstration script.
    Demo,
}

fn mem_debug_env() -> bool {
    std::env::var("GCBRIDGE_MEM_DEBUG")
        .map(|v| v == "1" || v.eq_ignore_ascii_case("true"))
        .unwrap_or(false)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Run {
            file,
            mem_debug,
            format,
        } => {
            let text = match std::fs::read_to_string(&file) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", file.display());
                    return ExitCode::FAILURE;
                }
            };
            let name = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "script".into());
            let options = ExecOptions {
                script_name: name,
                mem_debug: mem_debug || mem_debug_env(),
                audit: true,
            };
            let report = match scenario::run_script(&text, options) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("parse error: {e}");
                    return ExitCode::FAILURE;
                }
            };
            match format {
                Format::Text => {
                    print!("{}", report.output);
                    if let Some(f) = &report.failure {
                        eprintln!("error: {f}");
                    }
                }
                Format::Json => {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&report).expect("report serializes")
                    );
                }
            }
            if report.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Cmd::Fuzz {
            seed,
            steps,
            no_silent,
            format,
        } => {
            let mut cfg = FuzzConfig::new(seed, steps);
            cfg.silent_enabled = !no_silent;
            let report = scenario::fuzz(&cfg);
            match format {
                Format::Text => {
                    println!(
                        "seed {}: {} commands, {} GC cycles, {} objects freed, {} leaks at end",
                        report.seed,
                        report.commands_run,
                        report.gc_cycles,
                        report.objects_freed,
                        report.final_leaks
                    );
                    if let Some(v) = &report.violation {
                        println!("VIOLATION {:?} at step {}: {}", v.kind, v.step, v.detail);
                        println!("reproduction script:\n{}", v.script);
                    } else {
                        println!("no violations");
                    }
                }
                Format::Json => {
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&report).expect("report serializes")
                    );
                }
            }
            if report.violation.is_none() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Cmd::Demo => {
            println!("# --- demo script ---");
            print!("{}", scenario::DEMO_SCRIPT);
            println!("# --- output ---");
            let options = ExecOptions {
                script_name: "demo".into(),
                mem_debug: true,
                audit: true,
            };
            let report =
                scenario::run_script(scenario::DEMO_SCRIPT, options).expect("built-in demo parses");
            print!("{}", report.output);
            if let Some(f) = &report.failure {
                eprintln!("error: {f}");
                return ExitCode::FAILURE;
            }
            ExitCode::SUCCESS
        }
    }
}
