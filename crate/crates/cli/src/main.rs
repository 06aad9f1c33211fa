use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use optochaos_cli::config::Command;
use optochaos_cli::{exit, init_threads, load_config, run_config};

/// Semi-classical and quantum simulations of the driven optomechanical system.
#[derive(Parser)]
#[command(name = "optochaos", version)]
struct Cli {
    command: Command,
    /// Config file (TOML, JSON, or a previous CSV output).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set params.pump=1.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Also write a gnuplot script next to the data.
    #[arg(long)]
    emit_plots: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(exit::CONFIG as u8);
    }
    let result = load_config(cli.command, &cli.config, &cli.set)
        .and_then(|cfg| run_config(cli.command, cfg, &cli.set, cli.emit_plots));
    match result {
        Ok(report) => {
            for f in &report.files {
                println!("{}", f.display());
            }
            if report.exit_code != exit::OK {
                eprintln!("{}", report.outcome.status());
                for f in &report.outcome.failures {
                    eprintln!("  {f}");
                }
            }
            ExitCode::from(report.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
