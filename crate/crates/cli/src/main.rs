use std::path::{Path, PathBuf};
use std::process::ExitCode;

use andna_core::scenario::{parse_scenario, render_log, run_scenario};
use andna_core::{parse_snsd_nodes, ServiceTable, SimConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "andna", version, about = "Run ANDNA scenarios in the network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and print the event log.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seconds per message hop.
        #[arg(long, default_value_t = 1)]
        link_delay: u64,
        /// Seconds between expiry sweeps.
        #[arg(long, default_value_t = 86_400)]
        sweep_interval: u64,
        /// Exit 1 if any operation was rejected.
        #[arg(long)]
        strict: bool,
        /// Log every delivered message.
        #[arg(long)]
        trace: bool,
    },
    /// Check an snsd_nodes file and report each line.
    SnsdCheck { file: PathBuf },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { scenario, seed, link_delay, sweep_interval, strict, trace } => {
            let cfg = SimConfig { seed, link_delay, sweep_interval, trace, ..SimConfig::default() };
            run(&scenario, cfg, strict)
        }
        Command::SnsdCheck { file } => snsd_check(&file),
    }
}

fn run(path: &Path, cfg: SimConfig, strict: bool) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    let commands = match parse_scenario(&text, &ServiceTable::builtin()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let (sim, report) = run_scenario(&commands, cfg, base);
    print!("{}", render_log(sim.log()));
    if report.command_errors > 0 {
        eprintln!("{} command(s) failed", report.command_errors);
        return ExitCode::from(1);
    }
    if strict && report.rejections > 0 {
        eprintln!("{} operation(s) rejected", report.rejections);
        return ExitCode::from(1);
    }
    ExitCode::SUCCESS
}

fn snsd_check(path: &Path) -> ExitCode {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("{}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    let parsed = parse_snsd_nodes(&bytes, &ServiceTable::builtin());
    let mut rows: Vec<(usize, String)> = parsed
        .lines
        .iter()
        .map(|(n, l)| (*n, format!("line {n}: ok {l}")))
        .chain(parsed.diagnostics.iter().map(|d| (d.line, d.to_string())))
        .collect();
    rows.sort_by_key(|(n, _)| *n);
    for (_, row) in &rows {
        println!("{row}");
    }
    println!("{} accepted, {} rejected", parsed.lines.len(), parsed.diagnostics.len());
    if parsed.diagnostics.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
