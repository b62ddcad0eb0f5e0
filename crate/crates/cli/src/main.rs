use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dssync::analysis::CostModel;
use dssync::comm::Topology;
use dssync_cli::check::{cmd_check, CheckName};
use dssync_cli::run::cmd_run;
use dssync_cli::scale::cmd_scale;
use dssync_cli::CliError;

#[derive(Parser)]
#[command(name = "dssync", version, about = "Divide-and-shuffle synchronization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    Ring,
    Tree,
    Ps,
}

impl From<TopologyArg> for Topology {
    fn from(t: TopologyArg) -> Self {
        match t {
            TopologyArg::Ring => Topology::Ring,
            TopologyArg::Tree => Topology::Tree,
            TopologyArg::Ps => Topology::Ps,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckArg {
    Variance,
    Divergence,
    Theorem,
    Mixing,
    Eq2,
    BspEquiv,
}

impl From<CheckArg> for CheckName {
    fn from(c: CheckArg) -> Self {
        match c {
            CheckArg::Variance => CheckName::Variance,
            CheckArg::Divergence => CheckName::Divergence,
            CheckArg::Theorem => CheckName::Theorem,
            CheckArg::Mixing => CheckName::Mixing,
            CheckArg::Eq2 => CheckName::Eq2,
            CheckArg::BspEquiv => CheckName::BspEquiv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write metrics plus a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Print synchronization scale and simulated cost.
    Scale {
        #[arg(long, value_enum)]
        topology: TopologyArg,
        #[arg(long)]
        world: usize,
        #[arg(long)]
        ds: bool,
        #[arg(long)]
        compare: bool,
        #[arg(long, default_value_t = 1.0)]
        data_size: f64,
        #[arg(long, default_value_t = 1.0)]
        bandwidth: f64,
        #[arg(long, default_value_t = 1)]
        servers: usize,
    },
    /// Run an analysis check and print its report.
    Check {
        #[arg(value_enum)]
        name: CheckArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

/// Stdout writes ignore a closed pipe (e.g. output piped into `head`).
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<T: serde::Serialize>(value: &T) {
    emit(&format!("{}\n", serde_json::to_string_pretty(value).expect("report serializes")));
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, out, parallel } => {
            let outcome = cmd_run(&config, out.as_deref(), parallel)?;
            emit(&format!(
                "wrote {} metrics files and summary.json to {}\n",
                outcome.summary.seeds.len(),
                outcome.dir.display()
            ));
        }
        Command::Scale {
            topology,
            world,
            ds,
            compare,
            data_size,
            bandwidth,
            servers,
        } => {
            let cost = CostModel {
                data_size,
                bandwidth,
                servers,
            };
            emit(&cmd_scale(topology.into(), world, ds, compare, &cost)?);
        }
        Command::Check { name, config, parallel } => {
            let report = cmd_check(name.into(), &config, parallel)?;
            print_json(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { 1 } else { 0 };
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let CliError::CheckFailed(report) = &e {
                print_json(report);
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
