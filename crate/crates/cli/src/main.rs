use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cliptta::gradcheck::Fault;
use cliptta_cli::commands::{self, GradcheckArgs, SimulateArgs};
use cliptta_cli::run::load_config;
use cliptta_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "cliptta", version, about = "Test-time adaptation laboratory on a surrogate vision-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "cliptta-out")]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        load_config(self.config.as_deref(), self.seed, &self.set)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    /// Flip the sign of the regularizer gradient.
    Reg,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt over a generated stream and write per-batch metrics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write the final memory contents.
        #[arg(long)]
        dump_memory: bool,
        /// Run this many consecutive seeds and report mean and 95% half-width.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Write the generated stream to this CSV.
        #[arg(long)]
        export_stream: Option<PathBuf>,
        /// Adapt on a previously exported stream instead of generating one.
        #[arg(long)]
        import_stream: Option<PathBuf>,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        max_n: usize,
        #[arg(long, default_value_t = 10)]
        max_c: usize,
        /// Corrupt one analytic gradient to confirm the check catches it.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
        /// Also write gradcheck.csv into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired TENT and CLIPTTA runs plus the toy gradient-direction table.
    CollapseDemo {
        #[command(flatten)]
        common: Common,
    },
    /// Open-set runs with and without the OCE term.
    Openset {
        #[command(flatten)]
        common: Common,
    },
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Simulate { common, dump_memory, seeds, export_stream, import_stream } => {
            let config = common.load()?;
            commands::simulate(&SimulateArgs { config, out: common.out, dump_memory, seeds, export_stream, import_stream })
        }
        Command::Gradcheck { configs, seed, max_n, max_c, inject_fault, out } => {
            let fault = inject_fault.map(|FaultArg::Reg| Fault::FlipRegSign);
            let (table, report) = commands::gradcheck(&GradcheckArgs { configs, seed, max_n, max_c, fault, out })?;
            print!("{table}");
            commands::gradcheck_verdict(&report)?;
            Ok(format!("gradcheck passed: {} losses within tolerance", report.losses.len()))
        }
        Command::CollapseDemo { common } => commands::collapse_demo(&common.load()?, &common.out),
        Command::Openset { common } => commands::openset(&common.load()?, &common.out),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
