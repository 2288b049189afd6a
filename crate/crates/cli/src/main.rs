use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mlcl_cli::{cmd_compare, cmd_generate_data, cmd_metrics, cmd_run, CliResult};
use mlcl_core::CbtRow;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  configuration error (bad flags, unknown override key, invalid or out-of-range config)
  3  data error (missing or unreadable file, malformed JSONL/CSV, unknown label)
  4  numeric abort (non-finite loss or weights during training)";

/// Continual-learning experiments over shifting task streams.
#[derive(Parser)]
#[command(name = "mlcl", version, after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    #[command(after_help = EXIT_CODES)]
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value by dotted path, e.g. `strategy.kind=ewc`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (default: `output_dir` from the config, else `results/<method>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic stream as JSONL text plus a label file.
    #[command(name = "generate-data", after_help = EXIT_CODES)]
    GenerateData {
        /// Synthetic stream config, bare or inside an experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Directory receiving `data.jsonl` and `labels.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute CFT/CBT from a stored score matrix and print them as JSON.
    #[command(after_help = EXIT_CODES)]
    Metrics {
        #[arg(long = "r", value_name = "CSV")]
        r: PathBuf,
        #[arg(long, value_enum, default_value_t = RowArg::Final)]
        cbt_row: RowArg,
    },
    /// Tabulate CFT/CBT of several runs; the best value per column is starred.
    #[command(after_help = EXIT_CODES)]
    Compare {
        #[arg(required = true, value_name = "RESULT_JSON")]
        results: Vec<PathBuf>,
        /// Emit CSV instead of an aligned text table.
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RowArg {
    Final,
    TMinus1,
}

impl From<RowArg> for CbtRow {
    fn from(r: RowArg) -> Self {
        match r {
            RowArg::Final => CbtRow::Final,
            RowArg::TMinus1 => CbtRow::TMinus1,
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Run { config, overrides, out } => {
            let dir = cmd_run(&config, &overrides, out.as_deref())?;
            eprintln!("wrote {}", dir.display());
        }
        Command::GenerateData { config, out } => {
            let (data, labels) = cmd_generate_data(&config, &out)?;
            eprintln!("wrote {} and {}", data.display(), labels.display());
        }
        Command::Metrics { r, cbt_row } => {
            println!("{}", cmd_metrics(&r, cbt_row.into())?);
        }
        Command::Compare { results, csv } => {
            print!("{}", cmd_compare(&results, csv)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
