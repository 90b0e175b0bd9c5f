use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use execgate::harness::{self, CliResult};
use execgate::metrics::{Format, GroupKey};
use execgate::sim::GatingMode;

/// Seeded simulation of reliability-gated single-step visual alignment.
#[derive(Parser)]
#[command(name = "execgate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaKind {
    Config,
    Report,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured grid and write an NDJSON record file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated gating modes to run.
        #[arg(long, default_value = "off,on")]
        modes: String,
        /// Overrides `base_seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render summary tables from a record file.
    Report {
        #[arg(long)]
        records: PathBuf,
        /// csv | json | md. Plain csv emits one row per trial.
        #[arg(long, default_value = "md")]
        format: String,
        /// Restrict to one grouping: depth | off_axis | mode.
        #[arg(long)]
        group: Option<String>,
    },
    /// Trace a single trial step by step.
    Trial {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scenario: usize,
        #[arg(long)]
        repeat: usize,
        #[arg(long, default_value = "on")]
        mode: String,
        #[arg(long)]
        verbose: bool,
    },
    /// Paired per-trial differences between two record files (B − A).
    Compare { a: PathBuf, b: PathBuf },
    /// Print the default config.
    Defaults,
    /// Print a published JSON schema.
    Schema {
        #[arg(value_enum, default_value = "config")]
        which: SchemaKind,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Sweep {
            config,
            out: out_path,
            modes,
            seed,
        } => {
            let modes = harness::parse_modes(&modes)?;
            let n = harness::cmd_sweep(&config, &out_path, &modes, seed)?;
            eprintln!("wrote {n} trial records to {}", out_path.display());
            Ok(())
        }
        Command::Report { records, format, group } => {
            let format: Format = format.parse()?;
            let group = group.map(|g| g.parse::<GroupKey>()).transpose()?;
            harness::cmd_report(&records, format, group, &mut out)
        }
        Command::Trial {
            config,
            scenario,
            repeat,
            mode,
            verbose,
        } => {
            let mode: GatingMode = mode.parse()?;
            harness::cmd_trial(&config, scenario, repeat, mode, verbose, &mut out)
        }
        Command::Compare { a, b } => harness::cmd_compare(&a, &b, &mut out),
        Command::Defaults => harness::emit(&mut out, &harness::defaults_json()),
        Command::Schema { which } => harness::emit(
            &mut out,
            match which {
                SchemaKind::Config => harness::CONFIG_SCHEMA,
                SchemaKind::Report => harness::REPORT_SCHEMA,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
