use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pricon_cli::{config::RunConfig, output_dir, parse_config, run_experiment_cmd, run_gen, run_report, run_train, CliError};

/// Privileged contrastive pretraining experiments on synthetic affect data.
#[derive(Parser)]
#[command(name = "pricon", version)]
struct Cli {
    /// More log output (-v info, -vv debug); RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (key = value lines with [section] headers).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory [default: run.out, then $PRICON_OUT, then ./pricon-out].
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Overrides as section.key=value or key=value.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Gen(Common),
    /// Train one model (train.role, train.scheme) and write a checkpoint.
    Train(Common),
    /// Run the full cross-validated experiment matrix.
    Experiment(Common),
    /// Render report.md from an existing results.csv.
    Report {
        results: PathBuf,
        /// Target file [default: report.md next to the results].
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration.
    Defaults,
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let cfg = parse_config(common.config.as_deref(), &common.overrides)?;
    let out = output_dir(common.out.as_deref(), &cfg);
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    match cli.command {
        Command::Gen(c) => {
            let (cfg, out) = load(&c)?;
            run_gen(&cfg, &out)
        }
        Command::Train(c) => {
            let (cfg, out) = load(&c)?;
            run_train(&cfg, &out)
        }
        Command::Experiment(c) => {
            let (cfg, out) = load(&c)?;
            run_experiment_cmd(&cfg, &out)
        }
        Command::Report { results, out } => {
            let target = out.unwrap_or_else(|| results.with_file_name("report.md"));
            run_report(&results, &target)
        }
        Command::Defaults => {
            print!("{}", RunConfig::default().to_text());
            Ok(Vec::new())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
