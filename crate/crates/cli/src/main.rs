use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use keyward_cli::*;
use keyward_core::machine::AttackOp;

#[derive(Parser)]
#[command(name = "keyward", version, about = "Partition policy compiler and simulated protection-key runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the policy of one or more source files.
    Check {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Instrument sources and write the artifact directory.
    Build {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a built artifact's `main(input, len)`.
    Run {
        artifact: PathBuf,
        /// File whose bytes are passed as input.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Write the trace here instead of standard output.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Sweep an address range with the acting partition's rights.
    Attack {
        artifact: PathBuf,
        /// Partition name or numeric label.
        #[arg(long)]
        partition: String,
        #[arg(long, value_enum)]
        op: Op,
        /// Half-open range, `0xSTART..0xEND`.
        #[arg(long)]
        range: String,
    },
    /// Summarise a trace file.
    Stats {
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Op {
    Read,
    Write,
}

fn execute(command: Command) -> Result<String, CliError> {
    match command {
        Command::Check { paths } => cmd_check(&paths),
        Command::Build { paths, out } => cmd_build(&paths, &out),
        Command::Run { artifact, input, trace } => {
            let input = match &input {
                Some(path) => std::fs::read(path).map_err(|source| CliError::Io { path: path.clone(), source })?,
                None => Vec::new(),
            };
            let write_trace = |text: &str| -> Result<String, CliError> {
                match &trace {
                    Some(path) => {
                        std::fs::write(path, text).map_err(|source| CliError::Io { path: path.clone(), source })?;
                        Ok(String::new())
                    }
                    None => Ok(text.to_string()),
                }
            };
            match cmd_run(&artifact, &input) {
                Ok(out) => {
                    eprintln!("{}", out.outcome);
                    write_trace(&out.trace)
                }
                Err(CliError::Fault { fault, output }) => {
                    let shown = write_trace(&output)?;
                    Err(CliError::Fault { fault, output: shown })
                }
                Err(e) => Err(e),
            }
        }
        Command::Attack { artifact, partition, op, range } => {
            let op = match op {
                Op::Read => AttackOp::Read,
                Op::Write => AttackOp::Write,
            };
            cmd_attack(&artifact, &partition, op, parse_range(&range)?)
        }
        Command::Stats { trace } => cmd_stats(&trace),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_FORMAT as u8 } else { EXIT_OK as u8 });
        }
    };
    let code = match execute(cli.command) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => {
            if let CliError::Fault { output, .. } = &e {
                print!("{output}");
            }
            let msg = e.to_string();
            eprint!("{msg}");
            if !msg.ends_with('\n') {
                eprintln!();
            }
            e.exit_code()
        }
    };
    let _ = std::io::stdout().flush();
    ExitCode::from(code as u8)
}
