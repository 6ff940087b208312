//! `mlcapsule`: service-provider daemon, offline client and experiment
//! drivers.
//!
//! Data goes to stdout; diagnostics go to stderr as `error: <Name>: <detail>`
//! and the process exits with the code listed in [`exit_code`].

mod client;
mod sp;
mod tools;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlcapsule::Error;

use workspace::Workspace;

#[derive(Parser, Debug)]
#[command(name = "mlcapsule", version, about = "Guarded offline model serving")]
struct Cli {
    /// Workspace directory holding keys, sealed state and config.
    #[arg(long, global = true, env = "MLCAPSULE_WORKSPACE", default_value = "mlcapsule-ws")]
    workspace: PathBuf,

    /// Seed for every random choice made by the command.
    #[arg(long, global = true, env = "MLCAPSULE_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Service-provider side: train, import, serve, sign tickets.
    #[command(subcommand)]
    Sp(sp::SpCommand),
    /// Client side: obtain a model once, then classify offline.
    #[command(subcommand)]
    Client(client::ClientCommand),
    /// Capsule-versus-plain timing.
    #[command(subcommand)]
    Bench(tools::BenchCommand),
    /// Defense evaluations.
    #[command(subcommand)]
    Eval(tools::EvalCommand),
    /// Security games.
    #[command(subcommand)]
    Game(tools::GameCommand),
}

/// Process exit code for each error kind. 2 is reserved for usage errors.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::HandleNotFound => 10,
        Error::Program(_) => 11,
        Error::MalformedProgram(_) => 12,
        Error::IntegrityFailure(_) => 20,
        Error::IdentityMismatch => 21,
        Error::TruncatedBlob(_) => 22,
        Error::ChunkOutOfOrder { .. } => 23,
        Error::ShapeMismatch(_) => 30,
        Error::SchemaError(_) => 31,
        Error::ParseError(_) => 32,
        Error::DivergenceError(_) => 33,
        Error::BudgetExceeded { .. } => 34,
        Error::NoKey => 40,
        Error::UnknownCommand(_) => 41,
        Error::QuoteInvalid => 42,
        Error::TagMismatch => 43,
        Error::QuotaExceeded { .. } => 50,
        Error::RollbackDetected { .. } => 51,
        Error::Detected(_) => 52,
        Error::BadSignature => 53,
        Error::TicketReused => 54,
        Error::DigestMismatch => 55,
        Error::StorageUnavailable(_) => 56,
        Error::DimensionMismatch { .. } => 60,
        Error::InvalidArgument(_) => 61,
        Error::Transport(_) => 70,
        Error::Protocol { .. } => 71,
        Error::Io(_) => 72,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ws = Workspace::new(cli.workspace);
    let res = match cli.command {
        Command::Sp(c) => sp::run(c, &ws, cli.seed),
        Command::Client(c) => client::run(c, &ws, cli.seed),
        Command::Bench(c) => tools::bench(c, cli.seed),
        Command::Eval(c) => tools::eval(c, cli.seed),
        Command::Game(c) => tools::game(c, cli.seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
