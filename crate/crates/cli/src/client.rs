use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Subcommand;
use mlcapsule::guard::{QueryTicket, UNLIMITED};
use mlcapsule::iee::Hardware;
use mlcapsule::protocol::wire::DEFAULT_MAX_FRAME;
use mlcapsule::protocol::{obtain_on, request_provision, ClientSession};
use mlcapsule::{Error, Result};
use rand::rngs::OsRng;
use rand::SeedableRng;

use crate::workspace::{read_input, Workspace, DEFAULT_ENDPOINT};

#[derive(Subcommand, Debug)]
pub enum ClientCommand {
    /// Provision the model from the SP and install it in sealed storage.
    /// The only client command that uses the network.
    Obtain {
        /// SP address; defaults to the config endpoint.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Classify one input offline and print the posterior.
    Classify {
        /// Numbers separated by commas or whitespace.
        #[arg(long)]
        input: PathBuf,
        /// Ticket file from `sp issue-ticket` (binary or hex).
        #[arg(long)]
        ticket: Option<PathBuf>,
    },
    /// Print the query counter and threshold.
    Status,
}

pub fn run(cmd: ClientCommand, ws: &Workspace, seed: Option<u64>) -> Result<()> {
    match cmd {
        ClientCommand::Obtain { endpoint } => {
            let endpoint = match endpoint {
                Some(e) => e,
                None => ws.config()?.endpoint.unwrap_or_else(|| DEFAULT_ENDPOINT.to_string()),
            };
            let platform = match seed {
                Some(s) => ws.platform_or_create(&mut rand_chacha::ChaCha20Rng::seed_from_u64(s))?,
                None => ws.platform_or_create(&mut OsRng)?,
            };
            let hw = Arc::new(hardware(&platform, seed));
            let (req, session) = obtain_on(hw, Some(ws.store()?))?;
            let hidden = request_provision(&endpoint, &req, DEFAULT_MAX_FRAME)?;
            session.install(&hidden)?;
            ws.save_model(&hidden.model_def, None)?;
            print_status(&session)
        }
        ClientCommand::Classify { input, ticket } => {
            let def = ws.model_def()?;
            let x = read_input(&input, &def)?;
            let ticket = ticket.map(|p| read_ticket(&p)).transpose()?;
            let p = open(ws, seed)?.infer(&x, ticket.as_ref())?;
            let line: Vec<String> = p.values().iter().map(f32::to_string).collect();
            println!("{}", line.join(","));
            Ok(())
        }
        ClientCommand::Status => print_status(&open(ws, seed)?),
    }
}

fn hardware(platform: &mlcapsule::iee::PlatformSecrets, seed: Option<u64>) -> Hardware {
    match seed {
        Some(s) => Hardware::from_platform_with_seed(platform, s),
        None => Hardware::from_platform(platform),
    }
}

fn open(ws: &Workspace, seed: Option<u64>) -> Result<ClientSession> {
    let hw = hardware(&ws.platform()?, seed);
    ClientSession::open(Arc::new(hw), Some(ws.store()?))
}

fn read_ticket(path: &PathBuf) -> Result<QueryTicket> {
    let raw = fs::read(path)?;
    let text = String::from_utf8_lossy(&raw);
    match hex::decode(text.trim()) {
        Ok(bytes) => QueryTicket::from_bytes(&bytes),
        Err(_) => QueryTicket::from_bytes(&raw),
    }
    .map_err(|e| Error::ParseError(format!("{}: {e}", path.display())))
}

fn print_status(session: &ClientSession) -> Result<()> {
    let s = session.status()?;
    let threshold = if s.threshold == UNLIMITED {
        "unlimited".to_string()
    } else {
        s.threshold.to_string()
    };
    println!("counter,threshold,tickets_spent");
    println!("{},{threshold},{}", s.counter, s.tickets_spent);
    Ok(())
}
