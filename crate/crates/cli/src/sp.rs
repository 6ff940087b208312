use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use mlcapsule::defense::membership::noisy_task;
use mlcapsule::defense::DetectorModel;
use mlcapsule::guard::issue_ticket;
use mlcapsule::nn::{import_weights, train_toy, Dataset, ModelDef, Posterior};
use mlcapsule::protocol::{serve_provision, Policy, ProvisionService, StealingPolicy};
use mlcapsule::{Error, Result};
use rand::rngs::OsRng;
use rand::SeedableRng;

use crate::workspace::{read_input, read_numbers, Config, Workspace, DEFAULT_ENDPOINT};

#[derive(Subcommand, Debug)]
pub enum SpCommand {
    /// Train a model from a definition and a labelled CSV (or a synthetic
    /// task) and store it in the workspace.
    Train(TrainArgs),
    /// Validate externally trained weights against a definition and store
    /// both in the workspace.
    ImportWeights {
        #[arg(long)]
        def: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Run the provisioning endpoint until killed. Prints the bound address.
    Serve(ServeArgs),
    /// Sign a ticket for one query input.
    IssueTicket {
        /// Query input: numbers separated by commas or whitespace.
        #[arg(long)]
        input: PathBuf,
        /// Write the ticket here instead of printing it as hex.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Model definition (TOML).
    #[arg(long)]
    arch: PathBuf,
    /// Rows of `label,x1,x2,...`. Without it a synthetic task is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Listen address; defaults to the config endpoint.
    #[arg(long)]
    addr: Option<String>,
    /// Maximum released posteriors per client.
    #[arg(long)]
    threshold: Option<u64>,
    /// Require a signed ticket for every query.
    #[arg(long)]
    tickets: bool,
    /// Posterior noise strength c in [0, 1].
    #[arg(long)]
    noise_c: Option<f64>,
    /// Noise distribution T (one probability per class); uniform if absent.
    #[arg(long)]
    noise_t: Option<PathBuf>,
    /// Stealing detection distance threshold; enables the detector.
    #[arg(long)]
    tau: Option<f64>,
    /// Minimum fraction of appended queries per window.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    /// Reverse-engineering input detector (definition and weights).
    #[arg(long, requires = "detector_weights")]
    detector_def: Option<PathBuf>,
    #[arg(long, requires = "detector_def")]
    detector_weights: Option<PathBuf>,
}

pub const DEFAULT_RHO: f64 = 0.1;
pub const DEFAULT_WINDOW: usize = 50;

pub fn run(cmd: SpCommand, ws: &Workspace, seed: Option<u64>) -> Result<()> {
    match cmd {
        SpCommand::Train(args) => train(args, ws, seed.unwrap_or(0)),
        SpCommand::ImportWeights { def, weights } => {
            let (def, secrets) = import_weights(&def, &weights)?;
            ws.save_model(&def, Some(&secrets))?;
            println!("params,{}", def.param_count());
            Ok(())
        }
        SpCommand::Serve(args) => serve(args, ws, seed),
        SpCommand::IssueTicket { input, out } => {
            let def = ws.model_def()?;
            let x = read_input(&input, &def)?;
            let ticket = issue_ticket(&ws.existing_sp_key()?, &x.to_bytes());
            match out {
                Some(p) => fs::write(p, ticket.to_bytes())?,
                None => println!("{}", hex::encode(ticket.to_bytes())),
            }
            Ok(())
        }
    }
}

fn train(args: TrainArgs, ws: &Workspace, seed: u64) -> Result<()> {
    let def = ModelDef::from_toml(&fs::read_to_string(&args.arch)?)?;
    let data = match &args.data {
        Some(p) => read_dataset(p)?,
        None => {
            let dim = def.input.iter().product();
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            noisy_task(args.samples, dim, def.classes, 1.0, &mut rng)
        }
    };
    let report = train_toy(&data, &def, args.epochs, args.lr, seed)?;
    ws.save_model(&def, Some(&report.secrets))?;
    println!("train_accuracy,final_loss");
    println!("{},{}", report.train_accuracy, report.final_loss);
    Ok(())
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let (mut inputs, mut labels) = (Vec::new(), Vec::new());
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let bad = |what: &str| Error::ParseError(format!("{}: row {}: bad {what}", path.display(), i + 1));
        let mut fields = rec.iter();
        let label = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("label"))?;
        let x = fields
            .map(|s| s.parse::<f32>().map_err(|_| bad("feature")))
            .collect::<Result<Vec<_>>>()?;
        inputs.push(x);
        labels.push(label);
    }
    Dataset::new(inputs, labels)
}

pub fn csv_error(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::ParseError(format!("{other:?}")),
        }
    } else {
        Error::ParseError(e.to_string())
    }
}

fn policy(args: &ServeArgs, cfg: &Config, ws: &Workspace, def: &ModelDef, seed: Option<u64>) -> Result<Policy> {
    let mut p = Policy::default();
    if let Some(t) = args.threshold.or(cfg.threshold) {
        p.threshold = t;
    }
    if args.tickets || cfg.tickets.unwrap_or(false) {
        let key = match seed {
            Some(s) => ws.sp_key(&mut rand_chacha::ChaCha20Rng::seed_from_u64(s))?,
            None => ws.sp_key(&mut OsRng)?,
        };
        p.ticket_key = Some(key.verifying_key());
    }
    p.noise_c = args.noise_c.or(cfg.noise_c).unwrap_or(0.0);
    let t_path = args.noise_t.clone().or_else(|| cfg.noise_t.as_ref().map(|t| ws.resolve(t)));
    if let Some(t) = t_path {
        p.noise_t = Some(Posterior::new(read_numbers(&t)?)?);
    }
    if let Some(tau) = args.tau.or(cfg.tau) {
        p.stealing = Some(StealingPolicy {
            tau,
            rho: args.rho.or(cfg.rho).unwrap_or(DEFAULT_RHO),
            window: args.window.or(cfg.window).unwrap_or(DEFAULT_WINDOW),
        });
    }
    let det = match (&args.detector_def, &args.detector_weights) {
        (Some(d), Some(w)) => Some((d.clone(), w.clone())),
        _ => match (&cfg.detector_def, &cfg.detector_weights) {
            (Some(d), Some(w)) => Some((ws.resolve(d), ws.resolve(w))),
            (None, None) => None,
            _ => return Err(Error::InvalidArgument("detector_def and detector_weights go together".into())),
        },
    };
    if let Some((d, w)) = det {
        let (def, secrets) = import_weights(&d, &w)?;
        p.detector = Some(DetectorModel { def, secrets });
    }
    p.validate(def)?;
    Ok(p)
}

fn serve(args: ServeArgs, ws: &Workspace, seed: Option<u64>) -> Result<()> {
    let cfg = ws.config()?;
    let (def, secrets) = ws.model()?;
    let policy = policy(&args, &cfg, ws, &def, seed)?;
    let addr = args
        .addr
        .clone()
        .or(cfg.endpoint)
        .unwrap_or_else(|| DEFAULT_ENDPOINT.to_string());
    let handle = serve_provision(addr.as_str(), ProvisionService::new(def, secrets, policy)?)?;
    let mut out = std::io::stdout();
    writeln!(out, "{}", handle.addr())?;
    out.flush()?;
    handle.wait();
    Ok(())
}
