use std::io;
use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};
use mlcapsule::bench::{
    self, bench_layer, builtin_def, conv_table, dense_table, network_table, BenchConfig, BenchReport, RowStatus,
    TABLE1_SIZES, TABLE2_SHAPES,
};
use mlcapsule::defense::membership::{class_distribution, overfit_setup, parse_grid};
use mlcapsule::defense::re_detect::re_detect_eval;
use mlcapsule::defense::stealing::{benign_stream, probing_stream};
use mlcapsule::defense::{membership_eval, StealingMonitor};
use mlcapsule::iee::{unforgeability_game, Forger, HonestAdversary, RandomBytesForger, ReplayForger, SpliceForger};
use mlcapsule::nn::{export_weights, import_weights, LayerSpec, ModelDef, ModelSecrets, Padding, Posterior};
use mlcapsule::protocol::{
    secrecy_advantage, ByteHistogramDistinguisher, CiphertextLengthDistinguisher, OracleConsistencyDistinguisher,
    SecrecyAdversary,
};
use mlcapsule::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::sp::csv_error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Markdown,
    Csv,
}

#[derive(Args, Debug)]
pub struct BenchOpts {
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// Keep timing each row past --reps until this much time is covered.
    #[arg(long, default_value_t = 0.0)]
    min_time_ms: f64,
    /// Enclave memory budget.
    #[arg(long, default_value_t = 90)]
    budget_mib: usize,
    /// Sealing chunk size.
    #[arg(long, default_value_t = 2048)]
    chunk_kib: u32,
    #[arg(long, value_enum, default_value_t = Format::Markdown)]
    format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Table {
    Dense,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LayerKind {
    Dense,
    Conv,
    Depthwise,
}

#[derive(Subcommand, Debug)]
pub enum BenchCommand {
    /// Time single layers: a whole table, or one layer by kind and size.
    Layer {
        #[arg(long, value_enum, conflicts_with_all = ["kind", "size", "shape"])]
        table: Option<Table>,
        #[arg(long, value_enum, requires = "size_or_shape")]
        kind: Option<LayerKind>,
        /// Dense layer width (n x n weights).
        #[arg(long, group = "size_or_shape")]
        size: Option<usize>,
        /// Convolution input shape `CxHxW` (3x3 kernel, same padding).
        #[arg(long, group = "size_or_shape")]
        shape: Option<String>,
        #[command(flatten)]
        opts: BenchOpts,
    },
    /// Time whole networks with random weights, or one imported model.
    Network {
        /// Built-in architecture: toy-cnn, mobilenet, vgg16. Repeatable.
        #[arg(long = "name")]
        names: Vec<String>,
        /// Input side for mobilenet and vgg16 (multiple of 32).
        #[arg(long)]
        side: Option<usize>,
        #[arg(long, requires = "weights", conflicts_with = "names")]
        def: Option<PathBuf>,
        #[arg(long, requires = "def")]
        weights: Option<PathBuf>,
        #[command(flatten)]
        opts: BenchOpts,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NoiseTarget {
    Uniform,
    /// Class frequencies of the training set.
    ClassDistribution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stream {
    Benign,
    Probing,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Entropy-attack AUC and utility loss across noise strengths on an
    /// overfit toy model. CSV: c,auc,jsd_mean,est_err_mean.
    Membership {
        #[arg(long, default_value = "0:0.5:0.05")]
        c_grid: String,
        #[arg(long, value_enum, default_value_t = NoiseTarget::Uniform)]
        t: NoiseTarget,
    },
    /// Set-growth detector on a synthetic query stream.
    /// CSV: query_index,appended,alarm.
    Stealing {
        #[arg(long, value_enum, default_value_t = Stream::Benign)]
        stream: Stream,
        #[arg(long, default_value_t = 5000)]
        queries: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long, default_value_t = crate::sp::DEFAULT_RHO)]
        rho: f64,
        #[arg(long, default_value_t = crate::sp::DEFAULT_WINDOW)]
        window: usize,
        /// Distinct starting points of the probing stream.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        /// Per-coordinate perturbation of the probing stream.
        #[arg(long, default_value_t = 0.01)]
        step: f32,
    },
    /// Train and score the crafted-input detector on synthetic images.
    ReDetect {
        #[arg(long, default_value_t = 8)]
        side: usize,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        /// Write detector.toml and detector.mlcw here for `sp serve`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Distinguisher {
    All,
    OracleConsistency,
    CiphertextLength,
    ByteHistogram,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ForgerKind {
    All,
    Random,
    Replay,
    Splice,
    Honest,
}

#[derive(Subcommand, Debug)]
pub enum GameCommand {
    /// Real-versus-simulated hidden model experiment.
    Secrecy {
        /// Experiments per challenge bit.
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, value_enum, default_value_t = Distinguisher::All)]
        distinguisher: Distinguisher,
        /// Oracle queries allowed per experiment.
        #[arg(long, default_value_t = 16)]
        budget: usize,
        #[arg(long, requires = "weights")]
        def: Option<PathBuf>,
        #[arg(long, requires = "def")]
        weights: Option<PathBuf>,
    },
    /// Quote unforgeability game.
    Forge {
        #[arg(long, default_value_t = 100_000)]
        attempts: usize,
        #[arg(long, value_enum, default_value_t = ForgerKind::All)]
        forger: ForgerKind,
    },
}

fn csv_out() -> csv::Writer<io::Stdout> {
    csv::Writer::from_writer(io::stdout())
}

fn write_rows<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv_out();
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn bench_config(o: &BenchOpts, seed: Option<u64>) -> BenchConfig {
    BenchConfig {
        reps: o.reps,
        warmup: o.warmup,
        budget: o.budget_mib << 20,
        chunk_size: o.chunk_kib << 10,
        seed: seed.unwrap_or(0),
        min_time_ms: o.min_time_ms,
    }
}

fn parse_shape(s: &str) -> Result<[usize; 3]> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("shape {s:?}: {e}")))?;
    dims.try_into()
        .map_err(|_| Error::InvalidArgument(format!("shape {s:?} is not CxHxW")))
}

fn emit(report: &BenchReport, format: Format) -> Result<()> {
    match format {
        Format::Markdown => print!("{}", report.to_markdown()),
        Format::Csv => {
            let mut w = csv_out();
            let ms = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            w.write_record([
                "label",
                "status",
                "capsule_mean_ms",
                "capsule_std_ms",
                "plain_mean_ms",
                "plain_std_ms",
                "factor",
                "working_set_bytes",
                "sgx_ref_capsule_ms",
                "sgx_ref_plain_ms",
                "sgx_ref_factor",
                "reps",
            ])
            .map_err(csv_error)?;
            for r in &report.rows {
                let status = match r.status {
                    RowStatus::Ok => "ok",
                    RowStatus::BudgetExceeded => "budget_exceeded",
                };
                w.write_record([
                    r.label.clone(),
                    status.to_string(),
                    ms(r.capsule_mean_ms),
                    ms(r.capsule_std_ms),
                    ms(Some(r.plain_mean_ms)),
                    ms(Some(r.plain_std_ms)),
                    ms(r.factor),
                    r.working_set_bytes.to_string(),
                    ms(r.sgx.map(|p| p.capsule_ms)),
                    ms(r.sgx.map(|p| p.plain_ms)),
                    ms(r.sgx.map(|p| p.factor)),
                    r.reps.to_string(),
                ])
                .map_err(csv_error)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn bench(cmd: BenchCommand, seed: Option<u64>) -> Result<()> {
    match cmd {
        BenchCommand::Layer {
            table,
            kind,
            size,
            shape,
            opts,
        } => {
            let cfg = bench_config(&opts, seed);
            let report = match (table, kind) {
                (Some(Table::Dense), _) => dense_table(&TABLE1_SIZES, &cfg)?,
                (Some(Table::Conv), _) => conv_table(&TABLE2_SHAPES, &cfg)?,
                (None, Some(LayerKind::Dense)) => {
                    let n = size.ok_or_else(|| Error::InvalidArgument("dense layers need --size".into()))?;
                    dense_table(&[n], &cfg)?
                }
                (None, Some(k)) => {
                    let s = shape.ok_or_else(|| Error::InvalidArgument("convolutions need --shape".into()))?;
                    let [c, h, w] = parse_shape(&s)?;
                    let (spec, label) = if k == LayerKind::Depthwise {
                        (
                            LayerSpec::DepthwiseConv2d {
                                channels: c,
                                kernel_h: 3,
                                kernel_w: 3,
                                stride: 1,
                                padding: Padding::Same,
                            },
                            "depthwise",
                        )
                    } else {
                        (
                            LayerSpec::Conv2d {
                                in_channels: c,
                                out_channels: c,
                                kernel_h: 3,
                                kernel_w: 3,
                                stride: 1,
                                padding: Padding::Same,
                            },
                            "conv2d",
                        )
                    };
                    let sgx = bench::sgx_conv(k == LayerKind::Depthwise, [c, h, w]);
                    let row = bench_layer(&format!("{label} {c}x{h}x{w}"), spec, &[c, h, w], &cfg, sgx)?;
                    BenchReport {
                        rows: vec![row],
                        ..conv_table(&[], &cfg)?
                    }
                }
                (None, None) => return Err(Error::InvalidArgument("give --table or --kind".into())),
            };
            emit(&report, opts.format)
        }
        BenchCommand::Network {
            names,
            side,
            def,
            weights,
            opts,
        } => {
            let cfg = bench_config(&opts, seed);
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            let mut nets = Vec::new();
            if let (Some(d), Some(w)) = (def, weights) {
                let (def, secrets) = import_weights(&d, &w)?;
                let label = d.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
                nets.push((label, def, secrets));
            } else {
                let names = if names.is_empty() {
                    vec!["toy-cnn".to_string(), "mobilenet".into(), "vgg16".into()]
                } else {
                    names
                };
                for name in names {
                    let def = builtin_def(&name, side)?;
                    let label = match side {
                        Some(s) if name != "toy-cnn" => format!("{name}@{s}"),
                        _ => name,
                    };
                    let secrets = ModelSecrets::random(&def, &mut rng);
                    nets.push((label, def, secrets));
                }
            }
            emit(&network_table(&nets, &cfg)?, opts.format)
        }
    }
}

pub fn eval(cmd: EvalCommand, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    match cmd {
        EvalCommand::Membership { c_grid, t } => {
            let grid = parse_grid(&c_grid)?;
            let setup = overfit_setup(seed)?;
            let k = setup.def.classes;
            let t = match t {
                NoiseTarget::Uniform => Posterior::uniform(k),
                NoiseTarget::ClassDistribution => class_distribution(&setup.members, k)?,
            };
            write_rows(membership_eval(&setup, &grid, &t)?)
        }
        EvalCommand::Stealing {
            stream,
            queries,
            dim,
            tau,
            rho,
            window,
            seeds,
            step,
        } => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let points = match stream {
                Stream::Benign => benign_stream(queries, dim, &mut rng),
                Stream::Probing => probing_stream(queries, dim, seeds, step, &mut rng),
            };
            let mut monitor = StealingMonitor::new(dim, tau, window, rho)?;
            let events = points
                .iter()
                .map(|q| monitor.observe(q))
                .collect::<Result<Vec<_>>>()?;
            write_rows(events)
        }
        EvalCommand::ReDetect {
            side,
            train,
            test,
            out_dir,
        } => {
            let (det, report) = re_detect_eval(side, train, test, seed)?;
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir)?;
                export_weights(&det.def, &det.secrets, &dir.join("detector.toml"), &dir.join("detector.mlcw"))?;
            }
            write_rows([report])
        }
    }
}

/// Dense toy model used when no model files are given.
fn toy_mlp() -> ModelDef {
    ModelDef {
        input: vec![16],
        classes: 4,
        layers: vec![
            LayerSpec::Dense { inputs: 16, outputs: 32 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 32, outputs: 4 },
            LayerSpec::Softmax,
        ],
    }
}

#[derive(Serialize)]
struct ForgeRow {
    forger: &'static str,
    attempts: usize,
    submitted: usize,
    accepted_forgeries: usize,
    replays: usize,
    honest_quotes: usize,
    honest_verified: usize,
}

pub fn game(cmd: GameCommand, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    match cmd {
        GameCommand::Secrecy {
            trials,
            distinguisher,
            budget,
            def,
            weights,
        } => {
            let (def, secrets) = match (def, weights) {
                (Some(d), Some(w)) => import_weights(&d, &w)?,
                _ => {
                    let def = toy_mlp();
                    let secrets = ModelSecrets::random(&def, &mut ChaCha20Rng::seed_from_u64(seed));
                    (def, secrets)
                }
            };
            let queries = (budget / 2).max(1);
            let mut advs: Vec<Box<dyn SecrecyAdversary>> = Vec::new();
            if matches!(distinguisher, Distinguisher::All | Distinguisher::OracleConsistency) {
                advs.push(Box::new(OracleConsistencyDistinguisher { queries }));
            }
            if matches!(distinguisher, Distinguisher::All | Distinguisher::CiphertextLength) {
                advs.push(Box::new(CiphertextLengthDistinguisher));
            }
            if matches!(distinguisher, Distinguisher::All | Distinguisher::ByteHistogram) {
                advs.push(Box::new(ByteHistogramDistinguisher));
            }
            let reports = advs
                .iter_mut()
                .map(|a| secrecy_advantage(a.as_mut(), &def, &secrets, trials, budget, seed))
                .collect::<Result<Vec<_>>>()?;
            write_rows(reports)
        }
        GameCommand::Forge { attempts, forger } => {
            let mut forgers: Vec<(&'static str, Box<dyn Forger>)> = Vec::new();
            if matches!(forger, ForgerKind::All | ForgerKind::Random) {
                forgers.push(("random", Box::new(RandomBytesForger)));
            }
            if matches!(forger, ForgerKind::All | ForgerKind::Replay) {
                forgers.push(("replay", Box::<ReplayForger>::default()));
            }
            if matches!(forger, ForgerKind::All | ForgerKind::Splice) {
                forgers.push(("splice", Box::<SpliceForger>::default()));
            }
            if matches!(forger, ForgerKind::All | ForgerKind::Honest) {
                forgers.push(("honest", Box::<HonestAdversary>::default()));
            }
            let rows = forgers
                .into_iter()
                .map(|(name, mut f)| {
                    let o = unforgeability_game(attempts, f.as_mut(), seed);
                    ForgeRow {
                        forger: name,
                        attempts: o.attempts,
                        submitted: o.submitted,
                        accepted_forgeries: o.accepted_forgeries,
                        replays: o.replays,
                        honest_quotes: o.honest_quotes,
                        honest_verified: o.honest_verified,
                    }
                })
                .collect::<Vec<_>>();
            write_rows(rows)
        }
    }
}
