//! The enclave program of the capsule.
//!
//! Commands are `prefixed(name) | payload`:
//!
//! | name       | payload                                         | output            |
//! |------------|-------------------------------------------------|-------------------|
//! | `train`    | def, dataset, epochs, lr, seed                  | def + MLCW        |
//! | `setup`    | empty                                           | public key        |
//! | `classify` | hidden model, input tensor                      | posterior         |
//! | `install`  | hidden model                                    | empty             |
//! | `infer`    | input tensor, optional ticket                   | posterior         |
//! | `status`   | empty                                           | counter, threshold, spent |
//!
//! `install`, `infer` and `status` work on host storage supplied when the
//! program is loaded. The storage binding is not part of the code identity:
//! everything read from it is sealed, and the host can swap it at will.

use zeroize::Zeroizing;

use super::{HiddenModel, Policy};
use crate::codec::{put_prefixed, Reader};
use crate::crypto::{digest, pke_dec, pke_keygen, seal, unseal, Digest, KeyPair, SealKey, SealedBlob};
use crate::defense::{noise_posterior, re_detector_score, InputVerdict, NoiseConfig, QueryArchive, StealingMonitor};
use crate::error::{Error, Result};
use crate::guard::{charged, Guard, GuardState, QueryTicket};
use crate::iee::{EnclaveEnv, Program};
use crate::nn::train::{train_toy, Dataset};
use crate::nn::{capsule_forward, forward, seal_model, CapsuleLayer, ModelDef, ModelSecrets, Posterior, Tensor};
use crate::storage::SharedStore;

pub const PROGRAM_Q_CODE: &[u8] = b"mlcapsule/program-q/v1";
const CONFIG_OBJECT: &str = "capsule.mlcs";

pub fn program_q_tag() -> Digest {
    digest(PROGRAM_Q_CODE)
}

fn layer_object(i: usize) -> String {
    format!("layer-{i:03}.mlcs")
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Train {
        def: ModelDef,
        data: Dataset,
        epochs: u32,
        lr: f64,
        seed: u64,
    },
    Setup,
    Classify {
        hidden: HiddenModel,
        input: Tensor,
    },
    Install {
        hidden: HiddenModel,
    },
    Infer {
        input: Tensor,
        ticket: Option<QueryTicket>,
    },
    Status,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Setup => "setup",
            Command::Classify { .. } => "classify",
            Command::Install { .. } => "install",
            Command::Infer { .. } => "infer",
            Command::Status => "status",
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_prefixed(&mut out, self.name().as_bytes());
        match self {
            Command::Train {
                def,
                data,
                epochs,
                lr,
                seed,
            } => {
                put_prefixed(&mut out, &def.canonical_bytes());
                out.extend_from_slice(&(data.len() as u32).to_le_bytes());
                out.extend_from_slice(&(data.dim() as u32).to_le_bytes());
                for (x, &y) in data.inputs.iter().zip(&data.labels) {
                    out.extend_from_slice(&(y as u32).to_le_bytes());
                    for v in x {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                out.extend_from_slice(&epochs.to_le_bytes());
                out.extend_from_slice(&lr.to_le_bytes());
                out.extend_from_slice(&seed.to_le_bytes());
            }
            Command::Setup | Command::Status => {}
            Command::Classify { hidden, input } => {
                put_prefixed(&mut out, &hidden.to_bytes());
                out.extend_from_slice(&input.to_bytes());
            }
            Command::Install { hidden } => out.extend_from_slice(&hidden.to_bytes()),
            Command::Infer { input, ticket } => {
                put_prefixed(&mut out, &input.to_bytes());
                if let Some(t) = ticket {
                    out.extend_from_slice(&t.to_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "command");
        let name = r.prefixed().map_err(|_| Error::UnknownCommand(String::from_utf8_lossy(bytes).into_owned()))?;
        let cmd = match name {
            b"train" => {
                let def = parse_def(r.prefixed()?)?;
                let n = r.u32()? as usize;
                let dim = r.u32()? as usize;
                let mut inputs = Vec::new();
                let mut labels = Vec::new();
                for _ in 0..n {
                    labels.push(r.u32()? as usize);
                    inputs.push(r.take(dim * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
                }
                let epochs = r.u32()?;
                let lr = f64::from_le_bytes(r.array()?);
                let seed = r.u64()?;
                Command::Train {
                    def,
                    data: Dataset::new(inputs, labels)?,
                    epochs,
                    lr,
                    seed,
                }
            }
            b"setup" => Command::Setup,
            b"status" => Command::Status,
            b"classify" => {
                let hidden = HiddenModel::from_bytes(r.prefixed()?)?;
                let input = Tensor::from_bytes(r.rest())?;
                Command::Classify { hidden, input }
            }
            b"install" => Command::Install {
                hidden: HiddenModel::from_bytes(r.rest())?,
            },
            b"infer" => {
                let input = Tensor::from_bytes(r.prefixed()?)?;
                let rest = r.rest();
                let ticket = if rest.is_empty() {
                    None
                } else {
                    Some(QueryTicket::from_bytes(rest)?)
                };
                Command::Infer { input, ticket }
            }
            other => return Err(Error::UnknownCommand(String::from_utf8_lossy(other).into_owned())),
        };
        r.finish()?;
        Ok(cmd)
    }
}

fn parse_def(bytes: &[u8]) -> Result<ModelDef> {
    ModelDef::from_toml(std::str::from_utf8(bytes).map_err(|e| Error::ParseError(e.to_string()))?)
}

/// Query usage reported by `status`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct GuardStatus {
    pub counter: u64,
    pub threshold: u64,
    pub tickets_spent: u64,
}

impl GuardStatus {
    pub fn to_bytes(&self) -> Vec<u8> {
        [self.counter, self.threshold, self.tickets_spent]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "guard status");
        let s = GuardStatus {
            counter: r.u64()?,
            threshold: r.u64()?,
            tickets_spent: r.u64()?,
        };
        r.finish()?;
        Ok(s)
    }
}

pub struct ProgramQ {
    store: Option<SharedStore>,
}

impl ProgramQ {
    pub fn new(store: Option<SharedStore>) -> Self {
        ProgramQ { store }
    }

    fn store(&self) -> Result<&SharedStore> {
        self.store
            .as_ref()
            .ok_or_else(|| Error::StorageUnavailable("program loaded without host storage".into()))
    }
}

#[derive(Default)]
pub struct ProgramQState {
    keys: Option<KeyPair>,
    trained: Option<(ModelDef, ModelSecrets)>,
    /// Posteriors released by `classify` in this enclave instance.
    classified: u64,
    monitor: Option<StealingMonitor>,
}

impl ProgramQState {
    pub fn has_key(&self) -> bool {
        self.keys.is_some()
    }

    pub fn trained(&self) -> Option<&(ModelDef, ModelSecrets)> {
        self.trained.as_ref()
    }
}

impl Program for ProgramQ {
    type State = ProgramQState;

    fn code_bytes(&self) -> Vec<u8> {
        PROGRAM_Q_CODE.to_vec()
    }

    fn step(&self, state: &mut ProgramQState, input: &[u8], env: &mut EnclaveEnv<'_>) -> Result<Vec<u8>> {
        match Command::from_bytes(input)? {
            Command::Train {
                def,
                data,
                epochs,
                lr,
                seed,
            } => {
                let report = train_toy(&data, &def, epochs as usize, lr, seed)?;
                let mut out = Vec::new();
                put_prefixed(&mut out, &def.canonical_bytes());
                out.extend_from_slice(&report.secrets.to_mlcw());
                state.trained = Some((def, report.secrets));
                Ok(out)
            }
            Command::Setup => {
                let keys = pke_keygen(128, env.rng())?;
                let pk = keys.pk.0.to_vec();
                state.keys = Some(keys);
                Ok(pk)
            }
            Command::Classify { hidden, input } => {
                let secrets = decrypt(state, &hidden)?;
                let policy = &hidden.policy;
                if policy.ticket_key.is_some() {
                    return Err(Error::InvalidArgument("this model requires tickets; install it and use infer".into()));
                }
                if state.classified >= policy.threshold {
                    return Err(Error::QuotaExceeded {
                        threshold: policy.threshold,
                    });
                }
                screen_input(policy, &input)?;
                if let Some(s) = &policy.stealing {
                    let n = input.len();
                    let monitor = match &mut state.monitor {
                        Some(m) if m.archive.dim() == n => m,
                        slot => slot.insert(StealingMonitor::new(n, s.tau, s.window, s.rho)?),
                    };
                    if monitor.observe(input.data())?.alarm {
                        return Err(Error::Detected("model stealing alarm".into()));
                    }
                }
                let p = forward(&hidden.model_def, &secrets, &input)?;
                let p = apply_noise(policy, &hidden.model_def, p)?;
                state.classified += 1;
                Ok(p.to_bytes())
            }
            Command::Install { hidden } => {
                let secrets = decrypt(state, &hidden)?;
                let store = self.store()?;
                let key = env.seal_key();
                let m = *env.measurement();
                let layers = seal_model(&hidden.model_def, &secrets, &key, &m, env.rng())?;
                for (i, layer) in layers.iter().enumerate() {
                    match &layer.sealed {
                        Some(blob) => store.write(&layer_object(i), &blob.to_bytes())?,
                        None => store.remove(&layer_object(i))?,
                    }
                }
                let mut config = Vec::new();
                put_prefixed(&mut config, &hidden.model_def.canonical_bytes());
                put_prefixed(&mut config, &hidden.policy.to_bytes());
                let blob = seal(&key, &m, &config, env.rng())?;
                store.write(CONFIG_OBJECT, &blob.to_bytes())?;
                Guard::init(store.clone(), key, hidden.policy.threshold, env.rng())?;
                Ok(Vec::new())
            }
            Command::Infer { input, ticket } => self.infer(&input, ticket.as_ref(), env),
            Command::Status => {
                let guard = Guard::open(self.store()?.clone(), env.seal_key());
                let s = guard.load()?;
                Ok(GuardStatus {
                    counter: s.counter,
                    threshold: s.threshold,
                    tickets_spent: s.spent.len() as u64,
                }
                .to_bytes())
            }
        }
    }
}

impl ProgramQ {
    fn load_installed(&self, key: &SealKey) -> Result<(ModelDef, Policy, Vec<CapsuleLayer>)> {
        let store = self.store()?;
        let raw = store
            .read(CONFIG_OBJECT)?
            .ok_or_else(|| Error::StorageUnavailable("no installed model".into()))?;
        let config = unseal(key, key.measurement(), &SealedBlob::from_bytes(&raw)?)?;
        let mut r = Reader::new(&config, "capsule config");
        let def = parse_def(r.prefixed()?)?;
        let policy = Policy::from_bytes(r.prefixed()?)?;
        r.finish()?;
        let layers = def
            .layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let sealed = if spec.has_params() {
                    let raw = store
                        .read(&layer_object(i))?
                        .ok_or_else(|| Error::IntegrityFailure(format!("sealed layer {i} missing")))?;
                    Some(SealedBlob::from_bytes(&raw)?)
                } else {
                    None
                };
                Ok(CapsuleLayer { spec: *spec, sealed })
            })
            .collect::<Result<_>>()?;
        Ok((def, policy, layers))
    }

    /// Hook chain: guard, input screening, stealing archive, sealed
    /// layer-wise classification, noising, guard commit, release.
    fn infer(&self, input: &Tensor, ticket: Option<&QueryTicket>, env: &mut EnclaveEnv<'_>) -> Result<Vec<u8>> {
        let key = env.seal_key();
        let (def, policy, layers) = self.load_installed(&key)?;
        let guard = Guard::open(self.store()?.clone(), key.clone());
        let query = input.to_bytes();
        let (admitted, spent) = match &policy.ticket_key {
            Some(sp) => {
                let t = ticket.ok_or_else(|| Error::InvalidArgument("this model requires a query ticket".into()))?;
                (guard.check_ticket(sp, t, &query)?, Some(t.query_digest))
            }
            None => (guard.check()?, None),
        };
        screen_input(&policy, input)?;
        let mut archive_bytes = admitted.archive.clone();
        if let Some(s) = &policy.stealing {
            let mut monitor = StealingMonitor {
                archive: if archive_bytes.is_empty() {
                    QueryArchive::new(input.len(), s.tau)?
                } else {
                    QueryArchive::from_bytes(&archive_bytes)?
                },
                window: s.window,
                rho: s.rho,
            };
            let event = monitor.observe(input.data())?;
            archive_bytes = monitor.archive.to_bytes();
            if event.alarm {
                let next = GuardState {
                    archive: archive_bytes,
                    ..admitted.clone()
                };
                guard.persist(&admitted, next, env.rng())?;
                return Err(Error::Detected("model stealing alarm".into()));
            }
        }
        let p = capsule_forward(&layers, &key, key.measurement(), input)?;
        let p = apply_noise(&policy, &def, p)?;
        let mut next = charged(&admitted, spent)?;
        next.archive = archive_bytes;
        guard.persist(&admitted, next, env.rng())?;
        Ok(p.to_bytes())
    }
}

fn decrypt(state: &ProgramQState, hidden: &HiddenModel) -> Result<ModelSecrets> {
    let keys = state.keys.as_ref().ok_or(Error::NoKey)?;
    let aad = HiddenModel::aad(&hidden.model_def, &hidden.policy);
    let plain = Zeroizing::new(pke_dec(&keys.sk, &hidden.c, &aad)?);
    hidden.model_def.validate()?;
    hidden.policy.validate(&hidden.model_def)?;
    ModelSecrets::from_mlcw(&hidden.model_def, &plain)
}

fn screen_input(policy: &Policy, input: &Tensor) -> Result<()> {
    if let Some(det) = &policy.detector {
        let n: usize = det.def.input.iter().product();
        if input.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: input.len(),
            });
        }
        if re_detector_score(det, input.data())? == InputVerdict::Malicious {
            return Err(Error::Detected("input flagged as a reverse-engineering probe".into()));
        }
    }
    Ok(())
}

fn apply_noise(policy: &Policy, def: &ModelDef, p: Posterior) -> Result<Posterior> {
    if policy.noise_c == 0.0 {
        return Ok(p);
    }
    let t = policy.noise_t.clone().unwrap_or_else(|| Posterior::uniform(def.classes));
    noise_posterior(&p, &NoiseConfig::new(policy.noise_c, t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{RootSealKey, SigningKey};
    use crate::guard::issue_ticket;
    use crate::iee::Hardware;
    use crate::nn::model::tests::mlp;
    use crate::protocol::{obtain_on, provide, ClientSession, StealingPolicy};
    use crate::storage::{MemStore, UntrustedStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    fn env(root: &RootSealKey, seed: u64) -> EnclaveEnv<'_> {
        EnclaveEnv::for_test(program_q_tag(), root, seed)
    }

    #[test]
    fn command_dispatch() {
        let root = RootSealKey::from_bytes([1; 32]);
        let q = ProgramQ::new(None);
        let mut st = ProgramQState::default();
        let mut put = Vec::new();
        put_prefixed(&mut put, b"explode");
        assert!(matches!(q.step(&mut st, &put, &mut env(&root, 0)), Err(Error::UnknownCommand(_))));
        assert!(matches!(q.step(&mut st, b"", &mut env(&root, 0)), Err(Error::UnknownCommand(_))));
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let def = mlp(&[2, 2]);
        let hidden = HiddenModel {
            model_def: def.clone(),
            policy: Policy::default(),
            c: crate::crypto::pke_enc(&crate::crypto::PkePublicKey([9; 32]), b"", b"", &mut rng).unwrap(),
        };
        let cmd = Command::Classify {
            hidden,
            input: Tensor::vector(vec![0.0, 0.0]),
        };
        assert!(matches!(q.step(&mut st, &cmd.to_bytes(), &mut env(&root, 0)), Err(Error::NoKey)));
        assert_eq!(Command::from_bytes(&cmd.to_bytes()).unwrap(), cmd);
    }

    #[test]
    fn enclave_train_matches_sp_train() {
        let root = RootSealKey::from_bytes([1; 32]);
        let def = mlp(&[2, 4, 2]);
        let data = Dataset::new(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.9]], vec![0, 1, 0]).unwrap();
        let cmd = Command::Train {
            def: def.clone(),
            data: data.clone(),
            epochs: 5,
            lr: 0.1,
            seed: 3,
        };
        assert_eq!(Command::from_bytes(&cmd.to_bytes()).unwrap(), cmd);
        let mut st = ProgramQState::default();
        let out = ProgramQ::new(None).step(&mut st, &cmd.to_bytes(), &mut env(&root, 0)).unwrap();
        let sp = train_toy(&data, &def, 5, 0.1, 3).unwrap();
        assert!(out.ends_with(&sp.secrets.to_mlcw()));
        assert_eq!(st.trained().unwrap().1, sp.secrets);
    }

    #[test]
    fn secret_key_never_leaves_the_enclave() {
        let root = RootSealKey::from_bytes([2; 32]);
        let q = ProgramQ::new(Some(Arc::new(MemStore::new())));
        let mut st = ProgramQState::default();
        let pk = q.step(&mut st, &Command::Setup.to_bytes(), &mut env(&root, 1)).unwrap();
        let sk = st.keys.as_ref().unwrap().sk.to_bytes();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let def = mlp(&[3, 4, 2]);
        let secrets = ModelSecrets::random(&def, &mut rng);
        let hidden = HiddenModel {
            model_def: def.clone(),
            policy: Policy::with_threshold(5),
            c: crate::crypto::pke_enc(
                &crate::crypto::PkePublicKey(pk.as_slice().try_into().unwrap()),
                &secrets.to_mlcw(),
                &HiddenModel::aad(&def, &Policy::with_threshold(5)),
                &mut rng,
            )
            .unwrap(),
        };
        let mut outputs = vec![pk];
        let x = Tensor::vector(vec![0.1, 0.2, 0.3]);
        for cmd in [
            Command::Classify {
                hidden: hidden.clone(),
                input: x.clone(),
            },
            Command::Install { hidden },
            Command::Infer { input: x, ticket: None },
            Command::Status,
        ] {
            outputs.push(q.step(&mut st, &cmd.to_bytes(), &mut env(&root, 2)).unwrap());
        }
        for out in &outputs {
            assert!(!out.windows(32).any(|w| w == sk.as_slice()));
        }
        let status = GuardStatus::from_bytes(outputs.last().unwrap()).unwrap();
        assert_eq!((status.counter, status.threshold), (1, 5));
    }

    fn installed(policy: Policy, seed: u64) -> (ClientSession, Arc<MemStore>, ModelDef, ModelSecrets) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let def = mlp(&[4, 8, 3]);
        let secrets = ModelSecrets::random(&def, &mut rng);
        let store = Arc::new(MemStore::new());
        let (_, hw) = Hardware::setup_with_seed(128, b"", seed).unwrap();
        let (req, session) = obtain_on(Arc::new(hw), Some(store.clone())).unwrap();
        let hidden = provide(&def, &secrets, &policy, &req, &mut rng).unwrap();
        session.install(&hidden).unwrap();
        (session, store, def, secrets)
    }

    #[test]
    fn installed_capsule_is_metered_and_correct() {
        let (session, store, def, secrets) = installed(Policy::with_threshold(3), 5);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for _ in 0..3 {
            let x = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let p = session.infer(&x, None).unwrap();
            assert_eq!(p, forward(&def, &secrets, &x).unwrap());
        }
        let x = Tensor::vector(vec![0.0; 4]);
        assert!(matches!(session.infer(&x, None), Err(Error::QuotaExceeded { threshold: 3 })));
        assert_eq!(session.status().unwrap().counter, 3);

        // A fresh enclave on the same platform reads the same sealed state.
        let again = ClientSession::open(session.hardware().clone(), Some(store.clone())).unwrap();
        assert!(matches!(again.infer(&x, None), Err(Error::QuotaExceeded { .. })));

    }

    #[test]
    fn tampered_layer_fails_integrity() {
        let (session, store, _, _) = installed(Policy::default(), 8);
        let mut raw = store.read(&layer_object(2)).unwrap().unwrap();
        let n = raw.len();
        raw[n - 1] ^= 0x40;
        store.write(&layer_object(2), &raw).unwrap();
        let before = session.status().unwrap().counter;
        assert!(matches!(
            session.infer(&Tensor::vector(vec![0.0; 4]), None),
            Err(Error::IntegrityFailure(_))
        ));
        assert_eq!(session.status().unwrap().counter, before);
    }

    #[test]
    fn ticket_mode() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let sp = SigningKey::generate(&mut rng);
        let policy = Policy {
            ticket_key: Some(sp.verifying_key()),
            ..Default::default()
        };
        let (session, _, _, _) = installed(policy, 9);
        let x = Tensor::vector(vec![0.5; 4]);
        assert!(session.infer(&x, None).is_err());
        let t = issue_ticket(&sp, &x.to_bytes());
        session.infer(&x, Some(&t)).unwrap();
        assert!(matches!(session.infer(&x, Some(&t)), Err(Error::TicketReused)));
        let y = Tensor::vector(vec![0.25; 4]);
        assert!(matches!(session.infer(&y, Some(&t)), Err(Error::DigestMismatch)));
        assert_eq!(session.status().unwrap().tickets_spent, 1);
    }

    #[test]
    fn stealing_alarm_denies_and_is_remembered() {
        let policy = Policy {
            stealing: Some(StealingPolicy {
                tau: 0.5,
                rho: 0.5,
                window: 4,
            }),
            noise_c: 0.3,
            ..Default::default()
        };
        let (session, store, def, secrets) = installed(policy, 10);
        let x = Tensor::vector(vec![0.1; 4]);
        let p = session.infer(&x, None).unwrap();
        let raw = forward(&def, &secrets, &x).unwrap();
        assert_ne!(p, raw);
        assert_eq!(p.argmax(), raw.argmax());
        let mut denied = 0;
        for _ in 0..6 {
            if matches!(session.infer(&x, None), Err(Error::Detected(_))) {
                denied += 1;
            }
        }
        assert!(denied >= 3);
        let reopened = ClientSession::open(session.hardware().clone(), Some(store)).unwrap();
        assert!(matches!(reopened.infer(&x, None), Err(Error::Detected(_))));
    }
}
