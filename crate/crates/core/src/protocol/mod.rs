//! Model provisioning and offline classification.
//!
//! The client loads [`ProgramQ`] into its enclave and obtains an attested
//! public key ([`obtain`]). The service provider checks the quote and
//! encrypts the model parameters to that key ([`provide`]). From then on
//! the client classifies locally ([`classify`], or [`ClientSession::install`]
//! followed by [`ClientSession::infer`] for persistent, metered use).

mod program_q;
pub mod secrecy;
pub mod wire;

pub use program_q::{program_q_tag, Command, GuardStatus, ProgramQ, ProgramQState, PROGRAM_Q_CODE};
pub use secrecy::{
    secrecy_advantage, secrecy_experiment, ByteHistogramDistinguisher, CiphertextLengthDistinguisher,
    OracleConsistencyDistinguisher, SecrecyAdversary, SecrecyReport,
};
pub use wire::{request_provision, serve_provision, ProvisionService, ServerHandle};

use std::sync::Arc;

use rand::{CryptoRng, RngCore};

use crate::codec::{put_prefixed, Reader};
use crate::crypto::{pke_enc, Ciphertext, PkePublicKey, VerifyingKey};
use crate::defense::DetectorModel;
use crate::error::{Error, Result};
use crate::guard::{QueryTicket, UNLIMITED};
use crate::iee::{quote_verify, EnclaveHandle, Hardware, HwParams, Quote};
use crate::nn::{ModelDef, ModelSecrets, Posterior, Tensor};
use crate::storage::SharedStore;

const POLICY_MAGIC: &[u8; 4] = b"MLCP";
const HIDDEN_MAGIC: &[u8; 4] = b"MLCH";
const FORMAT_VERSION: u16 = 1;

/// Query set-growth detector parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StealingPolicy {
    pub tau: f64,
    pub rho: f64,
    pub window: usize,
}

/// Usage terms chosen by the service provider. Travels in the clear next to
/// the ciphertext and is authenticated as its associated data, so the
/// client can read but not alter it.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    /// Maximum released posteriors; [`UNLIMITED`] disables metering.
    pub threshold: u64,
    /// When set, every query needs a ticket signed by this key.
    pub ticket_key: Option<VerifyingKey>,
    /// Noise strength `c`; 0 disables noising.
    pub noise_c: f64,
    /// Noise distribution `T`; uniform when absent.
    pub noise_t: Option<Posterior>,
    pub stealing: Option<StealingPolicy>,
    pub detector: Option<DetectorModel>,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            threshold: UNLIMITED,
            ticket_key: None,
            noise_c: 0.0,
            noise_t: None,
            stealing: None,
            detector: None,
        }
    }
}

impl Policy {
    pub fn with_threshold(threshold: u64) -> Self {
        Policy {
            threshold,
            ..Default::default()
        }
    }

    pub fn validate(&self, def: &ModelDef) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_c) {
            return Err(Error::InvalidArgument(format!("noise c = {} outside [0, 1]", self.noise_c)));
        }
        if let Some(t) = &self.noise_t {
            if t.len() != def.classes {
                return Err(Error::DimensionMismatch {
                    expected: def.classes,
                    found: t.len(),
                });
            }
        }
        if let Some(s) = &self.stealing {
            if s.window == 0 || !(0.0..=1.0).contains(&s.rho) || s.tau.is_nan() || s.tau < 0.0 {
                return Err(Error::InvalidArgument(format!("stealing policy {s:?}")));
            }
        }
        if let Some(d) = &self.detector {
            d.secrets.check(&d.def)?;
            let n: usize = def.input.iter().product();
            let m: usize = d.def.input.iter().product();
            if n != m || d.def.classes != 2 {
                return Err(Error::SchemaError("detector does not fit the model input".into()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = POLICY_MAGIC.to_vec();
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.threshold.to_le_bytes());
        match &self.ticket_key {
            Some(k) => {
                out.push(1);
                out.extend_from_slice(&k.0);
            }
            None => out.push(0),
        }
        out.extend_from_slice(&self.noise_c.to_le_bytes());
        put_prefixed(&mut out, &self.noise_t.as_ref().map(Posterior::to_bytes).unwrap_or_default());
        match &self.stealing {
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.tau.to_le_bytes());
                out.extend_from_slice(&s.rho.to_le_bytes());
                out.extend_from_slice(&(s.window as u32).to_le_bytes());
            }
            None => out.push(0),
        }
        match &self.detector {
            Some(d) => {
                out.push(1);
                put_prefixed(&mut out, &d.def.canonical_bytes());
                put_prefixed(&mut out, &d.secrets.to_mlcw());
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "policy");
        r.expect_magic(POLICY_MAGIC)?;
        if r.u16()? != FORMAT_VERSION {
            return Err(Error::ParseError("unsupported policy version".into()));
        }
        let threshold = r.u64()?;
        let ticket_key = match r.u8()? {
            0 => None,
            1 => Some(VerifyingKey(r.array()?)),
            f => return Err(Error::ParseError(format!("policy flag {f}"))),
        };
        let noise_c = f64::from_le_bytes(r.array()?);
        let t = r.prefixed()?;
        let noise_t = if t.is_empty() { None } else { Some(Posterior::from_bytes(t)?) };
        let stealing = match r.u8()? {
            0 => None,
            1 => Some(StealingPolicy {
                tau: f64::from_le_bytes(r.array()?),
                rho: f64::from_le_bytes(r.array()?),
                window: r.u32()? as usize,
            }),
            f => return Err(Error::ParseError(format!("policy flag {f}"))),
        };
        let detector = match r.u8()? {
            0 => None,
            1 => {
                let text = std::str::from_utf8(r.prefixed()?).map_err(|e| Error::ParseError(e.to_string()))?;
                let def = ModelDef::from_toml(text)?;
                let secrets = ModelSecrets::from_mlcw(&def, r.prefixed()?)?;
                Some(DetectorModel { def, secrets })
            }
            f => return Err(Error::ParseError(format!("policy flag {f}"))),
        };
        r.finish()?;
        Ok(Policy {
            threshold,
            ticket_key,
            noise_c,
            noise_t,
            stealing,
            detector,
        })
    }
}

/// Public model definition, usage policy and the encrypted parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenModel {
    pub model_def: ModelDef,
    pub policy: Policy,
    pub c: Ciphertext,
}

impl HiddenModel {
    /// Associated data binding the ciphertext to the definition and policy.
    pub fn aad(def: &ModelDef, policy: &Policy) -> Vec<u8> {
        let mut out = Vec::new();
        put_prefixed(&mut out, &def.canonical_bytes());
        put_prefixed(&mut out, &policy.to_bytes());
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = HIDDEN_MAGIC.to_vec();
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_prefixed(&mut out, &self.model_def.canonical_bytes());
        put_prefixed(&mut out, &self.policy.to_bytes());
        put_prefixed(&mut out, &self.c.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "hidden model");
        r.expect_magic(HIDDEN_MAGIC)?;
        if r.u16()? != FORMAT_VERSION {
            return Err(Error::ParseError("unsupported hidden model version".into()));
        }
        let text = std::str::from_utf8(r.prefixed()?).map_err(|e| Error::ParseError(e.to_string()))?;
        let model_def = ModelDef::from_toml(text)?;
        let policy = Policy::from_bytes(r.prefixed()?)?;
        let c = Ciphertext::from_bytes(r.prefixed()?)?;
        r.finish()?;
        Ok(HiddenModel { model_def, policy, c })
    }
}

/// Hardware parameters plus the quote over the enclave's `setup` run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelRequest {
    pub hw_params: HwParams,
    pub setup_quote: Quote,
}

impl ModelRequest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.hw_params.to_bytes();
        out.extend_from_slice(&self.setup_quote.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HwParams::ENCODED_LEN {
            return Err(Error::ParseError("model request truncated".into()));
        }
        let (p, q) = bytes.split_at(HwParams::ENCODED_LEN);
        Ok(ModelRequest {
            hw_params: HwParams::from_bytes(p)?,
            setup_quote: Quote::from_bytes(q)?,
        })
    }
}

/// Client-side handle to an enclave running Program Q.
#[derive(Clone, Debug)]
pub struct ClientSession {
    hw: Arc<Hardware>,
    handle: EnclaveHandle,
}

impl ClientSession {
    /// Loads Program Q on `hw` without running setup; enough for `infer`
    /// and `status` against previously installed state in `store`.
    pub fn open(hw: Arc<Hardware>, store: Option<SharedStore>) -> Result<Self> {
        let params = hw.params().clone();
        let handle = hw.load(&params, ProgramQ::new(store))?;
        Ok(ClientSession { hw, handle })
    }

    pub fn handle(&self) -> EnclaveHandle {
        self.handle
    }

    pub fn hardware(&self) -> &Arc<Hardware> {
        &self.hw
    }

    pub fn run(&self, cmd: &Command) -> Result<Vec<u8>> {
        self.hw.run(self.handle, &cmd.to_bytes()).map_err(unwrap_program_error)
    }

    pub fn run_quote(&self, cmd: &Command) -> Result<Quote> {
        self.hw.run_quote(self.handle, &cmd.to_bytes()).map_err(unwrap_program_error)
    }

    /// Decrypts the hidden model inside the enclave, re-seals it layer by
    /// layer to host storage and initializes the query guard.
    pub fn install(&self, hidden: &HiddenModel) -> Result<()> {
        self.run(&Command::Install { hidden: hidden.clone() }).map(drop)
    }

    /// Classifies against the installed model through the full hook chain.
    pub fn infer(&self, input: &Tensor, ticket: Option<&QueryTicket>) -> Result<Posterior> {
        let out = self.run(&Command::Infer {
            input: input.clone(),
            ticket: ticket.cloned(),
        })?;
        Posterior::from_bytes(&out)
    }

    pub fn status(&self) -> Result<GuardStatus> {
        GuardStatus::from_bytes(&self.run(&Command::Status)?)
    }
}

fn unwrap_program_error(e: Error) -> Error {
    match e {
        Error::Program(f) => Error::from_failure(f),
        other => other,
    }
}

/// Loads Program Q on `hw` and runs `setup` with a quote.
pub fn obtain_on(hw: Arc<Hardware>, store: Option<SharedStore>) -> Result<(ModelRequest, ClientSession)> {
    let session = ClientSession::open(hw, store)?;
    let setup_quote = session.run_quote(&Command::Setup)?;
    let req = ModelRequest {
        hw_params: session.hw.params().clone(),
        setup_quote,
    };
    Ok((req, session))
}

/// Sets up fresh hardware, loads Program Q and requests a model key.
pub fn obtain(model_def: &ModelDef) -> Result<(ModelRequest, ClientSession)> {
    model_def.validate()?;
    let (_, hw) = Hardware::setup(128, b"")?;
    obtain_on(Arc::new(hw), None)
}

/// Checks that `req` carries an honest quote of Program Q's `setup` and
/// returns the enclave public key from it.
pub fn verify_request(req: &ModelRequest) -> Result<PkePublicKey> {
    let q = &req.setup_quote;
    if !quote_verify(&req.hw_params, q) {
        return Err(Error::QuoteInvalid);
    }
    if q.tag_q != program_q_tag() {
        return Err(Error::TagMismatch);
    }
    if q.input != Command::Setup.to_bytes() {
        return Err(Error::QuoteInvalid);
    }
    let pk: [u8; 32] = q.output.as_slice().try_into().map_err(|_| Error::QuoteInvalid)?;
    Ok(PkePublicKey(pk))
}

pub fn provide<R: RngCore + CryptoRng>(
    model_def: &ModelDef,
    secrets: &ModelSecrets,
    policy: &Policy,
    req: &ModelRequest,
    rng: &mut R,
) -> Result<HiddenModel> {
    let pk = verify_request(req)?;
    model_def.validate()?;
    secrets.check(model_def)?;
    policy.validate(model_def)?;
    let payload = zeroize::Zeroizing::new(secrets.to_mlcw());
    let c = pke_enc(&pk, &payload, &HiddenModel::aad(model_def, policy), rng)?;
    Ok(HiddenModel {
        model_def: model_def.clone(),
        policy: policy.clone(),
        c,
    })
}

/// One decrypt-and-classify call, exactly as in the formal protocol.
pub fn classify(session: &ClientSession, hidden: &HiddenModel, input: &Tensor) -> Result<Posterior> {
    let out = session.run(&Command::Classify {
        hidden: hidden.clone(),
        input: input.clone(),
    })?;
    Posterior::from_bytes(&out)
}
