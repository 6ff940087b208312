//! Software model of an isolated execution environment.
//!
//! A [`Hardware`] instance owns the quote-signing key, a per-platform root
//! seal key and the table of loaded enclaves. Enclave state is only reachable
//! through [`Hardware::run`] and [`Hardware::run_quote`].

mod game;
mod platform;
pub mod programs;
mod quote;

pub use game::{
    unforgeability_game, Forger, GameOutcome, HonestAdversary, QuoteOracle, RandomBytesForger,
    ReplayForger, SpliceForger,
};
pub use platform::PlatformSecrets;
pub use quote::{canonical_quote_bytes, quote_verify, quote_verify_bytes, Quote, QUOTE_MAGIC};

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex, RwLock};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crypto::{self, Digest, RootSealKey, SealKey, SigningKey, VerifyingKey};
use crate::error::{Error, Result};

pub type Measurement = Digest;

pub const ED25519_SCHEME_ID: u8 = 1;

/// Public hardware parameters: the quote verification key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HwParams {
    pub scheme_id: u8,
    pub verification_key: VerifyingKey,
}

impl HwParams {
    pub const ENCODED_LEN: usize = 1 + 32;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::ENCODED_LEN);
        out.push(self.scheme_id);
        out.extend_from_slice(&self.verification_key.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::ENCODED_LEN {
            return Err(Error::ParseError(format!(
                "hardware params must be {} bytes, got {}",
                Self::ENCODED_LEN,
                bytes.len()
            )));
        }
        if bytes[0] != ED25519_SCHEME_ID {
            return Err(Error::ParseError(format!("unknown signature scheme {}", bytes[0])));
        }
        let key: [u8; 32] = bytes[1..].try_into().unwrap();
        if ed25519_dalek::VerifyingKey::from_bytes(&key).is_err() {
            return Err(Error::ParseError("verification key is not a curve point".into()));
        }
        Ok(HwParams {
            scheme_id: bytes[0],
            verification_key: VerifyingKey(key),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EnclaveHandle(pub [u8; 16]);

/// Logic that can be loaded into an enclave.
///
/// `code_bytes` must be a canonical encoding of everything that determines
/// the program's behaviour; its digest is the enclave measurement.
pub trait Program: Send + 'static {
    type State: Default + Send;

    fn code_bytes(&self) -> Vec<u8>;

    fn step(&self, state: &mut Self::State, input: &[u8], env: &mut EnclaveEnv<'_>) -> Result<Vec<u8>>;

    fn validate(&self) -> Result<()> {
        if self.code_bytes().is_empty() {
            return Err(Error::MalformedProgram("empty code".into()));
        }
        Ok(())
    }
}

/// What a running program can see of the platform: its own identity, fresh
/// coins, and a seal key derived for its measurement.
pub struct EnclaveEnv<'a> {
    measurement: Measurement,
    handle: EnclaveHandle,
    coins: ChaCha20Rng,
    root: &'a RootSealKey,
}

impl<'a> EnclaveEnv<'a> {
    #[cfg(test)]
    pub(crate) fn for_test(measurement: Measurement, root: &'a RootSealKey, seed: u64) -> Self {
        EnclaveEnv {
            measurement,
            handle: EnclaveHandle([0; 16]),
            coins: ChaCha20Rng::seed_from_u64(seed),
            root,
        }
    }

    pub fn measurement(&self) -> &Measurement {
        &self.measurement
    }

    pub fn handle(&self) -> EnclaveHandle {
        self.handle
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.coins
    }

    pub fn seal_key(&self) -> SealKey {
        SealKey::derive(self.root, &self.measurement)
    }
}

trait LoadedEnclave: Send {
    fn run(&mut self, input: &[u8], env: &mut EnclaveEnv<'_>) -> Result<Vec<u8>>;
}

struct Loaded<P: Program> {
    program: P,
    state: P::State,
}

impl<P: Program> LoadedEnclave for Loaded<P> {
    fn run(&mut self, input: &[u8], env: &mut EnclaveEnv<'_>) -> Result<Vec<u8>> {
        self.program.step(&mut self.state, input, env)
    }
}

struct EnclaveRecord {
    measurement: Measurement,
    enclave: Mutex<Box<dyn LoadedEnclave>>,
}

pub struct Hardware {
    params: HwParams,
    signing: SigningKey,
    root_seal: RootSealKey,
    coins: Mutex<ChaCha20Rng>,
    table: RwLock<HashMap<EnclaveHandle, Arc<EnclaveRecord>>>,
    issued: Mutex<HashSet<EnclaveHandle>>,
}

impl std::fmt::Debug for Hardware {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hardware")
            .field("params", &self.params)
            .finish_non_exhaustive()
    }
}

impl Hardware {
    /// Fresh hardware with OS-seeded coins. `aux` is accepted for fidelity
    /// with the unforgeability game and otherwise ignored.
    pub fn setup(security_bits: u32, aux: &[u8]) -> Result<(HwParams, Hardware)> {
        Self::setup_with_seed(security_bits, aux, rand::rngs::OsRng.next_u64())
    }

    /// Fresh hardware whose keys and program coins all derive from `seed`.
    pub fn setup_with_seed(security_bits: u32, _aux: &[u8], seed: u64) -> Result<(HwParams, Hardware)> {
        crypto::check_security_level(security_bits)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let secrets = PlatformSecrets::generate(&mut rng);
        let hw = Self::with_coins(&secrets, rng);
        Ok((hw.params.clone(), hw))
    }

    /// Restores a platform from persisted secrets.
    pub fn from_platform(secrets: &PlatformSecrets) -> Hardware {
        Self::with_coins(secrets, ChaCha20Rng::from_entropy())
    }

    pub fn from_platform_with_seed(secrets: &PlatformSecrets, seed: u64) -> Hardware {
        Self::with_coins(secrets, ChaCha20Rng::seed_from_u64(seed))
    }

    fn with_coins(secrets: &PlatformSecrets, coins: ChaCha20Rng) -> Hardware {
        let signing = SigningKey::from_bytes(&secrets.quote_key);
        let params = HwParams {
            scheme_id: ED25519_SCHEME_ID,
            verification_key: signing.verifying_key(),
        };
        Hardware {
            params,
            signing,
            root_seal: RootSealKey::from_bytes(secrets.root_seal_key),
            coins: Mutex::new(coins),
            table: RwLock::new(HashMap::new()),
            issued: Mutex::new(HashSet::new()),
        }
    }

    pub fn params(&self) -> &HwParams {
        &self.params
    }

    fn fresh_coins(&self) -> ChaCha20Rng {
        let mut seed = [0u8; 32];
        self.coins.lock().unwrap().fill_bytes(&mut seed);
        ChaCha20Rng::from_seed(seed)
    }

    pub fn load<P: Program>(&self, params: &HwParams, program: P) -> Result<EnclaveHandle> {
        if params != &self.params {
            return Err(Error::InvalidArgument(
                "parameters belong to a different hardware instance".into(),
            ));
        }
        program.validate()?;
        let measurement = crypto::digest(&program.code_bytes());
        let handle = {
            let mut issued = self.issued.lock().unwrap();
            let mut coins = self.coins.lock().unwrap();
            loop {
                let mut id = [0u8; 16];
                coins.fill_bytes(&mut id);
                let h = EnclaveHandle(id);
                if issued.insert(h) {
                    break h;
                }
            }
        };
        let record = EnclaveRecord {
            measurement,
            enclave: Mutex::new(Box::new(Loaded {
                program,
                state: P::State::default(),
            })),
        };
        self.table.write().unwrap().insert(handle, Arc::new(record));
        Ok(handle)
    }

    pub fn measurement(&self, handle: EnclaveHandle) -> Result<Measurement> {
        Ok(self.record(handle)?.measurement)
    }

    /// Drops an enclave and its state.
    pub fn unload(&self, handle: EnclaveHandle) -> Result<()> {
        self.table
            .write()
            .unwrap()
            .remove(&handle)
            .map(|_| ())
            .ok_or(Error::HandleNotFound)
    }

    fn record(&self, handle: EnclaveHandle) -> Result<Arc<EnclaveRecord>> {
        self.table
            .read()
            .unwrap()
            .get(&handle)
            .cloned()
            .ok_or(Error::HandleNotFound)
    }

    pub fn run(&self, handle: EnclaveHandle, input: &[u8]) -> Result<Vec<u8>> {
        let record = self.record(handle)?;
        let mut env = EnclaveEnv {
            measurement: record.measurement,
            handle,
            coins: self.fresh_coins(),
            root: &self.root_seal,
        };
        let mut enclave = record.enclave.lock().unwrap();
        enclave
            .run(input, &mut env)
            .map_err(|e| Error::Program(e.into_failure()))
    }

    pub fn run_quote(&self, handle: EnclaveHandle, input: &[u8]) -> Result<Quote> {
        let measurement = self.measurement(handle)?;
        let output = self.run(handle, input)?;
        let mut md_hdl = Vec::with_capacity(48);
        md_hdl.extend_from_slice(&measurement);
        md_hdl.extend_from_slice(&handle.0);
        let canonical = canonical_quote_bytes(&md_hdl, &measurement, input, &output);
        let sigma = crypto::sign(&self.signing, &crypto::digest(&canonical));
        Ok(Quote {
            md_hdl,
            tag_q: measurement,
            input: input.to_vec(),
            output,
            sigma,
        })
    }
}
