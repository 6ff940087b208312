//! Remote-attestation unforgeability game.
//!
//! The challenger sets up fresh hardware and hands the adversary a
//! [`QuoteOracle`] exposing only the public interface. Every quote produced
//! through the oracle is recorded. An attempt counts as a forgery when the
//! submitted quote verifies and its statement `(md_hdl, tag_Q, in, out)` was
//! never produced by the oracle.

use std::collections::HashSet;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crypto::Digest;
use crate::error::Result;

use super::programs::EchoProgram;
use super::{quote_verify, EnclaveHandle, Hardware, HwParams, Program, Quote};

type Statement = (Vec<u8>, Digest, Vec<u8>, Vec<u8>);

pub struct QuoteOracle<'a> {
    hw: &'a Hardware,
    params: HwParams,
    queries: HashSet<Statement>,
    honest_quotes: usize,
    honest_verified: usize,
}

impl QuoteOracle<'_> {
    pub fn params(&self) -> &HwParams {
        &self.params
    }

    pub fn load<P: Program>(&mut self, program: P) -> Result<EnclaveHandle> {
        self.hw.load(&self.params, program)
    }

    pub fn run(&mut self, handle: EnclaveHandle, input: &[u8]) -> Result<Vec<u8>> {
        self.hw.run(handle, input)
    }

    pub fn run_quote(&mut self, handle: EnclaveHandle, input: &[u8]) -> Result<Quote> {
        let q = self.hw.run_quote(handle, input)?;
        self.honest_quotes += 1;
        if quote_verify(&self.params, &q) {
            self.honest_verified += 1;
        }
        self.queries.insert(q.statement());
        Ok(q)
    }
}

/// An adversary in the forgery game. Each call is one attempt; returning
/// `None` forfeits it.
pub trait Forger {
    fn attempt(&mut self, oracle: &mut QuoteOracle<'_>, rng: &mut ChaCha20Rng) -> Option<Quote>;
}

#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct GameOutcome {
    pub attempts: usize,
    pub submitted: usize,
    /// Verified quotes whose statement was never issued by the oracle.
    pub accepted_forgeries: usize,
    /// Verified quotes that replay an issued statement; not forgeries.
    pub replays: usize,
    pub honest_quotes: usize,
    pub honest_verified: usize,
}

pub fn unforgeability_game(attempts: usize, adversary: &mut dyn Forger, seed: u64) -> GameOutcome {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (params, hw) = Hardware::setup_with_seed(128, b"", rng.next_u64())
        .expect("128-bit setup is always available");
    let mut oracle = QuoteOracle {
        hw: &hw,
        params,
        queries: HashSet::new(),
        honest_quotes: 0,
        honest_verified: 0,
    };
    let mut out = GameOutcome {
        attempts,
        ..Default::default()
    };
    for _ in 0..attempts {
        let Some(candidate) = adversary.attempt(&mut oracle, &mut rng) else {
            continue;
        };
        out.submitted += 1;
        if quote_verify(&oracle.params, &candidate) {
            if oracle.queries.contains(&candidate.statement()) {
                out.replays += 1;
            } else {
                out.accepted_forgeries += 1;
            }
        }
    }
    out.honest_quotes = oracle.honest_quotes;
    out.honest_verified = oracle.honest_verified;
    out
}

fn random_bytes(rng: &mut ChaCha20Rng, max: usize) -> Vec<u8> {
    let n = rng.gen_range(0..=max);
    let mut v = vec![0u8; n];
    rng.fill_bytes(&mut v);
    v
}

/// Submits quotes with uniformly random fields and signature.
pub struct RandomBytesForger;

impl Forger for RandomBytesForger {
    fn attempt(&mut self, _: &mut QuoteOracle<'_>, rng: &mut ChaCha20Rng) -> Option<Quote> {
        let mut tag_q = [0u8; 32];
        rng.fill_bytes(&mut tag_q);
        let mut sigma = vec![0u8; 64];
        rng.fill_bytes(&mut sigma);
        Some(Quote {
            md_hdl: random_bytes(rng, 48),
            tag_q,
            input: random_bytes(rng, 32),
            output: random_bytes(rng, 32),
            sigma,
        })
    }
}

/// Obtains an honest quote and resubmits it verbatim.
#[derive(Default)]
pub struct ReplayForger {
    handle: Option<EnclaveHandle>,
}

impl Forger for ReplayForger {
    fn attempt(&mut self, oracle: &mut QuoteOracle<'_>, rng: &mut ChaCha20Rng) -> Option<Quote> {
        let h = match self.handle {
            Some(h) => h,
            None => *self.handle.insert(oracle.load(EchoProgram).ok()?),
        };
        oracle.run_quote(h, &random_bytes(rng, 32)).ok()
    }
}

/// Obtains honest quotes and recombines their fields, keeping a genuine
/// signature over a different statement.
#[derive(Default)]
pub struct SpliceForger {
    handle: Option<EnclaveHandle>,
}

impl Forger for SpliceForger {
    fn attempt(&mut self, oracle: &mut QuoteOracle<'_>, rng: &mut ChaCha20Rng) -> Option<Quote> {
        let h = match self.handle {
            Some(h) => h,
            None => *self.handle.insert(oracle.load(EchoProgram).ok()?),
        };
        let a = oracle.run_quote(h, &rng.next_u64().to_le_bytes()).ok()?;
        let b = oracle.run_quote(h, &rng.next_u64().to_le_bytes()).ok()?;
        let mut q = a.clone();
        match rng.gen_range(0..5) {
            0 => q.output = b"forged-output".to_vec(),
            1 => q.input = b.input,
            2 => q.sigma = b.sigma,
            3 => {
                let i = rng.gen_range(0..q.md_hdl.len());
                q.md_hdl[i] ^= 1;
            }
            _ => q.tag_q = crate::crypto::digest(b"some other program"),
        }
        Some(q)
    }
}

/// Only ever submits what the oracle produced.
#[derive(Default)]
pub struct HonestAdversary {
    handle: Option<EnclaveHandle>,
}

impl Forger for HonestAdversary {
    fn attempt(&mut self, oracle: &mut QuoteOracle<'_>, rng: &mut ChaCha20Rng) -> Option<Quote> {
        let h = match self.handle {
            Some(h) => h,
            None => *self.handle.insert(oracle.load(EchoProgram).ok()?),
        };
        let input = rng.next_u64().to_le_bytes();
        oracle.run_quote(h, &input).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_forger_never_wins() {
        let out = unforgeability_game(2_000, &mut RandomBytesForger, 1);
        assert_eq!(out.submitted, 2_000);
        assert_eq!(out.accepted_forgeries, 0);
    }

    #[test]
    fn replays_are_not_forgeries() {
        let out = unforgeability_game(200, &mut ReplayForger::default(), 2);
        assert_eq!(out.accepted_forgeries, 0);
        assert_eq!(out.replays, 200);
        assert_eq!(out.honest_verified, out.honest_quotes);
    }

    #[test]
    fn spliced_quotes_fail() {
        let out = unforgeability_game(300, &mut SpliceForger::default(), 3);
        assert_eq!(out.accepted_forgeries, 0);
        assert_eq!(out.replays, 0);
    }

    #[test]
    fn honest_adversary_wins_nothing() {
        let out = unforgeability_game(100, &mut HonestAdversary::default(), 4);
        assert_eq!(out.accepted_forgeries, 0);
        assert_eq!(out.honest_quotes, 100);
        assert_eq!(out.honest_verified, 100);
    }

    /// A forger with access to the signing key wins every round, showing the
    /// harness does detect forgeries.
    struct KeyHolder(crate::crypto::SigningKey);

    impl Forger for KeyHolder {
        fn attempt(&mut self, oracle: &mut QuoteOracle<'_>, rng: &mut ChaCha20Rng) -> Option<Quote> {
            let _ = oracle;
            let mut q = Quote {
                md_hdl: vec![0; 48],
                tag_q: [7; 32],
                input: rng.next_u32().to_le_bytes().to_vec(),
                output: b"anything".to_vec(),
                sigma: vec![],
            };
            q.sigma = crate::crypto::sign(&self.0, &crate::crypto::digest(&q.canonical_bytes()));
            Some(q)
        }
    }

    #[test]
    fn harness_counts_real_forgeries() {
        // Rebuild the game's key from its seed to play the cheating role.
        let seed = 9;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let hw_seed = rng.next_u64();
        let mut key_rng = ChaCha20Rng::seed_from_u64(hw_seed);
        let secrets = crate::iee::PlatformSecrets::generate(&mut key_rng);
        let key = crate::crypto::SigningKey::from_bytes(&secrets.quote_key);
        let out = unforgeability_game(10, &mut KeyHolder(key), seed);
        assert_eq!(out.accepted_forgeries, 10);
    }
}
