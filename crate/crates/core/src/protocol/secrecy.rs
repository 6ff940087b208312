//! Executable model-secrecy experiment.
//!
//! The adversary obtains a request from its own hardware, then receives
//! either the real hidden model (`b = 1`, oracle answers via classify) or a
//! simulated one (`b = 0`: an encryption of an all-zero string of the same
//! length, oracle answers straight from the plaintext model). It outputs a
//! guess bit; the advantage is the gap between its guess-1 rates.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{classify, obtain_on, provide, verify_request, HiddenModel, ModelRequest, Policy};
use crate::crypto::pke_enc;
use crate::error::{Error, Result};
use crate::iee::Hardware;
use crate::nn::{forward, LayerParams, ModelDef, ModelSecrets, Posterior, Tensor};

pub type Oracle<'a> = dyn FnMut(&Tensor) -> Result<Posterior> + 'a;

pub trait SecrecyAdversary {
    fn name(&self) -> &'static str;

    fn guess(&mut self, def: &ModelDef, hidden: &HiddenModel, oracle: &mut Oracle<'_>, rng: &mut ChaCha20Rng) -> Result<bool>;
}

/// Byte length of the serialized parameters of any model with `def`.
pub fn secrets_len(def: &ModelDef) -> usize {
    let zeros = ModelSecrets {
        layers: def
            .param_shapes()
            .into_iter()
            .map(|(w, b)| LayerParams {
                weights: Tensor::zeros(w),
                bias: Tensor::zeros(b),
            })
            .collect(),
    };
    zeros.to_mlcw().len()
}

/// The first simulator: encrypts zeros of the right length to the
/// requester's key.
pub fn sim1<R: RngCore + rand::CryptoRng>(def: &ModelDef, req: &ModelRequest, rng: &mut R) -> Result<HiddenModel> {
    let pk = verify_request(req)?;
    let policy = Policy::default();
    let zeros = vec![0u8; secrets_len(def)];
    Ok(HiddenModel {
        model_def: def.clone(),
        c: pke_enc(&pk, &zeros, &HiddenModel::aad(def, &policy), rng)?,
        policy,
    })
}

/// Runs one experiment with challenge bit `b` and returns the guess.
pub fn secrecy_experiment(
    b: bool,
    def: &ModelDef,
    secrets: &ModelSecrets,
    adversary: &mut dyn SecrecyAdversary,
    query_budget: usize,
    rng: &mut ChaCha20Rng,
) -> Result<bool> {
    let (_, hw) = Hardware::setup_with_seed(128, b"", rng.next_u64())?;
    let (req, session) = obtain_on(Arc::new(hw), None)?;
    let hidden = if b {
        provide(def, secrets, &Policy::default(), &req, rng)?
    } else {
        sim1(def, &req, rng)?
    };
    let mut used = 0;
    let mut oracle = |x: &Tensor| -> Result<Posterior> {
        if used == query_budget {
            return Err(Error::QuotaExceeded {
                threshold: query_budget as u64,
            });
        }
        used += 1;
        if b {
            classify(&session, &hidden, x)
        } else {
            forward(def, secrets, x)
        }
    };
    adversary.guess(def, &hidden, &mut oracle, rng)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SecrecyReport {
    pub distinguisher: String,
    pub trials_per_bit: usize,
    pub guess1_given_real: f64,
    pub guess1_given_sim: f64,
    pub advantage: f64,
}

/// Estimates `|Pr[guess = 1 | b = 1] - Pr[guess = 1 | b = 0]|` from
/// `trials` runs per challenge bit.
pub fn secrecy_advantage(
    adversary: &mut dyn SecrecyAdversary,
    def: &ModelDef,
    secrets: &ModelSecrets,
    trials: usize,
    query_budget: usize,
    seed: u64,
) -> Result<SecrecyReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut ones = [0usize; 2];
    for i in 0..2 * trials {
        let b = i % 2 == 1;
        if secrecy_experiment(b, def, secrets, adversary, query_budget, &mut rng)? {
            ones[b as usize] += 1;
        }
    }
    let real = ones[1] as f64 / trials as f64;
    let sim = ones[0] as f64 / trials as f64;
    Ok(SecrecyReport {
        distinguisher: adversary.name().to_string(),
        trials_per_bit: trials,
        guess1_given_real: real,
        guess1_given_sim: sim,
        advantage: (real - sim).abs(),
    })
}

fn random_input(def: &ModelDef, rng: &mut ChaCha20Rng) -> Result<Tensor> {
    let n = def.input.iter().product();
    Tensor::new(def.input.clone(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Asks every query twice and guesses "real" iff all answers are valid
/// and repeat exactly.
pub struct OracleConsistencyDistinguisher {
    pub queries: usize,
}

impl SecrecyAdversary for OracleConsistencyDistinguisher {
    fn name(&self) -> &'static str {
        "oracle-consistency"
    }

    fn guess(&mut self, def: &ModelDef, _: &HiddenModel, oracle: &mut Oracle<'_>, rng: &mut ChaCha20Rng) -> Result<bool> {
        for _ in 0..self.queries {
            let x = random_input(def, rng)?;
            let (a, b) = (oracle(&x)?, oracle(&x)?);
            if a != b || a.len() != def.classes {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Guesses "real" iff the ciphertext body has the length real parameters
/// would have.
pub struct CiphertextLengthDistinguisher;

impl SecrecyAdversary for CiphertextLengthDistinguisher {
    fn name(&self) -> &'static str {
        "ciphertext-length"
    }

    fn guess(&mut self, def: &ModelDef, hidden: &HiddenModel, _: &mut Oracle<'_>, _: &mut ChaCha20Rng) -> Result<bool> {
        Ok(hidden.c.body.len() == secrets_len(def))
    }
}

/// Pearson chi-square test of the ciphertext body against uniform bytes;
/// guesses "real" iff uniformity is rejected at the 5% level.
pub struct ByteHistogramDistinguisher;

/// Upper 5% point of chi-square with 255 degrees of freedom.
pub const CHI2_255_CRITICAL: f64 = 293.2478;

pub fn byte_chi_square(bytes: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let expected = bytes.len() as f64 / 256.0;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

impl SecrecyAdversary for ByteHistogramDistinguisher {
    fn name(&self) -> &'static str {
        "byte-histogram"
    }

    fn guess(&mut self, _: &ModelDef, hidden: &HiddenModel, _: &mut Oracle<'_>, _: &mut ChaCha20Rng) -> Result<bool> {
        Ok(byte_chi_square(&hidden.c.body) > CHI2_255_CRITICAL)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::tests::mlp;

    #[test]
    fn simulated_hidden_model_matches_real_length() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let def = mlp(&[5, 7, 3]);
        let secrets = ModelSecrets::random(&def, &mut rng);
        assert_eq!(secrets_len(&def), secrets.to_mlcw().len());
        let (req, _s) = super::super::obtain(&def).unwrap();
        let real = provide(&def, &secrets, &Policy::default(), &req, &mut rng).unwrap();
        let sim = sim1(&def, &req, &mut rng).unwrap();
        assert_eq!(real.to_bytes().len(), sim.to_bytes().len());
    }

    #[test]
    fn oracle_answers_agree_across_worlds() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let def = mlp(&[4, 6, 2]);
        let secrets = ModelSecrets::random(&def, &mut rng);
        struct Recorder(Vec<Posterior>);
        impl SecrecyAdversary for Recorder {
            fn name(&self) -> &'static str {
                "recorder"
            }
            fn guess(&mut self, def: &ModelDef, _: &HiddenModel, o: &mut Oracle<'_>, _: &mut ChaCha20Rng) -> Result<bool> {
                let mut r = ChaCha20Rng::seed_from_u64(0);
                for _ in 0..5 {
                    self.0.push(o(&random_input(def, &mut r)?)?);
                }
                assert!(o(&random_input(def, &mut r)?).is_err());
                Ok(true)
            }
        }
        let (mut a, mut b) = (Recorder(vec![]), Recorder(vec![]));
        secrecy_experiment(true, &def, &secrets, &mut a, 5, &mut rng).unwrap();
        secrecy_experiment(false, &def, &secrets, &mut b, 5, &mut rng).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn chi_square_flags_structured_bytes() {
        assert!(byte_chi_square(&vec![0u8; 4096]) > CHI2_255_CRITICAL);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut buf = vec![0u8; 4096];
        rng.fill_bytes(&mut buf);
        assert!(byte_chi_square(&buf) < CHI2_255_CRITICAL * 1.2);
    }
}
