//! Small reference programs used by tests and the forgery game.

use rand::RngCore;

use super::{EnclaveEnv, Program};
use crate::error::{Error, Result};

/// Returns its input unchanged.
pub struct EchoProgram;

impl Program for EchoProgram {
    type State = ();

    fn code_bytes(&self) -> Vec<u8> {
        b"mlcapsule/echo/v1".to_vec()
    }

    fn step(&self, _: &mut (), input: &[u8], _: &mut EnclaveEnv<'_>) -> Result<Vec<u8>> {
        Ok(input.to_vec())
    }
}

/// `inc` increments and returns a counter; `get` returns it.
pub struct CounterProgram;

impl Program for CounterProgram {
    type State = u64;

    fn code_bytes(&self) -> Vec<u8> {
        b"mlcapsule/counter/v1".to_vec()
    }

    fn step(&self, state: &mut u64, input: &[u8], _: &mut EnclaveEnv<'_>) -> Result<Vec<u8>> {
        match input {
            b"inc" => {
                *state += 1;
                Ok(state.to_string().into_bytes())
            }
            b"get" => Ok(state.to_string().into_bytes()),
            other => Err(Error::UnknownCommand(String::from_utf8_lossy(other).into_owned())),
        }
    }
}

/// Outputs 16 bytes drawn from the enclave's coins.
pub struct CoinProgram;

impl Program for CoinProgram {
    type State = ();

    fn code_bytes(&self) -> Vec<u8> {
        b"mlcapsule/coins/v1".to_vec()
    }

    fn step(&self, _: &mut (), _: &[u8], env: &mut EnclaveEnv<'_>) -> Result<Vec<u8>> {
        let mut out = vec![0u8; 16];
        env.rng().fill_bytes(&mut out);
        Ok(out)
    }
}

/// Fails every call with an `InvalidArgument` naming the input.
pub struct FailingProgram;

impl Program for FailingProgram {
    type State = ();

    fn code_bytes(&self) -> Vec<u8> {
        b"mlcapsule/failing/v1".to_vec()
    }

    fn step(&self, _: &mut (), input: &[u8], _: &mut EnclaveEnv<'_>) -> Result<Vec<u8>> {
        Err(Error::InvalidArgument(format!(
            "refusing {}",
            String::from_utf8_lossy(input)
        )))
    }
}

/// A program with no code, rejected at load.
pub struct EmptyProgram;

impl Program for EmptyProgram {
    type State = ();

    fn code_bytes(&self) -> Vec<u8> {
        Vec::new()
    }

    fn step(&self, _: &mut (), _: &[u8], _: &mut EnclaveEnv<'_>) -> Result<Vec<u8>> {
        Ok(Vec::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iee::Hardware;

    #[test]
    fn empty_program_is_malformed() {
        let (params, hw) = Hardware::setup_with_seed(128, b"", 1).unwrap();
        assert!(matches!(
            hw.load(&params, EmptyProgram),
            Err(Error::MalformedProgram(_))
        ));
    }

    #[test]
    fn counter_rejects_unknown_command() {
        let (params, hw) = Hardware::setup_with_seed(128, b"", 2).unwrap();
        let h = hw.load(&params, CounterProgram).unwrap();
        assert!(matches!(hw.run(h, b"dec"), Err(Error::Program(_))));
        // failed call leaves state untouched
        assert_eq!(hw.run(h, b"get").unwrap(), b"0");
    }
}
