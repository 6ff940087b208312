//! Attestation quotes.
//!
//! Serialized as `"MLCQ" | md_hdl | tag_Q | in | out | sigma`, every field
//! prefixed with a u32 LE length. The signature covers the SHA-256 digest of
//! the canonical bytes of the first four fields.

use crate::codec::{put_prefixed, Reader};
use crate::crypto::{self, Digest};
use crate::error::{Error, Result};

use super::HwParams;

pub const QUOTE_MAGIC: &[u8; 4] = b"MLCQ";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Quote {
    pub md_hdl: Vec<u8>,
    pub tag_q: Digest,
    pub input: Vec<u8>,
    pub output: Vec<u8>,
    pub sigma: Vec<u8>,
}

pub fn canonical_quote_bytes(md_hdl: &[u8], tag_q: &[u8], input: &[u8], output: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + md_hdl.len() + tag_q.len() + input.len() + output.len());
    put_prefixed(&mut out, md_hdl);
    put_prefixed(&mut out, tag_q);
    put_prefixed(&mut out, input);
    put_prefixed(&mut out, output);
    out
}

impl Quote {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_quote_bytes(&self.md_hdl, &self.tag_q, &self.input, &self.output)
    }

    /// The signed statement `(md_hdl, tag_Q, in, out)`, used as the
    /// query-list key in the forgery game.
    pub fn statement(&self) -> (Vec<u8>, Digest, Vec<u8>, Vec<u8>) {
        (
            self.md_hdl.clone(),
            self.tag_q,
            self.input.clone(),
            self.output.clone(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = QUOTE_MAGIC.to_vec();
        out.extend_from_slice(&self.canonical_bytes());
        put_prefixed(&mut out, &self.sigma);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "quote");
        r.expect_magic(QUOTE_MAGIC)?;
        let md_hdl = r.prefixed()?.to_vec();
        let tag = r.prefixed()?;
        let tag_q: Digest = tag
            .try_into()
            .map_err(|_| Error::ParseError(format!("quote tag of {} bytes", tag.len())))?;
        let input = r.prefixed()?.to_vec();
        let output = r.prefixed()?.to_vec();
        let sigma = r.prefixed()?.to_vec();
        r.finish()?;
        Ok(Quote {
            md_hdl,
            tag_q,
            input,
            output,
            sigma,
        })
    }
}

pub fn quote_verify(params: &HwParams, quote: &Quote) -> bool {
    if params.scheme_id != super::ED25519_SCHEME_ID {
        return false;
    }
    let d = crypto::digest(&quote.canonical_bytes());
    crypto::verify(&params.verification_key, &d, &quote.sigma)
}

/// Verifies a serialized quote; anything unparseable verifies as `false`.
pub fn quote_verify_bytes(params: &HwParams, bytes: &[u8]) -> bool {
    Quote::from_bytes(bytes)
        .map(|q| quote_verify(params, &q))
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iee::programs::{CounterProgram, EchoProgram};
    use crate::iee::Hardware;
    use proptest::prelude::*;

    fn honest() -> (HwParams, Quote) {
        let (params, hw) = Hardware::setup_with_seed(128, b"", 21).unwrap();
        let h = hw.load(&params, EchoProgram).unwrap();
        let q = hw.run_quote(h, b"payload").unwrap();
        (params, q)
    }

    #[test]
    fn honest_quote_verifies_and_roundtrips() {
        let (params, q) = honest();
        assert!(quote_verify(&params, &q));
        let bytes = q.to_bytes();
        assert_eq!(&bytes[..4], b"MLCQ");
        assert_eq!(Quote::from_bytes(&bytes).unwrap(), q);
        assert!(quote_verify_bytes(&params, &bytes));
        assert_eq!(q.output, b"payload");
        assert_eq!(q.md_hdl.len(), 48);
        assert_eq!(&q.md_hdl[..32], &q.tag_q);
    }

    #[test]
    fn every_single_bit_flip_is_rejected() {
        let (params, q) = honest();
        let bytes = q.to_bytes();
        for bit in 0..bytes.len() * 8 {
            let mut m = bytes.clone();
            m[bit / 8] ^= 1 << (bit % 8);
            assert!(!quote_verify_bytes(&params, &m), "bit {bit} flip verified");
        }
    }

    #[test]
    fn swapped_tag_and_foreign_params_fail() {
        let (params, mut q) = honest();
        q.tag_q = crypto::digest(&CounterProgram.code_bytes());
        assert!(!quote_verify(&params, &q));

        let (_, q) = honest();
        let (other, _) = Hardware::setup_with_seed(128, b"", 22).unwrap();
        assert!(!quote_verify(&other, &q));
    }

    #[test]
    fn empty_and_garbage_bytes_fail() {
        let (params, _) = honest();
        assert!(!quote_verify_bytes(&params, b""));
        assert!(!quote_verify_bytes(&params, b"MLCQ"));
        assert!(!quote_verify_bytes(&params, &[0u8; 200]));
    }

    use crate::iee::Program;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn run_quote_always_verifies(input in proptest::collection::vec(any::<u8>(), 0..256)) {
            let (params, hw) = Hardware::setup_with_seed(128, b"", 23).unwrap();
            let h = hw.load(&params, EchoProgram).unwrap();
            let q = hw.run_quote(h, &input).unwrap();
            prop_assert!(quote_verify(&params, &q));
            prop_assert!(quote_verify(&params, &Quote::from_bytes(&q.to_bytes()).unwrap()));
        }
    }
}
