//! Cryptographic building blocks: digests, signatures, public-key
//! encryption for provisioning, and chunked sealing of enclave data.

mod pke;
mod seal;

pub use pke::{pke_dec, pke_enc, pke_keygen, Ciphertext, KeyPair, PkePublicKey, PkeSecretKey};
pub use seal::{
    seal, seal_with_chunk_size, unseal, unseal_into, RootSealKey, SealKey, SealedBlob,
    SealedChunk, DEFAULT_CHUNK_SIZE, SEAL_MAGIC, SEAL_VERSION,
};

use ed25519_dalek::Signer;
use rand::{CryptoRng, RngCore};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};

pub const DIGEST_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

/// The only security level offered by the suite.
pub const SECURITY_BITS: u32 = 128;

pub type Digest = [u8; DIGEST_LEN];

/// SHA-256.
pub fn digest(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

pub(crate) fn check_security_level(bits: u32) -> Result<()> {
    if bits == SECURITY_BITS {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "unsupported security level {bits}; only {SECURITY_BITS} is available"
        )))
    }
}

/// Ed25519 signing key.
pub struct SigningKey(ed25519_dalek::SigningKey);

/// Ed25519 verification key as raw bytes. Parsing is deferred to
/// [`verify`] so that malformed keys simply fail verification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VerifyingKey(pub [u8; 32]);

impl SigningKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        SigningKey(ed25519_dalek::SigningKey::generate(rng))
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Self {
        SigningKey(ed25519_dalek::SigningKey::from_bytes(bytes))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        VerifyingKey(self.0.verifying_key().to_bytes())
    }
}

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("SigningKey")
            .field(&self.verifying_key())
            .finish()
    }
}

pub fn sign(key: &SigningKey, bytes: &[u8]) -> Vec<u8> {
    key.0.sign(bytes).to_bytes().to_vec()
}

/// Returns `true` iff `sig` is a valid signature over `bytes` under `key`.
/// Malformed keys or signatures yield `false`.
pub fn verify(key: &VerifyingKey, bytes: &[u8], sig: &[u8]) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&key.0) else {
        return false;
    };
    let Ok(sig) = ed25519_dalek::Signature::from_slice(sig) else {
        return false;
    };
    vk.verify_strict(bytes, &sig).is_ok()
}

/// HMAC-SHA256, used to authenticate the monotonic counter file.
pub fn mac(key: &[u8], bytes: &[u8]) -> Digest {
    use hmac::Mac;
    let mut m = <hmac::Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    m.update(bytes);
    m.finalize().into_bytes().into()
}

pub fn mac_verify(key: &[u8], bytes: &[u8], tag: &[u8]) -> bool {
    use hmac::Mac;
    let mut m = <hmac::Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    m.update(bytes);
    m.verify_slice(tag).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn digest_basics() {
        assert_eq!(digest(b"x"), digest(b"x"));
        assert_ne!(digest(b""), digest(b"a"));
        assert_eq!(digest(&[0u8; 1000]).len(), 32);
        // FIPS 180-2 test vector
        let abc = digest(b"abc");
        assert_eq!(abc[..4], [0xba, 0x78, 0x16, 0xbf]);
    }

    #[test]
    fn sign_verify() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let sk = SigningKey::generate(&mut rng);
        let other = SigningKey::generate(&mut rng);
        let sig = sign(&sk, b"quote bytes");
        assert!(verify(&sk.verifying_key(), b"quote bytes", &sig));
        assert!(!verify(&other.verifying_key(), b"quote bytes", &sig));
        let mut bad = sig.clone();
        bad[10] ^= 1;
        assert!(!verify(&sk.verifying_key(), b"quote bytes", &bad));
        assert!(!verify(&sk.verifying_key(), b"quote bytez", &sig));
        assert!(!verify(&sk.verifying_key(), b"quote bytes", &sig[..63]));
        assert!(!verify(&VerifyingKey([0xff; 32]), b"quote bytes", &sig));
    }

    #[test]
    fn signing_key_bytes_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let sk = SigningKey::generate(&mut rng);
        let back = SigningKey::from_bytes(&sk.to_bytes());
        assert_eq!(back.verifying_key(), sk.verifying_key());
    }

    #[test]
    fn mac_detects_changes() {
        let tag = mac(b"key", b"counter=5");
        assert!(mac_verify(b"key", b"counter=5", &tag));
        assert!(!mac_verify(b"key", b"counter=6", &tag));
        assert!(!mac_verify(b"kez", b"counter=5", &tag));
    }

    #[test]
    fn only_128_bit_level() {
        assert!(check_security_level(128).is_ok());
        assert!(check_security_level(256).is_err());
    }
}
