//! Hybrid public-key encryption: X25519 key agreement, HKDF-SHA256 key
//! schedule and ChaCha20-Poly1305 for the body.
//!
//! ```text
//! scheme_id   u8        (1)
//! ephemeral   [u8; 32]  sender's X25519 public key
//! body_len    u64 LE
//! body        body_len bytes
//! tag         [u8; 16]
//! ```

use chacha20poly1305::aead::AeadInPlace;
use chacha20poly1305::{ChaCha20Poly1305, KeyInit};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use x25519_dalek::{PublicKey, StaticSecret};
use zeroize::Zeroizing;

use crate::error::{Error, Result};

use super::check_security_level;

pub const PKE_SCHEME_ID: u8 = 1;
const TAG_LEN: usize = 16;
const HEADER_LEN: usize = 1 + 32 + 8;
const KDF_INFO: &[u8] = b"mlcapsule/pke/v1";

pub struct PkeSecretKey(StaticSecret);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PkePublicKey(pub [u8; 32]);

pub struct KeyPair {
    pub sk: PkeSecretKey,
    pub pk: PkePublicKey,
}

impl PkeSecretKey {
    pub fn public_key(&self) -> PkePublicKey {
        PkePublicKey(PublicKey::from(&self.0).to_bytes())
    }

    #[cfg(test)]
    pub(crate) fn to_bytes(&self) -> Zeroizing<[u8; 32]> {
        Zeroizing::new(self.0.to_bytes())
    }
}

impl std::fmt::Debug for PkeSecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PkeSecretKey(..)")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext {
    pub scheme_id: u8,
    pub ephemeral: [u8; 32],
    pub body: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl Ciphertext {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.body.len() + TAG_LEN
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.scheme_id);
        out.extend_from_slice(&self.ephemeral);
        out.extend_from_slice(&(self.body.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + TAG_LEN {
            return Err(Error::ParseError("ciphertext shorter than header".into()));
        }
        let scheme_id = bytes[0];
        let ephemeral: [u8; 32] = bytes[1..33].try_into().unwrap();
        let body_len = u64::from_le_bytes(bytes[33..41].try_into().unwrap());
        let rest = &bytes[HEADER_LEN..];
        if (rest.len() as u64) != body_len + TAG_LEN as u64 {
            return Err(Error::ParseError(format!(
                "ciphertext body length {body_len} does not match {} available bytes",
                rest.len()
            )));
        }
        let body_len = body_len as usize;
        Ok(Ciphertext {
            scheme_id,
            ephemeral,
            body: rest[..body_len].to_vec(),
            tag: rest[body_len..].try_into().unwrap(),
        })
    }
}

pub fn pke_keygen<R: RngCore + CryptoRng>(security_bits: u32, rng: &mut R) -> Result<KeyPair> {
    check_security_level(security_bits)?;
    let sk = StaticSecret::random_from_rng(rng);
    let pk = PkePublicKey(PublicKey::from(&sk).to_bytes());
    Ok(KeyPair {
        sk: PkeSecretKey(sk),
        pk,
    })
}

fn key_schedule(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> Zeroizing<[u8; 44]> {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = Zeroizing::new([0u8; 44]);
    hk.expand(KDF_INFO, okm.as_mut()).expect("44 bytes is a valid HKDF length");
    okm
}

/// Encrypts `message` to `pk`. `aad` is authenticated but not encrypted.
pub fn pke_enc<R: RngCore + CryptoRng>(
    pk: &PkePublicKey,
    message: &[u8],
    aad: &[u8],
    rng: &mut R,
) -> Result<Ciphertext> {
    let eph = StaticSecret::random_from_rng(rng);
    let eph_pub = PublicKey::from(&eph).to_bytes();
    let shared = eph.diffie_hellman(&PublicKey::from(pk.0));
    if !shared.was_contributory() {
        return Err(Error::InvalidArgument("public key is a low-order point".into()));
    }
    let okm = key_schedule(shared.as_bytes(), &eph_pub, &pk.0);
    let cipher = ChaCha20Poly1305::new_from_slice(&okm[..32]).expect("32-byte key");
    let mut body = message.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(okm[32..].into(), aad, &mut body)
        .map_err(|_| Error::InvalidArgument("message too long".into()))?;
    Ok(Ciphertext {
        scheme_id: PKE_SCHEME_ID,
        ephemeral: eph_pub,
        body,
        tag: tag.into(),
    })
}

pub fn pke_dec(sk: &PkeSecretKey, c: &Ciphertext, aad: &[u8]) -> Result<Vec<u8>> {
    if c.scheme_id != PKE_SCHEME_ID {
        return Err(Error::IntegrityFailure(format!(
            "unknown ciphertext scheme {}",
            c.scheme_id
        )));
    }
    let shared = sk.0.diffie_hellman(&PublicKey::from(c.ephemeral));
    if !shared.was_contributory() {
        return Err(Error::IntegrityFailure("low-order ephemeral key".into()));
    }
    let recipient = sk.public_key();
    let okm = key_schedule(shared.as_bytes(), &c.ephemeral, &recipient.0);
    let cipher = ChaCha20Poly1305::new_from_slice(&okm[..32]).expect("32-byte key");
    let mut body = c.body.clone();
    match cipher.decrypt_in_place_detached(okm[32..].into(), aad, &mut body, (&c.tag).into()) {
        Ok(()) => Ok(body),
        Err(_) => {
            zeroize::Zeroize::zeroize(&mut body);
            Err(Error::IntegrityFailure("ciphertext authentication failed".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(0x5eed)
    }

    #[test]
    fn roundtrip_empty_and_large() {
        let mut rng = rng();
        let kp = pke_keygen(128, &mut rng).unwrap();
        let c = pke_enc(&kp.pk, b"", b"", &mut rng).unwrap();
        assert_eq!(pke_dec(&kp.sk, &c, b"").unwrap(), b"");

        let mut big = vec![0u8; 5 * 1024 * 1024];
        rng.fill(&mut big[..]);
        let c = pke_enc(&kp.pk, &big, b"ad", &mut rng).unwrap();
        assert_eq!(pke_dec(&kp.sk, &c, b"ad").unwrap(), big);
    }

    #[test]
    fn randomized_roundtrip_suite() {
        let mut rng = rng();
        let kp = pke_keygen(128, &mut rng).unwrap();
        for _ in 0..1000 {
            let len = rng.gen_range(0..512);
            let mut m = vec![0u8; len];
            rng.fill(&mut m[..]);
            let c = pke_enc(&kp.pk, &m, b"", &mut rng).unwrap();
            let parsed = Ciphertext::from_bytes(&c.to_bytes()).unwrap();
            assert_eq!(pke_dec(&kp.sk, &parsed, b"").unwrap(), m);
        }
    }

    #[test]
    fn encryption_is_randomized() {
        let mut rng = rng();
        let kp = pke_keygen(128, &mut rng).unwrap();
        let a = pke_enc(&kp.pk, b"same", b"", &mut rng).unwrap();
        let b = pke_enc(&kp.pk, b"same", b"", &mut rng).unwrap();
        assert_ne!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn wrong_key_and_mutation_fail() {
        let mut rng = rng();
        let kp = pke_keygen(128, &mut rng).unwrap();
        let other = pke_keygen(128, &mut rng).unwrap();
        let c = pke_enc(&kp.pk, b"weights", b"def", &mut rng).unwrap();
        assert!(matches!(pke_dec(&other.sk, &c, b"def"), Err(Error::IntegrityFailure(_))));
        assert!(matches!(pke_dec(&kp.sk, &c, b"deg"), Err(Error::IntegrityFailure(_))));

        let bytes = c.to_bytes();
        for bit in 0..bytes.len() * 8 {
            let mut m = bytes.clone();
            m[bit / 8] ^= 1 << (bit % 8);
            let res = Ciphertext::from_bytes(&m).and_then(|c| pke_dec(&kp.sk, &c, b"def"));
            assert!(res.is_err(), "bit {bit} flip accepted");
        }
    }

    #[test]
    fn rejects_other_security_levels() {
        assert!(pke_keygen(80, &mut rng()).is_err());
    }

    #[test]
    fn truncated_ciphertext_is_parse_error() {
        let mut rng = rng();
        let kp = pke_keygen(128, &mut rng).unwrap();
        let bytes = pke_enc(&kp.pk, b"abc", b"", &mut rng).unwrap().to_bytes();
        assert!(matches!(
            Ciphertext::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::ParseError(_))
        ));
    }
}
