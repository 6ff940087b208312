//! Chunked sealing of enclave-private data.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! header:  "MLCS" | version u16 | total_len u64 | chunk_size u32
//! chunk i: index u32 | nonce [u8; 12] | ciphertext (len_i bytes) | tag [u8; 16]
//! ```
//!
//! `len_i` is `chunk_size` for every chunk but the last, which carries the
//! remainder. There is always at least one chunk, so an empty plaintext
//! still produces an authenticated blob. Each chunk is encrypted with
//! ChaCha20-Poly1305 under associated data `measurement | index | total_len`.

use chacha20poly1305::aead::AeadInPlace;
use chacha20poly1305::{ChaCha20Poly1305, KeyInit};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use zeroize::{Zeroize, Zeroizing};

use crate::error::{Error, Result};

use super::Digest;

pub const SEAL_MAGIC: &[u8; 4] = b"MLCS";
pub const SEAL_VERSION: u16 = 1;
pub const DEFAULT_CHUNK_SIZE: u32 = 2 * 1024 * 1024;

const HEADER_LEN: usize = 4 + 2 + 8 + 4;
const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const CHUNK_OVERHEAD: usize = 4 + NONCE_LEN + TAG_LEN;

/// Per-platform root key that every seal key is derived from. Stands in for
/// the key fused into the processor.
#[derive(Clone)]
pub struct RootSealKey(Zeroizing<[u8; 32]>);

impl RootSealKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = Zeroizing::new([0u8; 32]);
        rng.fill_bytes(k.as_mut());
        RootSealKey(k)
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        RootSealKey(Zeroizing::new(bytes))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

/// Seal key bound to one enclave measurement.
#[derive(Clone)]
pub struct SealKey {
    key: Zeroizing<[u8; 32]>,
    measurement: Digest,
}

impl SealKey {
    pub fn derive(root: &RootSealKey, measurement: &Digest) -> Self {
        let hk = Hkdf::<Sha256>::new(Some(b"mlcapsule/seal/v1"), root.as_bytes());
        let mut key = Zeroizing::new([0u8; 32]);
        hk.expand(measurement, key.as_mut())
            .expect("32 bytes is a valid HKDF length");
        SealKey {
            key,
            measurement: *measurement,
        }
    }

    pub fn measurement(&self) -> &Digest {
        &self.measurement
    }

    pub(crate) fn key_bytes(&self) -> &[u8; 32] {
        &self.key
    }

    fn cipher(&self) -> ChaCha20Poly1305 {
        ChaCha20Poly1305::new_from_slice(self.key.as_ref()).expect("32-byte key")
    }
}

impl std::fmt::Debug for SealKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SealKey")
            .field("measurement", &self.measurement)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedChunk {
    pub index: u32,
    pub nonce: [u8; NONCE_LEN],
    /// Ciphertext followed by the 16-byte tag.
    pub ciphertext: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedBlob {
    pub version: u16,
    pub total_len: u64,
    pub chunk_size: u32,
    pub chunks: Vec<SealedChunk>,
}

fn chunk_count(total_len: u64, chunk_size: u32) -> u64 {
    total_len.div_ceil(chunk_size as u64).max(1)
}

fn chunk_plain_len(total_len: u64, chunk_size: u32, index: u64) -> usize {
    let start = index * chunk_size as u64;
    (total_len.saturating_sub(start)).min(chunk_size as u64) as usize
}

fn associated_data(measurement: &Digest, index: u32, total_len: u64) -> [u8; 44] {
    let mut ad = [0u8; 44];
    ad[..32].copy_from_slice(measurement);
    ad[32..36].copy_from_slice(&index.to_le_bytes());
    ad[36..].copy_from_slice(&total_len.to_le_bytes());
    ad
}

impl SealedBlob {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self
                .chunks
                .iter()
                .map(|c| 4 + NONCE_LEN + c.ciphertext.len())
                .sum::<usize>()
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(SEAL_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.total_len.to_le_bytes());
        out.extend_from_slice(&self.chunk_size.to_le_bytes());
        for c in &self.chunks {
            out.extend_from_slice(&c.index.to_le_bytes());
            out.extend_from_slice(&c.nonce);
            out.extend_from_slice(&c.ciphertext);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedBlob("header incomplete".into()));
        }
        if &bytes[..4] != SEAL_MAGIC {
            return Err(Error::ParseError("bad sealed blob magic".into()));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != SEAL_VERSION {
            return Err(Error::ParseError(format!("unsupported seal version {version}")));
        }
        let total_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let chunk_size = u32::from_le_bytes(bytes[14..18].try_into().unwrap());
        if chunk_size == 0 {
            return Err(Error::ParseError("chunk size of zero".into()));
        }
        let n = chunk_count(total_len, chunk_size);
        let mut rest = &bytes[HEADER_LEN..];
        // Each chunk takes at least CHUNK_OVERHEAD bytes, which bounds `n`
        // before anything is allocated for it.
        if (rest.len() as u64) < n.saturating_mul(CHUNK_OVERHEAD as u64) {
            return Err(Error::TruncatedBlob(format!(
                "{n} chunks declared, {} bytes available",
                rest.len()
            )));
        }
        let mut chunks = Vec::with_capacity(n as usize);
        for i in 0..n {
            let clen = chunk_plain_len(total_len, chunk_size, i) + TAG_LEN;
            if rest.len() < 4 + NONCE_LEN + clen {
                return Err(Error::TruncatedBlob(format!("chunk {i} incomplete")));
            }
            let index = u32::from_le_bytes(rest[..4].try_into().unwrap());
            let nonce: [u8; NONCE_LEN] = rest[4..4 + NONCE_LEN].try_into().unwrap();
            let ciphertext = rest[4 + NONCE_LEN..4 + NONCE_LEN + clen].to_vec();
            rest = &rest[4 + NONCE_LEN + clen..];
            chunks.push(SealedChunk {
                index,
                nonce,
                ciphertext,
            });
        }
        if !rest.is_empty() {
            return Err(Error::IntegrityFailure(format!(
                "{} trailing bytes after last chunk",
                rest.len()
            )));
        }
        Ok(SealedBlob {
            version,
            total_len,
            chunk_size,
            chunks,
        })
    }
}

fn check_identity(key: &SealKey, measurement: &Digest) -> Result<()> {
    if key.measurement() != measurement {
        return Err(Error::IdentityMismatch);
    }
    Ok(())
}

pub fn seal<R: RngCore + CryptoRng>(
    key: &SealKey,
    measurement: &Digest,
    plaintext: &[u8],
    rng: &mut R,
) -> Result<SealedBlob> {
    seal_with_chunk_size(key, measurement, plaintext, DEFAULT_CHUNK_SIZE, rng)
}

pub fn seal_with_chunk_size<R: RngCore + CryptoRng>(
    key: &SealKey,
    measurement: &Digest,
    plaintext: &[u8],
    chunk_size: u32,
    rng: &mut R,
) -> Result<SealedBlob> {
    check_identity(key, measurement)?;
    if chunk_size == 0 {
        return Err(Error::InvalidArgument("chunk size must be positive".into()));
    }
    let total_len = plaintext.len() as u64;
    let n = chunk_count(total_len, chunk_size);
    if n > u32::MAX as u64 {
        return Err(Error::InvalidArgument("too many chunks".into()));
    }
    let cipher = key.cipher();
    let mut chunks = Vec::with_capacity(n as usize);
    for i in 0..n {
        let start = (i * chunk_size as u64) as usize;
        let len = chunk_plain_len(total_len, chunk_size, i);
        let index = i as u32;
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let mut buf = Vec::with_capacity(len + TAG_LEN);
        buf.extend_from_slice(&plaintext[start..start + len]);
        let ad = associated_data(measurement, index, total_len);
        let tag = cipher
            .encrypt_in_place_detached((&nonce).into(), &ad, &mut buf)
            .map_err(|_| Error::InvalidArgument("chunk too large".into()))?;
        buf.extend_from_slice(&tag);
        chunks.push(SealedChunk {
            index,
            nonce,
            ciphertext: buf,
        });
    }
    Ok(SealedBlob {
        version: SEAL_VERSION,
        total_len,
        chunk_size,
        chunks,
    })
}

pub fn unseal(key: &SealKey, measurement: &Digest, blob: &SealedBlob) -> Result<Vec<u8>> {
    check_identity(key, measurement)?;
    let len = usize::try_from(blob.total_len)
        .map_err(|_| Error::InvalidArgument("blob too large for this platform".into()))?;
    let expected = chunk_count(blob.total_len, blob.chunk_size.max(1));
    if blob.chunks.len() as u64 != expected {
        return Err(Error::TruncatedBlob(format!(
            "{} of {expected} chunks present",
            blob.chunks.len()
        )));
    }
    let mut out = vec![0u8; len];
    unseal_into(key, measurement, blob, &mut out)?;
    Ok(out)
}

/// Decrypts `blob` chunk by chunk directly into `out`, which must be exactly
/// `total_len` bytes. On any failure `out` is zeroed before returning.
pub fn unseal_into(
    key: &SealKey,
    measurement: &Digest,
    blob: &SealedBlob,
    out: &mut [u8],
) -> Result<()> {
    let res = unseal_chunks(key, measurement, blob, out);
    if res.is_err() {
        out.zeroize();
    }
    res
}

fn unseal_chunks(key: &SealKey, measurement: &Digest, blob: &SealedBlob, out: &mut [u8]) -> Result<()> {
    check_identity(key, measurement)?;
    if blob.version != SEAL_VERSION {
        return Err(Error::ParseError(format!(
            "unsupported seal version {}",
            blob.version
        )));
    }
    if blob.chunk_size == 0 {
        return Err(Error::ParseError("chunk size of zero".into()));
    }
    if out.len() as u64 != blob.total_len {
        return Err(Error::InvalidArgument(format!(
            "output buffer of {} bytes for blob of {} bytes",
            out.len(),
            blob.total_len
        )));
    }
    let n = chunk_count(blob.total_len, blob.chunk_size);
    if blob.chunks.len() as u64 != n {
        return Err(Error::TruncatedBlob(format!(
            "{} of {n} chunks present",
            blob.chunks.len()
        )));
    }
    let cipher = key.cipher();
    let mut offset = 0usize;
    for (i, chunk) in blob.chunks.iter().enumerate() {
        if chunk.index as usize != i {
            return Err(Error::ChunkOutOfOrder {
                expected: i as u32,
                found: chunk.index,
            });
        }
        let len = chunk_plain_len(blob.total_len, blob.chunk_size, i as u64);
        if chunk.ciphertext.len() != len + TAG_LEN {
            return Err(Error::TruncatedBlob(format!("chunk {i} has wrong length")));
        }
        let (body, tag) = chunk.ciphertext.split_at(len);
        let dst = &mut out[offset..offset + len];
        dst.copy_from_slice(body);
        let ad = associated_data(measurement, chunk.index, blob.total_len);
        cipher
            .decrypt_in_place_detached((&chunk.nonce).into(), &ad, dst, tag.into())
            .map_err(|_| Error::IntegrityFailure(format!("chunk {i} failed authentication")))?;
        offset += len;
    }
    Ok(())
}
