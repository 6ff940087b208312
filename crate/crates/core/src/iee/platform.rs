//! Persisted platform secrets.
//!
//! On real hardware both keys are fused into the processor. The simulator
//! keeps them in a single owner-only file: `"MLCK" | u16 version | quote key
//! (32 B) | root seal key (32 B)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{CryptoRng, RngCore};
use zeroize::{Zeroize, ZeroizeOnDrop};

use crate::codec::Reader;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MLCK";
const VERSION: u16 = 1;

#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct PlatformSecrets {
    pub(crate) quote_key: [u8; 32],
    pub(crate) root_seal_key: [u8; 32],
}

impl PlatformSecrets {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut s = PlatformSecrets {
            quote_key: [0; 32],
            root_seal_key: [0; 32],
        };
        rng.fill_bytes(&mut s.quote_key);
        rng.fill_bytes(&mut s.root_seal_key);
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.quote_key);
        out.extend_from_slice(&self.root_seal_key);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "platform secrets");
        r.expect_magic(MAGIC)?;
        let v = r.u16()?;
        if v != VERSION {
            return Err(Error::ParseError(format!("platform secrets version {v}")));
        }
        let s = PlatformSecrets {
            quote_key: r.array()?,
            root_seal_key: r.array()?,
        };
        r.finish()?;
        Ok(s)
    }

    /// Writes the secrets to `path`, readable and writable by the owner only.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut opts = fs::OpenOptions::new();
        opts.write(true).create(true).truncate(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        let mut f = opts.open(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = fs::read(path)?;
        let res = Self::from_bytes(&bytes);
        bytes.zeroize();
        res
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn save_load_roundtrip_with_owner_only_mode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("platform.key");
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let s = PlatformSecrets::generate(&mut rng);
        s.save(&path).unwrap();
        let back = PlatformSecrets::load(&path).unwrap();
        assert_eq!(back.to_bytes(), s.to_bytes());
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let mode = fs::metadata(&path).unwrap().permissions().mode();
            assert_eq!(mode & 0o777, 0o600);
        }
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        let bytes = PlatformSecrets::generate(&mut rng).to_bytes();
        assert!(matches!(
            PlatformSecrets::from_bytes(&bytes[..40]),
            Err(Error::ParseError(_))
        ));
    }
}
