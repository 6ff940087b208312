//! On-disk layout shared by the SP and client roles.
//!
//! ```text
//! <root>/config.toml     endpoint and policy settings
//! <root>/model.toml      public model definition
//! <root>/model.mlcw      SP only: plaintext weights
//! <root>/sp.key          SP only: ticket signing key
//! <root>/platform.mlck   client only: simulated platform secrets
//! <root>/sealed/         client only: sealed layers, guard state, counter
//! ```
//!
//! Every path is relative to the root, so a workspace can be moved as a unit.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mlcapsule::crypto::SigningKey;
use mlcapsule::iee::PlatformSecrets;
use mlcapsule::nn::{ModelDef, ModelSecrets, Tensor};
use mlcapsule::storage::{DirStore, SharedStore};
use mlcapsule::{Error, Result};
use serde::Deserialize;

pub const CONFIG_FILE: &str = "config.toml";
pub const MODEL_DEF_FILE: &str = "model.toml";
pub const MODEL_WEIGHTS_FILE: &str = "model.mlcw";
pub const SP_KEY_FILE: &str = "sp.key";
pub const PLATFORM_FILE: &str = "platform.mlck";
pub const SEALED_DIR: &str = "sealed";

pub const DEFAULT_ENDPOINT: &str = "127.0.0.1:7878";

/// Settings read from `config.toml`. Command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub endpoint: Option<String>,
    pub threshold: Option<u64>,
    pub tickets: Option<bool>,
    pub noise_c: Option<f64>,
    /// File with the noise distribution `T`; uniform when absent.
    pub noise_t: Option<PathBuf>,
    pub tau: Option<f64>,
    pub rho: Option<f64>,
    pub window: Option<usize>,
    pub detector_def: Option<PathBuf>,
    pub detector_weights: Option<PathBuf>,
}

pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: PathBuf) -> Self {
        Workspace { root }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        Ok(())
    }

    /// Relative paths inside the config file resolve against the root.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn config(&self) -> Result<Config> {
        let path = self.path(CONFIG_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => toml::from_str(&text).map_err(|e| Error::ParseError(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Config::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn model_def(&self) -> Result<ModelDef> {
        let path = self.path(MODEL_DEF_FILE);
        let text = fs::read_to_string(&path).map_err(|e| missing(&path, e))?;
        ModelDef::from_toml(&text)
    }

    pub fn model(&self) -> Result<(ModelDef, ModelSecrets)> {
        let def = self.model_def()?;
        let path = self.path(MODEL_WEIGHTS_FILE);
        let bytes = fs::read(&path).map_err(|e| missing(&path, e))?;
        let secrets = ModelSecrets::from_mlcw(&def, &bytes)?;
        Ok((def, secrets))
    }

    pub fn save_model(&self, def: &ModelDef, secrets: Option<&ModelSecrets>) -> Result<()> {
        self.create()?;
        if let Some(s) = secrets {
            s.check(def)?;
            fs::write(self.path(MODEL_WEIGHTS_FILE), s.to_mlcw())?;
        }
        fs::write(self.path(MODEL_DEF_FILE), def.to_toml())?;
        Ok(())
    }

    /// Loads the ticket signing key, creating one on first use.
    pub fn sp_key<R: rand::RngCore + rand::CryptoRng>(&self, rng: &mut R) -> Result<SigningKey> {
        let path = self.path(SP_KEY_FILE);
        match fs::read(&path) {
            Ok(bytes) => {
                let raw: [u8; 32] = bytes
                    .as_slice()
                    .try_into()
                    .map_err(|_| Error::ParseError(format!("{}: expected 32 bytes", path.display())))?;
                Ok(SigningKey::from_bytes(&raw))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                self.create()?;
                let key = SigningKey::generate(rng);
                write_private(&path, &key.to_bytes())?;
                Ok(key)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn existing_sp_key(&self) -> Result<SigningKey> {
        let path = self.path(SP_KEY_FILE);
        if !path.exists() {
            return Err(Error::InvalidArgument(format!("{} not found; run `sp serve --tickets` first", path.display())));
        }
        self.sp_key(&mut rand::rngs::OsRng)
    }

    pub fn platform(&self) -> Result<PlatformSecrets> {
        let path = self.path(PLATFORM_FILE);
        PlatformSecrets::load(&path).map_err(|e| match e {
            Error::Io(io) => missing(&path, io),
            other => other,
        })
    }

    pub fn platform_or_create<R: rand::RngCore + rand::CryptoRng>(&self, rng: &mut R) -> Result<PlatformSecrets> {
        let path = self.path(PLATFORM_FILE);
        if path.exists() {
            return self.platform();
        }
        self.create()?;
        let secrets = PlatformSecrets::generate(rng);
        secrets.save(&path)?;
        Ok(secrets)
    }

    pub fn store(&self) -> Result<SharedStore> {
        Ok(Arc::new(DirStore::new(self.path(SEALED_DIR))?))
    }
}

fn missing(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::InvalidArgument(format!("{} not found", path.display()))
    } else {
        Error::Io(e)
    }
}

fn write_private(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create_new(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    opts.open(path)?.write_all(bytes)?;
    Ok(())
}

/// Reads numbers separated by commas or whitespace.
pub fn read_numbers(path: &Path) -> Result<Vec<f32>> {
    let text = fs::read_to_string(path).map_err(|e| missing(path, e))?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f32>()
                .map_err(|e| Error::ParseError(format!("{}: {s:?}: {e}", path.display())))
        })
        .collect()
}

/// Reads an input file and shapes it for `def`.
pub fn read_input(path: &Path, def: &ModelDef) -> Result<Tensor> {
    let values = read_numbers(path)?;
    let want: usize = def.input.iter().product();
    if values.len() != want {
        return Err(Error::DimensionMismatch {
            expected: want,
            found: values.len(),
        });
    }
    Tensor::new(def.input.clone(), values)
}
