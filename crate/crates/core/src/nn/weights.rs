//! The MLCW weights file.
//!
//! ```text
//! "MLCW" | version u16 | tensor count u32
//! per tensor: dtype u8 (0 = f32) | rank u8 | rank x u32 dims | row-major f32 payload
//! ```
//!
//! All integers and floats little-endian. Model secrets are stored as
//! `weights_0, bias_0, weights_1, bias_1, ...` over the parameterized layers.

use std::fs;
use std::path::Path;

use super::{LayerParams, ModelDef, ModelSecrets, Tensor};
use crate::codec::Reader;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MLCW";
pub const WEIGHTS_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Vec<u8> {
    let tensors: Vec<&Tensor> = tensors.into_iter().collect();
    let mut out = WEIGHTS_MAGIC.to_vec();
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.push(DTYPE_F32);
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader::new(bytes, "weights file");
    r.expect_magic(WEIGHTS_MAGIC)?;
    let version = r.u16()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::ParseError(format!("weights version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::ParseError(format!("tensor {i}: unsupported dtype {dtype}")));
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::ParseError(format!("tensor {i}: dims overflow")))?;
        let payload = r.take(n)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(dims, data)?);
    }
    r.finish()?;
    Ok(tensors)
}

impl ModelSecrets {
    pub fn to_mlcw(&self) -> Vec<u8> {
        encode_tensors(self.layers.iter().flat_map(|l| [&l.weights, &l.bias]))
    }

    /// Parses an MLCW file and checks it against `def`.
    pub fn from_mlcw(def: &ModelDef, bytes: &[u8]) -> Result<Self> {
        let tensors = decode_tensors(bytes)?;
        if tensors.len() % 2 != 0 {
            return Err(Error::SchemaError(format!(
                "odd tensor count {}; expected weight/bias pairs",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        while let (Some(weights), Some(bias)) = (it.next(), it.next()) {
            layers.push(LayerParams { weights, bias });
        }
        let secrets = ModelSecrets { layers };
        secrets.check(def)?;
        Ok(secrets)
    }
}

/// Reads a model definition document and its weights file.
pub fn import_weights(def_path: &Path, weights_path: &Path) -> Result<(ModelDef, ModelSecrets)> {
    let text = fs::read_to_string(def_path)?;
    let def = ModelDef::from_toml(&text)?;
    let bytes = fs::read(weights_path)?;
    let secrets = ModelSecrets::from_mlcw(&def, &bytes)?;
    Ok((def, secrets))
}

pub fn export_weights(def: &ModelDef, secrets: &ModelSecrets, def_path: &Path, weights_path: &Path) -> Result<()> {
    secrets.check(def)?;
    fs::write(def_path, def.to_toml())?;
    fs::write(weights_path, secrets.to_mlcw())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::tests::{mlp, small_cnn};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let bytes = encode_tensors([&t]);
        let mut want = b"MLCW".to_vec();
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&[0, 1]);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn export_import_is_byte_identity() {
        let dir = tempfile::tempdir().unwrap();
        let def = small_cnn();
        let secrets = ModelSecrets::random(&def, &mut ChaCha20Rng::seed_from_u64(1));
        let (dp, wp) = (dir.path().join("m.toml"), dir.path().join("m.mlcw"));
        export_weights(&def, &secrets, &dp, &wp).unwrap();
        let original = fs::read(&wp).unwrap();
        let (def2, secrets2) = import_weights(&dp, &wp).unwrap();
        assert_eq!(def2, def);
        assert_eq!(secrets2, secrets);
        assert_eq!(secrets2.to_mlcw(), original);
    }

    #[test]
    fn shape_mismatch_is_schema_error() {
        let def = mlp(&[4, 3]);
        let other = mlp(&[5, 3]);
        let secrets = ModelSecrets::random(&other, &mut ChaCha20Rng::seed_from_u64(2));
        assert!(matches!(
            ModelSecrets::from_mlcw(&def, &secrets.to_mlcw()),
            Err(Error::SchemaError(_))
        ));
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let def = mlp(&[4, 3]);
        let bytes = ModelSecrets::random(&def, &mut ChaCha20Rng::seed_from_u64(3)).to_mlcw();
        for cut in [0, 3, 9, 12, bytes.len() - 1] {
            assert!(
                matches!(ModelSecrets::from_mlcw(&def, &bytes[..cut]), Err(Error::ParseError(_))),
                "cut at {cut}"
            );
        }
    }

    proptest! {
        #[test]
        fn tensor_lists_roundtrip(shapes in proptest::collection::vec(proptest::collection::vec(1usize..5, 0..4), 0..5)) {
            let tensors: Vec<Tensor> = shapes
                .into_iter()
                .enumerate()
                .map(|(i, dims)| {
                    let n: usize = dims.iter().product();
                    Tensor::new(dims, (0..n).map(|j| (i * 31 + j) as f32 * 0.5 - 3.0).collect()).unwrap()
                })
                .collect();
            let bytes = encode_tensors(&tensors);
            let back = decode_tensors(&bytes).unwrap();
            prop_assert_eq!(&back, &tensors);
            prop_assert_eq!(encode_tensors(&back), bytes);
        }
    }
}
