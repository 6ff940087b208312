//! Layer-wise inference over sealed parameters.
//!
//! Each parameterized layer keeps its weights and bias in one sealed blob
//! (`weights` then `bias`, raw little-endian f32). Running a layer allocates
//! the parameter buffer, decrypts the sealed chunks into it, computes, and
//! zeroes the buffer before moving on, so at most one layer's secrets are in
//! the clear at any time.

use rand::{CryptoRng, RngCore};
use zeroize::Zeroize;

use super::{LayerSpec, ModelDef, ModelSecrets, Posterior, Tensor};
use crate::crypto::{seal_with_chunk_size, unseal_into, Digest, SealKey, SealedBlob, DEFAULT_CHUNK_SIZE};
use crate::error::{Error, Result};

/// Enclave memory available to a single layer evaluation.
pub const DEFAULT_MEMORY_BUDGET: usize = 90 * 1024 * 1024;
const TAG_OVERHEAD: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CapsuleLayer {
    pub spec: LayerSpec,
    /// Present exactly when `spec` has parameters.
    pub sealed: Option<SealedBlob>,
}

/// Raw parameter payload for one layer.
pub fn layer_payload(weights: &Tensor, bias: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(weights.byte_len() + bias.byte_len());
    for v in weights.data().iter().chain(bias.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn seal_layer<R: RngCore + CryptoRng>(
    spec: LayerSpec,
    params: Option<(&Tensor, &Tensor)>,
    key: &SealKey,
    measurement: &Digest,
    chunk_size: u32,
    rng: &mut R,
) -> Result<CapsuleLayer> {
    let sealed = match (spec.param_shapes(), params) {
        (None, None) => None,
        (Some((wd, bd)), Some((w, b))) => {
            if w.dims() != wd.as_slice() || b.dims() != bd.as_slice() {
                return Err(Error::SchemaError(format!(
                    "{} expects {wd:?}/{bd:?}, got {:?}/{:?}",
                    spec.kind(),
                    w.dims(),
                    b.dims()
                )));
            }
            let mut payload = layer_payload(w, b);
            let blob = seal_with_chunk_size(key, measurement, &payload, chunk_size, rng);
            payload.zeroize();
            Some(blob?)
        }
        _ => return Err(Error::SchemaError(format!("parameter presence mismatch for {}", spec.kind()))),
    };
    Ok(CapsuleLayer { spec, sealed })
}

/// Seals every parameterized layer of a model separately.
pub fn seal_model<R: RngCore + CryptoRng>(
    def: &ModelDef,
    secrets: &ModelSecrets,
    key: &SealKey,
    measurement: &Digest,
    rng: &mut R,
) -> Result<Vec<CapsuleLayer>> {
    seal_model_with_chunk_size(def, secrets, key, measurement, DEFAULT_CHUNK_SIZE, rng)
}

pub fn seal_model_with_chunk_size<R: RngCore + CryptoRng>(
    def: &ModelDef,
    secrets: &ModelSecrets,
    key: &SealKey,
    measurement: &Digest,
    chunk_size: u32,
    rng: &mut R,
) -> Result<Vec<CapsuleLayer>> {
    secrets.check(def)?;
    let mut params = secrets.layers.iter();
    def.layers
        .iter()
        .map(|spec| {
            let p = if spec.has_params() {
                params.next().map(|p| (&p.weights, &p.bias))
            } else {
                None
            };
            seal_layer(*spec, p, key, measurement, chunk_size, rng)
        })
        .collect()
}

/// Bytes one layer needs inside the enclave: its parameters, one sealed
/// chunk in transit, and the input and output activations.
pub fn layer_working_set(layer: &CapsuleLayer, input_dims: &[usize]) -> Result<usize> {
    let params = layer.spec.param_count() * 4;
    let chunk = layer
        .sealed
        .as_ref()
        .map(|b| (b.chunk_size as usize).min(b.total_len as usize) + TAG_OVERHEAD)
        .unwrap_or(0);
    let input: usize = input_dims.iter().product();
    let output: usize = layer.spec.output_dims(input_dims)?.iter().product();
    Ok(params + chunk + (input + output) * 4)
}

/// Runs one sealed layer and returns its output together with the parameter
/// buffers, already zeroed.
fn run_layer(
    layer: &CapsuleLayer,
    key: &SealKey,
    measurement: &Digest,
    x: &Tensor,
    budget: usize,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let needed = layer_working_set(layer, x.dims())?;
    if needed > budget {
        return Err(Error::BudgetExceeded { needed, budget });
    }
    let (Some((wd, bd)), Some(blob)) = (layer.spec.param_shapes(), layer.sealed.as_ref()) else {
        if layer.sealed.is_some() {
            return Err(Error::SchemaError(format!("{} carries sealed parameters", layer.spec.kind())));
        }
        return Ok((layer.spec.apply(x, None)?, Vec::new(), Vec::new()));
    };
    let nw: usize = wd.iter().product();
    let nb: usize = bd.iter().product();
    if blob.total_len != ((nw + nb) * 4) as u64 {
        return Err(Error::SchemaError(format!(
            "sealed payload of {} bytes for {} parameters",
            blob.total_len,
            nw + nb
        )));
    }

    let mut buf = vec![0f32; nw + nb];
    unseal_into(key, measurement, blob, bytemuck::cast_slice_mut(&mut buf))?;
    if cfg!(target_endian = "big") {
        for v in &mut buf {
            *v = f32::from_bits(u32::from_le(v.to_bits()));
        }
    }
    let bias = buf.split_off(nw);
    let w = Tensor::new(wd, buf)?;
    let b = Tensor::new(bd, bias)?;
    let out = layer.spec.apply(x, Some((&w, &b)));
    let mut w = w.into_data();
    let mut b = b.into_data();
    w.as_mut_slice().zeroize();
    b.as_mut_slice().zeroize();
    Ok((out?, w, b))
}

/// Evaluates one sealed layer under a memory budget.
pub fn capsule_layer_forward(
    layer: &CapsuleLayer,
    key: &SealKey,
    measurement: &Digest,
    x: &Tensor,
    budget: usize,
) -> Result<Tensor> {
    run_layer(layer, key, measurement, x, budget).map(|(y, _, _)| y)
}

pub fn capsule_forward(layers: &[CapsuleLayer], key: &SealKey, measurement: &Digest, x: &Tensor) -> Result<Posterior> {
    capsule_forward_with_budget(layers, key, measurement, x, DEFAULT_MEMORY_BUDGET)
}

pub fn capsule_forward_with_budget(
    layers: &[CapsuleLayer],
    key: &SealKey,
    measurement: &Digest,
    x: &Tensor,
    budget: usize,
) -> Result<Posterior> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("capsule has no layers".into()));
    }
    if layers.last().map(|l| l.spec) != Some(LayerSpec::Softmax) {
        return Err(Error::SchemaError("model must end with a softmax layer".into()));
    }
    let mut cur = x.clone();
    for layer in layers {
        cur = capsule_layer_forward(layer, key, measurement, &cur, budget)?;
    }
    Posterior::new(cur.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{digest, RootSealKey};
    use crate::nn::model::tests::{mlp, small_cnn};
    use crate::nn::{forward, Padding};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn keys(rng: &mut ChaCha20Rng) -> (SealKey, Digest) {
        let m = digest(b"capsule-test");
        (SealKey::derive(&RootSealKey::generate(rng), &m), m)
    }

    fn random_input(def: &ModelDef, rng: &mut ChaCha20Rng) -> Tensor {
        let n: usize = def.input.iter().product();
        Tensor::new(def.input.clone(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn equals_plaintext_forward() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (key, m) = keys(&mut rng);
        for def in [small_cnn(), mlp(&[10, 16, 8, 4]), mlp(&[3, 2])] {
            let secrets = ModelSecrets::random(&def, &mut rng);
            // Small chunks so parameters span several of them.
            let layers = seal_model_with_chunk_size(&def, &secrets, &key, &m, 64, &mut rng).unwrap();
            for _ in 0..5 {
                let x = random_input(&def, &mut rng);
                let want = forward(&def, &secrets, &x).unwrap();
                let got = capsule_forward(&layers, &key, &m, &x).unwrap();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn tampered_layer_aborts() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let (key, m) = keys(&mut rng);
        let def = mlp(&[6, 5, 4, 3]);
        let secrets = ModelSecrets::random(&def, &mut rng);
        let mut layers = seal_model(&def, &secrets, &key, &m, &mut rng).unwrap();
        layers[2].sealed.as_mut().unwrap().chunks[0].ciphertext[3] ^= 0x10;
        let x = random_input(&def, &mut rng);
        assert!(matches!(capsule_forward(&layers, &key, &m, &x), Err(Error::IntegrityFailure(_))));
    }

    #[test]
    fn empty_layer_list_is_an_error() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (key, m) = keys(&mut rng);
        assert!(capsule_forward(&[], &key, &m, &Tensor::vector(vec![1.0])).is_err());
    }

    #[test]
    fn parameter_buffers_are_zeroed_after_use() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (key, m) = keys(&mut rng);
        let def = mlp(&[8, 8, 2]);
        let secrets = ModelSecrets::random(&def, &mut rng);
        let layers = seal_model(&def, &secrets, &key, &m, &mut rng).unwrap();
        let x = random_input(&def, &mut rng);
        let (_, w, b) = run_layer(&layers[0], &key, &m, &x, DEFAULT_MEMORY_BUDGET).unwrap();
        assert_eq!((w.len(), b.len()), (64, 8));
        assert!(w.iter().chain(&b).all(|&v| v == 0.0));
    }

    #[test]
    fn budget_is_enforced() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (key, m) = keys(&mut rng);
        let def = mlp(&[64, 64, 2]);
        let secrets = ModelSecrets::random(&def, &mut rng);
        let layers = seal_model(&def, &secrets, &key, &m, &mut rng).unwrap();
        let x = random_input(&def, &mut rng);
        let need = layer_working_set(&layers[0], &[64]).unwrap();
        assert_eq!(need, (64 * 64 + 64) * 4 + (64 * 64 + 64) * 4 + 16 + (64 + 64) * 4);
        assert!(matches!(
            capsule_forward_with_budget(&layers, &key, &m, &x, need - 1),
            Err(Error::BudgetExceeded { .. })
        ));
        assert!(capsule_forward_with_budget(&layers, &key, &m, &x, need).is_ok());
    }

    #[test]
    fn large_dense_layer_fits_only_because_of_chunking() {
        let spec = LayerSpec::Dense {
            inputs: 4096,
            outputs: 4096,
        };
        let blob = SealedBlob {
            version: 1,
            total_len: ((4096 * 4096 + 4096) * 4) as u64,
            chunk_size: DEFAULT_CHUNK_SIZE,
            chunks: vec![],
        };
        let layer = CapsuleLayer {
            spec,
            sealed: Some(blob),
        };
        let need = layer_working_set(&layer, &[4096]).unwrap();
        assert!(need < DEFAULT_MEMORY_BUDGET);
        assert!(need + 4096 * 4096 * 4 > DEFAULT_MEMORY_BUDGET);
    }

    #[test]
    fn wrong_identity_fails() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let (key, m) = keys(&mut rng);
        let def = ModelDef {
            input: vec![1, 4, 4],
            classes: 2,
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel_h: 4,
                    kernel_w: 4,
                    stride: 1,
                    padding: Padding::Valid,
                },
                LayerSpec::Softmax,
            ],
        };
        let secrets = ModelSecrets::random(&def, &mut rng);
        let layers = seal_model(&def, &secrets, &key, &m, &mut rng).unwrap();
        let other = digest(b"other");
        let x = random_input(&def, &mut rng);
        assert!(matches!(
            capsule_forward(&layers, &key, &other, &x),
            Err(Error::IdentityMismatch)
        ));
    }
}
