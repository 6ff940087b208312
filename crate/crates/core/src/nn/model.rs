//! Public model definitions, secret parameters and the plaintext forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};
use zeroize::Zeroize;

use super::{LayerSpec, Tensor};
use crate::error::{Error, Result};

/// Public architecture of a model. Serialized as a TOML document:
///
/// ```toml
/// input = [1, 8, 8]
/// classes = 2
///
/// [[layers]]
/// kind = "conv2d"
/// in_channels = 1
/// out_channels = 4
/// kernel_h = 3
/// kernel_w = 3
/// stride = 1          # optional, default 1
/// padding = "valid"   # optional, "valid" | "same"
///
/// [[layers]]
/// kind = "relu"
///
/// [[layers]]
/// kind = "maxpool"
/// size = 2
///
/// [[layers]]
/// kind = "dense"
/// inputs = 36
/// outputs = 2
///
/// [[layers]]
/// kind = "softmax"
/// ```
///
/// Other kinds: `depthwise_conv2d` (`channels`, `kernel_h`, `kernel_w`,
/// `stride`, `padding`). A dense layer flattens whatever it receives. The
/// last layer must be `softmax`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDef {
    pub input: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelDef {
    /// Dims flowing between layers: `dims[i]` is the input of layer `i`,
    /// the last entry is the model output.
    pub fn activation_dims(&self) -> Result<Vec<Vec<usize>>> {
        let mut dims = vec![self.input.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_dims(dims.last().unwrap())
                .map_err(|e| Error::SchemaError(format!("layer {i} ({}): {e}", layer.kind())))?;
            dims.push(next);
        }
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(Error::SchemaError(format!("invalid input shape {:?}", self.input)));
        }
        if self.layers.last() != Some(&LayerSpec::Softmax) {
            return Err(Error::SchemaError("model must end with a softmax layer".into()));
        }
        let dims = self.activation_dims()?;
        let out: usize = dims.last().unwrap().iter().product();
        if out != self.classes || self.classes < 2 {
            return Err(Error::SchemaError(format!(
                "model outputs {out} values but declares {} classes",
                self.classes
            )));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.layers.iter().filter_map(LayerSpec::param_shapes).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model definitions always serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let def: ModelDef = toml::from_str(text).map_err(|e| Error::ParseError(e.to_string()))?;
        def.validate()?;
        Ok(def)
    }

    /// Deterministic byte encoding used when binding the definition to
    /// ciphertexts.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.to_toml().into_bytes()
    }
}

/// Weight and bias of one parameterized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Secret parameters, one entry per parameterized layer in order. Zeroed on
/// drop.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelSecrets {
    pub layers: Vec<LayerParams>,
}

impl Drop for ModelSecrets {
    fn drop(&mut self) {
        for l in &mut self.layers {
            l.weights.zeroize();
            l.bias.zeroize();
        }
    }
}

impl ModelSecrets {
    /// Uniform Glorot initialization, zero biases.
    pub fn random<R: Rng>(def: &ModelDef, rng: &mut R) -> Self {
        let layers = def
            .layers
            .iter()
            .filter_map(|l| {
                let (wd, bd) = l.param_shapes()?;
                let (fan_in, fan_out) = fan(l);
                let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
                let n: usize = wd.iter().product();
                let w = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
                let nb: usize = bd.iter().product();
                let b = (0..nb).map(|_| rng.gen_range(-0.1..0.1)).collect();
                Some(LayerParams {
                    weights: Tensor::new(wd, w).unwrap(),
                    bias: Tensor::new(bd, b).unwrap(),
                })
            })
            .collect();
        ModelSecrets { layers }
    }

    /// Checks that tensor shapes match `def` exactly.
    pub fn check(&self, def: &ModelDef) -> Result<()> {
        let shapes = def.param_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::SchemaError(format!(
                "definition has {} parameterized layers, weights have {}",
                shapes.len(),
                self.layers.len()
            )));
        }
        for (i, ((wd, bd), p)) in shapes.iter().zip(&self.layers).enumerate() {
            if p.weights.dims() != wd.as_slice() || p.bias.dims() != bd.as_slice() {
                return Err(Error::SchemaError(format!(
                    "layer {i}: expected {wd:?}/{bd:?}, got {:?}/{:?}",
                    p.weights.dims(),
                    p.bias.dims()
                )));
            }
        }
        Ok(())
    }

    pub fn byte_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.byte_len() + l.bias.byte_len())
            .sum()
    }
}

fn fan(layer: &LayerSpec) -> (usize, usize) {
    match *layer {
        LayerSpec::Dense { inputs, outputs } => (inputs, outputs),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => (in_channels * kernel_h * kernel_w, out_channels * kernel_h * kernel_w),
        LayerSpec::DepthwiseConv2d {
            kernel_h, kernel_w, ..
        } => (kernel_h * kernel_w, kernel_h * kernel_w),
        _ => (1, 1),
    }
}

/// Classifier output: non-negative values summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior(Vec<f32>);

pub const POSTERIOR_TOLERANCE: f64 = 1e-6;

impl Posterior {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty posterior".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("posterior has negative or non-finite entries".into()));
        }
        let sum: f64 = values.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > POSTERIOR_TOLERANCE {
            return Err(Error::InvalidArgument(format!("posterior sums to {sum}")));
        }
        Ok(Posterior(values))
    }

    pub fn uniform(k: usize) -> Self {
        Posterior(vec![1.0 / k as f32; k])
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(4) {
            return Err(Error::ParseError("posterior bytes not a multiple of 4".into()));
        }
        Posterior::new(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}

fn params_for<'a>(def: &ModelDef, secrets: &'a ModelSecrets) -> Vec<Option<&'a LayerParams>> {
    let mut it = secrets.layers.iter();
    def.layers
        .iter()
        .map(|l| if l.has_params() { it.next() } else { None })
        .collect()
}

/// Runs layers `range` of the model on `x` and returns the raw activation.
pub fn forward_layers(
    def: &ModelDef,
    secrets: &ModelSecrets,
    range: std::ops::Range<usize>,
    x: &Tensor,
) -> Result<Tensor> {
    secrets.check(def)?;
    let params = params_for(def, secrets);
    let mut cur = x.clone();
    for i in range {
        let layer = def
            .layers
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer {i}")))?;
        cur = layer.apply(&cur, params[i].map(|p| (&p.weights, &p.bias)))?;
    }
    Ok(cur)
}

/// Plaintext inference.
pub fn forward(def: &ModelDef, secrets: &ModelSecrets, x: &Tensor) -> Result<Posterior> {
    if x.dims() != def.input.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "model expects input {:?}, got {:?}",
            def.input,
            x.dims()
        )));
    }
    if def.layers.last() != Some(&LayerSpec::Softmax) {
        return Err(Error::SchemaError("model must end with a softmax layer".into()));
    }
    let out = forward_layers(def, secrets, 0..def.layers.len(), x)?;
    Posterior::new(out.into_data())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::Padding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    pub(crate) fn small_cnn() -> ModelDef {
        ModelDef {
            input: vec![2, 8, 8],
            classes: 3,
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 2,
                    out_channels: 4,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::DepthwiseConv2d {
                    channels: 4,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    padding: Padding::Valid,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 16,
                    outputs: 3,
                },
                LayerSpec::Softmax,
            ],
        }
    }

    pub(crate) fn mlp(sizes: &[usize]) -> ModelDef {
        let mut layers = Vec::new();
        for w in sizes.windows(2) {
            layers.push(LayerSpec::Dense {
                inputs: w[0],
                outputs: w[1],
            });
            layers.push(LayerSpec::Relu);
        }
        layers.pop();
        layers.push(LayerSpec::Softmax);
        ModelDef {
            input: vec![sizes[0]],
            classes: *sizes.last().unwrap(),
            layers,
        }
    }

    #[test]
    fn cnn_shapes_chain() {
        let def = small_cnn();
        def.validate().unwrap();
        let dims = def.activation_dims().unwrap();
        assert_eq!(dims[1], vec![4, 8, 8]);
        assert_eq!(dims[3], vec![4, 4, 4]);
        assert_eq!(dims[4], vec![4, 2, 2]);
        assert_eq!(dims.last().unwrap(), &vec![3]);
        assert_eq!(def.param_count(), 4 * 2 * 9 + 4 + 4 * 9 + 4 + 16 * 3 + 3);
    }

    #[test]
    fn broken_chains_are_schema_errors() {
        let mut def = small_cnn();
        def.layers[5] = LayerSpec::Dense {
            inputs: 15,
            outputs: 3,
        };
        assert!(matches!(def.validate(), Err(Error::SchemaError(_))));
        let mut def = small_cnn();
        def.layers.pop();
        assert!(matches!(def.validate(), Err(Error::SchemaError(_))));
        let mut def = small_cnn();
        def.classes = 4;
        assert!(matches!(def.validate(), Err(Error::SchemaError(_))));
    }

    #[test]
    fn toml_roundtrip() {
        let def = small_cnn();
        let text = def.to_toml();
        assert!(text.contains("kind = \"depthwise_conv2d\""));
        assert_eq!(ModelDef::from_toml(&text).unwrap(), def);
        assert!(matches!(ModelDef::from_toml("input = ["), Err(Error::ParseError(_))));
    }

    #[test]
    fn toml_defaults_apply() {
        let text = r#"
            input = [1, 4, 4]
            classes = 2
            [[layers]]
            kind = "conv2d"
            in_channels = 1
            out_channels = 2
            kernel_h = 3
            kernel_w = 3
            [[layers]]
            kind = "maxpool"
            size = 2
            [[layers]]
            kind = "softmax"
        "#;
        let def = ModelDef::from_toml(text).unwrap();
        assert_eq!(
            def.layers[0],
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                padding: Padding::Valid
            }
        );
    }

    #[test]
    fn identity_model_argmax_on_one_hot() {
        let def = mlp(&[4, 4]);
        let mut eye = vec![0f32; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 5.0;
        }
        let secrets = ModelSecrets {
            layers: vec![LayerParams {
                weights: Tensor::new(vec![4, 4], eye).unwrap(),
                bias: Tensor::zeros(vec![4]),
            }],
        };
        for hot in 0..4 {
            let mut x = vec![0f32; 4];
            x[hot] = 1.0;
            let p = forward(&def, &secrets, &Tensor::vector(x)).unwrap();
            assert_eq!(p.argmax(), hot);
        }
    }

    #[test]
    fn layerwise_equals_monolithic() {
        let def = small_cnn();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let secrets = ModelSecrets::random(&def, &mut rng);
        let x = Tensor::new(def.input.clone(), (0..128).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let full = forward_layers(&def, &secrets, 0..def.layers.len(), &x).unwrap();
        for split in 0..def.layers.len() {
            let mid = forward_layers(&def, &secrets, 0..split, &x).unwrap();
            let end = forward_layers(&def, &secrets, split..def.layers.len(), &mid).unwrap();
            assert_eq!(end, full);
        }
    }

    /// Second, independently written forward pass for `small_cnn`.
    fn reference_small_cnn(secrets: &ModelSecrets, x: &[f32]) -> Vec<f32> {
        let (w1, b1) = (secrets.layers[0].weights.data(), secrets.layers[0].bias.data());
        let (w2, b2) = (secrets.layers[1].weights.data(), secrets.layers[1].bias.data());
        let (w3, b3) = (secrets.layers[2].weights.data(), secrets.layers[2].bias.data());
        // conv 2->4, 3x3, same padding, then relu
        let mut a1 = vec![0f64; 4 * 8 * 8];
        for o in 0..4 {
            for y in 0..8i32 {
                for xx in 0..8i32 {
                    let mut s = b1[o] as f64;
                    for c in 0..2 {
                        for ky in 0..3i32 {
                            for kx in 0..3i32 {
                                let (iy, ix) = (y + ky - 1, xx + kx - 1);
                                if (0..8).contains(&iy) && (0..8).contains(&ix) {
                                    s += w1[((o * 2 + c) * 3 + ky as usize) * 3 + kx as usize] as f64
                                        * x[c * 64 + (iy * 8 + ix) as usize] as f64;
                                }
                            }
                        }
                    }
                    a1[o * 64 + (y * 8 + xx) as usize] = s.max(0.0);
                }
            }
        }
        // 2x2 max pool
        let mut a2 = vec![0f64; 4 * 16];
        for c in 0..4 {
            for y in 0..4 {
                for xx in 0..4 {
                    let mut m = f64::MIN;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(a1[c * 64 + (2 * y + dy) * 8 + 2 * xx + dx]);
                        }
                    }
                    a2[c * 16 + y * 4 + xx] = m;
                }
            }
        }
        // depthwise 3x3 valid, relu
        let mut a3 = [0f64; 4 * 4];
        for c in 0..4 {
            for y in 0..2 {
                for xx in 0..2 {
                    let mut s = b2[c] as f64;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            s += w2[(c * 3 + ky) * 3 + kx] as f64 * a2[c * 16 + (y + ky) * 4 + xx + kx];
                        }
                    }
                    a3[c * 4 + y * 2 + xx] = s.max(0.0);
                }
            }
        }
        // dense 16 -> 3, softmax
        let z: Vec<f64> = (0..3)
            .map(|i| b3[i] as f64 + (0..16).map(|j| w3[i * 16 + j] as f64 * a3[j]).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| (v / s) as f32).collect()
    }

    #[test]
    fn small_cnn_matches_reference() {
        let def = small_cnn();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut worst = 0f32;
        for _ in 0..20 {
            let secrets = ModelSecrets::random(&def, &mut rng);
            let x: Vec<f32> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = forward(&def, &secrets, &Tensor::new(def.input.clone(), x.clone()).unwrap()).unwrap();
            let want = reference_small_cnn(&secrets, &x);
            for (a, b) in p.values().iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 1e-5, "max diff {worst}");
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let def = mlp(&[4, 3]);
        let secrets = ModelSecrets::random(&def, &mut ChaCha20Rng::seed_from_u64(1));
        assert!(matches!(
            forward(&def, &secrets, &Tensor::vector(vec![0.0; 5])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn posterior_validation() {
        assert!(Posterior::new(vec![0.5, 0.5]).is_ok());
        assert!(Posterior::new(vec![0.6, 0.5]).is_err());
        assert!(Posterior::new(vec![-0.1, 1.1]).is_err());
        assert!(Posterior::new(vec![]).is_err());
        let p = Posterior::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(Posterior::from_bytes(&p.to_bytes()).unwrap(), p);
        assert_eq!(p.argmax(), 1);
    }
}
