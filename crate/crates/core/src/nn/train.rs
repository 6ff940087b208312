//! Minimal SGD trainer for dense/relu/softmax networks.
//!
//! Parameters are kept in f64 during training and rounded to f32 at the end.
//! The loss is the mean cross-entropy of the softmax output.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{LayerParams, LayerSpec, ModelDef, ModelSecrets, Tensor};
use crate::error::{Error, Result};

/// Labeled feature vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f32>>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                found: labels.len(),
            });
        }
        if let Some(first) = inputs.first() {
            if let Some(bad) = inputs.iter().find(|x| x.len() != first.len()) {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    found: bad.len(),
                });
            }
        }
        Ok(Dataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub secrets: ModelSecrets,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Dense { inputs: usize, outputs: usize },
    Relu,
}

/// f64 parameters of the dense layers, in order.
#[derive(Clone, Debug, PartialEq)]
struct Net {
    ops: Vec<Op>,
    w: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
}

fn ops_of(def: &ModelDef) -> Result<Vec<Op>> {
    def.validate()?;
    let (last, body) = def.layers.split_last().expect("validated models have layers");
    debug_assert_eq!(*last, LayerSpec::Softmax);
    body.iter()
        .map(|l| match *l {
            LayerSpec::Dense { inputs, outputs } => Ok(Op::Dense { inputs, outputs }),
            LayerSpec::Relu => Ok(Op::Relu),
            other => Err(Error::InvalidArgument(format!(
                "trainer supports dense, relu and a final softmax only, found {}",
                other.kind()
            ))),
        })
        .collect()
}

impl Net {
    fn init(def: &ModelDef, rng: &mut ChaCha20Rng) -> Result<Net> {
        let ops = ops_of(def)?;
        let mut w = Vec::new();
        let mut b = Vec::new();
        for op in &ops {
            if let Op::Dense { inputs, outputs } = *op {
                let limit = (6.0 / (inputs + outputs) as f64).sqrt();
                w.push((0..inputs * outputs).map(|_| rng.gen_range(-limit..limit)).collect());
                b.push(vec![0.0; outputs]);
            }
        }
        Ok(Net { ops, w, b })
    }

    fn from_secrets(def: &ModelDef, secrets: &ModelSecrets) -> Result<Net> {
        let ops = ops_of(def)?;
        secrets.check(def)?;
        let w = secrets.layers.iter().map(|l| l.weights.data().iter().map(|&v| v as f64).collect()).collect();
        let b = secrets.layers.iter().map(|l| l.bias.data().iter().map(|&v| v as f64).collect()).collect();
        Ok(Net { ops, w, b })
    }

    fn to_secrets(&self) -> ModelSecrets {
        let mut layers = Vec::new();
        let mut k = 0;
        for op in &self.ops {
            if let Op::Dense { inputs, outputs } = *op {
                layers.push(LayerParams {
                    weights: Tensor::new(vec![outputs, inputs], self.w[k].iter().map(|&v| v as f32).collect()).unwrap(),
                    bias: Tensor::new(vec![outputs], self.b[k].iter().map(|&v| v as f32).collect()).unwrap(),
                });
                k += 1;
            }
        }
        ModelSecrets { layers }
    }

    /// Activations after every op; the last entry is the logits.
    fn activations(&self, x: &[f32]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.iter().map(|&v| v as f64).collect::<Vec<f64>>()];
        let mut k = 0;
        for op in &self.ops {
            let a = acts.last().unwrap();
            let next = match *op {
                Op::Dense { inputs, outputs } => {
                    let (w, b) = (&self.w[k], &self.b[k]);
                    k += 1;
                    (0..outputs)
                        .map(|i| b[i] + w[i * inputs..(i + 1) * inputs].iter().zip(a).map(|(p, q)| p * q).sum::<f64>())
                        .collect()
                }
                Op::Relu => a.iter().map(|&v| v.max(0.0)).collect(),
            };
            acts.push(next);
        }
        acts
    }

    fn probabilities(logits: &[f64]) -> Vec<f64> {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn sample_loss(&self, x: &[f32], y: usize) -> f64 {
        let acts = self.activations(x);
        let logits = acts.last().unwrap();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - logits[y]
    }

    fn loss(&self, data: &Dataset) -> f64 {
        data.inputs.iter().zip(&data.labels).map(|(x, &y)| self.sample_loss(x, y)).sum::<f64>() / data.len() as f64
    }

    /// Accumulates `scale * dLoss/dparam` for one sample into `gw`/`gb`.
    fn backprop(&self, x: &[f32], y: usize, scale: f64, gw: &mut [Vec<f64>], gb: &mut [Vec<f64>]) {
        let acts = self.activations(x);
        let mut delta = Net::probabilities(acts.last().unwrap());
        delta[y] -= 1.0;
        let mut k = self.w.len();
        for (i, op) in self.ops.iter().enumerate().rev() {
            let input = &acts[i];
            match *op {
                Op::Relu => {
                    for (d, &a) in delta.iter_mut().zip(input) {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                Op::Dense { inputs, outputs } => {
                    k -= 1;
                    let w = &self.w[k];
                    let mut prev = vec![0.0; inputs];
                    for o in 0..outputs {
                        let d = delta[o];
                        gb[k][o] += scale * d;
                        let row = &w[o * inputs..(o + 1) * inputs];
                        let grow = &mut gw[k][o * inputs..(o + 1) * inputs];
                        for j in 0..inputs {
                            grow[j] += scale * d * input[j];
                            prev[j] += row[j] * d;
                        }
                    }
                    delta = prev;
                }
            }
        }
    }

    fn zero_grads(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            self.w.iter().map(|w| vec![0.0; w.len()]).collect(),
            self.b.iter().map(|b| vec![0.0; b.len()]).collect(),
        )
    }

    fn gradients(&self, data: &Dataset) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (mut gw, mut gb) = self.zero_grads();
        let scale = 1.0 / data.len() as f64;
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            self.backprop(x, y, scale, &mut gw, &mut gb);
        }
        (gw, gb)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut()).flatten()
    }

    fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).flatten().all(|v| v.is_finite())
    }
}

fn check_data(def: &ModelDef, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let want: usize = def.input.iter().product();
    if data.dim() != want {
        return Err(Error::DimensionMismatch {
            expected: want,
            found: data.dim(),
        });
    }
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= def.classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {} classes", def.classes)));
    }
    Ok(())
}

/// Per-sample SGD with a seeded shuffle each epoch.
pub fn train_toy(data: &Dataset, arch: &ModelDef, epochs: usize, lr: f64, seed: u64) -> Result<TrainReport> {
    check_data(arch, data)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut net = Net::init(arch, &mut rng)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (mut gw, mut gb) = net.zero_grads();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            gw.iter_mut().chain(gb.iter_mut()).flatten().for_each(|g| *g = 0.0);
            net.backprop(&data.inputs[i], data.labels[i], 1.0, &mut gw, &mut gb);
            for (p, g) in net.params_mut().zip(gw.iter().chain(&gb).flatten()) {
                *p -= lr * g;
            }
        }
        if !net.is_finite() || !net.loss(data).is_finite() {
            return Err(Error::DivergenceError(format!("loss became non-finite in epoch {epoch}")));
        }
    }
    let final_loss = net.loss(data);
    if !final_loss.is_finite() {
        return Err(Error::DivergenceError("initial loss is non-finite".into()));
    }
    let secrets = net.to_secrets();
    let train_accuracy = accuracy(arch, &secrets, data)?;
    Ok(TrainReport {
        secrets,
        train_accuracy,
        final_loss,
    })
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(def: &ModelDef, secrets: &ModelSecrets, data: &Dataset) -> Result<f64> {
    check_data(def, data)?;
    let mut hits = 0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let p = super::forward(def, secrets, &Tensor::new(def.input.clone(), x.clone())?)?;
        if p.argmax() == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Mean cross-entropy of `secrets` on `data`, evaluated in f64.
pub fn loss(def: &ModelDef, secrets: &ModelSecrets, data: &Dataset) -> Result<f64> {
    check_data(def, data)?;
    Ok(Net::from_secrets(def, secrets)?.loss(data))
}

/// Analytic and central-difference gradients of the mean loss, flattened in
/// the order weights of every layer then biases of every layer.
pub fn gradient_pair(def: &ModelDef, secrets: &ModelSecrets, data: &Dataset, epsilon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {epsilon}")));
    }
    check_data(def, data)?;
    let net = Net::from_secrets(def, secrets)?;
    let (gw, gb) = net.gradients(data);
    let analytic: Vec<f64> = gw.into_iter().chain(gb).flatten().collect();
    let mut probe = net.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..analytic.len() {
        let orig = *probe.params_mut().nth(i).unwrap();
        *probe.params_mut().nth(i).unwrap() = orig + epsilon;
        let up = probe.loss(data);
        *probe.params_mut().nth(i).unwrap() = orig - epsilon;
        let down = probe.loss(data);
        *probe.params_mut().nth(i).unwrap() = orig;
        numeric.push((up - down) / (2.0 * epsilon));
    }
    Ok((analytic, numeric))
}

/// Largest relative error between analytic and numeric gradients, using
/// `|a - n| / max(|a| + |n|, 1e-8)`.
pub fn grad_check(def: &ModelDef, secrets: &ModelSecrets, data: &Dataset, epsilon: f64) -> Result<f64> {
    let (a, n) = gradient_pair(def, secrets, data, epsilon)?;
    Ok(a.iter()
        .zip(&n)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max))
}

/// Glorot-initialized parameters as `train_toy` would start from.
pub fn initial_secrets(arch: &ModelDef, seed: u64) -> Result<ModelSecrets> {
    Ok(Net::init(arch, &mut ChaCha20Rng::seed_from_u64(seed))?.to_secrets())
}
