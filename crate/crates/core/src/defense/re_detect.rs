//! Detection of crafted inputs used to reverse-engineer model attributes.
//!
//! A binary classifier separates ordinary inputs from crafted probes; a
//! malicious verdict denies service before the protected model runs. The
//! shipped crafted-input generator is a stand-in (uniform noise and
//! high-frequency patterns); externally produced corpora can be passed to
//! [`re_detector_train`] directly.

use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::train::{train_toy, Dataset};
use crate::nn::{forward, LayerSpec, ModelDef, ModelSecrets, Tensor};

pub const MAX_IMBALANCE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputVerdict {
    Benign,
    Malicious,
}

/// Two-output classifier; output 1 means malicious.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel {
    pub def: ModelDef,
    pub secrets: ModelSecrets,
}

/// Dense detector for flattened `side x side` inputs.
pub fn default_detector_arch(side: usize) -> ModelDef {
    let n = side * side;
    ModelDef {
        input: vec![n],
        classes: 2,
        layers: vec![
            LayerSpec::Dense { inputs: n, outputs: 32 },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: 32, outputs: 2 },
            LayerSpec::Softmax,
        ],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorTraining {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DetectorTraining {
    fn default() -> Self {
        DetectorTraining {
            epochs: 30,
            lr: 0.02,
            seed: 0,
        }
    }
}

pub fn re_detector_train(
    benign: &[Vec<f32>],
    crafted: &[Vec<f32>],
    arch: &ModelDef,
    training: DetectorTraining,
) -> Result<DetectorModel> {
    if benign.is_empty() || crafted.is_empty() {
        return Err(Error::InvalidArgument("detector needs benign and crafted samples".into()));
    }
    let (a, b) = (benign.len() as f64, crafted.len() as f64);
    if a.max(b) / a.min(b) > MAX_IMBALANCE {
        return Err(Error::InvalidArgument(format!(
            "class imbalance {}:{} exceeds {MAX_IMBALANCE}:1",
            benign.len(),
            crafted.len()
        )));
    }
    if arch.classes != 2 {
        return Err(Error::SchemaError(format!("detector must have 2 outputs, not {}", arch.classes)));
    }
    let inputs: Vec<Vec<f32>> = benign.iter().chain(crafted).cloned().collect();
    let labels = std::iter::repeat_n(0, benign.len()).chain(std::iter::repeat_n(1, crafted.len())).collect();
    let data = Dataset::new(inputs, labels)?;
    let report = train_toy(&data, arch, training.epochs, training.lr, training.seed)?;
    Ok(DetectorModel {
        def: arch.clone(),
        secrets: report.secrets,
    })
}

pub fn re_detector_score(det: &DetectorModel, x: &[f32]) -> Result<InputVerdict> {
    let p = forward(&det.def, &det.secrets, &Tensor::new(det.def.input.clone(), x.to_vec())?)?;
    Ok(if p.argmax() == 1 {
        InputVerdict::Malicious
    } else {
        InputVerdict::Benign
    })
}

/// Smooth images: a few Gaussian blobs on a dark background, values in [0, 1].
pub fn structured_images<R: RngCore>(n: usize, side: usize, rng: &mut R) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let blobs: Vec<(f32, f32, f32, f32)> = (0..rng.gen_range(1..=3))
                .map(|_| {
                    (
                        rng.gen_range(0.0..side as f32),
                        rng.gen_range(0.0..side as f32),
                        rng.gen_range(1.0..side as f32 / 3.0),
                        rng.gen_range(0.5..1.0),
                    )
                })
                .collect();
            let mut img = vec![0f32; side * side];
            for (i, px) in img.iter_mut().enumerate() {
                let (y, x) = ((i / side) as f32, (i % side) as f32);
                let v: f32 = blobs
                    .iter()
                    .map(|&(cy, cx, s, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
                    .sum();
                *px = (v + rng.gen_range(0.0..0.02)).min(1.0);
            }
            img
        })
        .collect()
}

/// Proxy probes: alternately uniform noise and randomized high-frequency
/// stripe or checkerboard patterns.
pub fn crafted_images<R: RngCore>(n: usize, side: usize, rng: &mut R) -> Vec<Vec<f32>> {
    (0..n)
        .map(|k| {
            if k % 2 == 0 {
                (0..side * side).map(|_| rng.gen_range(0.0..1.0)).collect()
            } else {
                let period = rng.gen_range(1..=2);
                let mode = rng.gen_range(0..3);
                let amp = rng.gen_range(0.3..1.0);
                let offset = rng.gen_range(0.0..1.0 - amp);
                (0..side * side)
                    .map(|i| {
                        let (y, x) = (i / side, i % side);
                        let phase = match mode {
                            0 => x / period,
                            1 => y / period,
                            _ => x / period + y / period,
                        };
                        offset + amp * (phase % 2) as f32
                    })
                    .collect()
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ReDetectReport {
    pub train_benign: usize,
    pub train_crafted: usize,
    pub test_benign: usize,
    pub test_crafted: usize,
    pub test_accuracy: f64,
    pub false_denials_on_train_benign: usize,
    pub overhead_ms: f64,
    pub reference_overhead_ms: f64,
}

/// Fraction of correct verdicts over both sets.
pub fn detector_accuracy(det: &DetectorModel, benign: &[Vec<f32>], crafted: &[Vec<f32>]) -> Result<f64> {
    let mut right = 0;
    for x in benign {
        right += usize::from(re_detector_score(det, x)? == InputVerdict::Benign);
    }
    for x in crafted {
        right += usize::from(re_detector_score(det, x)? == InputVerdict::Malicious);
    }
    Ok(right as f64 / (benign.len() + crafted.len()) as f64)
}

/// Trains on fresh proxy data, then measures held-out accuracy, denials of
/// the benign training samples, and the mean per-query scoring time.
pub fn re_detect_eval(side: usize, n_train: usize, n_test: usize, seed: u64) -> Result<(DetectorModel, ReDetectReport)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let benign = structured_images(n_train, side, &mut rng);
    let crafted = crafted_images(n_train, side, &mut rng);
    let test_benign = structured_images(n_test, side, &mut rng);
    let test_crafted = crafted_images(n_test, side, &mut rng);
    let det = re_detector_train(
        &benign,
        &crafted,
        &default_detector_arch(side),
        DetectorTraining {
            seed,
            ..Default::default()
        },
    )?;
    let test_accuracy = detector_accuracy(&det, &test_benign, &test_crafted)?;
    let mut false_denials = 0;
    for x in &benign {
        false_denials += usize::from(re_detector_score(&det, x)? == InputVerdict::Malicious);
    }
    let probes: Vec<&Vec<f32>> = test_benign.iter().chain(&test_crafted).collect();
    let start = Instant::now();
    for x in &probes {
        std::hint::black_box(re_detector_score(&det, x)?);
    }
    let overhead_ms = start.elapsed().as_secs_f64() * 1e3 / probes.len().max(1) as f64;
    let report = ReDetectReport {
        train_benign: benign.len(),
        train_crafted: crafted.len(),
        test_benign: test_benign.len(),
        test_crafted: test_crafted.len(),
        test_accuracy,
        false_denials_on_train_benign: false_denials,
        overhead_ms,
        reference_overhead_ms: 0.832,
    };
    Ok((det, report))
}
