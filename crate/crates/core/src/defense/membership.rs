//! Membership-inference evaluation of the noising defense on a toy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::noising::{entropy_attack_auc, estimation_error, jsd, noise_posterior, NoiseConfig};
use crate::error::{Error, Result};
use crate::nn::train::{accuracy, train_toy, Dataset};
use crate::nn::{forward, LayerSpec, ModelDef, ModelSecrets, Posterior, Tensor};

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct MembershipRow {
    pub c: f64,
    pub auc: f64,
    pub jsd_mean: f64,
    pub est_err_mean: f64,
}

/// A target model with its training members and held-out non-members.
pub struct MembershipSetup {
    pub def: ModelDef,
    pub secrets: ModelSecrets,
    pub members: Dataset,
    pub non_members: Dataset,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Parses `start:end:step` into an inclusive grid.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("grid {spec:?}: {e}")))?;
    let [start, end, step] = parts[..] else {
        return Err(Error::InvalidArgument(format!("grid {spec:?} is not start:end:step")));
    };
    if step <= 0.0 || end < start {
        return Err(Error::InvalidArgument(format!("grid {spec:?} is empty")));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect())
}

/// Noise grid `0, 0.05, ..., 0.5`.
pub fn default_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 20.0).collect()
}

/// Empirical class distribution of a dataset.
pub fn class_distribution(data: &Dataset, classes: usize) -> Result<Posterior> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut counts = vec![0f64; classes];
    for &y in &data.labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::InvalidArgument(format!("label {y} outside {classes} classes")))? += 1.0;
    }
    let n = data.len() as f64;
    let mut v: Vec<f32> = counts.iter().map(|c| (c / n) as f32).collect();
    let drift = 1.0 - v.iter().map(|&x| x as f64).sum::<f64>();
    v[0] += drift as f32;
    Posterior::new(v)
}

fn posteriors(def: &ModelDef, secrets: &ModelSecrets, data: &Dataset) -> Result<Vec<Posterior>> {
    data.inputs
        .iter()
        .map(|x| forward(def, secrets, &Tensor::new(def.input.clone(), x.clone())?))
        .collect()
}

/// Sweeps the noise strength and measures attack AUC and utility loss.
pub fn membership_eval(setup: &MembershipSetup, grid: &[f64], t: &Posterior) -> Result<Vec<MembershipRow>> {
    if setup.members.is_empty() || setup.non_members.is_empty() {
        return Err(Error::InvalidArgument("membership split needs members and non-members".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty noise grid".into()));
    }
    let members = posteriors(&setup.def, &setup.secrets, &setup.members)?;
    let non_members = posteriors(&setup.def, &setup.secrets, &setup.non_members)?;
    let labels: Vec<usize> = setup.members.labels.iter().chain(&setup.non_members.labels).cloned().collect();
    grid.iter()
        .map(|&c| {
            let cfg = NoiseConfig::new(c, t.clone())?;
            let noised_m: Vec<Posterior> = members.iter().map(|p| noise_posterior(p, &cfg)).collect::<Result<_>>()?;
            let noised_n: Vec<Posterior> = non_members.iter().map(|p| noise_posterior(p, &cfg)).collect::<Result<_>>()?;
            let auc = entropy_attack_auc(&noised_m, &noised_n)?;
            let (mut jsd_sum, mut err_sum) = (0.0, 0.0);
            for ((p, q), &y) in members.iter().chain(&non_members).zip(noised_m.iter().chain(&noised_n)).zip(&labels) {
                jsd_sum += jsd(p, q)?;
                err_sum += estimation_error(p, q, y)?;
            }
            let n = labels.len() as f64;
            Ok(MembershipRow {
                c,
                auc,
                jsd_mean: jsd_sum / n,
                est_err_mean: err_sum / n,
            })
        })
        .collect()
}

/// Toy task with weak label signal: with probability `signal_rate` a label
/// follows the sign pattern of two input coordinates, otherwise it is drawn
/// uniformly. At low rates a network can only memorize its training set.
pub fn noisy_task(n: usize, dim: usize, classes: usize, signal_rate: f64, rng: &mut ChaCha20Rng) -> Dataset {
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let signal = (usize::from(x[0] > 0.0) + 2 * usize::from(x[1] > 0.0)) % classes;
        let y = if rng.gen_bool(signal_rate) { signal } else { rng.gen_range(0..classes) };
        inputs.push(x);
        labels.push(y);
    }
    Dataset { inputs, labels }
}

/// Shape of the overfit toy experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverfitConfig {
    pub dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub samples: usize,
    pub epochs: usize,
    pub lr: f64,
    pub signal_rate: f64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        OverfitConfig {
            dim: 64,
            classes: 10,
            hidden: 64,
            samples: 200,
            epochs: 50,
            lr: 0.05,
            signal_rate: 0.0,
        }
    }
}

/// Trains a deliberately overfit dense model on `noisy_task`.
pub fn overfit_setup(seed: u64) -> Result<MembershipSetup> {
    overfit_setup_with(OverfitConfig::default(), seed)
}

pub fn overfit_setup_with(cfg: OverfitConfig, seed: u64) -> Result<MembershipSetup> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let members = noisy_task(cfg.samples, cfg.dim, cfg.classes, cfg.signal_rate, &mut rng);
    let non_members = noisy_task(cfg.samples, cfg.dim, cfg.classes, cfg.signal_rate, &mut rng);
    let def = ModelDef {
        input: vec![cfg.dim],
        classes: cfg.classes,
        layers: vec![
            LayerSpec::Dense {
                inputs: cfg.dim,
                outputs: cfg.hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: cfg.hidden,
                outputs: cfg.classes,
            },
            LayerSpec::Softmax,
        ],
    };
    let report = train_toy(&members, &def, cfg.epochs, cfg.lr, seed)?;
    let test_accuracy = accuracy(&def, &report.secrets, &non_members)?;
    Ok(MembershipSetup {
        def,
        secrets: report.secrets,
        members,
        non_members,
        train_accuracy: report.train_accuracy,
        test_accuracy,
    })
}
