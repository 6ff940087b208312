//! Posterior noising against membership inference, plus the attack and
//! utility metrics used to evaluate it. Natural logarithms throughout.

use crate::error::{Error, Result};
use crate::nn::Posterior;

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn plogp(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.max(PROB_FLOOR).ln()
    }
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &Posterior) -> f64 {
    -p.values().iter().map(|&v| plogp(v as f64)).sum::<f64>()
}

/// Noise parameters: strength `c` in `[0, 1]` and noise distribution `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    c: f64,
    t: Posterior,
}

impl NoiseConfig {
    pub fn new(c: f64, t: Posterior) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!("noise strength {c} outside [0, 1]")));
        }
        Ok(NoiseConfig { c, t })
    }

    pub fn uniform(c: f64, k: usize) -> Result<Self> {
        NoiseConfig::new(c, Posterior::uniform(k))
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn t(&self) -> &Posterior {
        &self.t
    }
}

/// Confidence weight `1 - entropy(P) / ln K`.
pub fn alpha(p: &Posterior) -> f64 {
    let k = p.len();
    if k < 2 {
        return 0.0;
    }
    (1.0 - entropy(p) / (k as f64).ln()).clamp(0.0, 1.0)
}

/// `P' = (1 - c*alpha) P + c*alpha T`.
pub fn noise_posterior(p: &Posterior, cfg: &NoiseConfig) -> Result<Posterior> {
    if p.len() != cfg.t.len() {
        return Err(Error::DimensionMismatch {
            expected: cfg.t.len(),
            found: p.len(),
        });
    }
    let w = cfg.c * alpha(p);
    let values = p
        .values()
        .iter()
        .zip(cfg.t.values())
        .map(|(&pi, &ti)| ((1.0 - w) * pi as f64 + w * ti as f64) as f32)
        .collect();
    Posterior::new(values)
}

/// Jensen-Shannon style divergence `sum P_i ln(P_i/M_i) + P'_i ln(P'_i/M_i)`
/// with `M = (P + P')/2`. There is no factor of one half, so disjoint
/// supports give `2 ln 2`.
pub fn jsd(p: &Posterior, q: &Posterior) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    let term = |a: f64, m: f64| if a <= 0.0 { 0.0 } else { a * (a.max(PROB_FLOOR) / m.max(PROB_FLOOR)).ln() };
    Ok(p.values()
        .iter()
        .zip(q.values())
        .map(|(&a, &b)| {
            let (a, b) = (a as f64, b as f64);
            let m = (a + b) / 2.0;
            term(a, m) + term(b, m)
        })
        .sum())
}

/// `|P_delta - P'_delta|` for the correct class `delta`.
pub fn estimation_error(p: &Posterior, q: &Posterior, delta: usize) -> Result<f64> {
    match (p.values().get(delta), q.values().get(delta)) {
        (Some(&a), Some(&b)) if p.len() == q.len() => Ok((a as f64 - b as f64).abs()),
        _ => Err(Error::InvalidArgument(format!(
            "class {delta} out of range for {} classes",
            p.len()
        ))),
    }
}

/// Area under the ROC curve of the entropy-threshold attack, which scores
/// each posterior by `-entropy` and calls high scores members. Computed as
/// the Mann-Whitney statistic with ties counted one half.
pub fn entropy_attack_auc(members: &[Posterior], non_members: &[Posterior]) -> Result<f64> {
    let m: Vec<f64> = members.iter().map(|p| -entropy(p)).collect();
    let n: Vec<f64> = non_members.iter().map(|p| -entropy(p)).collect();
    auc(&m, &n)
}

/// Rank-statistic AUC for positive scores `pos` against negatives `neg`.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("AUC needs non-empty positive and negative sets".into()));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    if all.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_posterior(rng: &mut ChaCha20Rng, k: usize) -> Posterior {
        let sharp = rng.gen_range(0.1..20.0);
        let raw: Vec<f64> = (0..k).map(|_| (rng.gen_range(-1.0f64..1.0) * sharp).exp()).collect();
        let s: f64 = raw.iter().sum();
        let mut v: Vec<f32> = raw.iter().map(|x| (x / s) as f32).collect();
        let fix: f64 = 1.0 - v.iter().map(|&x| x as f64).sum::<f64>();
        let i = v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        v[i] += fix as f32;
        Posterior::new(v).unwrap()
    }

    #[test]
    fn entropy_reference_values() {
        assert!((entropy(&Posterior::uniform(4)) - 4f64.ln()).abs() < 1e-7);
        assert_eq!(entropy(&Posterior::new(vec![0.0, 1.0, 0.0]).unwrap()), 0.0);
        let want = -0.75f64 * 0.75f64.ln() - 0.25 * 0.25f64.ln();
        assert!((entropy(&Posterior::new(vec![0.75, 0.25]).unwrap()) - want).abs() < 1e-9);
        assert!((want - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn noising_fixed_points_and_reference_case() {
        let u = Posterior::uniform(5);
        let cfg = NoiseConfig::uniform(0.7, 5).unwrap();
        assert_eq!(noise_posterior(&u, &cfg).unwrap(), u);
        let one_hot = Posterior::new(vec![1.0, 0.0]).unwrap();
        let out = noise_posterior(&one_hot, &NoiseConfig::uniform(0.5, 2).unwrap()).unwrap();
        assert_eq!(out.values(), &[0.75, 0.25]);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let zero = NoiseConfig::uniform(0.0, 6).unwrap();
        for _ in 0..100 {
            let p = random_posterior(&mut rng, 6);
            assert_eq!(noise_posterior(&p, &zero).unwrap(), p);
        }
    }

    #[test]
    fn noising_rejects_bad_configs() {
        assert!(NoiseConfig::uniform(1.5, 2).is_err());
        assert!(NoiseConfig::uniform(-0.1, 2).is_err());
        let cfg = NoiseConfig::uniform(0.5, 3).unwrap();
        assert!(noise_posterior(&Posterior::uniform(2), &cfg).is_err());
    }

    #[test]
    fn estimation_error_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let k = rng.gen_range(2..12);
            let p = random_posterior(&mut rng, k);
            let t = random_posterior(&mut rng, k);
            let c = rng.gen_range(0.0..=1.0);
            let q = noise_posterior(&p, &NoiseConfig::new(c, t.clone()).unwrap()).unwrap();
            let d = rng.gen_range(0..k);
            let lhs = estimation_error(&p, &q, d).unwrap();
            let rhs = c * alpha(&p) * (p.values()[d] as f64 - t.values()[d] as f64).abs();
            assert!((lhs - rhs).abs() <= 1e-7, "{lhs} vs {rhs}");
        }
        let one_hot = Posterior::new(vec![1.0, 0.0]).unwrap();
        let q = noise_posterior(&one_hot, &NoiseConfig::uniform(0.5, 2).unwrap()).unwrap();
        assert_eq!(estimation_error(&one_hot, &q, 0).unwrap(), 0.25);
    }

    #[test]
    fn argmax_is_kept_under_uniform_noise() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let k = rng.gen_range(2..10);
            let p = random_posterior(&mut rng, k);
            let c = rng.gen_range(0.0..0.99);
            let q = noise_posterior(&p, &NoiseConfig::uniform(c, k).unwrap()).unwrap();
            assert_eq!(q.argmax(), p.argmax());
        }
    }

    #[test]
    fn jsd_reference_values() {
        let p = Posterior::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        let a = Posterior::new(vec![1.0, 0.0]).unwrap();
        let b = Posterior::new(vec![0.0, 1.0]).unwrap();
        assert!((jsd(&a, &b).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = random_posterior(&mut rng, 5);
            let q = random_posterior(&mut rng, 5);
            assert!((jsd(&p, &q).unwrap() - jsd(&q, &p).unwrap()).abs() < 1e-12);
        }
    }

    /// Direct ROC construction: sweep every distinct threshold, collect
    /// (FPR, TPR) points and integrate with the trapezoid rule.
    fn sweep_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut thresholds: Vec<f64> = pos.iter().chain(neg).cloned().collect();
        thresholds.push(f64::INFINITY);
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut pts = Vec::new();
        for &th in &thresholds {
            let tpr = pos.iter().filter(|&&s| s >= th).count() as f64 / pos.len() as f64;
            let fpr = neg.iter().filter(|&&s| s >= th).count() as f64 / neg.len() as f64;
            pts.push((fpr, tpr));
        }
        pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
    }

    #[test]
    fn auc_matches_threshold_sweep() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for round in 0..20 {
            let pos: Vec<f64> = (0..100).map(|_| (rng.gen_range(0.0f64..1.0) * 10.0).round() / 10.0 + 0.2).collect();
            let neg: Vec<f64> = (0..100).map(|_| (rng.gen_range(0.0f64..1.0) * 10.0).round() / 10.0).collect();
            let a = auc(&pos, &neg).unwrap();
            let b = sweep_auc(&pos, &neg);
            assert!((a - b).abs() < 1e-12, "round {round}: {a} vs {b}");
        }
    }

    #[test]
    fn auc_extremes() {
        let members = vec![Posterior::new(vec![1.0, 0.0, 0.0]).unwrap(); 10];
        let non = vec![Posterior::uniform(3); 10];
        assert_eq!(entropy_attack_auc(&members, &non).unwrap(), 1.0);
        assert_eq!(entropy_attack_auc(&non, &non).unwrap(), 0.5);
        assert!(entropy_attack_auc(&[], &non).is_err());
    }
}
