//! Set-growth detection of model-stealing query streams.
//!
//! Every query is compared against the archive of earlier queries. It is
//! appended only when its minimum Euclidean distance to the archive exceeds
//! `tau`. Benign users explore the input space and keep the archive growing;
//! an extraction attack probing around a few points stalls it. An alarm is
//! raised when the append rate over the last `window` queries falls below
//! `rho`.

use rand::{Rng, RngCore};

use crate::codec::Reader;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamVerdict {
    Benign,
    Attack,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryArchive {
    dim: usize,
    tau: f64,
    points: Vec<Vec<f32>>,
    history: Vec<bool>,
}

impl QueryArchive {
    pub fn new(dim: usize, tau: f64) -> Result<Self> {
        if dim == 0 || tau.is_nan() || tau < 0.0 {
            return Err(Error::InvalidArgument(format!("archive needs dim > 0 and tau >= 0, got {dim}, {tau}")));
        }
        Ok(QueryArchive {
            dim,
            tau,
            points: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn points(&self) -> &[Vec<f32>] {
        &self.points
    }

    /// One entry per observed query: whether it was appended.
    pub fn history(&self) -> &[bool] {
        &self.history
    }

    /// Minimum distance from `q` to the archive, infinite when empty.
    pub fn min_distance(&self, q: &[f32]) -> f64 {
        self.points
            .iter()
            .map(|p| {
                p.iter()
                    .zip(q)
                    .map(|(&a, &b)| {
                        let d = a as f64 - b as f64;
                        d * d
                    })
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    /// Records `q` and appends it iff it is farther than `tau` from every
    /// stored query.
    pub fn update(&mut self, q: &[f32]) -> Result<bool> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: q.len(),
            });
        }
        let appended = self.min_distance(q) > self.tau;
        if appended {
            self.points.push(q.to_vec());
        }
        self.history.push(appended);
        Ok(appended)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.tau.to_le_bytes());
        out.extend_from_slice(&(self.points.len() as u64).to_le_bytes());
        for p in &self.points {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.history.len() as u64).to_le_bytes());
        out.extend(self.history.iter().map(|&b| b as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "query archive");
        let dim = r.u32()? as usize;
        let tau = f64::from_le_bytes(r.array()?);
        let mut archive = QueryArchive::new(dim, tau).map_err(|e| Error::ParseError(e.to_string()))?;
        let n = r.u64()? as usize;
        for _ in 0..n {
            let raw = r.take(dim * 4)?;
            archive
                .points
                .push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
        }
        let h = r.u64()? as usize;
        archive.history = r.take(h)?.iter().map(|&b| b != 0).collect();
        r.finish()?;
        Ok(archive)
    }
}

pub fn archive_update(archive: &mut QueryArchive, q: &[f32]) -> Result<bool> {
    archive.update(q)
}

/// Alarm iff fewer than `rho * window` of the last `window` queries were
/// appended.
pub fn stealing_alarm(history: &[bool], window: usize, rho: f64) -> Result<StreamVerdict> {
    if window == 0 || window > history.len() {
        return Err(Error::InvalidArgument(format!(
            "window of {window} queries over a history of {}",
            history.len()
        )));
    }
    let appended = history[history.len() - window..].iter().filter(|&&a| a).count();
    Ok(if (appended as f64) < rho * window as f64 {
        StreamVerdict::Attack
    } else {
        StreamVerdict::Benign
    })
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct StealingEvent {
    pub query_index: usize,
    pub appended: bool,
    pub alarm: bool,
}

/// Archive plus alarm rule, evaluated after every query once a full window
/// has been observed.
#[derive(Clone, Debug, PartialEq)]
pub struct StealingMonitor {
    pub archive: QueryArchive,
    pub window: usize,
    pub rho: f64,
}

impl StealingMonitor {
    pub fn new(dim: usize, tau: f64, window: usize, rho: f64) -> Result<Self> {
        if window == 0 || !(0.0..=1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!("window {window} / rho {rho}")));
        }
        Ok(StealingMonitor {
            archive: QueryArchive::new(dim, tau)?,
            window,
            rho,
        })
    }

    pub fn observe(&mut self, q: &[f32]) -> Result<StealingEvent> {
        let appended = self.archive.update(q)?;
        let history = self.archive.history();
        let alarm = history.len() >= self.window
            && stealing_alarm(history, self.window, self.rho)? == StreamVerdict::Attack;
        Ok(StealingEvent {
            query_index: history.len() - 1,
            appended,
            alarm,
        })
    }
}

/// Independent uniform points in the unit cube.
pub fn benign_stream<R: RngCore>(n: usize, dim: usize, rng: &mut R) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
}

/// Extraction-style probing: a handful of seed points, then small
/// perturbations of them with per-coordinate magnitude `step`.
pub fn probing_stream<R: RngCore>(n: usize, dim: usize, seeds: usize, step: f32, rng: &mut R) -> Vec<Vec<f32>> {
    let bases = benign_stream(seeds.max(1), dim, rng);
    (0..n)
        .map(|i| {
            let base = &bases[i % bases.len()];
            if i < bases.len() {
                base.clone()
            } else {
                base.iter().map(|&v| v + rng.gen_range(-step..step)).collect()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn first_query_always_appended() {
        let mut a = QueryArchive::new(3, 0.5).unwrap();
        assert!(a.update(&[0.0, 0.0, 0.0]).unwrap());
        assert!(!a.update(&[0.0, 0.0, 0.0]).unwrap());
        assert!(matches!(a.update(&[0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn grid_with_spacing_two_tau_is_fully_appended() {
        let tau = 0.25;
        let mut a = QueryArchive::new(2, tau).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                assert!(a.update(&[i as f32 * 0.5, j as f32 * 0.5]).unwrap());
            }
        }
        assert_eq!(a.points().len(), 100);
    }

    #[test]
    fn separated_sets_are_order_insensitive() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let tau = 0.1;
        let mut pts: Vec<Vec<f32>> = (0..60).map(|i| vec![(i % 8) as f32 * 0.3, (i / 8) as f32 * 0.3]).collect();
        let mut reference: Option<Vec<Vec<f32>>> = None;
        for _ in 0..20 {
            pts.shuffle(&mut rng);
            let mut a = QueryArchive::new(2, tau).unwrap();
            for p in &pts {
                a.update(p).unwrap();
            }
            let mut set = a.points().to_vec();
            set.sort_by(|x, y| x.partial_cmp(y).unwrap());
            match &reference {
                None => reference = Some(set),
                Some(r) => assert_eq!(&set, r),
            }
        }
        assert_eq!(reference.unwrap().len(), 60);
    }

    #[test]
    fn window_larger_than_history_is_an_error() {
        assert!(stealing_alarm(&[true; 5], 6, 0.5).is_err());
        assert!(stealing_alarm(&[true; 5], 0, 0.5).is_err());
        assert_eq!(stealing_alarm(&[true; 5], 5, 0.5).unwrap(), StreamVerdict::Benign);
        assert_eq!(stealing_alarm(&[false; 5], 5, 0.5).unwrap(), StreamVerdict::Attack);
    }

    #[test]
    fn streams_are_told_apart() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut benign = StealingMonitor::new(16, 0.1, 100, 0.5).unwrap();
        for q in benign_stream(1000, 16, &mut rng) {
            assert!(!benign.observe(&q).unwrap().alarm);
        }
        let mut attacked = StealingMonitor::new(16, 0.1, 100, 0.5).unwrap();
        let first_alarm = probing_stream(300, 16, 5, 0.001, &mut rng)
            .iter()
            .map(|q| attacked.observe(q).unwrap())
            .find(|e| e.alarm)
            .unwrap();
        assert_eq!(first_alarm.query_index, 99);
    }

    #[test]
    fn archive_bytes_roundtrip() {
        let mut a = QueryArchive::new(2, 0.5).unwrap();
        for q in [[0.0, 0.0], [0.1, 0.0], [3.0, 1.0]] {
            a.update(&q).unwrap();
        }
        assert_eq!(QueryArchive::from_bytes(&a.to_bytes()).unwrap(), a);
        assert!(QueryArchive::from_bytes(&a.to_bytes()[..10]).is_err());
    }
}
