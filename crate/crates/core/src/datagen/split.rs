//! Episode-level train/test split and z-score normalization.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatagenError, Dataset, Segment};
use crate::plant::{ControlInput, VehicleState};

/// Per-channel affine normalization, fit on training data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: [f64; 6],
    pub state_std: [f64; 6],
    pub input_mean: [f64; 4],
    pub input_std: [f64; 4],
}

impl NormStats {
    /// Identity normalization.
    pub fn identity() -> Self {
        Self { state_mean: [0.0; 6], state_std: [1.0; 6], input_mean: [0.0; 4], input_std: [1.0; 4] }
    }

    pub fn fit(segments: &[Segment]) -> Result<Self, DatagenError> {
        let (state_mean, state_std) = channel_stats(segments.iter().flat_map(|s| s.states.iter()))?;
        let (input_mean, input_std) = channel_stats(segments.iter().flat_map(|s| s.inputs.iter()))?;
        for (i, s) in state_std.iter().enumerate() {
            if *s < 1e-12 {
                return Err(DatagenError::DegenerateChannel(VehicleState::NAMES[i]));
            }
        }
        for (i, s) in input_std.iter().enumerate() {
            if *s < 1e-12 {
                return Err(DatagenError::DegenerateChannel(ControlInput::NAMES[i]));
            }
        }
        Ok(Self { state_mean, state_std, input_mean, input_std })
    }

    pub fn normalize_state(&self, x: &[f64]) -> [f64; 6] {
        std::array::from_fn(|i| (x[i] - self.state_mean[i]) / self.state_std[i])
    }

    pub fn denormalize_state(&self, z: &[f64]) -> [f64; 6] {
        std::array::from_fn(|i| z[i] * self.state_std[i] + self.state_mean[i])
    }

    pub fn normalize_input(&self, u: &[f64]) -> [f64; 4] {
        std::array::from_fn(|i| (u[i] - self.input_mean[i]) / self.input_std[i])
    }

    pub fn denormalize_input(&self, z: &[f64]) -> [f64; 4] {
        std::array::from_fn(|i| z[i] * self.input_std[i] + self.input_mean[i])
    }

    pub fn normalize_segment(&self, s: &Segment) -> Segment {
        Segment {
            states: s.states.iter().map(|x| self.normalize_state(x)).collect(),
            inputs: s.inputs.iter().map(|u| self.normalize_input(u)).collect(),
            ..s.clone()
        }
    }

    pub fn denormalize_segment(&self, s: &Segment) -> Segment {
        Segment {
            states: s.states.iter().map(|x| self.denormalize_state(x)).collect(),
            inputs: s.inputs.iter().map(|u| self.denormalize_input(u)).collect(),
            ..s.clone()
        }
    }
}

/// Population mean and standard deviation per channel (Welford).
fn channel_stats<'a, const N: usize>(
    rows: impl Iterator<Item = &'a [f64; N]>,
) -> Result<([f64; N], [f64; N]), DatagenError> {
    let mut n = 0.0;
    let mut mean = [0.0; N];
    let mut m2 = [0.0; N];
    for row in rows {
        n += 1.0;
        for i in 0..N {
            let d = row[i] - mean[i];
            mean[i] += d / n;
            m2[i] += d * (row[i] - mean[i]);
        }
    }
    if n == 0.0 {
        return Err(DatagenError::TooLittleData { what: "samples", needed: 1, got: 0 });
    }
    Ok((mean, std::array::from_fn(|i| (m2[i] / n).sqrt())))
}

/// Train and test segments with the statistics fit on the training side.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Segment>,
    pub test: Vec<Segment>,
    pub stats: NormStats,
}

impl Split {
    pub fn test_episodes(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.test.iter().map(|s| s.episode).collect();
        ids.dedup();
        ids
    }
}

/// Partitions whole episodes into train and test sets, in physical units.
pub fn split_episodes(
    ds: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Segment>, Vec<Segment>), DatagenError> {
    if ds.segments.len() < 10 {
        return Err(DatagenError::TooLittleData { what: "segments", needed: 10, got: ds.segments.len() });
    }
    let mut ids = ds.episode_ids();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let mut test_ids = ids[n_train..].to_vec();
    test_ids.sort_unstable();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in &ds.segments {
        if test_ids.binary_search(&s.episode).is_ok() {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, test))
}

/// Episode-level split followed by z-scoring with training statistics.
pub fn split_normalize(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<Split, DatagenError> {
    let (train, test) = split_episodes(ds, train_fraction, seed)?;
    let stats = NormStats::fit(&train)?;
    Ok(Split {
        train: train.iter().map(|s| stats.normalize_segment(s)).collect(),
        test: test.iter().map(|s| stats.normalize_segment(s)).collect(),
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DatasetHeader, DATASET_SCHEMA};
    use rand::Rng;

    fn synthetic(episodes: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut segments = Vec::new();
        for e in 0..episodes {
            for i in 0..5 {
                segments.push(Segment {
                    episode: e,
                    segment: i,
                    kappa: 0.0,
                    dt: 0.025,
                    states: (0..4).map(|_| std::array::from_fn(|c| c as f64 * 10.0 + rng.random::<f64>())).collect(),
                    inputs: (0..3).map(|_| std::array::from_fn(|c| c as f64 - rng.random::<f64>())).collect(),
                });
            }
        }
        Dataset {
            header: DatasetHeader {
                schema: DATASET_SCHEMA.into(),
                seed: 0,
                plant_config_hash: String::new(),
                episodes_requested: episodes as usize,
                episodes_discarded: vec![],
            },
            segments,
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = synthetic(700);
        let sp = split_normalize(&ds, 0.9, 4).unwrap();
        assert_eq!(sp.train.len(), 3150);
        assert_eq!(sp.test.len(), 350);
        let test_ids = sp.test_episodes();
        assert!(sp.train.iter().all(|s| !test_ids.contains(&s.episode)));
        for id in &test_ids {
            assert_eq!(sp.test.iter().filter(|s| s.episode == *id).count(), 5);
        }
    }

    #[test]
    fn normalized_train_is_standard() {
        let ds = synthetic(40);
        let sp = split_normalize(&ds, 0.9, 4).unwrap();
        let again = NormStats::fit(&sp.train).unwrap();
        for i in 0..6 {
            assert!(again.state_mean[i].abs() < 1e-9 && (again.state_std[i] - 1.0).abs() < 1e-9);
        }
        for i in 0..4 {
            assert!(again.input_mean[i].abs() < 1e-9 && (again.input_std[i] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_inverts() {
        let ds = synthetic(20);
        let (train, test) = split_episodes(&ds, 0.9, 2).unwrap();
        let stats = NormStats::fit(&train).unwrap();
        for s in &test {
            let back = stats.denormalize_segment(&stats.normalize_segment(s));
            for (a, b) in back.states.iter().flatten().zip(s.states.iter().flatten()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            for (a, b) in back.inputs.iter().flatten().zip(s.inputs.iter().flatten()) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn degenerate_channel_is_named() {
        let mut ds = synthetic(20);
        for s in &mut ds.segments {
            for u in &mut s.inputs {
                u[3] = 0.0;
            }
        }
        match split_normalize(&ds, 0.9, 1) {
            Err(DatagenError::DegenerateChannel(name)) => assert_eq!(name, "curvature"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_few_segments() {
        let ds = synthetic(1);
        assert!(matches!(split_normalize(&ds, 0.9, 1), Err(DatagenError::TooLittleData { .. })));
    }
}
