//! Linear baseline: one affine 6-state model per library curvature, fit by
//! ridge least squares on normalized one-step transitions.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{NormStats, Segment};
use crate::linalg::{Cholesky, LinalgError, Matrix};

pub const LTI_SCHEMA: &str = "mdk-lti/1";
pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const MIN_TRANSITIONS: usize = 50;
const NX: usize = 6;
const NU: usize = 3;
const NF: usize = NX + NU + 1;

#[derive(Debug, Error)]
pub enum LtiError {
    #[error("only {got} transitions at kappa = {kappa}; need {MIN_TRANSITIONS}")]
    TooFewTransitions { kappa: f64, got: usize },
    #[error("normal equations at kappa = {kappa} are rank deficient; increase the ridge weight")]
    RankDeficient { kappa: f64 },
    #[error("no model for kappa = {0}")]
    MissingModel(f64),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("LTI JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported LTI schema `{0}`")]
    Schema(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// `z⁺ = A z + B u_c + offset` in normalized coordinates; `u_c` holds the
/// three driver inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiModel {
    pub kappa: f64,
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "B")]
    pub b: Matrix,
    pub offset: Vec<f64>,
    pub transitions: usize,
}

impl LtiModel {
    pub fn step(&self, z: &[f64], uc: &[f64]) -> Vec<f64> {
        (0..NX)
            .map(|i| {
                crate::linalg::dot(self.a.row(i), &z[..NX]) + crate::linalg::dot(self.b.row(i), &uc[..NU]) + self.offset[i]
            })
            .collect()
    }

    /// Regularized least-squares objective over the given normalized transitions.
    pub fn objective(&self, segments: &[&Segment], ridge: f64) -> f64 {
        let mut j = 0.0;
        for s in segments {
            for (t, u) in s.inputs.iter().enumerate() {
                let pred = self.step(&s.states[t], u);
                j += pred.iter().zip(&s.states[t + 1]).map(|(p, y)| (y - p) * (y - p)).sum::<f64>();
            }
        }
        j + ridge * (self.a.sum_squares() + self.b.sum_squares())
    }

    fn interpolate(lo: &LtiModel, hi: &LtiModel, kappa: f64) -> Result<LtiModel, LinalgError> {
        let w = (kappa - lo.kappa) / (hi.kappa - lo.kappa);
        Ok(LtiModel {
            kappa,
            a: lo.a.scale(1.0 - w).add(&hi.a.scale(w))?,
            b: lo.b.scale(1.0 - w).add(&hi.b.scale(w))?,
            offset: lo.offset.iter().zip(&hi.offset).map(|(x, y)| (1.0 - w) * x + w * y).collect(),
            transitions: 0,
        })
    }
}

/// Fits one model to normalized segments that all share curvature `kappa`.
pub fn fit_lti(segments: &[&Segment], kappa: f64, ridge: f64) -> Result<LtiModel, LtiError> {
    let mut gram = Matrix::zeros(NF, NF);
    let mut cross = Matrix::zeros(NF, NX);
    let mut count = 0usize;
    let mut phi = [0.0; NF];
    for s in segments {
        for (t, u) in s.inputs.iter().enumerate() {
            phi[..NX].copy_from_slice(&s.states[t]);
            phi[NX..NX + NU].copy_from_slice(&u[..NU]);
            phi[NF - 1] = 1.0;
            let y = &s.states[t + 1];
            for i in 0..NF {
                for j in 0..NF {
                    gram[(i, j)] += phi[i] * phi[j];
                }
                for j in 0..NX {
                    cross[(i, j)] += phi[i] * y[j];
                }
            }
            count += 1;
        }
    }
    if count < MIN_TRANSITIONS {
        return Err(LtiError::TooFewTransitions { kappa, got: count });
    }
    for i in 0..NX + NU {
        gram[(i, i)] += ridge;
    }
    let chol = Cholesky::factor(&gram).map_err(|_| LtiError::RankDeficient { kappa })?;
    // theta is NF × NX with rows [Aᵀ; Bᵀ; offsetᵀ]
    let theta = chol.solve_matrix(&cross);
    let a = Matrix::from_vec(NX, NX, (0..NX * NX).map(|k| theta[(k % NX, k / NX)]).collect())?;
    let b = Matrix::from_vec(NX, NU, (0..NX * NU).map(|k| theta[(NX + k % NU, k / NU)]).collect())?;
    let offset = (0..NX).map(|i| theta[(NF - 1, i)]).collect();
    Ok(LtiModel { kappa, a, b, offset, transitions: count })
}

/// One model per curvature plus the normalization they were fit in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtiSet {
    pub schema: String,
    pub ridge: f64,
    pub dataset_seed: u64,
    pub plant_config_hash: String,
    pub norm_stats: NormStats,
    pub models: Vec<LtiModel>,
}

impl LtiSet {
    /// Fits a model for every curvature present in the (physical-unit) training segments.
    pub fn fit(train: &[Segment], norm: &NormStats, ridge: f64) -> Result<Self, LtiError> {
        let mut kappas: Vec<f64> = train.iter().map(|s| s.kappa).collect();
        kappas.sort_by(f64::total_cmp);
        kappas.dedup();
        let normalized: Vec<Segment> = train.iter().map(|s| norm.normalize_segment(s)).collect();
        let models = kappas
            .iter()
            .map(|&k| {
                let subset: Vec<&Segment> = normalized.iter().filter(|s| s.kappa == k).collect();
                fit_lti(&subset, k, ridge)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            schema: LTI_SCHEMA.into(),
            ridge,
            dataset_seed: 0,
            plant_config_hash: String::new(),
            norm_stats: norm.clone(),
            models,
        })
    }

    /// The model fit for exactly this curvature.
    pub fn exact(&self, kappa: f64) -> Result<&LtiModel, LtiError> {
        self.models.iter().find(|m| m.kappa == kappa).ok_or(LtiError::MissingModel(kappa))
    }

    /// Exact model if present, otherwise linear interpolation between the two
    /// neighbouring library curvatures.
    pub fn model_for(&self, kappa: f64) -> Result<LtiModel, LtiError> {
        if let Ok(m) = self.exact(kappa) {
            return Ok(m.clone());
        }
        let lo = self.models.iter().filter(|m| m.kappa < kappa).max_by(|a, b| a.kappa.total_cmp(&b.kappa));
        let hi = self.models.iter().filter(|m| m.kappa > kappa).min_by(|a, b| a.kappa.total_cmp(&b.kappa));
        match (lo, hi) {
            (Some(lo), Some(hi)) => Ok(LtiModel::interpolate(lo, hi, kappa)?),
            _ => Err(LtiError::MissingModel(kappa)),
        }
    }

    /// Open-loop prediction in physical units with the model for `kappa`;
    /// element 0 is `x0` itself.
    pub fn predict_open_loop(&self, kappa: f64, x0: &[f64; 6], inputs: &[[f64; 4]]) -> Result<Vec<[f64; 6]>, LtiError> {
        let model = self.exact(kappa)?;
        Ok(predict_open_loop_lti(model, &self.norm_stats, x0, inputs))
    }

    pub fn save(&self, path: &Path) -> Result<(), LtiError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
            .map_err(|source| LtiError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, LtiError> {
        let text = std::fs::read_to_string(path).map_err(|source| LtiError::Io { path: path.display().to_string(), source })?;
        let set: LtiSet = serde_json::from_str(&text)?;
        if set.schema != LTI_SCHEMA {
            return Err(LtiError::Schema(set.schema));
        }
        Ok(set)
    }
}

pub fn predict_open_loop_lti(model: &LtiModel, norm: &NormStats, x0: &[f64; 6], inputs: &[[f64; 4]]) -> Vec<[f64; 6]> {
    let mut out = Vec::with_capacity(inputs.len() + 1);
    out.push(*x0);
    let mut z = norm.normalize_state(x0).to_vec();
    for u in inputs {
        z = model.step(&z, &norm.normalize_input(u));
        out.push(norm.denormalize_state(&z));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stable(rng: &mut ChaCha8Rng) -> (Matrix, Matrix, Vec<f64>) {
        let a = Matrix::from_vec(6, 6, (0..36).map(|_| rng.random_range(-0.3..0.3)).collect()).unwrap();
        let b = Matrix::from_vec(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let c = (0..6).map(|_| rng.random_range(-0.1..0.1)).collect();
        (a, b, c)
    }

    fn simulate(truth: &LtiModel, n: usize, rng: &mut ChaCha8Rng) -> Vec<Segment> {
        (0..n)
            .map(|e| {
                let mut z: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut states = vec![std::array::from_fn(|i| z[i])];
                let mut inputs = Vec::new();
                for _ in 0..20 {
                    let u: [f64; 4] = std::array::from_fn(|i| if i < 3 { rng.random_range(-1.0..1.0) } else { 0.0 });
                    z = truth.step(&z, &u);
                    states.push(std::array::from_fn(|i| z[i]));
                    inputs.push(u);
                }
                Segment { episode: e as u64, segment: 0, kappa: truth.kappa, dt: 0.025, states, inputs }
            })
            .collect()
    }

    #[test]
    fn recovers_a_known_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b, offset) = random_stable(&mut rng);
        let truth = LtiModel { kappa: 0.0, a, b, offset, transitions: 0 };
        let data = simulate(&truth, 30, &mut rng);
        let refs: Vec<&Segment> = data.iter().collect();
        let fit = fit_lti(&refs, 0.0, 1e-8).unwrap();
        assert!(fit.a.sub(&truth.a).unwrap().frobenius_norm() < 1e-6);
        assert!(fit.b.sub(&truth.b).unwrap().frobenius_norm() < 1e-6);
        assert_eq!(fit.transitions, 600);
    }

    #[test]
    fn duplicated_samples_leave_the_fit_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b, offset) = random_stable(&mut rng);
        let truth = LtiModel { kappa: 0.0, a, b, offset, transitions: 0 };
        let mut data = simulate(&truth, 10, &mut rng);
        for s in &mut data {
            for x in &mut s.states {
                for v in x.iter_mut() {
                    *v += rng.random_range(-0.05..0.05);
                }
            }
        }
        let refs: Vec<&Segment> = data.iter().collect();
        let twice: Vec<&Segment> = data.iter().chain(data.iter()).collect();
        let f1 = fit_lti(&refs, 0.0, 0.0).unwrap();
        let f2 = fit_lti(&twice, 0.0, 0.0).unwrap();
        assert!(f1.a.sub(&f2.a).unwrap().max_abs() < 1e-10);
        assert!(f1.b.sub(&f2.b).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn fitted_point_is_a_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b, offset) = random_stable(&mut rng);
        let truth = LtiModel { kappa: 0.0, a, b, offset, transitions: 0 };
        let mut data = simulate(&truth, 10, &mut rng);
        for s in &mut data {
            for x in &mut s.states[1..] {
                for v in x.iter_mut() {
                    *v += rng.random_range(-0.1..0.1);
                }
            }
        }
        let refs: Vec<&Segment> = data.iter().collect();
        let ridge = 1e-2;
        let fit = fit_lti(&refs, 0.0, ridge).unwrap();
        let j0 = fit.objective(&refs, ridge);
        for _ in 0..100 {
            let mut d: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter_mut().for_each(|v| *v *= 1e-3 / n);
            let mut p = fit.clone();
            p.a.as_mut_slice().iter_mut().zip(&d[..36]).for_each(|(x, y)| *x += y);
            p.b.as_mut_slice().iter_mut().zip(&d[36..54]).for_each(|(x, y)| *x += y);
            p.offset.iter_mut().zip(&d[54..]).for_each(|(x, y)| *x += y);
            assert!(p.objective(&refs, ridge) >= j0);
        }
    }

    #[test]
    fn too_few_or_degenerate_transitions() {
        let seg = Segment { episode: 0, segment: 0, kappa: 0.0, dt: 0.025, states: vec![[0.0; 6]; 11], inputs: vec![[0.0; 4]; 10] };
        assert!(matches!(fit_lti(&[&seg], 0.0, 1e-6), Err(LtiError::TooFewTransitions { .. })));
        let many: Vec<&Segment> = std::iter::repeat_n(&seg, 10).collect();
        let fit = fit_lti(&many, 0.0, 1e-6).unwrap();
        assert!(fit.a.max_abs() == 0.0);
        assert!(matches!(fit_lti(&many, 0.0, 0.0), Err(LtiError::RankDeficient { .. })));
    }

    #[test]
    fn open_loop_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b, offset) = random_stable(&mut rng);
        let m = LtiModel { kappa: 0.0, a, b, offset, transitions: 0 };
        let norm = NormStats { state_mean: [1.0, 0.0, 0.0, 0.5, 0.0, 0.0], state_std: [2.0, 1.0, 1.0, 0.1, 3.0, 0.5], ..NormStats::identity() };
        let x0 = [10.0, 0.1, 0.0, 0.4, -1.0, 0.02];
        let u = [[0.5, 0.0, 0.1, 0.0], [0.0, 30.0, -0.2, 0.0], [0.1, 0.0, 0.0, 0.0]];
        let pred = predict_open_loop_lti(&m, &norm, &x0, &u);
        assert_eq!(pred[0], x0);
        let mut z: Vec<f64> = (0..6).map(|i| (x0[i] - norm.state_mean[i]) / norm.state_std[i]).collect();
        for k in 0..3 {
            z = (0..6)
                .map(|i| (0..6).map(|j| m.a[(i, j)] * z[j]).sum::<f64>() + (0..3).map(|j| m.b[(i, j)] * u[k][j]).sum::<f64>() + m.offset[i])
                .collect();
            for i in 0..6 {
                let x = z[i] * norm.state_std[i] + norm.state_mean[i];
                assert!((pred[k + 1][i] - x).abs() < 1e-12 * x.abs().max(1.0));
            }
        }
        assert_eq!(predict_open_loop_lti(&m, &norm, &x0, &[]), vec![x0]);
    }

    #[test]
    fn stable_model_stays_bounded_under_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b, offset) = random_stable(&mut rng);
        let rho = crate::linalg::eigenvalues(&a).unwrap().spectral_radius();
        assert!(rho < 1.0);
        let m = LtiModel { kappa: 0.0, a, b, offset, transitions: 0 };
        let pred = predict_open_loop_lti(&m, &NormStats::identity(), &[1.0; 6], &vec![[0.5, 0.2, -0.3, 0.0]; 2000]);
        let bound = 1e3;
        assert!(pred.iter().all(|x| x.iter().all(|v| v.abs() < bound)));
    }

    #[test]
    fn curvature_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mk = |k: f64, rng: &mut ChaCha8Rng| {
            let (a, b, offset) = random_stable(rng);
            LtiModel { kappa: k, a, b, offset, transitions: 1 }
        };
        let set = LtiSet {
            schema: LTI_SCHEMA.into(),
            ridge: 1e-6,
            dataset_seed: 0,
            plant_config_hash: String::new(),
            norm_stats: NormStats::identity(),
            models: vec![mk(0.0, &mut rng), mk(2e-3, &mut rng)],
        };
        assert_eq!(set.exact(2e-3).unwrap().kappa, 2e-3);
        assert!(set.exact(1e-3).is_err());
        let mid = set.model_for(1e-3).unwrap();
        let avg = set.models[0].a.add(&set.models[1].a).unwrap().scale(0.5);
        assert!(mid.a.sub(&avg).unwrap().max_abs() < 1e-15);
        assert!(set.model_for(5e-3).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lti.json");
        set.save(&path).unwrap();
        assert_eq!(LtiSet::load(&path).unwrap(), set);
    }
}
