//! Training corpus generation: library-driven random input profiles rolled
//! out through the plant and cut into fixed-length segments.

mod dataset;
mod split;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{Cholesky, Matrix};
use crate::plant::{
    rollout, ActuatorState, ControlInput, PlantError, PlantParams, VehicleState, BRAKE_MAX, DT, STEERING_MAX,
    THROTTLE_MAX,
};

pub use dataset::{read_dataset, write_dataset, Dataset, DatasetHeader, Segment, DATASET_SCHEMA};
pub use split::{split_episodes, split_normalize, NormStats, Split};

pub const EPISODE_STEPS: usize = 400;
pub const SEGMENT_STEPS: usize = 80;
pub const SEGMENTS_PER_EPISODE: usize = EPISODE_STEPS / SEGMENT_STEPS;
/// Largest fraction of episodes the plant may reject before generation aborts.
pub const MAX_DISCARD_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid input libraries: {0}")]
    InvalidLibraries(String),
    #[error("{discarded} of {requested} episodes were rejected by the plant (limit 5%); first failure: {first}")]
    TooManyDiscarded { discarded: usize, requested: usize, first: String },
    #[error("need at least {needed} {what}, got {got}")]
    TooLittleData { what: &'static str, needed: usize, got: usize },
    #[error("channel `{0}` has zero spread in the training data")]
    DegenerateChannel(&'static str),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} line {line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Libraries from which input profiles are assembled.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InputLibraries {
    /// Road curvatures (1/m); one is held for a whole episode.
    pub curvatures: Vec<f64>,
    pub throttle_levels: Vec<f64>,
    /// Brake pedal forces (N).
    pub brake_levels: Vec<f64>,
    /// Candidate lengths (s) of constant-pedal stretches.
    pub segment_durations: Vec<f64>,
    pub steering_knots: usize,
    pub steering_degree: usize,
    /// Throttle rate limit (1/s).
    pub throttle_rate: f64,
    /// Brake rate limit (N/s).
    pub brake_rate: f64,
    /// Steering-wheel rate limit (rad/s).
    pub steering_rate: f64,
}

impl Default for InputLibraries {
    fn default() -> Self {
        Self {
            curvatures: vec![-4e-3, -2e-3, 0.0, 2e-3, 4e-3],
            throttle_levels: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            brake_levels: vec![0.0, 40.0, 80.0, 120.0],
            segment_durations: vec![1.0, 2.0, 2.5],
            steering_knots: 6,
            steering_degree: 5,
            throttle_rate: 1.0,
            brake_rate: 300.0,
            steering_rate: 200f64.to_radians(),
        }
    }
}

impl InputLibraries {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::InvalidLibraries(m));
        let k = &self.curvatures;
        if k.len() != 5 {
            return bad(format!("expected 5 curvatures, got {}", k.len()));
        }
        let mut sorted = k.clone();
        sorted.sort_by(f64::total_cmp);
        if (0..5).any(|i| (sorted[i] + sorted[4 - i]).abs() > 1e-15) {
            return bad(format!("curvatures {k:?} are not symmetric about zero"));
        }
        if self.throttle_levels.is_empty() || self.throttle_levels.iter().any(|t| !(0.0..=THROTTLE_MAX).contains(t)) {
            return bad("throttle levels must be non-empty and inside [0, 1]".into());
        }
        if self.brake_levels.is_empty() || self.brake_levels.iter().any(|b| !(0.0..=BRAKE_MAX).contains(b)) {
            return bad("brake levels must be non-empty and inside [0, 150] N".into());
        }
        if self.segment_durations.is_empty() || self.segment_durations.iter().any(|d| !(*d >= DT)) {
            return bad("segment durations must be at least one sample period".into());
        }
        if self.steering_degree + 1 > self.steering_knots {
            return bad(format!(
                "{} knots cannot determine a degree-{} polynomial",
                self.steering_knots, self.steering_degree
            ));
        }
        for (name, rate) in
            [("throttle", self.throttle_rate), ("brake", self.brake_rate), ("steering", self.steering_rate)]
        {
            if !(rate.is_finite() && rate > 0.0) {
                return bad(format!("{name} rate limit must be positive"));
            }
        }
        let shortest = self.segment_durations.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_throttle = self.throttle_levels.iter().cloned().fold(0.0, f64::max);
        let max_brake = self.brake_levels.iter().cloned().fold(0.0, f64::max);
        let ramp = (max_throttle / self.throttle_rate).max(max_brake / self.brake_rate);
        if ramp > shortest + 1e-12 {
            return bad(format!("reaching the top pedal level takes {ramp} s, longer than the shortest stretch ({shortest} s)"));
        }
        Ok(())
    }
}

/// One 400-step input sequence at a fixed curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct InputProfile {
    pub kappa: f64,
    pub inputs: Vec<ControlInput>,
}

/// Draws one episode's input sequence.
pub fn sample_input_profile(libs: &InputLibraries, rng: &mut impl Rng) -> InputProfile {
    let kappa = *libs.curvatures.choose(rng).expect("validated libraries");

    let mut targets = Vec::with_capacity(EPISODE_STEPS);
    while targets.len() < EPISODE_STEPS {
        let dur = *libs.segment_durations.choose(rng).expect("validated libraries");
        let steps = ((dur / DT).round() as usize).max(1);
        let target = if rng.random_bool(0.5) {
            (*libs.throttle_levels.choose(rng).unwrap(), 0.0)
        } else {
            (0.0, *libs.brake_levels.choose(rng).unwrap())
        };
        targets.extend(std::iter::repeat_n(target, steps));
    }
    targets.truncate(EPISODE_STEPS);

    let steering = steering_profile(libs, rng);

    let throttle_step = libs.throttle_rate * DT;
    let brake_step = libs.brake_rate * DT;
    let (mut throttle, mut brake) = targets[0];
    let mut inputs = Vec::with_capacity(EPISODE_STEPS);
    for (k, &(want_t, want_b)) in targets.iter().enumerate() {
        // release the opposite pedal before pressing the requested one
        if want_t > 0.0 && brake > 0.0 {
            brake = (brake - brake_step).max(0.0);
        } else if want_b > 0.0 && throttle > 0.0 {
            throttle = (throttle - throttle_step).max(0.0);
        } else {
            throttle += (want_t - throttle).clamp(-throttle_step, throttle_step);
            brake += (want_b - brake).clamp(-brake_step, brake_step);
        }
        inputs.push(ControlInput { throttle, brake, steering: steering[k], curvature: kappa });
    }
    InputProfile { kappa, inputs }
}

/// Least-squares polynomial through random knots, clamped and rate limited.
fn steering_profile(libs: &InputLibraries, rng: &mut impl Rng) -> Vec<f64> {
    let n = libs.steering_knots;
    let knots: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let tau = if n == 1 { 0.0 } else { -1.0 + 2.0 * j as f64 / (n - 1) as f64 };
            (tau, rng.random_range(-STEERING_MAX..=STEERING_MAX))
        })
        .collect();
    let coeffs = fit_polynomial(&knots, libs.steering_degree);
    let max_step = libs.steering_rate * DT;
    let mut out = Vec::with_capacity(EPISODE_STEPS);
    let mut prev = f64::NAN;
    for k in 0..EPISODE_STEPS {
        let tau = -1.0 + 2.0 * k as f64 / (EPISODE_STEPS - 1) as f64;
        let raw = eval_polynomial(&coeffs, tau).clamp(-STEERING_MAX, STEERING_MAX);
        let v = if k == 0 { raw } else { prev + (raw - prev).clamp(-max_step, max_step) };
        out.push(v);
        prev = v;
    }
    out
}

/// Monomial coefficients (lowest order first) of the least-squares fit.
pub(crate) fn fit_polynomial(points: &[(f64, f64)], degree: usize) -> Vec<f64> {
    let m = degree + 1;
    let mut gram = Matrix::zeros(m, m);
    let mut rhs = vec![0.0; m];
    for &(x, y) in points {
        let powers: Vec<f64> = (0..m).map(|i| x.powi(i as i32)).collect();
        for i in 0..m {
            rhs[i] += powers[i] * y;
            for j in 0..m {
                gram[(i, j)] += powers[i] * powers[j];
            }
        }
    }
    Cholesky::factor(&gram).expect("distinct knots give a definite Gram matrix").solve(&rhs)
}

pub(crate) fn eval_polynomial(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Random feasible starting state for an episode.
pub fn sample_initial_state(rng: &mut impl Rng) -> VehicleState {
    let vx = rng.random_range(5.0..=30.0);
    let e_psi_max = 3f64.to_radians();
    VehicleState {
        vx,
        vy: 0.0,
        yaw_rate: 0.0,
        delta_s: vx * DT,
        e_y: rng.random_range(-0.5..=0.5),
        e_psi: rng.random_range(-e_psi_max..=e_psi_max),
    }
}

/// RNG for one episode; independent of how episodes are scheduled.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

/// Simulates one episode and cuts it into segments. `Err` carries the plant failure.
pub fn generate_episode(
    episode: u64,
    seed: u64,
    libs: &InputLibraries,
    params: &PlantParams,
) -> Result<Vec<Segment>, PlantError> {
    let mut rng = episode_rng(seed, episode);
    let x0 = sample_initial_state(&mut rng);
    let profile = sample_input_profile(libs, &mut rng);
    let run = rollout(&x0, &profile.inputs, &ActuatorState::settled(&profile.inputs[0]), params);
    if let Some((_, err)) = run.truncated {
        return Err(err);
    }
    for s in &run.trajectory.states {
        s.validate()?;
    }
    let states = &run.trajectory.states;
    Ok((0..SEGMENTS_PER_EPISODE)
        .map(|i| {
            let a = i * SEGMENT_STEPS;
            Segment {
                episode,
                segment: i,
                kappa: profile.kappa,
                dt: DT,
                states: states[a..=a + SEGMENT_STEPS].iter().map(VehicleState::to_array).collect(),
                inputs: profile.inputs[a..a + SEGMENT_STEPS].iter().map(ControlInput::to_array).collect(),
            }
        })
        .collect())
}

/// Generates `episodes` episodes in parallel; the result does not depend on the thread count.
pub fn generate_dataset(
    episodes: usize,
    libs: &InputLibraries,
    params: &PlantParams,
    seed: u64,
) -> Result<Dataset, DatagenError> {
    if episodes == 0 {
        return Err(DatagenError::TooLittleData { what: "episodes", needed: 1, got: 0 });
    }
    libs.validate()?;
    params.validate()?;
    let results: Vec<_> =
        (0..episodes as u64).into_par_iter().map(|e| (e, generate_episode(e, seed, libs, params))).collect();

    let mut segments = Vec::with_capacity(episodes * SEGMENTS_PER_EPISODE);
    let mut discarded = Vec::new();
    for (e, r) in results {
        match r {
            Ok(segs) => segments.extend(segs),
            Err(err) => {
                log::warn!("episode {e} discarded: {err}");
                discarded.push((e, err));
            }
        }
    }
    if discarded.len() as f64 > MAX_DISCARD_FRACTION * episodes as f64 {
        return Err(DatagenError::TooManyDiscarded {
            discarded: discarded.len(),
            requested: episodes,
            first: format!("episode {}: {}", discarded[0].0, discarded[0].1),
        });
    }
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.to_string(),
        seed,
        plant_config_hash: params.config_hash(),
        episodes_requested: episodes,
        episodes_discarded: discarded.iter().map(|d| d.0).collect(),
    };
    Ok(Dataset { header, segments })
}
