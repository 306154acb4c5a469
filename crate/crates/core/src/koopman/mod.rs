//! Deep Koopman model: an MLP encoder whose output is stacked under the
//! normalized state, advanced by linear lifted dynamics `ψ⁺ = Aψ + Bu`.

mod checkpoint;
mod loss;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::NormStats;
use crate::linalg::{LinalgError, Matrix};

pub use checkpoint::{Checkpoint, CheckpointConfig, CheckpointError, CHECKPOINT_SCHEMA};
pub use loss::{
    loss_gradient, loss_multi_step, loss_regularization, loss_single_step, loss_stability, loss_total, Batch, LossBreakdown,
    LossWeights,
};
pub use train::{evaluate, train, EvalRecord, TrainConfig, TrainError, TrainOutcome};

pub const STATE_DIM: usize = 6;
pub const INPUT_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { input_dim: STATE_DIM, hidden: vec![32, 64, 128, 128, 64], latent: 60 }
    }
}

impl EncoderConfig {
    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.latent);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn observable_dim(&self) -> usize {
        self.input_dim + self.latent
    }
}

/// Affine layer applied to row vectors: `y = x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// fan_in × fan_out
    pub w: Matrix,
    /// 1 × fan_out
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanModel {
    pub config: EncoderConfig,
    pub layers: Vec<Dense>,
    /// Lifted state transition, `N × N` with `N = n + P`.
    pub a: Matrix,
    /// Lifted input matrix, `N × 4`.
    pub b: Matrix,
    pub norm: NormStats,
}

impl KoopmanModel {
    /// He-scaled Gaussian encoder, zero biases, `A = I + noise`, small random `B`.
    pub fn initialize(config: &EncoderConfig, norm: NormStats, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                let w = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
                Dense { w: Matrix::from_vec(fan_in, fan_out, w).unwrap(), b: Matrix::zeros(1, fan_out) }
            })
            .collect();
        let n = config.observable_dim();
        let small = Normal::new(0.0, 0.01).unwrap();
        let mut a = Matrix::identity(n);
        for v in a.as_mut_slice() {
            *v += small.sample(&mut rng);
        }
        let b = Matrix::from_vec(n, INPUT_DIM, (0..n * INPUT_DIM).map(|_| small.sample(&mut rng)).collect()).unwrap();
        Self { config: config.clone(), layers, a, b, norm }
    }

    pub fn observable_dim(&self) -> usize {
        self.config.observable_dim()
    }

    /// Encoder applied to a batch of normalized states, one per row.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix, LinalgError> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = h.matmul(&layer.w)?;
            let bias = layer.b.as_slice();
            for r in 0..next.rows() {
                for (v, bb) in next.row_mut(r).iter_mut().zip(bias) {
                    *v += bb;
                    if i < last && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            h = next;
        }
        Ok(h)
    }

    /// Observable `[z ; encoder(z)]` of one normalized state.
    pub fn lift(&self, z: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let x = Matrix::row_vector(&z[..self.config.input_dim]);
        if !x.is_finite() {
            return Err(LinalgError::NonFinite { row: 0, col: 0 });
        }
        let mut psi = z[..self.config.input_dim].to_vec();
        psi.extend_from_slice(self.encode(&x)?.as_slice());
        Ok(psi)
    }

    /// One lifted step with a normalized input.
    pub fn advance(&self, psi: &[f64], u: &[f64]) -> Vec<f64> {
        let n = self.observable_dim();
        (0..n)
            .map(|i| crate::linalg::dot(self.a.row(i), psi) + crate::linalg::dot(self.b.row(i), u))
            .collect()
    }

    /// Lifted open-loop rollout from a normalized state under normalized inputs.
    pub fn predict_lifted(&self, z0: &[f64], inputs: &[[f64; 4]]) -> Result<Vec<Vec<f64>>, LinalgError> {
        let mut out = Vec::with_capacity(inputs.len() + 1);
        out.push(self.lift(z0)?);
        for u in inputs {
            let next = self.advance(out.last().unwrap(), u);
            out.push(next);
        }
        Ok(out)
    }

    /// Open-loop prediction in physical units; element 0 is `x0` itself.
    pub fn predict_open_loop(&self, x0: &[f64; 6], inputs: &[[f64; 4]]) -> Result<Vec<[f64; 6]>, LinalgError> {
        let z0 = self.norm.normalize_state(x0);
        let u: Vec<[f64; 4]> = inputs.iter().map(|u| self.norm.normalize_input(u)).collect();
        let lifted = self.predict_lifted(&z0, &u)?;
        let mut out = Vec::with_capacity(lifted.len());
        out.push(*x0);
        out.extend(lifted[1..].iter().map(|psi| self.norm.denormalize_state(&psi[..STATE_DIM])));
        Ok(out)
    }

    /// Every trainable block, encoder layers first, then `A` and `B`.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect();
        v.push(&self.a);
        v.push(&self.b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect();
        v.push(&mut self.a);
        v.push(&mut self.b);
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> =
            (0..self.layers.len()).flat_map(|i| [format!("encoder.{i}.w"), format!("encoder.{i}.b")]).collect();
        v.push("A".into());
        v.push("B".into());
        v
    }
}
