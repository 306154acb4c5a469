//! Mini-batch Adam training with periodic test evaluation, learning-rate
//! halving on a rising test loss, and best-model checkpointing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::loss::{data_terms, model_terms, register};
use super::{loss_regularization, loss_stability, Batch, EncoderConfig, KoopmanModel, LossBreakdown, LossWeights};
use crate::datagen::{NormStats, Segment};
use crate::linalg::{adam_step, AdamConfig, AdamState, LinalgError, Matrix, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Consecutive rising test evaluations that trigger a learning-rate halving.
    pub patience: usize,
    pub eval_every: usize,
    pub max_iterations: usize,
    /// Fixed gradient shard count; results do not depend on the thread count.
    pub shards: usize,
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            weights: LossWeights::default(),
            batch_size: 128,
            adam: AdamConfig::default(),
            patience: 3,
            eval_every: 500,
            max_iterations: 5000,
            shards: 8,
            train_fraction: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.eval_every == 0 || self.shards == 0 || self.patience == 0 {
            return bad("batch_size, eval_every, shards and patience must be positive");
        }
        if !(self.adam.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.encoder.layer_dims().is_empty() || self.encoder.latent == 0 {
            return bad("encoder needs at least one layer and a non-empty latent space");
        }
        self.weights.validate().map_err(TrainError::InvalidConfig)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no {0} trajectories")]
    EmptyData(&'static str),
    #[error("non-finite loss at iteration {iteration}: {breakdown:?}")]
    NonFinite { iteration: usize, breakdown: LossBreakdown },
    #[error("at iteration {iteration}: {source}")]
    Numerical { iteration: usize, source: LinalgError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub lr: f64,
    pub test: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: KoopmanModel,
    pub best_iteration: usize,
    pub best_test_loss: f64,
    pub evaluations: Vec<EvalRecord>,
    /// Total batch loss at every iteration.
    pub batch_losses: Vec<f64>,
}

/// Loss and gradient of one batch, sharded across threads.
pub(crate) fn batch_gradient(
    model: &KoopmanModel,
    segments: &[&Segment],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Matrix>), LinalgError> {
    let w = &cfg.weights;
    let denom = segments.len() as f64;
    let shard_len = segments.len().div_ceil(cfg.shards);
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|p| p.shape()).collect();

    let parts: Vec<Result<(f64, f64, Vec<Matrix>), LinalgError>> = segments
        .par_chunks(shard_len)
        .map(|chunk| {
            let mut tape = Tape::new();
            let pv = register(&mut tape, model, true);
            let batch = Batch::from_segments(chunk)?;
            let (ssl, msl) = data_terms(&mut tape, &pv, &batch, w.beta, denom)?;
            let a = tape.scale(ssl, w.single_step);
            let b = tape.scale(msl, w.multi_step);
            let loss = tape.add(a, b)?;
            let mut g = tape.backward(loss)?;
            let grads = pv.all().into_iter().zip(&shapes).map(|(v, s)| g.take_or_zeros(v, *s)).collect();
            Ok((tape.scalar(ssl), tape.scalar(msl), grads))
        })
        .collect();

    let mut tape = Tape::new();
    let pv = register(&mut tape, model, true);
    let (sl, reg) = model_terms(&mut tape, &pv, w)?;
    let a = tape.scale(sl, w.stability);
    let b = tape.scale(reg, w.regularization);
    let loss = tape.add(a, b)?;
    let mut g = tape.backward(loss)?;
    let mut grads: Vec<Matrix> = pv.all().into_iter().zip(&shapes).map(|(v, s)| g.take_or_zeros(v, *s)).collect();

    let mut out = LossBreakdown { sl: tape.scalar(sl), reg: tape.scalar(reg), ..Default::default() };
    for part in parts {
        let (ssl, msl, shard) = part?;
        out.ssl += ssl;
        out.msl += msl;
        for (acc, gs) in grads.iter_mut().zip(&shard) {
            acc.add_assign(gs)?;
        }
    }
    out.total = w.single_step * out.ssl + w.multi_step * out.msl + w.stability * out.sl + w.regularization * out.reg;
    Ok((out, grads))
}

/// Objective over a whole trajectory set, evaluated in fixed-size chunks.
pub fn evaluate(model: &KoopmanModel, segments: &[Segment], w: &LossWeights) -> Result<LossBreakdown, LinalgError> {
    const CHUNK: usize = 64;
    let denom = segments.len() as f64;
    let refs: Vec<&Segment> = segments.iter().collect();
    let parts: Vec<Result<(f64, f64), LinalgError>> = refs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let pv = register(&mut tape, model, false);
            let (ssl, msl) = data_terms(&mut tape, &pv, &Batch::from_segments(chunk)?, w.beta, denom)?;
            Ok((tape.scalar(ssl), tape.scalar(msl)))
        })
        .collect();
    let mut out = LossBreakdown { sl: loss_stability(&model.a)?, reg: loss_regularization(model, w), ..Default::default() };
    for part in parts {
        let (ssl, msl) = part?;
        out.ssl += ssl;
        out.msl += msl;
    }
    out.total = w.single_step * out.ssl + w.multi_step * out.msl + w.stability * out.sl + w.regularization * out.reg;
    Ok(out)
}

/// Trains from the given initial-state seed on normalized trajectories.
pub fn train(
    train_set: &[Segment],
    test_set: &[Segment],
    norm: NormStats,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    if test_set.is_empty() {
        return Err(TrainError::EmptyData("test"));
    }
    let mut model = KoopmanModel::initialize(&cfg.encoder, norm, seed);
    let names = model.param_names();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut adam = AdamState::new(&model.params());
    let mut adam_cfg = cfg.adam;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut best = model.clone();
    let mut best_iteration = 0;
    let mut best_test_loss = f64::INFINITY;
    let mut evaluations: Vec<EvalRecord> = Vec::new();
    let mut batch_losses = Vec::with_capacity(cfg.max_iterations);
    let batch_size = cfg.batch_size.min(train_set.len());

    for iteration in 1..=cfg.max_iterations {
        let picks = rand::seq::index::sample(&mut rng, train_set.len(), batch_size);
        let batch: Vec<&Segment> = picks.iter().map(|i| &train_set[i]).collect();
        let num = |source| TrainError::Numerical { iteration, source };
        let (loss, grads) = batch_gradient(&model, &batch, cfg).map_err(num)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { iteration, breakdown: loss });
        }
        batch_losses.push(loss.total);
        adam_step(&mut model.params_mut(), &grads, &mut adam, &adam_cfg, &names).map_err(num)?;

        if iteration % cfg.eval_every == 0 || iteration == cfg.max_iterations {
            let test = evaluate(&model, test_set, &cfg.weights).map_err(num)?;
            if !test.is_finite() {
                return Err(TrainError::NonFinite { iteration, breakdown: test });
            }
            log::info!(
                "iter {iteration}: batch {:.6e} test {:.6e} (ssl {:.3e} msl {:.3e} sl {:.3e} reg {:.3e}) lr {:.2e}",
                loss.total,
                test.total,
                test.ssl,
                test.msl,
                test.sl,
                test.reg,
                adam_cfg.lr
            );
            evaluations.push(EvalRecord { iteration, lr: adam_cfg.lr, test });
            if test.total < best_test_loss {
                best_test_loss = test.total;
                best_iteration = iteration;
                best = model.clone();
            }
            if evaluations.len() >= cfg.patience {
                let tail = &evaluations[evaluations.len() - cfg.patience..];
                if cfg.patience > 1 && tail.windows(2).all(|w| w[1].test.total > w[0].test.total) {
                    adam_cfg.lr *= 0.5;
                    log::info!("test loss rose {} times in a row; lr -> {:.2e}", cfg.patience - 1, adam_cfg.lr);
                }
            }
        }
    }
    Ok(TrainOutcome { best, best_iteration, best_test_loss, evaluations, batch_losses })
}
