//! Training objective: one-step and discounted multi-step prediction errors in
//! the lifted space, a spectral hinge on `A`, and L2 regularization.

use serde::{Deserialize, Serialize};

use super::{KoopmanModel, INPUT_DIM, STATE_DIM};
use crate::datagen::Segment;
use crate::linalg::{stability_hinge, LinalgError, Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub single_step: f64,
    pub multi_step: f64,
    pub stability: f64,
    pub regularization: f64,
    /// Per-step discount of the multi-step error.
    pub beta: f64,
    pub lambda_encoder: f64,
    pub lambda_koopman: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            single_step: 1.0,
            multi_step: 0.5,
            stability: 1.6,
            regularization: 1e-4,
            beta: 0.9,
            lambda_encoder: 0.9,
            lambda_koopman: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.single_step,
            self.multi_step,
            self.stability,
            self.regularization,
            self.beta,
            self.lambda_encoder,
            self.lambda_koopman,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(format!("loss weights must be finite and non-negative: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ssl: f64,
    pub msl: f64,
    pub sl: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ssl, self.msl, self.sl, self.reg, self.total].iter().all(|v| v.is_finite())
    }
}

/// Equal-length normalized trajectories stacked time-major: row `t·size + j`
/// holds step `t` of trajectory `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Matrix,
    pub inputs: Matrix,
    pub size: usize,
    pub steps: usize,
}

impl Batch {
    pub fn from_segments(segments: &[&Segment]) -> Result<Self, LinalgError> {
        let size = segments.len();
        let steps = segments.first().map_or(0, |s| s.inputs.len());
        for s in segments {
            if s.inputs.len() != steps || s.states.len() != steps + 1 {
                return Err(LinalgError::DimensionMismatch {
                    op: "batch",
                    left: (steps + 1, steps),
                    right: (s.states.len(), s.inputs.len()),
                });
            }
        }
        let mut states = Matrix::zeros((steps + 1) * size, STATE_DIM);
        let mut inputs = Matrix::zeros(steps * size, INPUT_DIM);
        for (j, s) in segments.iter().enumerate() {
            for (t, x) in s.states.iter().enumerate() {
                states.row_mut(t * size + j).copy_from_slice(x);
            }
            for (t, u) in s.inputs.iter().enumerate() {
                inputs.row_mut(t * size + j).copy_from_slice(u);
            }
        }
        Ok(Self { states, inputs, size, steps })
    }
}

/// Tape handles of the model's parameter blocks.
pub(crate) struct ParamVars {
    pub layers: Vec<(Var, Var)>,
    pub a: Var,
    pub b: Var,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        v.push(self.a);
        v.push(self.b);
        v
    }
}

pub(crate) fn register(tape: &mut Tape, model: &KoopmanModel, trainable: bool) -> ParamVars {
    let mut leaf = |m: &Matrix| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
    let layers = model.layers.iter().map(|l| (leaf(&l.w), leaf(&l.b))).collect();
    let a = leaf(&model.a);
    let b = leaf(&model.b);
    ParamVars { layers, a, b }
}

fn lift_tape(tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var, LinalgError> {
    let mut h = x;
    let last = pv.layers.len() - 1;
    for (i, &(w, b)) in pv.layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add_row(z, b)?;
        if i < last {
            h = tape.relu(h);
        }
    }
    tape.concat_cols(x, h)
}

/// Sum of `β^i` for `i = 1..K-1`.
pub(crate) fn discount_normalizer(beta: f64, steps: usize) -> f64 {
    (1..steps).map(|i| beta.powi(i as i32)).sum()
}

/// One-step and multi-step prediction terms of `batch`, each divided by
/// `denom` trajectories (the full batch size when the batch is sharded).
pub(crate) fn data_terms(
    tape: &mut Tape,
    pv: &ParamVars,
    batch: &Batch,
    beta: f64,
    denom: f64,
) -> Result<(Var, Var), LinalgError> {
    let (size, k) = (batch.size, batch.steps);
    let x = tape.constant(batch.states.clone());
    let u = tape.constant(batch.inputs.clone());
    let psi = lift_tape(tape, pv, x)?;
    let ub = tape.matmul_t(u, pv.b)?;

    let prev = tape.rows(psi, 0, k * size)?;
    let next = tape.rows(psi, size, k * size)?;
    let pa = tape.matmul_t(prev, pv.a)?;
    let pred = tape.add(pa, ub)?;
    let resid = tape.sub(next, pred)?;
    let sq = tape.sum_squares(resid);
    let ssl = tape.scale(sq, 1.0 / (k as f64 * denom));

    let norm = discount_normalizer(beta, k);
    let mut msl = None;
    let mut hat = tape.rows(psi, 0, size)?;
    for i in 1..k {
        let ha = tape.matmul_t(hat, pv.a)?;
        let drive = tape.rows(ub, (i - 1) * size, size)?;
        hat = tape.add(ha, drive)?;
        let truth = tape.rows(psi, i * size, size)?;
        let e = tape.sub(truth, hat)?;
        let s = tape.sum_squares(e);
        let term = tape.scale(s, beta.powi(i as i32) / (norm * denom));
        msl = Some(match msl {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let msl = match msl {
        Some(v) => v,
        None => tape.constant(Matrix::zeros(1, 1)),
    };
    Ok((ssl, msl))
}

/// Spectral hinge and weighted L2 penalty.
pub(crate) fn model_terms(tape: &mut Tape, pv: &ParamVars, w: &LossWeights) -> Result<(Var, Var), LinalgError> {
    let sl = tape.stability_hinge(pv.a)?;
    let mut enc = None;
    for &(wv, bv) in &pv.layers {
        for v in [wv, bv] {
            let s = tape.sum_squares(v);
            enc = Some(match enc {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
    }
    let enc = enc.expect("encoder has at least one layer");
    let sa = tape.sum_squares(pv.a);
    let sb = tape.sum_squares(pv.b);
    let koop = tape.add(sa, sb)?;
    let e = tape.scale(enc, w.lambda_encoder);
    let k = tape.scale(koop, w.lambda_koopman);
    let reg = tape.add(e, k)?;
    Ok((sl, reg))
}

/// Weighted sum of the four terms.
pub(crate) fn combine(
    tape: &mut Tape,
    w: &LossWeights,
    ssl: Var,
    msl: Var,
    sl: Var,
    reg: Var,
) -> Result<Var, LinalgError> {
    let terms = [(ssl, w.single_step), (msl, w.multi_step), (sl, w.stability), (reg, w.regularization)];
    let mut acc = tape.scale(terms[0].0, terms[0].1);
    for &(v, c) in &terms[1..] {
        let s = tape.scale(v, c);
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

pub fn loss_single_step(model: &KoopmanModel, batch: &Batch) -> Result<f64, LinalgError> {
    let mut tape = Tape::new();
    let pv = register(&mut tape, model, false);
    let (ssl, _) = data_terms(&mut tape, &pv, batch, 1.0, batch.size as f64)?;
    Ok(tape.scalar(ssl))
}

pub fn loss_multi_step(model: &KoopmanModel, batch: &Batch, beta: f64) -> Result<f64, LinalgError> {
    let mut tape = Tape::new();
    let pv = register(&mut tape, model, false);
    let (_, msl) = data_terms(&mut tape, &pv, batch, beta, batch.size as f64)?;
    Ok(tape.scalar(msl))
}

/// `Σ max(0, |λ| − 1)` over the eigenvalues of `a`.
pub fn loss_stability(a: &Matrix) -> Result<f64, LinalgError> {
    Ok(stability_hinge(a, false)?.0)
}

pub fn loss_regularization(model: &KoopmanModel, w: &LossWeights) -> f64 {
    let enc: f64 = model.layers.iter().map(|l| l.w.sum_squares() + l.b.sum_squares()).sum();
    w.lambda_encoder * enc + w.lambda_koopman * (model.a.sum_squares() + model.b.sum_squares())
}

pub fn loss_total(model: &KoopmanModel, batch: &Batch, w: &LossWeights) -> Result<LossBreakdown, LinalgError> {
    let mut tape = Tape::new();
    let pv = register(&mut tape, model, false);
    let (ssl, msl) = data_terms(&mut tape, &pv, batch, w.beta, batch.size as f64)?;
    let (sl, reg) = model_terms(&mut tape, &pv, w)?;
    let total = combine(&mut tape, w, ssl, msl, sl, reg)?;
    Ok(LossBreakdown {
        ssl: tape.scalar(ssl),
        msl: tape.scalar(msl),
        sl: tape.scalar(sl),
        reg: tape.scalar(reg),
        total: tape.scalar(total),
    })
}

/// Total loss and its gradient for every parameter block, in `params()` order.
pub fn loss_gradient(model: &KoopmanModel, batch: &Batch, w: &LossWeights) -> Result<(LossBreakdown, Vec<Matrix>), LinalgError> {
    let mut tape = Tape::new();
    let pv = register(&mut tape, model, true);
    let (ssl, msl) = data_terms(&mut tape, &pv, batch, w.beta, batch.size as f64)?;
    let (sl, reg) = model_terms(&mut tape, &pv, w)?;
    let total = combine(&mut tape, w, ssl, msl, sl, reg)?;
    let mut g = tape.backward(total)?;
    let grads = pv.all().into_iter().zip(model.params()).map(|(v, p)| g.take_or_zeros(v, p.shape())).collect();
    let breakdown = LossBreakdown {
        ssl: tape.scalar(ssl),
        msl: tape.scalar(msl),
        sl: tape.scalar(sl),
        reg: tape.scalar(reg),
        total: tape.scalar(total),
    };
    Ok((breakdown, grads))
}
