//! Receding-horizon tracking control over a lifted linear model, condensed
//! into a box-constrained QP on the stacked normalized driver inputs.

mod qp;
mod scenario;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::NormStats;
use crate::koopman::KoopmanModel;
use crate::linalg::{LinalgError, Matrix};
use crate::lti::{LtiError, LtiSet};
use crate::plant::{step, ActuatorState, ControlInput, PlantParams, VehicleState, BRAKE_MAX, STEERING_MAX};
use crate::units::{fmt_sig, state_to_report};

pub use qp::{kkt_residuals, solve_qp, BoxQpSolver, KktReport, QpProblem, QpSettings, QpSolution, QpStatus, WarmStart};
pub use scenario::DoubleLaneChange;

const NY: usize = 6;
const NU: usize = 3;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite entries in the prediction model")]
    NonFiniteModel,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Stage weights on the six normalized state coordinates.
    pub q: [f64; 6],
    /// Terminal weight as a multiple of `q`.
    pub terminal_factor: f64,
    /// Weights on normalized throttle, brake and steering.
    pub r: [f64; 3],
    /// Physical bounds on throttle, brake (N) and steering-wheel angle (rad).
    pub u_min: [f64; 3],
    pub u_max: [f64; 3],
    pub qp: QpSettings,
    pub warm_start: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            q: [1.0, 0.5, 0.5, 0.1, 10.0, 5.0],
            terminal_factor: 5.0,
            r: [0.1, 0.001, 1.0],
            u_min: [0.0, 0.0, -STEERING_MAX],
            u_max: [1.0, BRAKE_MAX, STEERING_MAX],
            qp: QpSettings::default(),
            warm_start: true,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        let bad = |m: &str| Err(MpcError::InvalidConfig(m.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be at least one step");
        }
        if self.q.iter().any(|v| !(*v >= 0.0)) || !(self.terminal_factor >= 0.0) {
            return bad("state weights must be non-negative");
        }
        if self.r.iter().any(|v| !(*v > 0.0)) {
            return bad("input weights must be positive");
        }
        if (0..NU).any(|i| !(self.u_min[i] < self.u_max[i])) {
            return bad("every input needs u_min < u_max");
        }
        Ok(())
    }
}

/// `ψ⁺ = A ψ + B_c u_c + d`, the constant drive `d` carrying the curvature
/// input (Koopman) or the fitted offset (LTI).
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedModel {
    pub a: Matrix,
    pub bc: Matrix,
    pub drive: Vec<f64>,
}

impl LiftedModel {
    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    fn is_finite(&self) -> bool {
        self.a.is_finite() && self.bc.is_finite() && self.drive.iter().all(|v| v.is_finite())
    }
}

/// Prediction model behind a controller.
#[derive(Debug, Clone)]
pub enum ControlModel {
    Koopman(KoopmanModel),
    Lti(LtiSet),
}

impl ControlModel {
    pub fn name(&self) -> &'static str {
        match self {
            ControlModel::Koopman(_) => "koopman",
            ControlModel::Lti(_) => "lti",
        }
    }

    pub fn norm(&self) -> &NormStats {
        match self {
            ControlModel::Koopman(m) => &m.norm,
            ControlModel::Lti(s) => &s.norm_stats,
        }
    }

    /// Model with the curvature held at `kappa` over the horizon.
    pub fn lifted_model(&self, kappa: f64) -> Result<LiftedModel, MpcError> {
        let lm = match self {
            ControlModel::Koopman(m) => {
                let n = m.observable_dim();
                let k_norm = (kappa - m.norm.input_mean[3]) / m.norm.input_std[3];
                LiftedModel {
                    a: m.a.clone(),
                    bc: m.b.col_block(0, NU),
                    drive: (0..n).map(|i| m.b[(i, 3)] * k_norm).collect(),
                }
            }
            ControlModel::Lti(set) => {
                let m = set.model_for(kappa)?;
                LiftedModel { a: m.a, bc: m.b, drive: m.offset }
            }
        };
        if !lm.is_finite() {
            return Err(MpcError::NonFiniteModel);
        }
        Ok(lm)
    }

    /// Lifted coordinates of a physical state.
    pub fn lift(&self, x: &VehicleState) -> Result<Vec<f64>, MpcError> {
        let z = self.norm().normalize_state(&x.to_array());
        match self {
            ControlModel::Koopman(m) => Ok(m.lift(&z)?),
            ControlModel::Lti(_) => Ok(z.to_vec()),
        }
    }
}

/// Lifted reference `[z_r ; encoder(z_r)]` for each physical reference state.
pub fn lift_reference(model: &KoopmanModel, refs: &[VehicleState]) -> Result<Vec<Vec<f64>>, LinalgError> {
    refs.iter().map(|x| model.lift(&model.norm.normalize_state(&x.to_array()))).collect()
}

/// Prediction matrices restricted to the weighted output coordinates, and
/// the Hessian they induce.
#[derive(Debug, Clone)]
pub struct Condensed {
    pub horizon: usize,
    /// `C A^k` stacked for `k = 1..=N`, `6N × n`.
    pub phi: Matrix,
    /// `C A^{k-1-j} B_c` blocks, `6N × 3N`.
    pub gamma: Matrix,
    /// Accumulated drive `Σ_{j<k} C A^j d`, length `6N`.
    pub drive: Vec<f64>,
    /// Diagonal output weights, length `6N`.
    pub weights: Vec<f64>,
    pub h: Matrix,
}

impl Condensed {
    pub fn new(lm: &LiftedModel, cfg: &MpcConfig) -> Result<Self, MpcError> {
        let (n, horizon) = (lm.dim(), cfg.horizon);
        // powers[k] = C A^k
        let mut powers = Vec::with_capacity(horizon + 1);
        powers.push(Matrix::identity(n).row_block(0, NY));
        for k in 0..horizon {
            let next = powers[k].matmul(&lm.a)?;
            powers.push(next);
        }
        let mut phi = Matrix::zeros(NY * horizon, n);
        let mut gamma = Matrix::zeros(NY * horizon, NU * horizon);
        let mut drive = vec![0.0; NY * horizon];
        let mut weights = vec![0.0; NY * horizon];
        let cb: Vec<Matrix> = powers.iter().map(|p| p.matmul(&lm.bc)).collect::<Result<_, _>>()?;
        let cd: Vec<Vec<f64>> = powers.iter().map(|p| p.matvec(&lm.drive)).collect::<Result<_, _>>()?;
        for k in 1..=horizon {
            let row0 = NY * (k - 1);
            let factor = if k == horizon { cfg.terminal_factor } else { 1.0 };
            for i in 0..NY {
                phi.row_mut(row0 + i).copy_from_slice(powers[k].row(i));
                weights[row0 + i] = cfg.q[i] * factor;
                drive[row0 + i] = (0..k).map(|j| cd[j][i]).sum();
                for j in 0..k {
                    let blk = &cb[k - 1 - j];
                    for c in 0..NU {
                        gamma[(row0 + i, NU * j + c)] = blk[(i, c)];
                    }
                }
            }
        }
        let mut wg = gamma.clone();
        for r in 0..wg.rows() {
            let w = weights[r];
            wg.row_mut(r).iter_mut().for_each(|v| *v *= w);
        }
        let mut h = gamma.t_matmul(&wg)?.scale(2.0);
        for j in 0..horizon {
            for c in 0..NU {
                h[(NU * j + c, NU * j + c)] += 2.0 * cfg.r[c];
            }
        }
        // symmetrize away rounding
        let h = h.add(&h.transpose())?.scale(0.5);
        Ok(Self { horizon, phi, gamma, drive, weights, h })
    }

    /// `g = 2 Γᵀ Q̄ (Φ ψ0 + D − r)` for normalized output references `r` (`6N`).
    pub fn gradient(&self, psi0: &[f64], reference: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let free = self.phi.matvec(psi0)?;
        let e: Vec<f64> = (0..free.len()).map(|i| 2.0 * self.weights[i] * (free[i] + self.drive[i] - reference[i])).collect();
        let mut g = vec![0.0; self.gamma.cols()];
        for (r, ev) in e.iter().enumerate() {
            if *ev != 0.0 {
                for (gc, v) in g.iter_mut().zip(self.gamma.row(r)) {
                    *gc += v * ev;
                }
            }
        }
        Ok(g)
    }

    /// Tracking cost of a stacked control sequence, constant terms included.
    pub fn cost(&self, psi0: &[f64], reference: &[f64], u: &[f64], r: &[f64; 3]) -> Result<f64, LinalgError> {
        let free = self.phi.matvec(psi0)?;
        let forced = self.gamma.matvec(u)?;
        let mut j = 0.0;
        for i in 0..free.len() {
            let e = free[i] + self.drive[i] + forced[i] - reference[i];
            j += self.weights[i] * e * e;
        }
        for (k, v) in u.iter().enumerate() {
            j += r[k % NU] * v * v;
        }
        Ok(j)
    }
}

/// Normalized box for the stacked inputs.
fn normalized_bounds(norm: &NormStats, cfg: &MpcConfig) -> (Vec<f64>, Vec<f64>) {
    let lo: Vec<f64> = (0..NU).map(|c| (cfg.u_min[c] - norm.input_mean[c]) / norm.input_std[c]).collect();
    let hi: Vec<f64> = (0..NU).map(|c| (cfg.u_max[c] - norm.input_mean[c]) / norm.input_std[c]).collect();
    let lower = (0..cfg.horizon * NU).map(|i| lo[i % NU]).collect();
    let upper = (0..cfg.horizon * NU).map(|i| hi[i % NU]).collect();
    (lower, upper)
}

/// Normalized output reference stacked over the horizon.
fn stacked_reference(norm: &NormStats, refs: &[VehicleState]) -> Vec<f64> {
    refs.iter().flat_map(|x| norm.normalize_state(&x.to_array())).collect()
}

/// Condensed QP for one controller step, built from scratch.
pub fn build_qp(
    model: &KoopmanModel,
    x_now: &VehicleState,
    psi_ref: &[Vec<f64>],
    kappa: f64,
    cfg: &MpcConfig,
) -> Result<QpProblem, MpcError> {
    cfg.validate()?;
    let cm = ControlModel::Koopman(model.clone());
    let lm = cm.lifted_model(kappa)?;
    let cond = Condensed::new(&lm, cfg)?;
    let psi0 = cm.lift(x_now)?;
    let reference: Vec<f64> = psi_ref.iter().take(cfg.horizon).flat_map(|p| p[..NY].to_vec()).collect();
    if reference.len() != NY * cfg.horizon {
        return Err(MpcError::InvalidConfig(format!("need {} reference steps, got {}", cfg.horizon, psi_ref.len())));
    }
    let g = cond.gradient(&psi0, &reference)?;
    let (lower, upper) = normalized_bounds(&model.norm, cfg);
    Ok(QpProblem { h: cond.h, g, lower, upper })
}

/// Applies the physical clamp and throttle/brake exclusivity to a solved input.
pub fn physical_input(norm: &NormStats, u_norm: &[f64], kappa: f64, cfg: &MpcConfig) -> ControlInput {
    let u: Vec<f64> = (0..NU).map(|c| (u_norm[c] * norm.input_std[c] + norm.input_mean[c]).clamp(cfg.u_min[c], cfg.u_max[c])).collect();
    let (mut throttle, mut brake) = (u[0].max(0.0), u[1].max(0.0));
    if throttle > 0.0 && brake > 0.0 {
        if throttle >= brake / BRAKE_MAX {
            brake = 0.0;
        } else {
            throttle = 0.0;
        }
    }
    ControlInput { throttle, brake, steering: u[2], curvature: kappa }
}

/// Stateful controller with a cached Hessian factorization and warm starts.
#[derive(Debug, Clone)]
pub struct Mpc {
    model: ControlModel,
    cfg: MpcConfig,
    kappa: f64,
    condensed: Condensed,
    solver: BoxQpSolver,
    lower: Vec<f64>,
    upper: Vec<f64>,
    warm: Option<WarmStart>,
}

#[derive(Debug, Clone)]
pub struct ControlStep {
    pub input: ControlInput,
    pub solution: QpSolution,
    pub solve_time_ms: f64,
}

impl Mpc {
    pub fn new(model: ControlModel, kappa: f64, cfg: &MpcConfig) -> Result<Self, MpcError> {
        cfg.validate()?;
        let lm = model.lifted_model(kappa)?;
        let condensed = Condensed::new(&lm, cfg)?;
        let solver = BoxQpSolver::new(&condensed.h, cfg.qp)?;
        let (lower, upper) = normalized_bounds(model.norm(), cfg);
        Ok(Self { model, cfg: cfg.clone(), kappa, condensed, solver, lower, upper, warm: None })
    }

    pub fn condensed(&self) -> &Condensed {
        &self.condensed
    }

    /// Solves for the first input given the state and the next `horizon` references.
    pub fn control(&mut self, x: &VehicleState, refs: &[VehicleState]) -> Result<ControlStep, MpcError> {
        let n = self.cfg.horizon;
        if refs.len() < n {
            return Err(MpcError::InvalidConfig(format!("need {n} reference steps, got {}", refs.len())));
        }
        let start = Instant::now();
        let psi0 = self.model.lift(x)?;
        let reference = stacked_reference(self.model.norm(), &refs[..n]);
        let g = self.condensed.gradient(&psi0, &reference)?;
        let warm = if self.cfg.warm_start { self.warm.as_ref() } else { None };
        let solution = self.solver.solve(&g, &self.lower, &self.upper, warm)?;
        let input = physical_input(self.model.norm(), &solution.x[..NU], self.kappa, &self.cfg);
        let solve_time_ms = start.elapsed().as_secs_f64() * 1e3;
        self.warm = Some(shift(&solution));
        Ok(ControlStep { input, solution, solve_time_ms })
    }
}

/// Previous solution advanced one step, last input repeated.
fn shift(sol: &QpSolution) -> WarmStart {
    let s = |v: &[f64]| {
        let mut out = v[NU..].to_vec();
        out.extend_from_slice(&v[v.len() - NU..]);
        out
    };
    WarmStart { x: s(&sol.x), y: s(&sol.y) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: f64,
    pub state: VehicleState,
    pub input: ControlInput,
    pub reference: VehicleState,
    pub solve_time_ms: f64,
    pub iterations: usize,
    pub suboptimal: bool,
    pub kkt: KktReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub controller: String,
    pub steps: Vec<StepLog>,
    pub final_state: VehicleState,
    /// Set when the plant failed before the scenario ended.
    pub failure: Option<String>,
}

/// Runs the scenario: read state, solve, apply the first input, repeat.
pub fn closed_loop(
    model: ControlModel,
    params: &PlantParams,
    scenario: &DoubleLaneChange,
    cfg: &MpcConfig,
) -> Result<ClosedLoopLog, MpcError> {
    let name = model.name().to_string();
    let mut mpc = Mpc::new(model, scenario.kappa, cfg)?;
    let reference = scenario.reference(cfg.horizon);
    let mut x = scenario.initial_state();
    let mut act = ActuatorState::default();
    let mut steps = Vec::with_capacity(scenario.steps());
    let mut failure = None;
    for k in 0..scenario.steps() {
        let cs = mpc.control(&x, &reference[k + 1..=k + cfg.horizon])?;
        steps.push(StepLog {
            t: k as f64 * crate::plant::DT,
            state: x,
            input: cs.input,
            reference: reference[k],
            solve_time_ms: cs.solve_time_ms,
            iterations: cs.solution.iterations(),
            suboptimal: cs.solution.status == QpStatus::Suboptimal,
            kkt: cs.solution.kkt,
        });
        if cs.solution.status == QpStatus::Suboptimal {
            log::warn!("{name} step {k}: solver hit its iteration cap; applying best iterate");
        }
        match step(&x, &cs.input, &act, params) {
            Ok((nx, na)) => {
                x = nx;
                act = na;
            }
            Err(e) => {
                failure = Some(format!("plant failed at step {k}: {e}"));
                break;
            }
        }
    }
    Ok(ClosedLoopLog { controller: name, steps, final_state: x, failure })
}

pub const LOG_COLUMNS: [&str; 15] = [
    "t",
    "vx_kmh",
    "vy_kmh",
    "yaw_rate_degs",
    "delta_s_m",
    "e_y_m",
    "e_psi_deg",
    "throttle",
    "brake_n",
    "steering_deg",
    "e_y_ref_m",
    "solve_time_ms",
    "solver_iters",
    "suboptimal_flag",
    "kkt_max",
];

/// Log as CSV in report units, six significant digits.
pub fn write_log_csv(log: &ClosedLoopLog, path: &Path) -> Result<(), MpcError> {
    let io = |source| MpcError::Io { path: path.display().to_string(), source };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "{}", LOG_COLUMNS.join(",")).map_err(io)?;
    for s in &log.steps {
        let mut cells = vec![fmt_sig(s.t)];
        cells.extend(state_to_report(&s.state.to_array()).iter().map(|v| fmt_sig(*v)));
        cells.push(fmt_sig(s.input.throttle));
        cells.push(fmt_sig(s.input.brake));
        cells.push(fmt_sig(s.input.steering.to_degrees()));
        cells.push(fmt_sig(s.reference.e_y));
        cells.push(fmt_sig(s.solve_time_ms));
        cells.push(s.iterations.to_string());
        cells.push(u8::from(s.suboptimal).to_string());
        cells.push(fmt_sig(s.kkt.max()));
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}
