//! Nonlinear vehicle plant in the Frenet frame: dynamic bicycle model with
//! smoothly saturating tires, a power-limited drive force and first-order
//! actuator lags, integrated with RK4.

mod config;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::ConfigError;

/// Controller / data sample period (s).
pub const DT: f64 = 0.025;
pub const GRAVITY: f64 = 9.81;
pub const THROTTLE_MAX: f64 = 1.0;
pub const BRAKE_MAX: f64 = 150.0;
/// Steering-wheel angle limit (rad), 40°.
pub const STEERING_MAX: f64 = 40.0 * std::f64::consts::PI / 180.0;
/// Smallest admissible `1 − κ·e_y` before the path projection is considered singular.
pub const PROJECTION_MARGIN: f64 = 1e-3;
/// Longitudinal speed floor inside the slip-angle computation.
const SLIP_VX_FLOOR: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid plant parameters: {0}")]
    InvalidParams(String),
    #[error("path projection singular: 1 - kappa*e_y = {margin:e} (kappa {kappa:e}, e_y {e_y})")]
    ProjectionSingularity { kappa: f64, e_y: f64, margin: f64 },
    #[error("non-finite plant state")]
    NonFinite,
}

/// Frenet-frame vehicle state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Longitudinal velocity (m/s).
    pub vx: f64,
    /// Lateral velocity (m/s).
    pub vy: f64,
    /// Yaw rate (rad/s).
    pub yaw_rate: f64,
    /// Arc progress accrued over the last sample period (m).
    pub delta_s: f64,
    /// Lateral deviation from the path (m).
    pub e_y: f64,
    /// Heading error (rad).
    pub e_psi: f64,
}

impl VehicleState {
    pub const DIM: usize = 6;
    pub const NAMES: [&'static str; 6] = ["vx", "vy", "yaw_rate", "delta_s", "e_y", "e_psi"];

    pub fn to_array(&self) -> [f64; 6] {
        [self.vx, self.vy, self.yaw_rate, self.delta_s, self.e_y, self.e_psi]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self { vx: a[0], vy: a[1], yaw_rate: a[2], delta_s: a[3], e_y: a[4], e_psi: a[5] }
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self::from_array([a[0], a[1], a[2], a[3], a[4], a[5]])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Checks `vx ≥ 0`, `|e_ψ| < π` and finiteness.
    pub fn validate(&self) -> Result<(), PlantError> {
        if !self.is_finite() {
            return Err(PlantError::NonFinite);
        }
        if self.vx < 0.0 {
            return Err(PlantError::InvalidInput(format!("vx = {} < 0", self.vx)));
        }
        if self.e_psi.abs() >= std::f64::consts::PI {
            return Err(PlantError::InvalidInput(format!("|e_psi| = {} >= pi", self.e_psi.abs())));
        }
        Ok(())
    }
}

/// Commanded or effective input: `[throttle, brake, steering | curvature]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Dimensionless, `[0, 1]`.
    pub throttle: f64,
    /// Brake pedal force (N), `[0, 150]`.
    pub brake: f64,
    /// Steering-wheel angle (rad).
    pub steering: f64,
    /// Road curvature (1/m), exogenous.
    pub curvature: f64,
}

impl ControlInput {
    pub const DIM: usize = 4;
    pub const NAMES: [&'static str; 4] = ["throttle", "brake", "steering", "curvature"];

    pub fn to_array(&self) -> [f64; 4] {
        [self.throttle, self.brake, self.steering, self.curvature]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self { throttle: a[0], brake: a[1], steering: a[2], curvature: a[3] }
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self::from_array([a[0], a[1], a[2], a[3]])
    }

    /// Signed pedal in `[-1, 1]`: throttle positive, brake negative (scaled by its range).
    pub fn pedal(&self) -> f64 {
        self.throttle - self.brake / BRAKE_MAX
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(PlantError::InvalidInput("non-finite input".into()));
        }
        if !(0.0..=THROTTLE_MAX).contains(&self.throttle) {
            return Err(PlantError::InvalidInput(format!("throttle {} outside [0, 1]", self.throttle)));
        }
        if !(0.0..=BRAKE_MAX).contains(&self.brake) {
            return Err(PlantError::InvalidInput(format!("brake {} outside [0, 150]", self.brake)));
        }
        if self.steering.abs() > STEERING_MAX + 1e-12 {
            return Err(PlantError::InvalidInput(format!("steering {} exceeds 40 deg", self.steering)));
        }
        if self.throttle * self.brake != 0.0 {
            return Err(PlantError::InvalidInput("throttle and brake both active".into()));
        }
        Ok(())
    }
}

/// Vehicle and actuator constants, SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    pub mass: f64,
    pub yaw_inertia: f64,
    pub lf: f64,
    pub lr: f64,
    pub cornering_front: f64,
    pub cornering_rear: f64,
    pub friction: f64,
    pub max_power: f64,
    pub max_drive_force: f64,
    pub brake_gain: f64,
    /// `C_d·A·ρ/2` (kg/m).
    pub aero_drag: f64,
    pub rolling_coeff: f64,
    pub steering_ratio: f64,
    pub tau_steer: f64,
    pub tau_drive: f64,
    pub inner_step: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            mass: 1500.0,
            yaw_inertia: 2250.0,
            lf: 1.1,
            lr: 1.6,
            cornering_front: 80_000.0,
            cornering_rear: 80_000.0,
            friction: 0.9,
            max_power: 150_000.0,
            max_drive_force: 6000.0,
            brake_gain: 30.0,
            aero_drag: 0.43,
            rolling_coeff: 0.015,
            steering_ratio: 15.0,
            tau_steer: 0.1,
            tau_drive: 0.2,
            inner_step: 0.005,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let fields = self.fields();
        if let Some((name, v)) = fields.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(PlantError::InvalidParams(format!("{name} = {v} must be strictly positive")));
        }
        let n = (DT / self.inner_step).round();
        if n < 1.0 || (n * self.inner_step - DT).abs() > 1e-12 {
            return Err(PlantError::InvalidParams(format!(
                "inner_step {} does not divide the {DT} s sample period",
                self.inner_step
            )));
        }
        Ok(())
    }

    pub(crate) fn fields(&self) -> [(&'static str, f64); 16] {
        [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("lf", self.lf),
            ("lr", self.lr),
            ("cornering_front", self.cornering_front),
            ("cornering_rear", self.cornering_rear),
            ("friction", self.friction),
            ("max_power", self.max_power),
            ("max_drive_force", self.max_drive_force),
            ("brake_gain", self.brake_gain),
            ("aero_drag", self.aero_drag),
            ("rolling_coeff", self.rolling_coeff),
            ("steering_ratio", self.steering_ratio),
            ("tau_steer", self.tau_steer),
            ("tau_drive", self.tau_drive),
            ("inner_step", self.inner_step),
        ]
    }

    fn substeps(&self) -> usize {
        (DT / self.inner_step).round() as usize
    }

    /// Static vertical loads `(front, rear)`.
    pub fn axle_loads(&self) -> (f64, f64) {
        let w = self.mass * GRAVITY;
        let l = self.lf + self.lr;
        (w * self.lr / l, w * self.lf / l)
    }

    /// Kinetic energy including yaw rotation.
    pub fn mechanical_energy(&self, s: &VehicleState) -> f64 {
        0.5 * self.mass * (s.vx * s.vx + s.vy * s.vy) + 0.5 * self.yaw_inertia * s.yaw_rate * s.yaw_rate
    }
}

/// Lateral tire force with smooth `tanh` saturation at `μ·F_z`.
pub fn tire_force(slip: f64, stiffness: f64, friction: f64, load: f64) -> f64 {
    let cap = friction * load;
    -cap * (stiffness * slip / cap).tanh()
}

/// Effective (lagged) actuator outputs: steering-wheel angle and signed pedal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ActuatorState {
    pub steering: f64,
    pub pedal: f64,
}

impl ActuatorState {
    /// Actuators already settled at `input`.
    pub fn settled(input: &ControlInput) -> Self {
        Self { steering: input.steering, pedal: input.pedal() }
    }

    /// Effective input seen by the chassis for road curvature `curvature`.
    pub fn effective(&self, curvature: f64) -> ControlInput {
        ControlInput {
            throttle: self.pedal.max(0.0),
            brake: (-self.pedal).max(0.0) * BRAKE_MAX,
            steering: self.steering,
            curvature,
        }
    }
}

/// Time derivative of the six chassis/Frenet states under an effective input.
///
/// The `delta_s` slot carries `ṡ`, the path-progress rate.
pub fn derivatives(state: &VehicleState, input: &ControlInput, p: &PlantParams) -> Result<[f64; 6], PlantError> {
    let kappa = input.curvature;
    let margin = 1.0 - kappa * state.e_y;
    if margin <= PROJECTION_MARGIN {
        return Err(PlantError::ProjectionSingularity { kappa, e_y: state.e_y, margin });
    }
    let VehicleState { vx, vy, yaw_rate: r, e_psi, .. } = *state;
    let (fz_f, fz_r) = p.axle_loads();
    let delta = input.steering / p.steering_ratio;
    let vx_slip = vx.max(SLIP_VX_FLOOR);
    let alpha_f = ((vy + p.lf * r) / vx_slip).atan() - delta;
    let alpha_r = ((vy - p.lr * r) / vx_slip).atan();
    let fy_f = tire_force(alpha_f, p.cornering_front, p.friction, fz_f);
    let fy_r = tire_force(alpha_r, p.cornering_rear, p.friction, fz_r);

    let drive = input.throttle * (p.max_power / vx.max(1.0)).min(p.max_drive_force);
    let rolling = if vx > 0.0 { p.rolling_coeff * p.mass * GRAVITY } else { 0.0 };
    let fx = drive - p.brake_gain * input.brake - p.aero_drag * vx * vx - rolling;

    let (sd, cd) = delta.sin_cos();
    let vx_dot = (fx - fy_f * sd) / p.mass + vy * r;
    let vy_dot = (fy_f * cd + fy_r) / p.mass - vx * r;
    let r_dot = (p.lf * fy_f * cd - p.lr * fy_r) / p.yaw_inertia;

    let (se, ce) = e_psi.sin_cos();
    let s_dot = (vx * ce - vy * se) / margin;
    let ey_dot = vx * se + vy * ce;
    let epsi_dot = r - kappa * s_dot;
    Ok([vx_dot, vy_dot, r_dot, s_dot, ey_dot, epsi_dot])
}

pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    if a.abs() < PI {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Integration state: six chassis states (with accrued arc length in slot 3)
/// plus the two actuator filters.
type Full = [f64; 8];

fn full_rhs(x: &Full, cmd: &ControlInput, p: &PlantParams) -> Result<Full, PlantError> {
    let state = VehicleState::from_slice(&x[..6]);
    let act = ActuatorState { steering: x[6], pedal: x[7] };
    let d = derivatives(&state, &act.effective(cmd.curvature), p)?;
    Ok([
        d[0],
        d[1],
        d[2],
        d[3],
        d[4],
        d[5],
        (cmd.steering - act.steering) / p.tau_steer,
        (cmd.pedal() - act.pedal) / p.tau_drive,
    ])
}

fn axpy8(a: &Full, h: f64, k: &Full) -> Full {
    let mut out = *a;
    for i in 0..8 {
        out[i] += h * k[i];
    }
    out
}

fn pack(state: &VehicleState, act: &ActuatorState) -> Full {
    let s = state.to_array();
    [s[0], s[1], s[2], 0.0, s[4], s[5], act.steering, act.pedal]
}

fn unpack(x: &Full) -> Result<(VehicleState, ActuatorState), PlantError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(PlantError::NonFinite);
    }
    let state = VehicleState::from_slice(&x[..6]);
    Ok((state, ActuatorState { steering: x[6], pedal: x[7] }))
}

fn post_substep(x: &mut Full) {
    x[0] = x[0].max(0.0);
    x[5] = wrap_angle(x[5]);
}

/// Advances the plant by one sample period `DT` under the commanded input.
///
/// The returned state's `delta_s` is the arc progress accrued during this period.
pub fn step(
    state: &VehicleState,
    cmd: &ControlInput,
    act: &ActuatorState,
    p: &PlantParams,
) -> Result<(VehicleState, ActuatorState), PlantError> {
    cmd.validate()?;
    let h = p.inner_step;
    let mut x = pack(state, act);
    for _ in 0..p.substeps() {
        let k1 = full_rhs(&x, cmd, p)?;
        let k2 = full_rhs(&axpy8(&x, 0.5 * h, &k1), cmd, p)?;
        let k3 = full_rhs(&axpy8(&x, 0.5 * h, &k2), cmd, p)?;
        let k4 = full_rhs(&axpy8(&x, h, &k3), cmd, p)?;
        for i in 0..8 {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        post_substep(&mut x);
    }
    unpack(&x)
}

/// Forward-Euler integration of one sample period at an arbitrary inner step.
/// Used as an integration reference.
pub fn step_euler(
    state: &VehicleState,
    cmd: &ControlInput,
    act: &ActuatorState,
    p: &PlantParams,
    inner_step: f64,
) -> Result<(VehicleState, ActuatorState), PlantError> {
    let n = (DT / inner_step).round() as usize;
    let h = DT / n as f64;
    let mut x = pack(state, act);
    for _ in 0..n {
        let k = full_rhs(&x, cmd, p)?;
        x = axpy8(&x, h, &k);
        post_substep(&mut x);
    }
    unpack(&x)
}

/// Time-indexed `(state, input)` sequence at fixed `DT`: `K + 1` states for `K` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<VehicleState>,
    pub inputs: Vec<ControlInput>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Trajectory,
    /// Actuator state after the last completed step.
    pub actuator: ActuatorState,
    /// Set when the rollout stopped early; the trajectory holds the completed prefix.
    pub truncated: Option<(usize, PlantError)>,
}

/// Applies `inputs` in sequence from `initial`.
pub fn rollout(initial: &VehicleState, inputs: &[ControlInput], act: &ActuatorState, p: &PlantParams) -> Rollout {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*initial);
    let mut applied = Vec::with_capacity(inputs.len());
    let mut act = *act;
    let mut truncated = None;
    for (k, u) in inputs.iter().enumerate() {
        let cur = states[states.len() - 1];
        match step(&cur, u, &act, p) {
            Ok((next, next_act)) => {
                states.push(next);
                applied.push(*u);
                act = next_act;
            }
            Err(e) => {
                truncated = Some((k, e));
                break;
            }
        }
    }
    Rollout { trajectory: Trajectory { states, inputs: applied }, actuator: act, truncated }
}
