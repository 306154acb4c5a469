//! Reference trajectories for closed-loop runs.

use serde::{Deserialize, Serialize};

use crate::plant::{VehicleState, DT};

/// Double lane change on a constant-curvature road.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DoubleLaneChange {
    pub kappa: f64,
    /// Reference speed (m/s).
    pub speed: f64,
    /// Lateral offset of the adjacent lane (m).
    pub offset: f64,
    pub change_out: (f64, f64),
    pub change_back: (f64, f64),
    pub duration: f64,
}

impl Default for DoubleLaneChange {
    fn default() -> Self {
        Self {
            kappa: 0.001,
            speed: 60.0 / 3.6,
            offset: 3.5,
            change_out: (2.0, 3.5),
            change_back: (5.5, 7.0),
            duration: 10.0,
        }
    }
}

/// Quintic smooth step on `[0, 1]` and its first two derivatives.
fn smooth_step(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if s >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let (s2, s3) = (s * s, s * s * s);
    (
        s3 * (10.0 - 15.0 * s + 6.0 * s2),
        30.0 * s2 * (1.0 - s) * (1.0 - s),
        60.0 * s * (1.0 - s) * (1.0 - 2.0 * s),
    )
}

impl DoubleLaneChange {
    pub fn steps(&self) -> usize {
        (self.duration / DT).round() as usize
    }

    /// Lateral offset reference and its first two time derivatives.
    pub fn lateral(&self, t: f64) -> (f64, f64, f64) {
        let mut out = (0.0, 0.0, 0.0);
        for ((t0, t1), sign) in [(self.change_out, 1.0), (self.change_back, -1.0)] {
            let len = t1 - t0;
            let (p, v, a) = smooth_step((t - t0) / len);
            out.0 += sign * self.offset * p;
            out.1 += sign * self.offset * v / len;
            out.2 += sign * self.offset * a / (len * len);
        }
        out
    }

    /// Kinematically consistent reference state at time `t` with zero lateral velocity.
    pub fn state_at(&self, t: f64) -> VehicleState {
        let vx = self.speed;
        let (e_y, dy, ddy) = self.lateral(t);
        let sin_psi = dy / vx;
        let e_psi = sin_psi.asin();
        let cos_psi = (1.0 - sin_psi * sin_psi).sqrt();
        let e_psi_rate = ddy / (vx * cos_psi);
        let s_dot = vx * cos_psi / (1.0 - self.kappa * e_y);
        VehicleState { vx, vy: 0.0, yaw_rate: e_psi_rate + self.kappa * s_dot, delta_s: vx * DT, e_y, e_psi }
    }

    /// Reference for steps `0..=steps + extra`; the tail lets a receding
    /// horizon look past the end of the run.
    pub fn reference(&self, extra: usize) -> Vec<VehicleState> {
        (0..=self.steps() + extra).map(|k| self.state_at(k as f64 * DT)).collect()
    }

    pub fn initial_state(&self) -> VehicleState {
        self.state_at(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_and_ends_on_the_centre_line() {
        let s = DoubleLaneChange::default();
        let r = s.reference(20);
        assert_eq!(r[0].e_y, 0.0);
        assert_eq!(r[s.steps()].e_y, 0.0);
        assert!((s.state_at(4.5).e_y - 3.5).abs() < 1e-12);
        assert_eq!(r.len(), 421);
    }

    #[test]
    fn lateral_rate_is_continuous_and_bounded() {
        let s = DoubleLaneChange::default();
        let mut prev = s.lateral(0.0).1;
        let mut peak = 0.0f64;
        for k in 1..=100_000 {
            let v = s.lateral(k as f64 * 1e-4).1;
            assert!((v - prev).abs() < 1e-3);
            peak = peak.max(v.abs());
            prev = v;
        }
        assert!((peak - 1.875 * 3.5 / 1.5).abs() < 1e-6);
    }

    #[test]
    fn heading_reference_integrates_to_the_offset() {
        let s = DoubleLaneChange::default();
        // Simpson's rule on ė_y = vx·sin(e_ψ) + vy·cos(e_ψ)
        let rate = |t: f64| {
            let x = s.state_at(t);
            x.vx * x.e_psi.sin() + x.vy * x.e_psi.cos()
        };
        let h = 1e-3;
        let mut y = 0.0;
        for k in 0..10_000 {
            let t = k as f64 * h;
            y += h / 6.0 * (rate(t) + 4.0 * rate(t + 0.5 * h) + rate(t + h));
            let truth = s.lateral(t + h).0;
            assert!((y - truth).abs() < 1e-6, "t={t}: {y} vs {truth}");
        }
    }

    #[test]
    fn yaw_rate_matches_heading_kinematics() {
        let s = DoubleLaneChange::default();
        let h = 1e-5;
        for t in [2.3, 2.75, 3.1, 5.9, 6.6] {
            let x = s.state_at(t);
            let d_psi = (s.state_at(t + h).e_psi - s.state_at(t - h).e_psi) / (2.0 * h);
            let s_dot = x.vx * x.e_psi.cos() / (1.0 - s.kappa * x.e_y);
            assert!((x.yaw_rate - (d_psi + s.kappa * s_dot)).abs() < 1e-6);
        }
    }
}
