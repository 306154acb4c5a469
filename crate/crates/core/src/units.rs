//! Report units (km/h, deg/s, m, deg) and fixed-precision number formatting.

const MPS_TO_KMH: f64 = 3.6;

/// Converts `[vx, vy, ψ̇, Δs, e_y, e_ψ]` from SI to km/h, km/h, deg/s, m, m, deg.
pub fn state_to_report(x: &[f64; 6]) -> [f64; 6] {
    [x[0] * MPS_TO_KMH, x[1] * MPS_TO_KMH, x[2].to_degrees(), x[3], x[4], x[5].to_degrees()]
}

pub fn state_from_report(x: &[f64; 6]) -> [f64; 6] {
    [x[0] / MPS_TO_KMH, x[1] / MPS_TO_KMH, x[2].to_radians(), x[3], x[4], x[5].to_radians()]
}

/// Per-state factor that maps an SI squared error to report units.
pub fn squared_error_scale() -> [f64; 6] {
    let d = 1f64.to_degrees();
    [MPS_TO_KMH * MPS_TO_KMH, MPS_TO_KMH * MPS_TO_KMH, d * d, 1.0, 1.0, d * d]
}

pub const REPORT_STATE_LABELS: [&str; 6] =
    ["vx_kmh", "vy_kmh", "yaw_rate_degs", "delta_s_m", "e_y_m", "e_psi_deg"];

/// Six significant digits, plain notation for moderate magnitudes.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let exp: i32 = sci.split('e').nth(1).and_then(|e| e.parse().ok()).unwrap_or(0);
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        sci
    }
}
