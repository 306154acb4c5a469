//! Open-loop prediction error, closed-loop tracking statistics and the CSV
//! report files built from them.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::datagen::Segment;
use crate::koopman::KoopmanModel;
use crate::linalg::LinalgError;
use crate::lti::{predict_open_loop_lti, LtiError, LtiSet};
use crate::mpc::{ClosedLoopLog, DoubleLaneChange, KktReport, StepLog, LOG_COLUMNS};
use crate::plant::{ControlInput, VehicleState};
use crate::units::{fmt_sig, squared_error_scale, state_from_report, state_to_report, REPORT_STATE_LABELS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("segment from episode {0} is not in the held-out set")]
    NotHeldOut(u64),
    #[error("no test trajectories")]
    Empty,
    #[error("log length mismatch: {0} rows vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.display().to_string(), source }
}

fn fmt_err(path: &Path, msg: impl ToString) -> EvalError {
    EvalError::Format { path: path.display().to_string(), msg: msg.to_string() }
}

/// Per-state squared error in report units, averaged over the predicted
/// steps of each trajectory and then over trajectories.
pub fn open_loop_mse<F>(segments: &[Segment], predict: F) -> Result<[f64; 6], EvalError>
where
    F: Fn(&Segment) -> Result<Vec<[f64; 6]>, EvalError> + Sync,
{
    if segments.is_empty() {
        return Err(EvalError::Empty);
    }
    let per_traj: Vec<[f64; 6]> = segments
        .par_iter()
        .map(|seg| {
            let pred = predict(seg)?;
            let steps = seg.steps();
            let mut acc = [0.0; 6];
            for k in 1..=steps {
                for i in 0..6 {
                    let e = pred[k][i] - seg.states[k][i];
                    acc[i] += e * e;
                }
            }
            Ok(acc.map(|v| v / steps as f64))
        })
        .collect::<Result<_, EvalError>>()?;
    let scale = squared_error_scale();
    let mut mse = [0.0; 6];
    for t in &per_traj {
        for i in 0..6 {
            mse[i] += t[i];
        }
    }
    Ok(std::array::from_fn(|i| mse[i] / per_traj.len() as f64 * scale[i]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopReport {
    pub trajectories: usize,
    pub koopman_mse: [f64; 6],
    pub lti_mse: [f64; 6],
}

/// Largest lifted-state norm over Koopman rollouts (`None` if any entry is non-finite).
pub fn max_lifted_norm(model: &KoopmanModel, segments: &[Segment]) -> Result<Option<f64>, EvalError> {
    let norms: Vec<Option<f64>> = segments
        .par_iter()
        .map(|seg| {
            let z0 = model.norm.normalize_state(&seg.states[0]);
            let inputs: Vec<[f64; 4]> = seg.inputs.iter().map(|u| model.norm.normalize_input(u)).collect();
            let psi = model.predict_lifted(&z0, &inputs)?;
            let mut worst = 0.0f64;
            for p in &psi {
                let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !n.is_finite() {
                    return Ok(None);
                }
                worst = worst.max(n);
            }
            Ok(Some(worst))
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(norms.into_iter().try_fold(0.0f64, |m, n| n.map(|v| m.max(v))))
}

/// Both predictors on every held-out trajectory from the true initial state and inputs.
pub fn eval_open_loop(
    koopman: &KoopmanModel,
    lti: &LtiSet,
    test: &[Segment],
    held_out: &[u64],
) -> Result<OpenLoopReport, EvalError> {
    let held: BTreeSet<u64> = held_out.iter().copied().collect();
    if let Some(seg) = test.iter().find(|s| !held.contains(&s.episode)) {
        return Err(EvalError::NotHeldOut(seg.episode));
    }
    for seg in test {
        lti.exact(seg.kappa)?;
    }
    let koopman_mse = open_loop_mse(test, |seg| Ok(koopman.predict_open_loop(&seg.states[0], &seg.inputs)?))?;
    let lti_mse = open_loop_mse(test, |seg| {
        Ok(predict_open_loop_lti(lti.exact(seg.kappa)?, &lti.norm_stats, &seg.states[0], &seg.inputs))
    })?;
    Ok(OpenLoopReport { trajectories: test.len(), koopman_mse, lti_mse })
}

/// True and predicted trajectories side by side, in report units.
pub fn write_overlay_csv(koopman: &KoopmanModel, lti: &LtiSet, seg: &Segment, path: &Path) -> Result<(), EvalError> {
    let k = koopman.predict_open_loop(&seg.states[0], &seg.inputs)?;
    let l = predict_open_loop_lti(lti.exact(seg.kappa)?, &lti.norm_stats, &seg.states[0], &seg.inputs);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    let mut header = vec!["t".to_string()];
    for src in ["true", "koopman", "lti"] {
        header.extend(REPORT_STATE_LABELS.iter().map(|l| format!("{src}_{l}")));
    }
    writeln!(w, "{}", header.join(",")).map_err(io_err(path))?;
    for step in 0..seg.states.len() {
        let mut cells = vec![fmt_sig(step as f64 * seg.dt)];
        for x in [&seg.states[step], &k[step], &l[step]] {
            cells.extend(state_to_report(x).iter().map(|v| fmt_sig(*v)));
        }
        writeln!(w, "{}", cells.join(",")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingStats {
    pub controller: String,
    pub steps: usize,
    pub completed: bool,
    pub rms_e_y: f64,
    pub max_e_y: f64,
    /// Heading errors in degrees.
    pub rms_e_psi: f64,
    pub max_e_psi: f64,
    /// Speed errors in km/h.
    pub rms_vx: f64,
    pub max_vx: f64,
    pub solve_mean_ms: f64,
    pub solve_median_ms: f64,
    pub solve_p99_ms: f64,
    pub solve_total_ms: f64,
    pub median_iterations: f64,
    pub suboptimal_steps: usize,
    pub max_kkt: f64,
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Nearest-rank percentile, `p` in (0, 100].
pub fn percentile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * s.len() as f64).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}

/// Errors of the logged states against the references stored alongside them.
pub fn tracking_stats(log: &ClosedLoopLog, expected_steps: usize) -> Result<TrackingStats, EvalError> {
    if log.steps.is_empty() {
        return Err(EvalError::Empty);
    }
    let s = &log.steps;
    let e_y: Vec<f64> = s.iter().map(|r| r.state.e_y - r.reference.e_y).collect();
    let e_psi: Vec<f64> = s.iter().map(|r| (r.state.e_psi - r.reference.e_psi).to_degrees()).collect();
    let vx: Vec<f64> = s.iter().map(|r| (r.state.vx - r.reference.vx) * 3.6).collect();
    let times: Vec<f64> = s.iter().map(|r| r.solve_time_ms).collect();
    let iters: Vec<f64> = s.iter().map(|r| r.iterations as f64).collect();
    Ok(TrackingStats {
        controller: log.controller.clone(),
        steps: s.len(),
        completed: log.failure.is_none() && s.len() == expected_steps,
        rms_e_y: rms(&e_y),
        max_e_y: max_abs(&e_y),
        rms_e_psi: rms(&e_psi),
        max_e_psi: max_abs(&e_psi),
        rms_vx: rms(&vx),
        max_vx: max_abs(&vx),
        solve_mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        solve_median_ms: median(&times),
        solve_p99_ms: percentile(&times, 99.0),
        solve_total_ms: times.iter().sum(),
        median_iterations: median(&iters),
        suboptimal_steps: s.iter().filter(|r| r.suboptimal).count(),
        max_kkt: s.iter().map(|r| r.kkt.max()).fold(0.0, f64::max),
    })
}

/// Statistics for two controllers run on the same scenario.
pub fn eval_closed_loop(a: &ClosedLoopLog, b: &ClosedLoopLog, expected_steps: usize) -> Result<Vec<TrackingStats>, EvalError> {
    if a.steps.len() != b.steps.len() {
        return Err(EvalError::LengthMismatch(a.steps.len(), b.steps.len()));
    }
    Ok(vec![tracking_stats(a, expected_steps)?, tracking_stats(b, expected_steps)?])
}

#[derive(Debug, Deserialize)]
struct LogRecord {
    t: f64,
    vx_kmh: f64,
    vy_kmh: f64,
    yaw_rate_degs: f64,
    delta_s_m: f64,
    e_y_m: f64,
    e_psi_deg: f64,
    throttle: f64,
    brake_n: f64,
    steering_deg: f64,
    e_y_ref_m: f64,
    solve_time_ms: f64,
    solver_iters: usize,
    suboptimal_flag: u8,
    kkt_max: f64,
}

/// Parses a closed-loop log written by the controller. Reference heading and
/// speed come from the scenario; only the lateral reference is logged.
pub fn read_log_csv(path: &Path, controller: &str, scenario: &DoubleLaneChange) -> Result<ClosedLoopLog, EvalError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| fmt_err(path, e))?;
    let mut steps = Vec::new();
    for rec in rdr.deserialize::<LogRecord>() {
        let r = rec.map_err(|e| fmt_err(path, e))?;
        let x = state_from_report(&[r.vx_kmh, r.vy_kmh, r.yaw_rate_degs, r.delta_s_m, r.e_y_m, r.e_psi_deg]);
        let mut reference = scenario.state_at(r.t);
        reference.e_y = r.e_y_ref_m;
        steps.push(StepLog {
            t: r.t,
            state: VehicleState::from_array(x),
            input: ControlInput {
                throttle: r.throttle,
                brake: r.brake_n,
                steering: r.steering_deg.to_radians(),
                curvature: scenario.kappa,
            },
            reference,
            solve_time_ms: r.solve_time_ms,
            iterations: r.solver_iters,
            suboptimal: r.suboptimal_flag != 0,
            kkt: KktReport { stationarity: r.kkt_max, primal: r.kkt_max, complementarity: r.kkt_max },
        });
    }
    let final_state = steps.last().map(|s| s.state).unwrap_or_default();
    Ok(ClosedLoopLog { controller: controller.to_string(), steps, final_state, failure: None })
}

/// True if the file's header row is the closed-loop log header.
pub fn is_log_csv(path: &Path) -> bool {
    csv::Reader::from_path(path)
        .and_then(|mut r| r.headers().cloned())
        .map(|h| h.iter().eq(LOG_COLUMNS.iter().copied()))
        .unwrap_or(false)
}

/// Where the numbers came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub entries: Vec<(String, String)>,
}

impl Provenance {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub provenance: Provenance,
    pub open_loop: Option<OpenLoopReport>,
    pub closed_loop: Vec<TrackingStats>,
}

pub const OPENLOOP_FILE: &str = "openloop_mse.csv";
pub const CLOSEDLOOP_FILE: &str = "closedloop.csv";
pub const PROVENANCE_FILE: &str = "provenance.csv";

const CLOSEDLOOP_COLUMNS: [&str; 17] = [
    "controller",
    "steps",
    "completed",
    "rms_e_y_m",
    "max_e_y_m",
    "rms_e_psi_deg",
    "max_e_psi_deg",
    "rms_vx_kmh",
    "max_vx_kmh",
    "solve_mean_ms",
    "solve_median_ms",
    "solve_p99_ms",
    "solve_total_ms",
    "median_iters",
    "suboptimal_steps",
    "max_kkt",
    "hardware",
];

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| fmt_err(path, e))?;
    w.write_record(header).map_err(|e| fmt_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| fmt_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>, EvalError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| fmt_err(path, e))?;
    rdr.records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()).map_err(|e| fmt_err(path, e)))
        .collect()
}

/// Writes every section (header-only when a section is empty).
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut header = vec!["model".to_string(), "trajectories".to_string()];
    header.extend(REPORT_STATE_LABELS.iter().map(|l| l.to_string()));
    let mut rows = Vec::new();
    if let Some(ol) = &report.open_loop {
        for (name, mse) in [("koopman", &ol.koopman_mse), ("lti", &ol.lti_mse)] {
            let mut r = vec![name.to_string(), ol.trajectories.to_string()];
            r.extend(mse.iter().map(|v| fmt_sig(*v)));
            rows.push(r);
        }
    }
    write_rows(&dir.join(OPENLOOP_FILE), &header, &rows)?;

    let header: Vec<String> = CLOSEDLOOP_COLUMNS.iter().map(|s| s.to_string()).collect();
    let hardware = report.provenance.get("hardware").unwrap_or("unknown");
    let rows: Vec<Vec<String>> = report
        .closed_loop
        .iter()
        .map(|s| {
            let mut r = vec![s.controller.clone(), s.steps.to_string(), u8::from(s.completed).to_string()];
            r.extend(
                [
                    s.rms_e_y,
                    s.max_e_y,
                    s.rms_e_psi,
                    s.max_e_psi,
                    s.rms_vx,
                    s.max_vx,
                    s.solve_mean_ms,
                    s.solve_median_ms,
                    s.solve_p99_ms,
                    s.solve_total_ms,
                    s.median_iterations,
                ]
                .iter()
                .map(|v| fmt_sig(*v)),
            );
            r.push(s.suboptimal_steps.to_string());
            r.push(fmt_sig(s.max_kkt));
            r.push(hardware.to_string());
            r
        })
        .collect();
    write_rows(&dir.join(CLOSEDLOOP_FILE), &header, &rows)?;

    let rows: Vec<Vec<String>> = report.provenance.entries.iter().map(|(k, v)| vec![k.clone(), v.clone()]).collect();
    write_rows(&dir.join(PROVENANCE_FILE), &["key".to_string(), "value".to_string()], &rows)
}

fn parse<T: std::str::FromStr>(path: &Path, cell: &str) -> Result<T, EvalError> {
    cell.parse().map_err(|_| fmt_err(path, format!("bad cell {cell:?}")))
}

/// Reads whichever report files exist in `dir`.
pub fn read_report(dir: &Path) -> Result<EvalReport, EvalError> {
    let mut report = EvalReport::default();
    let path = dir.join(PROVENANCE_FILE);
    if path.exists() {
        for r in read_rows(&path)? {
            if r.len() != 2 {
                return Err(fmt_err(&path, "expected key,value rows"));
            }
            report.provenance.set(&r[0], &r[1]);
        }
    }
    let path = dir.join(OPENLOOP_FILE);
    if path.exists() {
        let rows = read_rows(&path)?;
        let find = |name: &str| rows.iter().find(|r| r.first().map(String::as_str) == Some(name));
        if let (Some(k), Some(l)) = (find("koopman"), find("lti")) {
            let mse = |r: &Vec<String>| -> Result<[f64; 6], EvalError> {
                if r.len() != 8 {
                    return Err(fmt_err(&path, "expected 8 columns"));
                }
                let mut out = [0.0; 6];
                for i in 0..6 {
                    out[i] = parse(&path, &r[2 + i])?;
                }
                Ok(out)
            };
            report.open_loop =
                Some(OpenLoopReport { trajectories: parse(&path, &k[1])?, koopman_mse: mse(k)?, lti_mse: mse(l)? });
        }
    }
    let path = dir.join(CLOSEDLOOP_FILE);
    if path.exists() {
        for r in read_rows(&path)? {
            if r.len() != CLOSEDLOOP_COLUMNS.len() {
                return Err(fmt_err(&path, "wrong column count"));
            }
            let f = |i: usize| parse::<f64>(&path, &r[i]);
            report.closed_loop.push(TrackingStats {
                controller: r[0].clone(),
                steps: parse(&path, &r[1])?,
                completed: r[2] == "1",
                rms_e_y: f(3)?,
                max_e_y: f(4)?,
                rms_e_psi: f(5)?,
                max_e_psi: f(6)?,
                rms_vx: f(7)?,
                max_vx: f(8)?,
                solve_mean_ms: f(9)?,
                solve_median_ms: f(10)?,
                solve_p99_ms: f(11)?,
                solve_total_ms: f(12)?,
                median_iterations: f(13)?,
                suboptimal_steps: parse(&path, &r[14])?,
                max_kkt: f(15)?,
            });
        }
    }
    Ok(report)
}

/// Human-readable digest of a report.
pub fn summary_text(report: &EvalReport) -> String {
    let mut out = String::from("mdk evaluation summary\n\n");
    for (k, v) in &report.provenance.entries {
        out.push_str(&format!("{k}: {v}\n"));
    }
    if let Some(ol) = &report.open_loop {
        out.push_str(&format!("\nopen-loop {}-step MSE over {} test trajectories\n", 80, ol.trajectories));
        out.push_str(&format!("{:<16}{:>14}{:>14}{:>10}\n", "state", "koopman", "lti", "ratio"));
        for i in 0..6 {
            out.push_str(&format!(
                "{:<16}{:>14}{:>14}{:>10}\n",
                REPORT_STATE_LABELS[i],
                fmt_sig(ol.koopman_mse[i]),
                fmt_sig(ol.lti_mse[i]),
                fmt_sig(ol.lti_mse[i] / ol.koopman_mse[i])
            ));
        }
    }
    if !report.closed_loop.is_empty() {
        out.push_str("\nclosed-loop tracking\n");
        for s in &report.closed_loop {
            out.push_str(&format!(
                "{}: {} steps{}; e_y rms {} m max {} m; e_psi rms {} deg; vx rms {} km/h\n",
                s.controller,
                s.steps,
                if s.completed { "" } else { " (incomplete)" },
                fmt_sig(s.rms_e_y),
                fmt_sig(s.max_e_y),
                fmt_sig(s.rms_e_psi),
                fmt_sig(s.rms_vx)
            ));
            out.push_str(&format!(
                "  solve ms mean {} median {} p99 {} total {}; median iters {}; suboptimal {}; max kkt {}\n",
                fmt_sig(s.solve_mean_ms),
                fmt_sig(s.solve_median_ms),
                fmt_sig(s.solve_p99_ms),
                fmt_sig(s.solve_total_ms),
                fmt_sig(s.median_iterations),
                s.suboptimal_steps,
                fmt_sig(s.max_kkt)
            ));
        }
    }
    out
}

/// CPU model and logical core count.
pub fn hardware_string() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|s| s.trim().to_string()))
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu} ({cores} logical cores)")
}

/// `git describe --always --dirty` of the working directory, if available.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String, EvalError> {
    Ok(crate::sha256_hex(&std::fs::read(path).map_err(io_err(path))?))
}
