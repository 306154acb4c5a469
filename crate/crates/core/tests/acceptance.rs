//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p mdk-core --test acceptance -- 3 7` runs a subset. The desk-scale
//! run behind criteria 4, 5, 8 and 9 trains for 5000 iterations on 700 episodes.
//! Set `MDK_ACCEPTANCE_STRICT=1` to turn any FAIL into a non-zero exit.

use std::error::Error;
use std::sync::OnceLock;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mdk_core::datagen::{generate_dataset, split_episodes, write_dataset, Dataset, InputLibraries, NormStats, Segment};
use mdk_core::eval::{eval_open_loop, hardware_string, max_lifted_norm, tracking_stats, OpenLoopReport, TrackingStats};
use mdk_core::koopman::{
    loss_gradient, loss_multi_step, loss_regularization, loss_single_step, loss_stability, loss_total, train, Batch,
    Checkpoint, CheckpointConfig, EncoderConfig, KoopmanModel, LossWeights, TrainConfig,
};
use mdk_core::linalg::eigenvalues;
use mdk_core::lti::{LtiSet, DEFAULT_RIDGE};
use mdk_core::mpc::{closed_loop, solve_qp, write_log_csv, ClosedLoopLog, ControlModel, DoubleLaneChange, MpcConfig, QpProblem, QpSettings};
use mdk_core::plant::PlantParams;
use mdk_core::Matrix;

type Res<T> = Result<T, Box<dyn Error>>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Res<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| scale * gaussian(rng)).collect()).unwrap()
}

// ---------------------------------------------------------------- naive oracles

/// Encoder output by explicit loops, `x·W + b` per layer.
fn naive_encode(model: &KoopmanModel, z: &[f64]) -> Vec<f64> {
    let mut h = z.to_vec();
    let last = model.layers.len() - 1;
    for (l, layer) in model.layers.iter().enumerate() {
        let (fan_in, fan_out) = layer.w.shape();
        let mut out = vec![0.0; fan_out];
        for j in 0..fan_out {
            let mut s = layer.b[(0, j)];
            for i in 0..fan_in {
                s += h[i] * layer.w[(i, j)];
            }
            out[j] = if l < last { s.max(0.0) } else { s };
        }
        h = out;
    }
    h
}

fn naive_lift(model: &KoopmanModel, z: &[f64]) -> Vec<f64> {
    let mut psi = z.to_vec();
    psi.extend(naive_encode(model, z));
    psi
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| (0..m.cols()).map(|j| m[(i, j)] * v[j]).sum()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn naive_ssl(model: &KoopmanModel, segs: &[Segment]) -> f64 {
    let mut total = 0.0;
    for s in segs {
        let k = s.inputs.len();
        for i in 0..k {
            let psi = naive_lift(model, &s.states[i]);
            let next = naive_lift(model, &s.states[i + 1]);
            let a = mat_vec(&model.a, &psi);
            let b = mat_vec(&model.b, &s.inputs[i]);
            let pred: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            total += sq_dist(&next, &pred) / k as f64;
        }
    }
    total / segs.len() as f64
}

/// Multi-step loss with predictions from explicit matrix powers:
/// `ψ̂_i = A^i ψ_0 + Σ_{t=1..i} A^{t−1} B u_{i−t}`.
fn naive_msl(model: &KoopmanModel, segs: &[Segment], beta: f64) -> f64 {
    let n = model.a.rows();
    let k = segs[0].inputs.len();
    let mut powers = vec![Matrix::identity(n)];
    for i in 1..=k {
        let mut p = Matrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                p[(r, c)] = (0..n).map(|m| powers[i - 1][(r, m)] * model.a[(m, c)]).sum();
            }
        }
        powers.push(p);
    }
    let norm: f64 = (1..k).map(|i| beta.powi(i as i32)).sum();
    let mut total = 0.0;
    for s in segs {
        let psi0 = naive_lift(model, &s.states[0]);
        for i in 1..k {
            let mut pred = mat_vec(&powers[i], &psi0);
            for t in 1..=i {
                let bu = mat_vec(&model.b, &s.inputs[i - t]);
                let contrib = mat_vec(&powers[t - 1], &bu);
                pred.iter_mut().zip(&contrib).for_each(|(p, c)| *p += c);
            }
            total += beta.powi(i as i32) * sq_dist(&naive_lift(model, &s.states[i]), &pred);
        }
    }
    total / (norm * segs.len() as f64)
}

fn naive_reg(model: &KoopmanModel, w: &LossWeights) -> f64 {
    let mut enc = 0.0;
    for l in &model.layers {
        for v in l.w.as_slice().iter().chain(l.b.as_slice()) {
            enc += v * v;
        }
    }
    let mut koop = 0.0;
    for v in model.a.as_slice().iter().chain(model.b.as_slice()) {
        koop += v * v;
    }
    w.lambda_encoder * enc + w.lambda_koopman * koop
}

fn random_segments(count: usize, steps: usize, rng: &mut impl Rng) -> Vec<Segment> {
    (0..count)
        .map(|j| Segment {
            episode: j as u64,
            segment: 0,
            kappa: 0.0,
            dt: 0.025,
            states: (0..=steps).map(|_| std::array::from_fn(|_| gaussian(rng))).collect(),
            inputs: (0..steps).map(|_| std::array::from_fn(|_| gaussian(rng))).collect(),
        })
        .collect()
}

fn tiny_model(latent: usize, hidden: Vec<usize>, rng: &mut ChaCha8Rng) -> KoopmanModel {
    let cfg = EncoderConfig { input_dim: 6, hidden, latent };
    let mut m = KoopmanModel::initialize(&cfg, NormStats::identity(), rng.random());
    for l in &mut m.layers {
        l.b = random_matrix(1, l.b.cols(), 0.3, rng);
    }
    let n = cfg.observable_dim();
    m.a = Matrix::identity(n).scale(0.9).add(&random_matrix(n, n, 0.15, rng)).unwrap();
    m.b = random_matrix(n, 4, 0.3, rng);
    m
}

/// Matrix `V diag(blocks) V⁻¹` with prescribed eigenvalues.
fn with_spectrum(values: &[Complex64], rng: &mut impl Rng) -> Matrix {
    let n = values.len();
    let mut d = Matrix::zeros(n, n);
    let mut i = 0;
    while i < n {
        let v = values[i];
        if v.im == 0.0 {
            d[(i, i)] = v.re;
            i += 1;
        } else {
            d[(i, i)] = v.re;
            d[(i, i + 1)] = v.im;
            d[(i + 1, i)] = -v.im;
            d[(i + 1, i + 1)] = v.re;
            i += 2;
        }
    }
    let v = Matrix::identity(n).add(&random_matrix(n, n, 0.2, rng)).unwrap();
    // R = (V D) V⁻¹, row by row from Vᵀ rᵢ = xᵢ
    let x = v.matmul(&d).unwrap();
    let lu = mdk_core::linalg::Lu::factor(&v.transpose()).unwrap();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| lu.solve(x.row(i)).unwrap()).collect();
    Matrix::from_rows(&rows).unwrap()
}

// ---------------------------------------------------------------- criteria

fn c1_gradients() -> Res<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let w = LossWeights::default();
    // a point away from ReLU kinks and from |λ| = 1, with the hinge active
    let (model, segs) = loop {
        let mut m = tiny_model(4, vec![8, 6], &mut rng);
        m.a = m.a.add(&Matrix::identity(10).scale(0.12)).unwrap();
        let segs = random_segments(2, 5, &mut rng);
        let kink_free = segs.iter().flat_map(|s| &s.states).all(|z| {
            let mut h = z.to_vec();
            m.layers[..m.layers.len() - 1].iter().all(|l| {
                let pre: Vec<f64> =
                    (0..l.w.cols()).map(|j| l.b[(0, j)] + (0..l.w.rows()).map(|i| h[i] * l.w[(i, j)]).sum::<f64>()).collect();
                let ok = pre.iter().all(|v| v.abs() > 1e-3);
                h = pre.iter().map(|v| v.max(0.0)).collect();
                ok
            })
        });
        let spec = eigenvalues(&m.a)?;
        let off_circle = spec.values.iter().all(|v| (v.norm() - 1.0).abs() > 1e-3);
        let active = spec.spectral_radius() > 1.0;
        if kink_free && off_circle && active {
            break (m, segs);
        }
    };
    let refs: Vec<&Segment> = segs.iter().collect();
    let batch = Batch::from_segments(&refs)?;
    let (_, grads) = loss_gradient(&model, &batch, &w)?;

    // fourth-order central stencil; 2h stays inside the kink margin above
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let blocks = model.params().len();
    for p in 0..blocks {
        for idx in 0..model.params()[p].as_slice().len() {
            let eval = |delta: f64| -> Res<f64> {
                let mut m = model.clone();
                m.params_mut()[p].as_mut_slice()[idx] += delta;
                Ok(loss_total(&m, &batch, &w)?.total)
            };
            let fd = (8.0 * (eval(h)? - eval(-h)?) - (eval(2.0 * h)? - eval(-2.0 * h)?)) / (12.0 * h);
            let g = grads[p].as_slice()[idx];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-4);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst <= 1e-5 && secs < 10.0, format!("{checked} parameters, worst relative error {worst:.2e}, {secs:.2} s"))
}

fn c2_loss_oracles() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let w = LossWeights::default();
    let mut worst = [0.0f64; 5];
    for _ in 0..100 {
        let latent = rng.random_range(1..=4);
        let hidden = vec![rng.random_range(2..=6); rng.random_range(1..=2)];
        let mut model = tiny_model(latent, hidden, &mut rng);
        let segs = random_segments(rng.random_range(1..=3), rng.random_range(2..=5), &mut rng);
        let refs: Vec<&Segment> = segs.iter().collect();
        let batch = Batch::from_segments(&refs)?;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);

        worst[0] = worst[0].max(rel(loss_single_step(&model, &batch)?, naive_ssl(&model, &segs)));
        worst[1] = worst[1].max(rel(loss_multi_step(&model, &batch, w.beta)?, naive_msl(&model, &segs, w.beta)));
        worst[3] = worst[3].max(rel(loss_regularization(&model, &w), naive_reg(&model, &w)));

        // stability hinge on a matrix with known eigenvalues
        let n = model.a.rows();
        let mut values = Vec::new();
        while values.len() < n {
            let r = rng.random_range(0.2..1.6);
            if n - values.len() >= 2 && rng.random_bool(0.5) {
                let th = rng.random_range(0.3..2.8f64);
                values.push(Complex64::from_polar(r, th));
                values.push(Complex64::from_polar(r, -th));
            } else {
                values.push(Complex64::new(if rng.random_bool(0.5) { r } else { -r }, 0.0));
            }
        }
        model.a = with_spectrum(&values, &mut rng);
        let hinge: f64 = values.iter().map(|v| (v.norm() - 1.0).max(0.0)).sum();
        worst[2] = worst[2].max(rel(loss_stability(&model.a)?, hinge));

        let t = loss_total(&model, &batch, &w)?;
        let manual = w.single_step * naive_ssl(&model, &segs)
            + w.multi_step * naive_msl(&model, &segs, w.beta)
            + w.stability * hinge
            + w.regularization * naive_reg(&model, &w);
        worst[4] = worst[4].max(rel(t.total, manual));
    }
    let pass = worst.iter().all(|v| *v <= 1e-10);
    verdict(
        pass,
        format!(
            "100 instances; worst relative error ssl {:.1e} msl {:.1e} sl {:.1e} reg {:.1e} total {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

/// `log|det(M)|` of a complex matrix by Gaussian elimination with partial pivoting.
fn log_abs_det(mut m: Vec<Vec<Complex64>>) -> f64 {
    let n = m.len();
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| m[i][k].norm().total_cmp(&m[j][k].norm())).unwrap();
        m.swap(k, p);
        let piv = m[k][k];
        if piv.norm() == 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += piv.norm().ln();
        for i in k + 1..n {
            let f = m[i][k] / piv;
            for j in k..n {
                let v = m[k][j];
                m[i][j] -= f * v;
            }
        }
    }
    acc
}

fn c3_eigensolver() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let n = 66;
    let mut worst_newton = 0.0f64;
    for _ in 0..5 {
        let a = random_matrix(n, n, 1.0 / (n as f64).sqrt(), &mut rng);
        let spec = eigenvalues(&a)?;
        if spec.len() != n {
            return verdict(false, format!("expected {n} eigenvalues, got {}", spec.len()));
        }
        for (i, &lam) in spec.values.iter().enumerate() {
            let m: Vec<Vec<Complex64>> = (0..n)
                .map(|r| (0..n).map(|c| Complex64::new(a[(r, c)], 0.0) - if r == c { lam } else { Complex64::new(0.0, 0.0) }).collect())
                .collect();
            // |p(λ)| / |p'(λ)|: the Newton step to the nearest root of the characteristic polynomial
            let others: f64 = spec.values.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| (v - lam).norm().ln()).sum();
            worst_newton = worst_newton.max((log_abs_det(m) - others).exp());
        }
    }

    let sorted = |mut v: Vec<Complex64>| {
        v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        v
    };
    let mut worst_exact = 0.0f64;
    for _ in 0..50 {
        let (p, q, r, s): (f64, f64, f64, f64) =
            (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let a = Matrix::from_rows(&[vec![p, q], vec![r, s]])?;
        let (tr, det) = (p + s, p * s - q * r);
        let disc = Complex64::new(tr * tr / 4.0 - det, 0.0).sqrt();
        let want = sorted(vec![tr / 2.0 + disc, tr / 2.0 - disc]);
        let got = sorted(eigenvalues(&a)?.values);
        for (g, w) in got.iter().zip(&want) {
            worst_exact = worst_exact.max((g - w).norm());
        }
        // companion matrix of (λ − r1)(λ − (c + di))(λ − (c − di))
        let (r1, c, d): (f64, f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..1.5));
        let (e1, e2) = (2.0 * c + r1, c * c + d * d + 2.0 * c * r1);
        let e3 = r1 * (c * c + d * d);
        let comp = Matrix::from_rows(&[vec![e1, -e2, e3], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]])?;
        let want = sorted(vec![Complex64::new(r1, 0.0), Complex64::new(c, d), Complex64::new(c, -d)]);
        let got = sorted(eigenvalues(&comp)?.values);
        for (g, w) in got.iter().zip(&want) {
            worst_exact = worst_exact.max((g - w).norm());
        }
    }
    verdict(
        worst_newton <= 1e-6 && worst_exact <= 1e-10,
        format!("66x66 worst root distance {worst_newton:.2e}; 2x2/3x3 worst error {worst_exact:.2e}"),
    )
}

/// Brute force over every lower/upper/free pattern.
fn enumerate_box_qp(h: &Matrix, g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let n = g.len();
    let mut best = f64::INFINITY;
    let mut pattern = vec![0u8; n];
    loop {
        let mut x = vec![0.0; n];
        let free: Vec<usize> = (0..n).filter(|&i| pattern[i] == 2).collect();
        for i in 0..n {
            x[i] = match pattern[i] {
                0 => lo[i],
                1 => hi[i],
                _ => 0.0,
            };
        }
        let m = free.len();
        let mut aug: Vec<Vec<f64>> = free
            .iter()
            .map(|&i| {
                let mut row: Vec<f64> = free.iter().map(|&j| h[(i, j)]).collect();
                let rhs = -g[i] - (0..n).filter(|j| pattern[*j] != 2).map(|j| h[(i, j)] * x[j]).sum::<f64>();
                row.push(rhs);
                row
            })
            .collect();
        for k in 0..m {
            let p = (k..m).max_by(|&a, &b| aug[a][k].abs().total_cmp(&aug[b][k].abs())).unwrap();
            aug.swap(k, p);
            for i in k + 1..m {
                let f = aug[i][k] / aug[k][k];
                for j in k..=m {
                    aug[i][j] -= f * aug[k][j];
                }
            }
        }
        for k in (0..m).rev() {
            let s: f64 = (k + 1..m).map(|j| aug[k][j] * x[free[j]]).sum();
            x[free[k]] = (aug[k][m] - s) / aug[k][k];
        }
        if free.iter().all(|&i| x[i] >= lo[i] - 1e-12 && x[i] <= hi[i] + 1e-12) {
            let f: f64 = (0..n).map(|i| 0.5 * x[i] * (0..n).map(|j| h[(i, j)] * x[j]).sum::<f64>() + g[i] * x[i]).sum();
            best = best.min(f);
        }
        // next pattern in base 3
        let mut i = 0;
        while i < n && pattern[i] == 2 {
            pattern[i] = 0;
            i += 1;
        }
        if i == n {
            break;
        }
        pattern[i] += 1;
    }
    best
}

fn c7_qp(desk: &Desk) -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for k in 0..500 {
        let n = 1 + k % 12;
        let m = random_matrix(n, n, 1.0, &mut rng);
        let h = m.t_matmul(&m)?.add(&Matrix::identity(n).scale(0.1))?;
        let g: Vec<f64> = (0..n).map(|_| 3.0 * gaussian(&mut rng)).collect();
        let lower: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..0.5)).collect();
        let upper: Vec<f64> = lower.iter().map(|l| l + rng.random_range(0.1..2.5)).collect();
        let qp = QpProblem { h: h.clone(), g: g.clone(), lower: lower.clone(), upper: upper.clone() };
        let sol = solve_qp(&qp, QpSettings::default(), None)?;
        let oracle = enumerate_box_qp(&h, &g, &lower, &upper);
        worst = worst.max((qp.objective(&sol.x) - oracle).abs());
    }
    let kkt = desk.koopman_log.steps.iter().chain(&desk.lti_log.steps).map(|s| s.kkt.max()).fold(0.0, f64::max);
    let solves = desk.koopman_log.steps.len() + desk.lti_log.steps.len();
    verdict(
        worst <= 1e-8 && kkt <= 1e-6,
        format!("500 QPs worst objective gap {worst:.2e}; {solves} closed-loop solves worst KKT residual {kkt:.2e}"),
    )
}

/// Segments from a random stable lifted-linear system whose latent
/// coordinates copy the first four state coordinates.
fn synthetic_linear(episodes: usize, seed: u64) -> Vec<Segment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // orthogonal matrix by Gram-Schmidt, scaled inside the unit circle
    let mut q = random_matrix(6, 6, 1.0, &mut rng);
    for c in 0..6 {
        for p in 0..c {
            let d: f64 = (0..6).map(|r| q[(r, c)] * q[(r, p)]).sum();
            for r in 0..6 {
                q[(r, c)] -= d * q[(r, p)];
            }
        }
        let norm = (0..6).map(|r| q[(r, c)] * q[(r, c)]).sum::<f64>().sqrt();
        for r in 0..6 {
            q[(r, c)] /= norm;
        }
    }
    let a = q.scale(0.95);
    let b = random_matrix(6, 4, 0.2, &mut rng);
    (0..episodes)
        .map(|e| {
            let mut z: Vec<f64> = (0..6).map(|_| gaussian(&mut rng)).collect();
            let mut states = vec![std::array::from_fn(|i| z[i])];
            let mut inputs = Vec::new();
            for _ in 0..80 {
                let u: [f64; 4] = std::array::from_fn(|_| gaussian(&mut rng));
                let az = mat_vec(&a, &z);
                let bu = mat_vec(&b, &u);
                z = az.iter().zip(&bu).map(|(x, y)| x + y).collect();
                states.push(std::array::from_fn(|i| z[i]));
                inputs.push(u);
            }
            Segment { episode: e as u64, segment: 0, kappa: 0.0, dt: 0.025, states, inputs }
        })
        .collect()
}

fn c6_synthetic() -> Res<Verdict> {
    let data = synthetic_linear(600, 606);
    let (train_set, test_set) = data.split_at(540);
    let mut cfg = TrainConfig {
        encoder: EncoderConfig { input_dim: 6, hidden: vec![16], latent: 4 },
        max_iterations: 2000,
        eval_every: 250,
        ..Default::default()
    };
    cfg.adam.lr = 1e-2;
    let out = train(train_set, test_set, NormStats::identity(), &cfg, 6)?;
    let msl = out.evaluations.iter().map(|e| e.test.msl).fold(f64::INFINITY, f64::min);
    let best_msl = out.evaluations.iter().find(|e| e.iteration == out.best_iteration).map(|e| e.test.msl).unwrap_or(msl);
    verdict(best_msl < 1e-4, format!("test msl {best_msl:.2e} for the best model (iteration {})", out.best_iteration))
}

// ---------------------------------------------------------------- desk-scale run

struct Desk {
    rho: f64,
    best_iteration: usize,
    open_loop: OpenLoopReport,
    max_psi_norm: Option<f64>,
    koopman_log: ClosedLoopLog,
    lti_log: ClosedLoopLog,
    koopman_stats: TrackingStats,
    lti_stats: TrackingStats,
    train_secs: f64,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| run_desk().expect("desk-scale run failed"))
}

fn run_desk() -> Res<Desk> {
    let start = Instant::now();
    let params = PlantParams::default();
    let ds = generate_dataset(700, &InputLibraries::default(), &params, 42)?;
    let cfg = TrainConfig::default();
    let (train_raw, test_raw) = split_episodes(&ds, cfg.train_fraction, ds.header.seed)?;
    let norm = NormStats::fit(&train_raw)?;
    let train_n: Vec<Segment> = train_raw.iter().map(|s| norm.normalize_segment(s)).collect();
    let test_n: Vec<Segment> = test_raw.iter().map(|s| norm.normalize_segment(s)).collect();
    eprintln!("desk run: {} train / {} test segments, training {} iterations", train_n.len(), test_n.len(), cfg.max_iterations);
    let t = Instant::now();
    let out = train(&train_n, &test_n, norm.clone(), &cfg, 42)?;
    let train_secs = t.elapsed().as_secs_f64();
    let koopman = out.best;
    let rho = eigenvalues(&koopman.a)?.spectral_radius();

    let lti = LtiSet::fit(&train_raw, &norm, DEFAULT_RIDGE)?;
    let mut held: Vec<u64> = test_raw.iter().map(|s| s.episode).collect();
    held.dedup();
    let open_loop = eval_open_loop(&koopman, &lti, &test_raw, &held)?;
    let max_psi_norm = max_lifted_norm(&koopman, &test_raw)?;

    let scenario = DoubleLaneChange::default();
    let mpc = MpcConfig::default();
    let koopman_log = closed_loop(ControlModel::Koopman(koopman.clone()), &params, &scenario, &mpc)?;
    let lti_log = closed_loop(ControlModel::Lti(lti), &params, &scenario, &mpc)?;
    let koopman_stats = tracking_stats(&koopman_log, scenario.steps())?;
    let lti_stats = tracking_stats(&lti_log, scenario.steps())?;
    eprintln!("desk run finished in {:.0} s", start.elapsed().as_secs_f64());
    Ok(Desk {
        rho,
        best_iteration: out.best_iteration,
        open_loop,
        max_psi_norm,
        koopman_log,
        lti_log,
        koopman_stats,
        lti_stats,
        train_secs,
    })
}

fn c4_stability(d: &Desk) -> Res<Verdict> {
    let bounded = d.max_psi_norm.is_some_and(|n| n <= 1e3);
    verdict(
        d.rho <= 1.0 + 1e-3 && bounded,
        format!(
            "spectral radius {:.6} (best iteration {}, {:.0} s training); max lifted norm over {} test rollouts {}",
            d.rho,
            d.best_iteration,
            d.train_secs,
            d.open_loop.trajectories,
            d.max_psi_norm.map_or("non-finite".to_string(), |n| format!("{n:.3}"))
        ),
    )
}

fn c5_ordering(d: &Desk) -> Res<Verdict> {
    let ol = &d.open_loop;
    let ratio: Vec<f64> = (0..6).map(|i| ol.lti_mse[i] / ol.koopman_mse[i]).collect();
    let better = ratio.iter().filter(|r| **r > 1.0).count();
    let (vy, ey) = (ratio[1], ratio[4]);
    let cells: Vec<String> = ["vx", "vy", "yaw", "ds", "ey", "epsi"]
        .iter()
        .zip(&ratio)
        .zip(ol.koopman_mse.iter().zip(&ol.lti_mse))
        .map(|((n, r), (k, l))| format!("{n} {k:.3e}/{l:.3e} (x{r:.2})"))
        .collect();
    verdict(
        better >= 5 && vy >= 2.0 && ey >= 2.0,
        format!("koopman better on {better}/6 states; koopman/lti MSE: {}", cells.join(", ")),
    )
}

fn c8_closed_loop(d: &Desk) -> Res<Verdict> {
    let (k, l) = (&d.koopman_stats, &d.lti_stats);
    verdict(
        k.completed && k.rms_e_y < l.rms_e_y && k.max_e_y < 0.5,
        format!(
            "koopman e_y rms {:.3} m max {:.3} m ({} steps); lti e_y rms {:.3} m max {:.3} m ({} steps)",
            k.rms_e_y, k.max_e_y, k.steps, l.rms_e_y, l.max_e_y, l.steps
        ),
    )
}

fn c9_timing(d: &Desk) -> Res<Verdict> {
    let k = &d.koopman_stats;
    verdict(
        k.solve_median_ms <= 20.0,
        format!(
            "koopman median solve {:.3} ms, p99 {:.3} ms, total {:.1} ms, median iterations {}; hardware {}",
            k.solve_median_ms,
            k.solve_p99_ms,
            k.solve_total_ms,
            k.median_iterations,
            hardware_string()
        ),
    )
}

fn c10_determinism() -> Res<Verdict> {
    let dir = tempfile::tempdir()?;
    let libs = InputLibraries::default();
    let params = PlantParams::default();
    let files: Vec<Dataset> = [1usize, 4]
        .iter()
        .map(|&threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| generate_dataset(60, &libs, &params, 10))
        })
        .collect::<Result<_, _>>()?;
    let paths = [dir.path().join("a.ndjson"), dir.path().join("b.ndjson")];
    for (ds, p) in files.iter().zip(&paths) {
        write_dataset(ds, p)?;
    }
    let data_same = std::fs::read(&paths[0])? == std::fs::read(&paths[1])?;

    let ds = &files[0];
    let cfg = TrainConfig { max_iterations: 40, eval_every: 20, batch_size: 32, ..Default::default() };
    let (train_raw, test_raw) = split_episodes(ds, cfg.train_fraction, ds.header.seed)?;
    let norm = NormStats::fit(&train_raw)?;
    let tr: Vec<Segment> = train_raw.iter().map(|s| norm.normalize_segment(s)).collect();
    let te: Vec<Segment> = test_raw.iter().map(|s| norm.normalize_segment(s)).collect();
    let mut checkpoints = Vec::new();
    let mut models = Vec::new();
    for threads in [1usize, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
        let out = pool.install(|| train(&tr, &te, norm.clone(), &cfg, 3))?;
        let config = CheckpointConfig {
            train: cfg.clone(),
            dataset_seed: ds.header.seed,
            plant_config_hash: ds.header.plant_config_hash.clone(),
            normalized_inputs: vec![],
            test_episodes: vec![],
        };
        checkpoints.push(Checkpoint::new(&out.best, config, 3, out.best_iteration, out.best_test_loss).to_json()?);
        models.push(out.best);
    }
    let train_same = checkpoints[0] == checkpoints[1];

    let scenario = DoubleLaneChange { duration: 3.0, ..Default::default() };
    let mut logs = Vec::new();
    for (i, m) in models.iter().enumerate() {
        let log = closed_loop(ControlModel::Koopman(m.clone()), &params, &scenario, &MpcConfig::default())?;
        let path = dir.path().join(format!("log{i}.csv"));
        write_log_csv(&log, &path)?;
        // wall-clock timing is the one column that cannot repeat
        let text = std::fs::read_to_string(&path)?;
        let stripped: Vec<String> = text
            .lines()
            .map(|l| l.split(',').enumerate().filter(|(j, _)| *j != 11).map(|(_, c)| c).collect::<Vec<_>>().join(","))
            .collect();
        logs.push(stripped);
    }
    let loop_same = logs[0] == logs[1];
    verdict(
        data_same && train_same && loop_same,
        format!(
            "dataset bytes equal: {data_same}; checkpoint bytes equal: {train_same}; closed-loop log equal (timing column excluded): {loop_same}"
        ),
    )
}

fn main() {
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |i: usize| filter.is_empty() || filter.contains(&i);
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Res<Verdict>>)> = vec![
        (1, "gradient suite", Box::new(c1_gradients)),
        (2, "loss oracles", Box::new(c2_loss_oracles)),
        (3, "eigensolver", Box::new(c3_eigensolver)),
        (4, "stability of the trained model", Box::new(|| c4_stability(desk()))),
        (5, "open-loop ordering against LTI", Box::new(|| c5_ordering(desk()))),
        (6, "synthetic identifiability", Box::new(c6_synthetic)),
        (7, "box QP solver", Box::new(|| c7_qp(desk()))),
        (8, "closed-loop double lane change", Box::new(|| c8_closed_loop(desk()))),
        (9, "solve-time envelope", Box::new(|| c9_timing(desk()))),
        (10, "determinism", Box::new(c10_determinism)),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, run) in &criteria {
        if !wanted(*id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let v = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)) {
            Ok(Ok(v)) => v,
            Ok(Err(e)) => Verdict { pass: false, detail: format!("error: {e}") },
            Err(_) => Verdict { pass: false, detail: "panicked".into() },
        };
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("{tag} [{id}] {name}: {} ({:.1} s)", v.detail, start.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(*id);
        }
    }
    println!("acceptance: {}/{} criteria passed", ran - failed.len(), ran);
    if !failed.is_empty() && std::env::var_os("MDK_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
