//! Box-constrained convex QP `min ½xᵀHx + gᵀx, l ≤ x ≤ u`.
//!
//! ADMM with the constraint matrix fixed to the identity, so the linear system
//! matrix `H + (σ+ρ)I` is factored once per Hessian. A primal-dual active-set
//! pass started from the ADMM active set then polishes the iterate to the
//! exact vertex of the KKT system.

use serde::{Deserialize, Serialize};

use crate::linalg::{Cholesky, LinalgError, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: Matrix,
    pub g: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QpProblem {
    pub fn objective(&self, x: &[f64]) -> f64 {
        let hx = self.h.matvec(x).expect("dimension checked on construction");
        x.iter().zip(&hx).zip(&self.g).map(|((xi, hi), gi)| 0.5 * xi * hi + gi * xi).sum()
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    /// ADMM penalty; `None` picks the mean diagonal of `H`.
    pub rho: Option<f64>,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub max_iterations: usize,
    pub polish: bool,
    pub max_polish_iterations: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: None,
            sigma: 1e-6,
            alpha: 1.6,
            eps_primal: 1e-6,
            eps_dual: 1e-6,
            max_iterations: 4000,
            polish: true,
            max_polish_iterations: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Solved,
    /// Iteration cap reached; the best feasible iterate is returned.
    Suboptimal,
}

/// First-order optimality residuals, each an infinity norm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Bound multipliers, positive on upper bounds and negative on lower bounds.
    pub y: Vec<f64>,
    pub status: QpStatus,
    pub admm_iterations: usize,
    pub polish_iterations: usize,
    pub polished: bool,
    pub kkt: KktReport,
}

impl QpSolution {
    pub fn iterations(&self) -> usize {
        self.admm_iterations + self.polish_iterations
    }
}

/// Warm start: primal and dual iterates from a previous solve.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// KKT residuals of `x` with the best multipliers consistent with the active bounds.
pub fn kkt_residuals(qp: &QpProblem, x: &[f64]) -> KktReport {
    let grad: Vec<f64> = qp.h.matvec(x).expect("dimension").iter().zip(&qp.g).map(|(a, b)| a + b).collect();
    let mut rep = KktReport::default();
    for i in 0..x.len() {
        let (l, u) = (qp.lower[i], qp.upper[i]);
        rep.primal = rep.primal.max((l - x[i]).max(x[i] - u).max(0.0));
        let mu_l = if x[i] <= l { grad[i].max(0.0) } else { 0.0 };
        let mu_u = if x[i] >= u { (-grad[i]).max(0.0) } else { 0.0 };
        rep.stationarity = rep.stationarity.max((grad[i] - mu_l + mu_u).abs());
        rep.complementarity = rep.complementarity.max((mu_l * (x[i] - l)).abs().max((mu_u * (u - x[i])).abs()));
    }
    rep
}

/// Solver bound to one Hessian; the factorization is reused across solves.
#[derive(Debug, Clone)]
pub struct BoxQpSolver {
    h: Matrix,
    rho: f64,
    settings: QpSettings,
    kkt_factor: Cholesky,
}

impl BoxQpSolver {
    pub fn new(h: &Matrix, settings: QpSettings) -> Result<Self, LinalgError> {
        if !h.is_square() {
            return Err(LinalgError::NotSquare { shape: h.shape() });
        }
        let n = h.rows();
        let rho = settings.rho.unwrap_or_else(|| (h.diag().iter().sum::<f64>() / n.max(1) as f64).max(1e-6));
        let mut k = h.clone();
        for i in 0..n {
            k[(i, i)] += settings.sigma + rho;
        }
        let kkt_factor = Cholesky::factor(&k)?;
        Cholesky::factor(h)?;
        Ok(Self { h: h.clone(), rho, settings, kkt_factor })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn solve(
        &self,
        g: &[f64],
        lower: &[f64],
        upper: &[f64],
        warm: Option<&WarmStart>,
    ) -> Result<QpSolution, LinalgError> {
        let n = self.h.rows();
        for len in [g.len(), lower.len(), upper.len()] {
            if len != n {
                return Err(LinalgError::DimensionMismatch { op: "box qp", left: (n, n), right: (len, 1) });
            }
        }
        let s = &self.settings;
        let (rho, sigma, alpha) = (self.rho, s.sigma, s.alpha);
        let clip = |v: f64, i: usize| v.max(lower[i]).min(upper[i]);

        let (mut x, mut y) = match warm {
            Some(w) if w.x.len() == n && w.y.len() == n => (w.x.clone(), w.y.clone()),
            _ => (vec![0.0; n], vec![0.0; n]),
        };
        let mut z: Vec<f64> = (0..n).map(|i| clip(x[i], i)).collect();
        let mut rhs = vec![0.0; n];
        let mut hx = vec![0.0; n];
        let mut iterations = 0;
        let mut converged = false;
        while iterations < s.max_iterations {
            iterations += 1;
            for i in 0..n {
                rhs[i] = sigma * x[i] - g[i] + rho * z[i] - y[i];
            }
            self.kkt_factor.solve_in_place(&mut rhs);
            for i in 0..n {
                let xt = rhs[i];
                let x_relaxed = alpha * xt + (1.0 - alpha) * z[i];
                x[i] = alpha * xt + (1.0 - alpha) * x[i];
                let z_new = clip(x_relaxed + y[i] / rho, i);
                y[i] += rho * (x_relaxed - z_new);
                z[i] = z_new;
            }
            matvec_into(&self.h, &x, &mut hx);
            let mut primal = 0.0f64;
            let mut dual = 0.0f64;
            for i in 0..n {
                primal = primal.max((x[i] - z[i]).abs());
                dual = dual.max((hx[i] + g[i] + y[i]).abs());
            }
            if primal <= s.eps_primal && dual <= s.eps_dual {
                converged = true;
                break;
            }
        }

        let qp = QpProblem { h: self.h.clone(), g: g.to_vec(), lower: lower.to_vec(), upper: upper.to_vec() };
        let admm = z;
        if s.polish {
            if let Some((xp, yp, it)) = self.polish(&qp, &admm, &y) {
                let kkt = kkt_residuals(&qp, &xp);
                return Ok(QpSolution {
                    x: xp,
                    y: yp,
                    status: QpStatus::Solved,
                    admm_iterations: iterations,
                    polish_iterations: it,
                    polished: true,
                    kkt,
                });
            }
        }
        let kkt = kkt_residuals(&qp, &admm);
        Ok(QpSolution {
            x: admm,
            y,
            status: if converged { QpStatus::Solved } else { QpStatus::Suboptimal },
            admm_iterations: iterations,
            polish_iterations: 0,
            polished: false,
            kkt,
        })
    }

    /// Primal-dual active-set iterations from the ADMM guess. Returns `None`
    /// if the active set fails to settle.
    fn polish(&self, qp: &QpProblem, x0: &[f64], y0: &[f64]) -> Option<(Vec<f64>, Vec<f64>, usize)> {
        #[derive(Clone, Copy, PartialEq)]
        enum Bound {
            Free,
            Lower,
            Upper,
        }
        let n = x0.len();
        let (l, u) = (&qp.lower, &qp.upper);
        let mut set: Vec<Bound> = (0..n)
            .map(|i| {
                if l[i] == u[i] || (x0[i] <= l[i] && y0[i] <= 0.0) {
                    Bound::Lower
                } else if x0[i] >= u[i] && y0[i] >= 0.0 {
                    Bound::Upper
                } else {
                    Bound::Free
                }
            })
            .collect();
        let scale = 1.0 + qp.g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = 1e-12 * scale;
        for it in 1..=self.settings.max_polish_iterations {
            let free: Vec<usize> = (0..n).filter(|&i| set[i] == Bound::Free).collect();
            let mut x: Vec<f64> = (0..n)
                .map(|i| match set[i] {
                    Bound::Lower => l[i],
                    Bound::Upper => u[i],
                    Bound::Free => 0.0,
                })
                .collect();
            if !free.is_empty() {
                let m = free.len();
                let mut hff = Matrix::zeros(m, m);
                let mut rhs = vec![0.0; m];
                for (a, &i) in free.iter().enumerate() {
                    for (b, &j) in free.iter().enumerate() {
                        hff[(a, b)] = self.h[(i, j)];
                    }
                    let fixed: f64 = (0..n).filter(|&j| set[j] != Bound::Free).map(|j| self.h[(i, j)] * x[j]).sum();
                    rhs[a] = -qp.g[i] - fixed;
                }
                let sol = Cholesky::factor(&hff).ok()?.solve(&rhs);
                for (a, &i) in free.iter().enumerate() {
                    x[i] = sol[a];
                }
            }
            let grad: Vec<f64> = self.h.matvec(&x).ok()?.iter().zip(&qp.g).map(|(a, b)| a + b).collect();
            let mut next = set.clone();
            for i in 0..n {
                next[i] = match set[i] {
                    _ if l[i] == u[i] => Bound::Lower,
                    Bound::Free if x[i] < l[i] => Bound::Lower,
                    Bound::Free if x[i] > u[i] => Bound::Upper,
                    Bound::Lower if grad[i] < -tol => Bound::Free,
                    Bound::Upper if grad[i] > tol => Bound::Free,
                    b => b,
                };
            }
            if next == set {
                let feasible = (0..n).all(|i| x[i] >= l[i] && x[i] <= u[i]);
                if !feasible {
                    return None;
                }
                let y = (0..n).map(|i| if set[i] == Bound::Free { 0.0 } else { -grad[i] }).collect();
                return Some((x, y, it));
            }
            set = next;
        }
        None
    }
}

fn matvec_into(a: &Matrix, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = crate::linalg::dot(a.row(i), x);
    }
}

/// One-shot solve without a cached factorization.
pub fn solve_qp(qp: &QpProblem, settings: QpSettings, warm: Option<&WarmStart>) -> Result<QpSolution, LinalgError> {
    BoxQpSolver::new(&qp.h, settings)?.solve(&qp.g, &qp.lower, &qp.upper, warm)
}
