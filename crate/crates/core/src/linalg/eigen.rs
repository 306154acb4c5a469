//! Real non-symmetric eigenvalues: balancing, Householder reduction to upper
//! Hessenberg form, then Francis double-shift QR. Eigenvectors are recovered on
//! demand by complex inverse iteration, which is all the spectral gradients need.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::decomp::ComplexLu;
use super::{LinalgError, Matrix};

/// QR sweeps allowed per eigenvalue before giving up.
pub const MAX_SWEEPS_PER_EIGENVALUE: usize = 30;

/// Eigenvalues of a real square matrix; complex ones come in adjacent conjugate pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Vec<Complex64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Distance from eigenvalue `i` to the closest other eigenvalue.
    pub fn separation(&self, i: usize) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, v)| (v - self.values[i]).norm())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Right and left eigenvectors for one eigenvalue: `A x = λ x`, `yᴴ A = λ yᴴ`.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: Complex64,
    pub right: Vec<Complex64>,
    pub left: Vec<Complex64>,
}

pub fn eigenvalues(a: &Matrix) -> Result<Spectrum, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { shape: a.shape() });
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite { row: 0, col: 0 });
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Spectrum { values: Vec::new() });
    }
    let mut h = a.clone();
    balance(&mut h);
    hessenberg_in_place(&mut h);
    let values = hqr(&mut h)?;
    Ok(Spectrum { values })
}

/// Diagonal similarity scaling so row and column norms are comparable.
fn balance(a: &mut Matrix) {
    const RADIX: f64 = 2.0;
    let n = a.rows();
    let sqrdx = RADIX * RADIX;
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c != 0.0 && r != 0.0 {
                let mut g = r / RADIX;
                let mut f = 1.0;
                let s = c + r;
                while c < g {
                    f *= RADIX;
                    c *= sqrdx;
                }
                g = r * RADIX;
                while c > g {
                    f /= RADIX;
                    c /= sqrdx;
                }
                if (c + r) / f < 0.95 * s {
                    done = false;
                    let g = 1.0 / f;
                    for j in 0..n {
                        a[(i, j)] *= g;
                    }
                    for j in 0..n {
                        a[(j, i)] *= f;
                    }
                }
            }
        }
    }
}

/// Householder reduction to upper Hessenberg form (similarity transform).
pub fn hessenberg_in_place(a: &mut Matrix) {
    let n = a.rows();
    if n < 3 {
        return;
    }
    let mut v = vec![0.0; n];
    for k in 0..n - 2 {
        let mut alpha = 0.0;
        for i in k + 1..n {
            alpha += a[(i, k)] * a[(i, k)];
        }
        let alpha = alpha.sqrt();
        if alpha == 0.0 {
            continue;
        }
        let x0 = a[(k + 1, k)];
        let alpha = if x0 > 0.0 { -alpha } else { alpha };
        for i in k + 1..n {
            v[i] = a[(i, k)];
        }
        v[k + 1] -= alpha;
        let vnorm2: f64 = (k + 1..n).map(|i| v[i] * v[i]).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;
        // H A
        for j in k..n {
            let s: f64 = (k + 1..n).map(|i| v[i] * a[(i, j)]).sum::<f64>() * beta;
            for i in k + 1..n {
                a[(i, j)] -= s * v[i];
            }
        }
        // (H A) H
        for i in 0..n {
            let s: f64 = (k + 1..n).map(|j| a[(i, j)] * v[j]).sum::<f64>() * beta;
            for j in k + 1..n {
                a[(i, j)] -= s * v[j];
            }
        }
        for i in k + 2..n {
            a[(i, k)] = 0.0;
        }
    }
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix (destroyed).
#[allow(unused_assignments)]
fn hqr(a: &mut Matrix) -> Result<Vec<Complex64>, LinalgError> {
    let n = a.rows();
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    let mut found = vec![false; n];

    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[(i, j)].abs();
        }
    }

    let mut nn = n as isize - 1;
    let mut t = 0.0;
    let (mut p, mut q, mut r, mut s, mut w, mut x, mut y, mut z) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    while nn >= 0 {
        let mut its = 0usize;
        loop {
            let nu = nn as usize;
            let mut l = nu;
            while l >= 1 {
                s = a[(l - 1, l - 1)].abs() + a[(l, l)].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[(l, l - 1)].abs() + s == s {
                    a[(l, l - 1)] = 0.0;
                    break;
                }
                l -= 1;
            }
            x = a[(nu, nu)];
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = 0.0;
                found[nu] = true;
                nn -= 1;
                break;
            }
            y = a[(nu - 1, nu - 1)];
            w = a[(nu, nu - 1)] * a[(nu - 1, nu)];
            if l == nu - 1 {
                p = 0.5 * (y - x);
                q = p * p + w;
                z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    z = p + sign(z, p);
                    wr[nu - 1] = x + z;
                    wr[nu] = if z != 0.0 { x - w / z } else { x + z };
                    wi[nu - 1] = 0.0;
                    wi[nu] = 0.0;
                } else {
                    wr[nu - 1] = x + p;
                    wr[nu] = x + p;
                    wi[nu - 1] = -z;
                    wi[nu] = z;
                }
                found[nu - 1] = true;
                found[nu] = true;
                nn -= 2;
                break;
            }
            if its == MAX_SWEEPS_PER_EIGENVALUE {
                let partial = (0..n)
                    .filter(|&i| found[i])
                    .map(|i| Complex64::new(wr[i], wi[i]))
                    .collect();
                return Err(LinalgError::NoConvergence { index: nu, partial });
            }
            if its == 10 || its == 20 {
                // exceptional shift
                t += x;
                for i in 0..=nu {
                    a[(i, i)] -= x;
                }
                s = a[(nu, nu - 1)].abs() + a[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;
            let mut m = nu - 2;
            loop {
                z = a[(m, m)];
                r = x - z;
                s = y - z;
                p = (r * s - w) / a[(m + 1, m)] + a[(m, m + 1)];
                q = a[(m + 1, m + 1)] - z - r - s;
                r = a[(m + 2, m + 1)];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[(m, m - 1)].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[(m - 1, m - 1)].abs() + z.abs() + a[(m + 1, m + 1)].abs());
                if u + v == v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                a[(i, i - 2)] = 0.0;
                if i != m + 2 {
                    a[(i, i - 3)] = 0.0;
                }
            }
            let mut k = m;
            while k + 1 <= nu {
                if k != m {
                    p = a[(k, k - 1)];
                    q = a[(k + 1, k - 1)];
                    r = if k != nu - 1 { a[(k + 2, k - 1)] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                s = sign((p * p + q * q + r * r).sqrt(), p);
                if s != 0.0 {
                    if k == m {
                        if l != m {
                            a[(k, k - 1)] = -a[(k, k - 1)];
                        }
                    } else {
                        a[(k, k - 1)] = -s * x;
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nu {
                        p = a[(k, j)] + q * a[(k + 1, j)];
                        if k != nu - 1 {
                            p += r * a[(k + 2, j)];
                            a[(k + 2, j)] -= p * z;
                        }
                        a[(k + 1, j)] -= p * y;
                        a[(k, j)] -= p * x;
                    }
                    let mmin = if nu < k + 3 { nu } else { k + 3 };
                    for i in l..=mmin {
                        p = x * a[(i, k)] + y * a[(i, k + 1)];
                        if k != nu - 1 {
                            p += z * a[(i, k + 2)];
                            a[(i, k + 2)] -= p * r;
                        }
                        a[(i, k + 1)] -= p * q;
                        a[(i, k)] -= p;
                    }
                }
                k += 1;
            }
        }
    }
    Ok(wr.into_iter().zip(wi).map(|(re, im)| Complex64::new(re, im)).collect())
}

/// Right and left eigenvectors of `a` for the (already computed) eigenvalue `value`,
/// normalized to unit 2-norm.
pub fn eigenvectors(a: &Matrix, value: Complex64) -> EigenPair {
    let n = a.rows();
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    let mut m: Vec<Complex64> = a.as_slice().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for i in 0..n {
        m[i * n + i] -= value;
    }
    let lu = ComplexLu::factor(n, m, f64::EPSILON * scale);
    let start: Vec<Complex64> = (0..n).map(|i| Complex64::new(1.0 + 0.37 * (i as f64).sin(), 0.0)).collect();
    let mut right = start.clone();
    let mut left = start;
    for _ in 0..3 {
        right = normalized(lu.solve(&right));
        left = normalized(lu.solve_adjoint(&left));
    }
    EigenPair { value, right, left }
}

fn normalized(mut v: Vec<Complex64>) -> Vec<Complex64> {
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        for c in &mut v {
            *c /= norm;
        }
    }
    v
}

/// Complex eigenvalue sensitivity `∂λ/∂A = conj(y) xᵀ / (yᴴ x)` composed with
/// `|λ|`: returns the real matrix `∂|λ|/∂A`.
fn modulus_gradient(pair: &EigenPair, n: usize) -> Matrix {
    let denom: Complex64 = pair.left.iter().zip(&pair.right).map(|(y, x)| y.conj() * x).sum();
    let lambda = pair.value;
    let modulus = lambda.norm();
    let factor = lambda.conj() / (denom * modulus);
    let mut g = Matrix::zeros(n, n);
    for j in 0..n {
        let yj = pair.left[j].conj() * factor;
        for k in 0..n {
            g[(j, k)] = (yj * pair.right[k]).re;
        }
    }
    g
}

/// Gradient of `|λ_which|` with respect to the entries of `a`.
///
/// Fails with [`LinalgError::NearDefective`] when the eigenvalue is not simple
/// enough for first-order perturbation theory; callers decide on a fallback.
pub fn eigen_grad(a: &Matrix, spectrum: &Spectrum, which: usize) -> Result<Matrix, LinalgError> {
    let n = a.rows();
    let value = spectrum.values[which];
    let sep = spectrum.separation(which);
    let tol = 1e-8 * a.frobenius_norm();
    if sep <= tol {
        return Err(LinalgError::NearDefective { index: which, separation: sep });
    }
    if value.norm() == 0.0 {
        return Err(LinalgError::Singular);
    }
    Ok(modulus_gradient(&eigenvectors(a, value), n))
}

/// Symmetric perturbation with Frobenius norm `magnitude`, deterministic per `seed`.
fn symmetric_jitter(n: usize, magnitude: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut j = Matrix::zeros(n, n);
    for r in 0..n {
        for c in r..n {
            let v: f64 = rng.random_range(-1.0..1.0);
            j[(r, c)] = v;
            j[(c, r)] = v;
        }
    }
    let norm = j.frobenius_norm();
    if norm > 0.0 {
        j.scale(magnitude / norm)
    } else {
        j
    }
}

/// Value and gradient of `Σ_λ max(0, |λ| − 1)`.
///
/// Inactive terms contribute exactly zero. When an active eigenvalue is
/// clustered, the gradient is taken from a copy of `a` perturbed by a symmetric
/// jitter of norm `1e-10·‖a‖_F`.
pub fn stability_hinge(a: &Matrix, with_grad: bool) -> Result<(f64, Option<Matrix>), LinalgError> {
    let spectrum = eigenvalues(a)?;
    let value: f64 = spectrum.values.iter().map(|v| (v.norm() - 1.0).max(0.0)).sum();
    if !with_grad {
        return Ok((value, None));
    }
    let n = a.rows();
    let mut grad = Matrix::zeros(n, n);
    let active: Vec<usize> = (0..spectrum.len()).filter(|&i| spectrum.values[i].norm() > 1.0).collect();
    if active.is_empty() {
        return Ok((value, Some(grad)));
    }
    let mut grads = Vec::with_capacity(active.len());
    let mut clustered = false;
    for &i in &active {
        match eigen_grad(a, &spectrum, i) {
            Ok(g) => grads.push(g),
            Err(LinalgError::NearDefective { .. }) => {
                clustered = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if clustered {
        log::debug!("stability hinge: clustered active eigenvalue, using jittered gradient");
        let jitter = symmetric_jitter(n, 1e-10 * a.frobenius_norm().max(1.0), 0x5eed);
        let perturbed = a.add(&jitter)?;
        let ps = eigenvalues(&perturbed)?;
        for (i, v) in ps.values.iter().enumerate() {
            if v.norm() > 1.0 && v.norm() != 0.0 {
                grad.axpy(1.0, &modulus_gradient(&eigenvectors(&perturbed, ps.values[i]), n));
            }
        }
        return Ok((value, Some(grad)));
    }
    for g in &grads {
        grad.axpy(1.0, g);
    }
    Ok((value, Some(grad)))
}
