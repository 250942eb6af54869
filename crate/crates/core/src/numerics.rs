//! Dense linear-algebra kernels and scalar special functions.
//!
//! Matrices are `nalgebra` dynamic matrices. Symmetric positive semidefinite
//! quantities (covariances, cost weights, Riccati and Lyapunov solutions) are
//! wrapped in [`Symmetric`], which enforces symmetry on construction.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

const SYMMETRY_TOL: f64 = 1e-12;
const LYAPUNOV_STEP_TOL: f64 = 1e-14;
const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-10;
const MAX_DOUBLINGS: usize = 64;
const DARE_MAX_ITER: usize = 10_000;
const DARE_RESIDUAL_TOL: f64 = 1e-10;

/// A symmetric matrix. Entries are finite and symmetric to within `1e-12`
/// relative; the stored copy is exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct Symmetric(Matrix);

impl Symmetric {
    /// Validates symmetry and finiteness, then stores the symmetric part.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("matrix has non-finite entries".into()));
        }
        let scale = m.amax().max(1.0);
        let asym = (&m - m.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::Domain(format!(
                "matrix is not symmetric (max asymmetry {asym:e})"
            )));
        }
        Ok(Self::symmetrize(m))
    }

    /// Takes the symmetric part `(m + mᵀ)/2` without checking.
    pub fn symmetrize(m: Matrix) -> Self {
        let t = m.transpose();
        Symmetric((m + t) * 0.5)
    }

    pub fn identity(n: usize) -> Self {
        Symmetric(Matrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Symmetric(Matrix::zeros(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Symmetric(Matrix::from_diagonal(&Vector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }

    /// Quadratic form `xᵀ M x`.
    pub fn quad_form(&self, x: &Vector) -> f64 {
        x.dot(&(&self.0 * x))
    }

    /// Weighted norm `√(xᵀ M x)`, clamped at zero for rounding.
    pub fn weighted_norm(&self, x: &Vector) -> f64 {
        self.quad_form(x).max(0.0).sqrt()
    }

    /// `a M aᵀ` for a row direction `a`.
    pub fn directional_variance(&self, direction: &Vector) -> f64 {
        self.quad_form(direction)
    }

    /// True when a semidefinite Cholesky factorization succeeds.
    pub fn is_psd(&self) -> bool {
        psd_factor(self).is_ok()
    }

    /// True when every eigenvalue exceeds `tol`.
    pub fn is_positive_definite(&self, tol: f64) -> bool {
        self.dim() == 0 || min_eigenvalue(self) > tol
    }
}

impl Deref for Symmetric {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.0
    }
}

impl Serialize for Symmetric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        as_rows::serialize(&self.0, s)
    }
}

impl<'de> Deserialize<'de> for Symmetric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = as_rows::deserialize(d)?;
        Symmetric::new(m).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter: a matrix as an array of row arrays.
pub mod as_rows {
    use super::Matrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter: a vector as a flat array.
pub mod as_vec {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        let data = Vec::<f64>::deserialize(d)?;
        Ok(Vector::from_vec(data))
    }
}

/// Induced ∞-norm (maximum absolute row sum).
pub fn inf_norm(m: &Matrix) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

fn require_square(m: &Matrix, name: &str) -> Result<usize> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "{name} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

/// Residual `a Σ aᵀ − Σ + w`.
pub fn lyapunov_residual(a_k: &Matrix, sigma: &Matrix, w: &Matrix) -> Matrix {
    a_k * sigma * a_k.transpose() - sigma + w
}

/// Solves `a_k Σ a_kᵀ − Σ + w = 0` by the doubling iteration
/// `Σ ← Σ + A Σ Aᵀ, A ← A²`.
pub fn solve_discrete_lyapunov(a_k: &Matrix, w: &Symmetric) -> Result<Symmetric> {
    let n = require_square(a_k, "a_k")?;
    if w.dim() != n {
        return Err(Error::Dimension(format!(
            "w is {}x{}, a_k is {n}x{n}",
            w.dim(),
            w.dim()
        )));
    }
    let mut sigma = w.as_matrix().clone();
    let mut a = a_k.clone();
    let mut converged = false;
    for _ in 0..MAX_DOUBLINGS {
        let delta = &a * &sigma * a.transpose();
        sigma += &delta;
        if sigma.iter().any(|v| !v.is_finite()) {
            break;
        }
        if inf_norm(&delta) <= LYAPUNOV_STEP_TOL * inf_norm(&sigma).max(1.0) {
            converged = true;
            break;
        }
        a = &a * &a;
    }
    if !converged {
        return Err(Error::NonConvergent {
            what: "lyapunov doubling",
            iterations: MAX_DOUBLINGS,
        });
    }
    // a few contraction steps remove the rounding left by squaring
    let target = LYAPUNOV_RESIDUAL_TOL * inf_norm(w).max(1.0);
    for _ in 0..100 {
        let res = lyapunov_residual(a_k, &sigma, w);
        if inf_norm(&res) <= 0.01 * target {
            break;
        }
        sigma += res;
        sigma = (&sigma + sigma.transpose()) * 0.5;
    }
    Ok(Symmetric::symmetrize(sigma))
}

/// Solution of the discrete algebraic Riccati equation and the LQR gain.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution {
    /// Gain for `u = K x`.
    pub gain: Matrix,
    /// Stabilizing Riccati solution `P`.
    pub cost: Symmetric,
}

/// Residual of `AᵀPA − P − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q`.
pub fn dare_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Result<Matrix> {
    let btp = b.transpose() * p;
    let s = r + &btp * b;
    let rhs = &btp * a;
    let k = s
        .cholesky()
        .ok_or_else(|| Error::Domain("R + BᵀPB is not positive definite".into()))?
        .solve(&rhs);
    Ok(a.transpose() * p * a - p - a.transpose() * p * b * k + q)
}

fn riccati_step(a: &Matrix, g: &Matrix, q: &Matrix, p: &Matrix) -> Option<Matrix> {
    let n = a.nrows();
    let lu = (Matrix::identity(n, n) + g * p).lu();
    let next = a.transpose() * p * lu.solve(a)? + q;
    Some((&next + next.transpose()) * 0.5)
}

/// LQR gain `K = −(R + BᵀPB)⁻¹BᵀPA` and the stabilizing DARE solution `P`.
///
/// Uses the structure-preserving doubling algorithm, polished by Riccati
/// value iteration, falling back to plain value iteration when the doubling
/// recursion breaks down.
pub fn lqr_gain(a: &Matrix, b: &Matrix, q: &Symmetric, r: &Symmetric) -> Result<LqrSolution> {
    let n = require_square(a, "a")?;
    if b.nrows() != n || q.dim() != n || r.dim() != b.ncols() {
        return Err(Error::Dimension(format!(
            "a {n}x{n}, b {}x{}, q {}x{}, r {}x{}",
            b.nrows(),
            b.ncols(),
            q.dim(),
            q.dim(),
            r.dim(),
            r.dim()
        )));
    }
    let r_chol = r
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("r must be positive definite".into()))?;
    let g = b * r_chol.solve(&b.transpose());
    let g = (&g + g.transpose()) * 0.5;
    let qm = q.as_matrix();
    let rm = r.as_matrix();

    let scale = |p: &Matrix| inf_norm(p).max(1.0);
    let finite = |m: &Matrix| m.iter().all(|v| v.is_finite());

    let mut p = sda(a, &g, qm);
    if p.as_ref().is_none_or(|p| !finite(p)) {
        // value iteration from Q
        let mut x = qm.clone();
        let mut ok = false;
        for _ in 0..DARE_MAX_ITER {
            let Some(next) = riccati_step(a, &g, qm, &x) else {
                break;
            };
            if !finite(&next) {
                break;
            }
            let diff = inf_norm(&(&next - &x));
            x = next;
            if diff <= 1e-14 * scale(&x) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::NonConvergent {
                what: "riccati iteration",
                iterations: DARE_MAX_ITER,
            });
        }
        p = Some(x);
    }
    let mut p = p.unwrap();
    for _ in 0..50 {
        let res = dare_residual(a, b, qm, rm, &p)?;
        if inf_norm(&res) <= DARE_RESIDUAL_TOL * scale(&p) {
            break;
        }
        match riccati_step(a, &g, qm, &p) {
            Some(next) if finite(&next) => p = next,
            _ => break,
        }
    }
    let btp = b.transpose() * &p;
    let s = rm + &btp * b;
    let gain = -s
        .cholesky()
        .ok_or_else(|| Error::Domain("R + BᵀPB is not positive definite".into()))?
        .solve(&(&btp * a));
    if spectral_radius(&(a + b * &gain)) >= 1.0 {
        return Err(Error::NonConvergent {
            what: "riccati iteration (closed loop not stable)",
            iterations: DARE_MAX_ITER,
        });
    }
    Ok(LqrSolution {
        gain,
        cost: Symmetric::symmetrize(p),
    })
}

/// Structure-preserving doubling for `X = AᵀX(I + GX)⁻¹A + H`.
fn sda(a: &Matrix, g: &Matrix, h: &Matrix) -> Option<Matrix> {
    let n = a.nrows();
    let eye = Matrix::identity(n, n);
    let (mut ak, mut gk, mut hk) = (a.clone(), g.clone(), h.clone());
    for _ in 0..100 {
        let lu = (&eye + &gk * &hk).lu();
        let w_a = lu.solve(&ak)?;
        let w_g = lu.solve(&gk)?;
        let a_next = &ak * &w_a;
        let g_next = &gk + &ak * w_g * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w_a;
        let g_next = (&g_next + g_next.transpose()) * 0.5;
        let h_next = (&h_next + h_next.transpose()) * 0.5;
        if h_next.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let diff = inf_norm(&(&h_next - &hk));
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if diff <= 1e-15 * inf_norm(&hk).max(1.0) {
            return Some(hk);
        }
    }
    None
}

/// `P ≻ 0` solving `a_kᵀ P a_k − P = −ε I`.
pub fn lyapunov_certificate(a_k: &Matrix, epsilon: f64) -> Result<Symmetric> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = require_square(a_k, "a_k")?;
    let w = Symmetric(Matrix::identity(n, n) * epsilon);
    solve_discrete_lyapunov(&a_k.transpose(), &w)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(p: &Symmetric) -> f64 {
    if p.dim() == 0 {
        return 0.0;
    }
    p.as_matrix()
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Lower-triangular `L` with `L Lᵀ = m` for positive semidefinite `m`.
///
/// Zero pivots are accepted when the rest of their column vanishes as well;
/// a negative pivot, or a zero pivot with nonzero coupling, means `m` is
/// indefinite.
pub fn psd_factor(m: &Symmetric) -> Result<Matrix> {
    let n = m.dim();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(1e-300, f64::max);
    let tol = 1e-12 * scale;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return Err(Error::CholeskyFailure { pivot: j, value: d });
        }
        if d <= tol {
            for i in j + 1..n {
                let mut v = m[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                // PSD requires v² ≤ d·dᵢ with d ≈ 0
                if v.abs() > 10.0 * (tol * m[(i, i)].abs().max(tol)).sqrt() {
                    return Err(Error::CholeskyFailure { pivot: j, value: d });
                }
            }
            continue;
        }
        let pivot = d.sqrt();
        l[(j, j)] = pivot;
        for i in j + 1..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / pivot;
        }
    }
    Ok(l)
}

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn gamma_prefactor(a: f64, x: f64) -> f64 {
    (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    for n in 1..10_000 {
        term *= x / (a + n as f64);
        sum += term;
        if term.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum * gamma_prefactor(a, x)
}

fn gamma_continued_fraction(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h * gamma_prefactor(a, x)
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x < a + 1.0 {
        gamma_series(a, x)
    } else {
        1.0 - gamma_continued_fraction(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 − P(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x < a + 1.0 {
        1.0 - gamma_series(a, x)
    } else {
        gamma_continued_fraction(a, x)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    let tail = 0.5 * gamma_q(0.5, 0.5 * z * z);
    if z < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Chi-squared CDF with `dof` degrees of freedom.
pub fn chi2_cdf(x: f64, dof: usize) -> f64 {
    gamma_p(0.5 * dof as f64, 0.5 * x)
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Inverse of the standard normal CDF on `(0, 1)`.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("normal quantile needs 0 < p < 1, got {p}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Φ(z) − p loses relative precision in the upper tail; use symmetry.
    if p > 0.5 {
        let q = 1.0 - p;
        return Ok(-bisect(-40.0, 0.0, |z| normal_cdf(z) - q));
    }
    Ok(bisect(-40.0, 0.0, |z| normal_cdf(z) - p))
}

/// Inverse of the chi-squared CDF on `[0, 1)`.
pub fn chi2_quantile(p: f64, dof: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!("chi-squared quantile needs 0 <= p < 1, got {p}")));
    }
    if dof == 0 {
        return Err(Error::Domain("chi-squared needs at least one degree of freedom".into()));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let mut hi = (dof as f64).max(1.0);
    while chi2_cdf(hi, dof) < p {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Domain(format!("chi-squared quantile overflow at p = {p}")));
        }
    }
    Ok(bisect(0.0, hi, |x| chi2_cdf(x, dof) - p))
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn stable_matrix(n: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
            let m = Matrix::from_vec(n, n, v);
            let rho = spectral_radius(&m);
            if rho > 0.0 {
                m * (0.95 / rho.max(0.95))
            } else {
                m
            }
        })
    }

    fn psd_matrix(n: usize) -> impl Strategy<Value = Symmetric> {
        prop::collection::vec(-2.0f64..2.0, n * n)
            .prop_map(move |v| {
                let g = Matrix::from_vec(n, n, v);
                Symmetric::symmetrize(&g * g.transpose())
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lyapunov_residual_is_small((a, w) in (1usize..=6).prop_flat_map(|n| (stable_matrix(n), psd_matrix(n)))) {
            let s = solve_discrete_lyapunov(&a, &w).unwrap();
            let res = lyapunov_residual(&a, &s, &w);
            prop_assert!(inf_norm(&res) <= 1e-10 * inf_norm(&w).max(1.0));
        }

        #[test]
        fn dare_residual_is_small(
            (a, b) in (1usize..=4, 1usize..=2).prop_flat_map(|(n, m)| (
                prop::collection::vec(-1.5f64..1.5, n * n).prop_map(move |v| Matrix::from_vec(n, n, v)),
                prop::collection::vec(-1.0f64..1.0, n * m).prop_map(move |v| Matrix::from_vec(n, m, v)),
            ))
        ) {
            let n = a.nrows();
            let m = b.ncols();
            // keep the pair comfortably controllable
            let mut b = b;
            for i in 0..n.min(m) {
                b[(i, i)] += 1.0;
            }
            let ctrb_rank = {
                let mut c = Matrix::zeros(n, n * m);
                let mut blk = b.clone();
                for k in 0..n {
                    c.view_mut((0, k * m), (n, m)).copy_from(&blk);
                    blk = &a * blk;
                }
                c.svd(false, false).singular_values.iter().filter(|s| **s > 1e-3).count()
            };
            prop_assume!(ctrb_rank == n);
            let q = Symmetric::identity(n);
            let r = Symmetric::identity(m);
            let sol = lqr_gain(&a, &b, &q, &r).unwrap();
            let res = dare_residual(&a, &b, &q, &r, &sol.cost).unwrap();
            prop_assert!(inf_norm(&res) <= 1e-8 * inf_norm(&sol.cost).max(1.0));
            prop_assert!(spectral_radius(&(&a + &b * &sol.gain)) < 1.0);
        }
    }
}
