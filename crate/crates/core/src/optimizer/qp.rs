//! Strictly convex dense QP `min ½xᵀHx + fᵀx + c  s.t.  Ax ≤ b`.
//!
//! Solved with the Goldfarb–Idnani dual active-set method. Pairs of opposing
//! rows with matching offsets (`aᵢ = −aⱼ`, `bᵢ = −bⱼ`) are treated as
//! equalities, which keeps the active set nondegenerate for point terminal
//! sets. When a violated constraint cannot be reached, the active normals
//! give a Farkas certificate `y ≥ 0`, `Aᵀy = 0`, `bᵀy < 0`.

#![allow(clippy::needless_range_loop)]

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct QpForm {
    pub hessian: Matrix,
    pub linear: Vector,
    pub constant: f64,
    pub constraints: Matrix,
    pub bounds: Vector,
}

impl QpForm {
    pub fn objective(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x) + self.constant
    }

    pub fn num_vars(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn num_constraints(&self) -> usize {
        self.constraints.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// A row counts as satisfied when `aᵢx ≤ bᵢ + tolerance`.
    pub tolerance: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpOptimum {
    pub x: Vector,
    pub objective: f64,
    /// One nonnegative multiplier per row of `A`.
    pub multipliers: Vector,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpOutcome {
    Optimal(QpOptimum),
    /// Farkas certificate over the rows of `A`.
    Infeasible { certificate: Vector },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

/// KKT residuals of `(x, λ)`, computed directly from the problem data.
pub fn kkt_residuals(qp: &QpForm, x: &Vector, multipliers: &Vector) -> KktResiduals {
    let grad = &qp.hessian * x + &qp.linear + qp.constraints.transpose() * multipliers;
    let slack = &qp.bounds - &qp.constraints * x;
    let primal = slack.iter().fold(0.0f64, |m, s| m.max(-s));
    let dual = multipliers.iter().fold(0.0f64, |m, l| m.max(-l));
    let complementarity = slack.iter().zip(multipliers.iter()).fold(0.0f64, |m, (s, l)| m.max((s * l).abs()));
    KktResiduals { stationarity: grad.amax(), primal, dual, complementarity }
}

/// Checks `y ≥ −tol`, `‖Aᵀy‖∞ ≤ tol·max(1, ‖y‖∞)` and `bᵀy < 0`.
pub fn verify_certificate(qp: &QpForm, y: &Vector, tol: f64) -> bool {
    if y.len() != qp.num_constraints() || y.iter().any(|v| *v < -tol) {
        return false;
    }
    let combo = qp.constraints.transpose() * y;
    combo.amax() <= tol * y.amax().max(1.0) && qp.bounds.dot(y) < 0.0
}

/// Internal constraint in `nᵀx ≥ r` form.
#[derive(Debug, Clone)]
struct Row {
    normal: Vector,
    rhs: f64,
    /// `(row, partner)`; the partner is set for equalities built from a pair.
    source: (usize, Option<usize>),
}

struct Workspace {
    n: usize,
    j: Matrix,
    r: Matrix,
    r_norm: f64,
    active: Vec<usize>,
    u: Vec<f64>,
}

impl Workspace {
    fn iq(&self) -> usize {
        self.active.len()
    }

    fn compute_d(&self, np: &Vector) -> Vector {
        self.j.transpose() * np
    }

    fn step_direction(&self, d: &Vector) -> Vector {
        let iq = self.iq();
        let mut z = Vector::zeros(self.n);
        for c in iq..self.n {
            z.axpy(d[c], &self.j.column(c), 1.0);
        }
        z
    }

    fn dual_direction(&self, d: &Vector) -> Vec<f64> {
        let iq = self.iq();
        let mut r = vec![0.0; iq];
        for i in (0..iq).rev() {
            let mut sum = 0.0;
            for (jj, rj) in r.iter().enumerate().take(iq).skip(i + 1) {
                sum += self.r[(i, jj)] * rj;
            }
            r[i] = (d[i] - sum) / self.r[(i, i)];
        }
        r
    }

    fn add(&mut self, d: &mut Vector, index: usize, multiplier: f64) {
        let n = self.n;
        let iq = self.iq();
        for jj in (iq + 1..n).rev() {
            let (mut cc, mut ss) = (d[jj - 1], d[jj]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[jj] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                self.j[(k, jj - 1)] = t1 * cc + t2 * ss;
                self.j[(k, jj)] = xny * (t1 + self.j[(k, jj - 1)]) - t2;
            }
        }
        for i in 0..=iq {
            self.r[(i, iq)] = d[i];
        }
        self.r_norm = self.r_norm.max(d[iq].abs());
        self.active.push(index);
        self.u.push(multiplier);
    }

    fn remove(&mut self, index: usize) {
        let n = self.n;
        let qq = self.active.iter().position(|a| *a == index).expect("constraint is active");
        let iq = self.iq();
        for i in qq..iq - 1 {
            for jj in 0..n {
                self.r[(jj, i)] = self.r[(jj, i + 1)];
            }
        }
        for jj in 0..n {
            self.r[(jj, iq - 1)] = 0.0;
        }
        self.active.remove(qq);
        self.u.remove(qq);
        let iq = iq - 1;
        for jj in qq..iq {
            let (mut cc, mut ss) = (self.r[(jj, jj)], self.r[(jj + 1, jj)]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..iq {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                self.r[(jj, k)] = t1 * cc + t2 * ss;
                self.r[(jj + 1, k)] = xny * (t1 + self.r[(jj, k)]) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                self.j[(k, jj)] = t1 * cc + t2 * ss;
                self.j[(k, jj + 1)] = xny * (self.j[(k, jj)] + t1) - t2;
            }
        }
    }
}

/// Splits the rows of `A x ≤ b` into equalities (from opposing pairs) and
/// inequalities, both in `nᵀx ≥ r` form. Returns a certificate directly
/// when a zero row or a pair is contradictory on its own.
fn classify(qp: &QpForm, tol: f64) -> std::result::Result<(Vec<Row>, Vec<Row>), Vector> {
    let m = qp.num_constraints();
    let rows: Vec<Vector> = (0..m).map(|i| qp.constraints.row(i).transpose()).collect();
    let scale: Vec<f64> = rows.iter().map(|r| r.amax()).collect();
    let mut paired = vec![false; m];
    let mut eqs = Vec::new();
    let mut ineqs = Vec::new();
    for i in 0..m {
        if paired[i] {
            continue;
        }
        if scale[i] <= 1e-14 {
            if qp.bounds[i] < -tol {
                let mut y = Vector::zeros(m);
                y[i] = 1.0;
                return Err(y);
            }
            continue;
        }
        let partner = (i + 1..m).find(|&k| {
            !paired[k]
                && (scale[k] - scale[i]).abs() <= 1e-12 * scale[i]
                && rows[i].iter().zip(rows[k].iter()).all(|(a, b)| (a + b).abs() <= 1e-12 * scale[i])
                && qp.bounds[i] + qp.bounds[k] <= tol
        });
        match partner {
            Some(k) => {
                paired[k] = true;
                if qp.bounds[i] + qp.bounds[k] < -tol {
                    let mut y = Vector::zeros(m);
                    y[i] = 1.0;
                    y[k] = 1.0;
                    return Err(y);
                }
                eqs.push(Row { normal: -&rows[i], rhs: -qp.bounds[i], source: (i, Some(k)) });
            }
            None => ineqs.push(Row { normal: -&rows[i], rhs: -qp.bounds[i], source: (i, None) }),
        }
    }
    Ok((eqs, ineqs))
}

/// Maps a multiplier-like vector over internal rows back onto the rows of `A`.
fn scatter(rows: &[&Row], values: &[f64], m: usize) -> Vector {
    let mut out = Vector::zeros(m);
    for (row, v) in rows.iter().zip(values) {
        match row.source {
            (i, None) => out[i] += v,
            (i, Some(k)) => {
                if *v >= 0.0 {
                    out[i] += v
                } else {
                    out[k] -= v
                }
            }
        }
    }
    out
}

pub fn solve_qp(qp: &QpForm, options: &QpOptions) -> Result<QpOutcome> {
    let n = qp.num_vars();
    let m = qp.num_constraints();
    if qp.hessian.ncols() != n || qp.linear.len() != n || qp.constraints.ncols() != n || qp.bounds.len() != m {
        return Err(Error::Dimension("inconsistent QP data".into()));
    }
    let tol = options.tolerance;
    let (eqs, ineqs) = match classify(qp, tol) {
        Ok(split) => split,
        Err(certificate) => return Ok(QpOutcome::Infeasible { certificate }),
    };
    let all: Vec<&Row> = eqs.iter().chain(ineqs.iter()).collect();
    let meq = eqs.len();

    let chol = qp
        .hessian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("QP Hessian is not positive definite".into()))?;
    let l = chol.l();
    let j = l
        .transpose()
        .solve_upper_triangular(&Matrix::identity(n, n))
        .ok_or_else(|| Error::Domain("singular Cholesky factor".into()))?;
    let mut x = -chol.solve(&qp.linear);
    let mut ws = Workspace { n, j, r: Matrix::zeros(n, n), r_norm: 1.0, active: Vec::new(), u: Vec::new() };
    let dependent = |d: &Vector, iq: usize| -> bool {
        let tail: f64 = d.rows(iq, n - iq).norm_squared();
        tail <= 1e-20 * d.norm_squared().max(1e-300)
    };

    let certificate_from = |ws: &Workspace, p: usize, r: &[f64], sign: f64| -> Vector {
        let mut rows = vec![all[p]];
        let mut vals = vec![sign];
        for (a, rk) in ws.active.iter().zip(r) {
            rows.push(all[*a]);
            vals.push(-sign * rk);
        }
        scatter(&rows, &vals, m)
    };

    for p in 0..meq {
        let np = &all[p].normal;
        let mut d = ws.compute_d(np);
        let residual = all[p].rhs - np.dot(&x);
        if n == ws.iq() || dependent(&d, ws.iq()) {
            if residual.abs() <= tol {
                continue;
            }
            let r = ws.dual_direction(&d);
            let sign = residual.signum();
            return Ok(QpOutcome::Infeasible { certificate: certificate_from(&ws, p, &r, sign) });
        }
        let z = ws.step_direction(&d);
        let r = ws.dual_direction(&d);
        let t = residual / z.dot(np);
        x.axpy(t, &z, 1.0);
        for (uk, rk) in ws.u.iter_mut().zip(&r) {
            *uk -= t * rk;
        }
        ws.add(&mut d, p, t);
    }

    let limit = 50 * (n + m) + 100;
    let mut iterations = 0;
    loop {
        // most violated inactive inequality
        let mut worst: Option<(usize, f64)> = None;
        for p in meq..all.len() {
            if ws.active.contains(&p) {
                continue;
            }
            let s = all[p].normal.dot(&x) - all[p].rhs;
            if s < -tol && worst.is_none_or(|(_, w)| s < w) {
                worst = Some((p, s));
            }
        }
        let Some((p, mut s_p)) = worst else {
            let values: Vec<f64> = ws.u.clone();
            let rows: Vec<&Row> = ws.active.iter().map(|a| all[*a]).collect();
            let multipliers = scatter(&rows, &values, m);
            return Ok(QpOutcome::Optimal(QpOptimum { objective: qp.objective(&x), x, multipliers, iterations }));
        };
        let np = all[p].normal.clone();
        let mut u_plus = 0.0;
        loop {
            iterations += 1;
            if iterations > limit {
                return Err(Error::IterationLimit { what: "dual active-set QP", limit });
            }
            let mut d = ws.compute_d(&np);
            let full_rank = ws.iq() < n && !dependent(&d, ws.iq());
            let z = if full_rank { ws.step_direction(&d) } else { Vector::zeros(n) };
            let r = ws.dual_direction(&d);

            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in meq..ws.iq() {
                if r[k] > 0.0 {
                    let ratio = ws.u[k] / r[k];
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(ws.active[k]);
                    }
                }
            }
            let t2 = if full_rank {
                let step = -s_p / z.dot(&np);
                if step >= 0.0 {
                    step
                } else {
                    f64::INFINITY
                }
            } else {
                f64::INFINITY
            };

            if t1.is_infinite() && t2.is_infinite() {
                return Ok(QpOutcome::Infeasible { certificate: certificate_from(&ws, p, &r, 1.0) });
            }
            if t2.is_infinite() {
                for (uk, rk) in ws.u.iter_mut().zip(&r) {
                    *uk -= t1 * rk;
                }
                u_plus += t1;
                ws.remove(drop.expect("finite partial step has a blocking constraint"));
                continue;
            }
            let t = t1.min(t2);
            x.axpy(t, &z, 1.0);
            for (uk, rk) in ws.u.iter_mut().zip(&r) {
                *uk -= t * rk;
            }
            u_plus += t;
            if t2 <= t1 {
                ws.add(&mut d, p, u_plus);
                break;
            }
            ws.remove(drop.expect("partial step has a blocking constraint"));
            s_p = np.dot(&x) - all[p].rhs;
        }
    }
}
