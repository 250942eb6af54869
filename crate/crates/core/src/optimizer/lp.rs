//! Dense tableau simplex for `max cᵀx s.t. Hx ≤ h` with `h ≥ 0`.
//!
//! The origin is feasible, so the slack basis is a valid start and no
//! phase 1 is needed. Free variables are split as `x = x⁺ − x⁻`. Bland's
//! rule rules out cycling on degenerate vertices.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { value: f64, x: Vector },
    Unbounded,
}

const PIVOT_TOL: f64 = 1e-12;

pub fn maximize(c: &Vector, h_mat: &Matrix, h: &Vector) -> Result<LpOutcome> {
    let (m, n) = h_mat.shape();
    if c.len() != n || h.len() != m {
        return Err(Error::Dimension(format!("LP with {m}x{n} constraints, {} costs, {} offsets", c.len(), h.len())));
    }
    if let Some(i) = h.iter().position(|v| *v < -1e-12) {
        return Err(Error::Domain(format!("LP requires the origin to be feasible (offset {i} = {})", h[i])));
    }
    if n == 0 {
        return Ok(LpOutcome::Optimal { value: 0.0, x: Vector::zeros(0) });
    }

    let cols = 2 * n + m;
    let mut t = Matrix::zeros(m, cols + 1);
    for i in 0..m {
        for j in 0..n {
            t[(i, j)] = h_mat[(i, j)];
            t[(i, n + j)] = -h_mat[(i, j)];
        }
        t[(i, 2 * n + i)] = 1.0;
        t[(i, cols)] = h[i].max(0.0);
    }
    let mut cost = vec![0.0; cols];
    for j in 0..n {
        cost[j] = c[j];
        cost[n + j] = -c[j];
    }
    let cost_tol = 1e-11 * c.amax().max(1.0);
    let mut basis: Vec<usize> = (2 * n..cols).collect();

    let limit = 50 * (m + cols) + 1000;
    for _ in 0..limit {
        let Some(enter) = (0..cols).find(|&j| cost[j] > cost_tol) else {
            let mut x = Vector::zeros(n);
            for (i, &b) in basis.iter().enumerate() {
                if b < n {
                    x[b] += t[(i, cols)];
                } else if b < 2 * n {
                    x[b - n] -= t[(i, cols)];
                }
            }
            return Ok(LpOutcome::Optimal { value: c.dot(&x), x });
        };

        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            let a = t[(i, enter)];
            if a > PIVOT_TOL {
                let ratio = t[(i, cols)] / a;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((r, best)) => {
                        if ratio < best - 1e-14 || (ratio <= best + 1e-14 && basis[i] < basis[r]) {
                            Some((i, ratio))
                        } else {
                            Some((r, best))
                        }
                    }
                };
            }
        }
        let Some((row, _)) = leave else {
            return Ok(LpOutcome::Unbounded);
        };

        let p = t[(row, enter)];
        for j in 0..=cols {
            t[(row, j)] /= p;
        }
        for i in 0..m {
            if i != row {
                let factor = t[(i, enter)];
                if factor != 0.0 {
                    for j in 0..=cols {
                        t[(i, j)] -= factor * t[(row, j)];
                    }
                }
            }
        }
        let factor = cost[enter];
        for (j, cj) in cost.iter_mut().enumerate() {
            *cj -= factor * t[(row, j)];
        }
        basis[row] = enter;
    }
    Err(Error::IterationLimit { what: "simplex", limit })
}
