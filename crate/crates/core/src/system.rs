use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{as_rows, Matrix, Vector};

/// Discrete-time LTI plant `x(k+1) = A x(k) + B u(k) + w(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    #[serde(with = "as_rows")]
    pub a: Matrix,
    #[serde(with = "as_rows")]
    pub b: Matrix,
}

impl LinearSystem {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::Dimension(format!(
                "B has {} rows, A has {}",
                b.nrows(),
                a.nrows()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("system matrices must be finite".into()));
        }
        Ok(Self { a, b })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Nominal step `A x + B u`.
    pub fn step(&self, x: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b * u
    }

    /// `A + B K`.
    pub fn closed_loop(&self, gain: &Matrix) -> Matrix {
        &self.a + &self.b * gain
    }
}
