//! Disturbance models, seeded random streams and variance propagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{psd_factor, Matrix, Symmetric, Vector};

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Streams with the same pair replay the same sequence; distinct stream ids
/// select independent ChaCha streams under the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Stream for one `(trial, step)` cell of an ensemble.
    pub fn for_trial_step(seed: u64, trial: usize, step: usize) -> Self {
        Self::new(seed, ((trial as u64) << 32) | (step as u64 & 0xffff_ffff))
    }

    /// An independent family of streams for another purpose under the same seed.
    pub fn derive(&self, salt: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(salt)), self.stream_id)
    }

    pub fn with_stream(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Vector of i.i.d. standard normal draws.
pub fn standard_normal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vector {
    Vector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { value: f64::NAN, std_error: f64::NAN, samples: 0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self { value: mean, std_error: (var / n as f64).sqrt(), samples: n }
    }

    /// Binomial proportion with standard error `√(p(1−p)/n)`.
    pub fn proportion(successes: usize, n: usize) -> Self {
        if n == 0 {
            return Self { value: f64::NAN, std_error: f64::NAN, samples: 0 };
        }
        let p = successes as f64 / n as f64;
        Self { value: p, std_error: (p * (1.0 - p) / n as f64).sqrt(), samples: n }
    }
}

/// Gaussian disturbance `w ~ N(mean, covariance)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDisturbance {
    mean: Vector,
    covariance: Symmetric,
    factor: Matrix,
}

impl GaussianDisturbance {
    pub fn new(mean: Vector, covariance: Symmetric) -> Result<Self> {
        if mean.len() != covariance.dim() {
            return Err(Error::Dimension(format!(
                "mean has length {}, covariance is {}x{}",
                mean.len(),
                covariance.dim(),
                covariance.dim()
            )));
        }
        let factor = psd_factor(&covariance)?;
        Ok(Self { mean, covariance, factor })
    }

    pub fn zero_mean(covariance: Symmetric) -> Result<Self> {
        let n = covariance.dim();
        Self::new(Vector::zeros(n), covariance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn covariance(&self) -> &Symmetric {
        &self.covariance
    }

    /// Lower-triangular factor `L` with `L Lᵀ = covariance`.
    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    /// `mean + L ξ` for a given standard normal vector `ξ`.
    pub fn transform(&self, xi: &Vector) -> Vector {
        &self.mean + &self.factor * xi
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let xi = standard_normal(self.dim(), rng);
        self.transform(&xi)
    }

    pub fn is_degenerate(&self) -> bool {
        self.covariance.amax() == 0.0
    }
}

/// Modeled disturbance plus an optional unmodeled burst that replaces it at
/// steps `k = p, 2p, 3p, …` (never at `k = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSchedule {
    pub base: GaussianDisturbance,
    pub burst: Option<GaussianDisturbance>,
    pub burst_period: usize,
}

impl DisturbanceSchedule {
    pub fn new(base: GaussianDisturbance, burst: Option<GaussianDisturbance>, burst_period: usize) -> Result<Self> {
        if let Some(b) = &burst {
            if burst_period == 0 {
                return Err(Error::Config("burst period must be at least 1".into()));
            }
            if b.dim() != base.dim() {
                return Err(Error::Dimension("burst and base disturbances differ in dimension".into()));
            }
        }
        Ok(Self { base, burst, burst_period })
    }

    pub fn stationary(base: GaussianDisturbance) -> Self {
        Self { base, burst: None, burst_period: 0 }
    }

    pub fn is_burst(&self, step: usize) -> bool {
        self.burst.is_some() && step > 0 && step.is_multiple_of(self.burst_period)
    }

    pub fn model_at(&self, step: usize) -> &GaussianDisturbance {
        match &self.burst {
            Some(b) if self.is_burst(step) => b,
            _ => &self.base,
        }
    }

    /// Disturbance `w(step)` for one trial. Base and burst share the
    /// underlying normal draw, so paired runs see common random numbers.
    pub fn draw(&self, seed: u64, trial: usize, step: usize) -> Vector {
        let mut rng = RngStream::for_trial_step(seed, trial, step).rng();
        let xi = standard_normal(self.base.dim(), &mut rng);
        self.model_at(step).transform(&xi)
    }
}

/// `[var(x(0)), …, var(x(n))]` for `x(i+1) = a_k x(i) + w(i)` with `var(x(0)) = 0`.
pub fn propagate_variance(a_k: &Matrix, w_cov: &Symmetric, n: usize) -> Vec<Symmetric> {
    propagate_variance_from(a_k, w_cov, &Symmetric::zeros(w_cov.dim()), n)
}

/// Same recursion from an arbitrary initial variance.
pub fn propagate_variance_from(a_k: &Matrix, w_cov: &Symmetric, initial: &Symmetric, n: usize) -> Vec<Symmetric> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(initial.clone());
    for i in 0..n {
        let next = a_k * out[i].as_matrix() * a_k.transpose() + w_cov.as_matrix();
        out.push(Symmetric::symmetrize(next));
    }
    out
}

/// Monte Carlo estimate of `E ‖w‖_P`.
pub fn expected_p_norm(model: &GaussianDisturbance, p: &Symmetric, samples: usize, rng: &RngStream) -> Result<Estimate> {
    if samples < 1000 {
        return Err(Error::Domain(format!("expected_p_norm needs at least 1000 samples, got {samples}")));
    }
    if p.dim() != model.dim() {
        return Err(Error::Dimension("weight and disturbance dimensions differ".into()));
    }
    if model.is_degenerate() && model.mean().amax() == 0.0 {
        return Ok(Estimate { value: 0.0, std_error: 0.0, samples });
    }
    let mut r = rng.rng();
    let norms: Vec<f64> = (0..samples).map(|_| p.weighted_norm(&model.sample(&mut r))).collect();
    Ok(Estimate::from_samples(&norms))
}
