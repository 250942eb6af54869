//! Probabilistic reachable sets (PRS) and constraint tightening.
//!
//! A PRS of level `p` for the autonomous error system `e(k+1) = A_K e(k) + w(k)`
//! started at the origin contains `e(k)` with probability at least `p`. Two
//! shapes are supported: ellipsoids `{e : eᵀΣ⁻¹e ≤ p̃}` and slabs
//! `{e : |a·e| ≤ h}` aligned with a constraint normal. Tightening a polytope
//! by a PRS is the Pontryagin difference, computed face by face from the
//! support function of the set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    as_rows, as_vec, chi2_quantile, normal_quantile, solve_discrete_lyapunov, Matrix, Symmetric, Vector,
};
use crate::optimizer::lp::{maximize, LpOutcome};
use crate::uncertainty::{propagate_variance, Estimate, GaussianDisturbance, RngStream};

/// Ellipsoid `{e : eᵀ Σ⁻¹ e ≤ radius}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidPrs {
    pub shape: Symmetric,
    pub radius: f64,
    pub level: f64,
}

/// Slab `{e : |direction · e| ≤ half_width}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalPrs {
    #[serde(with = "as_vec")]
    pub direction: Vector,
    pub half_width: f64,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Prs {
    Ellipsoid(EllipsoidPrs),
    Interval(IntervalPrs),
}

/// How the radius of an ellipsoidal PRS is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrsMethod {
    /// Multivariate Chebyshev bound, valid for any zero-mean distribution.
    Chebyshev,
    /// Chi-squared quantile, exact for Gaussian errors.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Steps(usize),
    Infinite,
}

/// Polytope `{x : H x ≤ h}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename = "polytope")]
pub struct Polytope {
    #[serde(with = "as_rows")]
    pub normals: Matrix,
    #[serde(with = "as_vec")]
    pub offsets: Vector,
}

impl Polytope {
    pub fn new(normals: Matrix, offsets: Vector) -> Result<Self> {
        if normals.nrows() != offsets.len() {
            return Err(Error::Dimension(format!(
                "{} normals but {} offsets",
                normals.nrows(),
                offsets.len()
            )));
        }
        if normals.iter().chain(offsets.iter()).any(|v| v.is_nan()) {
            return Err(Error::Domain("polytope data contains NaN".into()));
        }
        Ok(Self { normals, offsets })
    }

    /// All of `ℝⁿ` (no faces).
    pub fn whole_space(dim: usize) -> Self {
        Self { normals: Matrix::zeros(0, dim), offsets: Vector::zeros(0) }
    }

    /// `{0}` encoded as the opposing rows `±I` with zero offsets.
    pub fn origin(dim: usize) -> Self {
        let mut normals = Matrix::zeros(2 * dim, dim);
        for i in 0..dim {
            normals[(2 * i, i)] = 1.0;
            normals[(2 * i + 1, i)] = -1.0;
        }
        Self { normals, offsets: Vector::zeros(2 * dim) }
    }

    /// `{x : |direction · x| ≤ bound}` as two opposing faces.
    pub fn slab(direction: &Vector, bound: f64) -> Self {
        let n = direction.len();
        let mut normals = Matrix::zeros(2, n);
        normals.set_row(0, &direction.transpose());
        normals.set_row(1, &(-direction).transpose());
        Self { normals, offsets: Vector::from_vec(vec![bound, bound]) }
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn num_faces(&self) -> usize {
        self.normals.nrows()
    }

    pub fn face(&self, i: usize) -> Vector {
        self.normals.row(i).transpose()
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        (0..self.num_faces()).all(|i| self.normals.row(i).dot(&x.transpose()) <= self.offsets[i] + tol)
    }

    pub fn contains_origin(&self) -> bool {
        self.offsets.iter().all(|h| *h >= 0.0)
    }

    /// Stack the faces of both polytopes.
    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension("intersecting polytopes of different dimension".into()));
        }
        let m = self.num_faces() + other.num_faces();
        let mut normals = Matrix::zeros(m, self.dim());
        normals.rows_mut(0, self.num_faces()).copy_from(&self.normals);
        normals.rows_mut(self.num_faces(), other.num_faces()).copy_from(&other.normals);
        let offsets = Vector::from_iterator(m, self.offsets.iter().chain(other.offsets.iter()).copied());
        Polytope::new(normals, offsets)
    }

    /// `{x : M x ∈ self}`.
    pub fn preimage(&self, map: &Matrix) -> Result<Polytope> {
        if map.nrows() != self.dim() {
            return Err(Error::Dimension("preimage map rows must equal polytope dimension".into()));
        }
        Polytope::new(&self.normals * map, self.offsets.clone())
    }

    /// `sup { c·x : x ∈ self }`, `None` when unbounded. Requires the origin inside.
    pub fn support(&self, c: &Vector) -> Result<Option<f64>> {
        match maximize(c, &self.normals, &self.offsets)? {
            LpOutcome::Optimal { value, .. } => Ok(Some(value)),
            LpOutcome::Unbounded => Ok(None),
        }
    }

    /// `self ⊆ other`, decided by one LP per face of `other`.
    pub fn is_subset_of(&self, other: &Polytope, tol: f64) -> Result<bool> {
        for i in 0..other.num_faces() {
            match self.support(&other.face(i))? {
                Some(v) if v <= other.offsets[i] + tol => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }

    /// Bounded iff the support is finite along every `±eᵢ`.
    pub fn is_bounded(&self) -> Result<bool> {
        for i in 0..self.dim() {
            for sign in [1.0, -1.0] {
                let mut c = Vector::zeros(self.dim());
                c[i] = sign;
                if self.support(&c)?.is_none() {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

fn check_level(level: f64, allow_zero: bool) -> Result<()> {
    let ok = if allow_zero { (0.0..1.0).contains(&level) } else { level > 0.0 && level < 1.0 };
    if !ok {
        return Err(Error::Domain(format!("PRS level must lie in (0, 1), got {level}")));
    }
    Ok(())
}

impl EllipsoidPrs {
    pub fn dim(&self) -> usize {
        self.shape.dim()
    }

    /// `eᵀ Σ⁻¹ e ≤ radius`, with singular directions of `Σ` admitting only zero.
    pub fn contains(&self, e: &Vector) -> bool {
        EllipsoidTest::new(self).contains(e)
    }

    pub fn support(&self, direction: &Vector) -> f64 {
        if self.radius.is_infinite() {
            return if direction.amax() == 0.0 { 0.0 } else { f64::INFINITY };
        }
        (self.radius * self.shape.directional_variance(direction)).max(0.0).sqrt()
    }
}

impl IntervalPrs {
    pub fn contains(&self, e: &Vector) -> bool {
        self.direction.dot(e).abs() <= self.half_width
    }

    pub fn support(&self, direction: &Vector) -> Result<f64> {
        if direction.amax() == 0.0 {
            return Ok(0.0);
        }
        let aa = self.direction.norm_squared();
        let c = direction.dot(&self.direction) / aa;
        let residual = (direction - &self.direction * c).norm();
        if residual > 1e-9 * direction.norm() {
            return Err(Error::Unbounded);
        }
        Ok(self.half_width * c.abs())
    }
}

impl Prs {
    pub fn level(&self) -> f64 {
        match self {
            Prs::Ellipsoid(e) => e.level,
            Prs::Interval(i) => i.level,
        }
    }

    pub fn contains(&self, e: &Vector) -> bool {
        match self {
            Prs::Ellipsoid(s) => s.contains(e),
            Prs::Interval(s) => s.contains(e),
        }
    }

    /// Precomputed membership test for Monte Carlo loops.
    pub fn membership(&self) -> Membership {
        match self {
            Prs::Ellipsoid(s) => Membership::Ellipsoid(EllipsoidTest::new(s)),
            Prs::Interval(s) => Membership::Interval(s.clone()),
        }
    }

    /// `sup { direction · e : e ∈ self }`.
    pub fn support(&self, direction: &Vector) -> Result<f64> {
        match self {
            Prs::Ellipsoid(s) => {
                let v = s.support(direction);
                if v.is_infinite() {
                    Err(Error::Unbounded)
                } else {
                    Ok(v)
                }
            }
            Prs::Interval(s) => s.support(direction),
        }
    }
}

/// Eigen-decomposed ellipsoid membership.
#[derive(Debug, Clone)]
pub struct EllipsoidTest {
    vectors: Matrix,
    inv_values: Vec<Option<f64>>,
    radius: f64,
}

impl EllipsoidTest {
    fn new(set: &EllipsoidPrs) -> Self {
        let eig = set.shape.as_matrix().clone().symmetric_eigen();
        let scale = eig.eigenvalues.amax().max(1e-300);
        let inv_values = eig
            .eigenvalues
            .iter()
            .map(|l| if *l > 1e-12 * scale { Some(1.0 / l) } else { None })
            .collect();
        Self { vectors: eig.eigenvectors, inv_values, radius: set.radius }
    }

    pub fn contains(&self, e: &Vector) -> bool {
        if self.radius.is_infinite() {
            return true;
        }
        let coords = self.vectors.transpose() * e;
        let mut s = 0.0;
        for (c, inv) in coords.iter().zip(&self.inv_values) {
            match inv {
                Some(inv) => s += c * c * inv,
                None if c.abs() > 1e-12 => return false,
                None => {}
            }
        }
        s <= self.radius
    }
}

#[derive(Debug, Clone)]
pub enum Membership {
    Ellipsoid(EllipsoidTest),
    Interval(IntervalPrs),
}

impl Membership {
    pub fn contains(&self, e: &Vector) -> bool {
        match self {
            Membership::Ellipsoid(t) => t.contains(e),
            Membership::Interval(s) => s.contains(e),
        }
    }
}

/// Chebyshev ellipsoid: radius `dim / (1 − level)`.
pub fn chebyshev_prs(sigma: &Symmetric, level: f64, dim: usize) -> Result<EllipsoidPrs> {
    check_level(level, false)?;
    Ok(EllipsoidPrs { shape: sigma.clone(), radius: dim as f64 / (1.0 - level), level })
}

/// Gaussian ellipsoid: radius is the chi-squared quantile with `dim` degrees of freedom.
pub fn gaussian_prs(sigma: &Symmetric, level: f64, dim: usize) -> Result<EllipsoidPrs> {
    check_level(level, true)?;
    Ok(EllipsoidPrs { shape: sigma.clone(), radius: chi2_quantile(level, dim)?, level })
}

/// Slab from the Gaussian marginal of `direction · e`.
pub fn marginal_interval_prs(direction: &Vector, sigma: &Symmetric, level: f64) -> Result<IntervalPrs> {
    check_level(level, true)?;
    if direction.amax() == 0.0 {
        return Err(Error::Domain("interval PRS direction must be nonzero".into()));
    }
    if direction.len() != sigma.dim() {
        return Err(Error::Dimension("direction and covariance dimensions differ".into()));
    }
    let z = normal_quantile(0.5 * (1.0 + level))?;
    let std = sigma.directional_variance(direction).max(0.0).sqrt();
    Ok(IntervalPrs { direction: direction.clone(), half_width: z * std, level })
}

/// Ellipsoidal PRS on `var(e(n))`, or on the stationary variance for [`Horizon::Infinite`].
pub fn n_step_prs(a_k: &Matrix, w_cov: &Symmetric, horizon: Horizon, level: f64, method: PrsMethod) -> Result<EllipsoidPrs> {
    let shape = match horizon {
        Horizon::Infinite => solve_discrete_lyapunov(a_k, w_cov)?,
        Horizon::Steps(n) => propagate_variance(a_k, w_cov, n).pop().expect("non-empty"),
    };
    let dim = w_cov.dim();
    match method {
        PrsMethod::Chebyshev => chebyshev_prs(&shape, level, dim),
        PrsMethod::Gaussian => gaussian_prs(&shape, level, dim),
    }
}

/// Empirical `Pr(x(n) ∈ set)` for `x(i+1) = a_k x(i) + w(i)`, `x(0) = 0`.
///
/// Trial `t` draws from its own stream, so the estimate does not depend on
/// the number of worker threads.
pub fn mc_prs_level(
    a_k: &Matrix,
    dist: &GaussianDisturbance,
    set: &Prs,
    n: usize,
    trials: usize,
    rng: &RngStream,
) -> Result<Estimate> {
    if trials < 1000 {
        return Err(Error::Domain(format!("mc_prs_level needs at least 1000 trials, got {trials}")));
    }
    let test = set.membership();
    let base = rng.derive(rng.stream_id);
    let hits: usize = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = base.with_stream(t as u64).rng();
            let mut x = Vector::zeros(dist.dim());
            for _ in 0..n {
                x = a_k * x + dist.sample(&mut r);
            }
            usize::from(test.contains(&x))
        })
        .sum();
    Ok(Estimate::proportion(hits, trials))
}

/// Offsets reduced by the support of the PRS along each face normal.
pub fn pontryagin_tighten(x_set: &Polytope, prs: &Prs) -> Result<Polytope> {
    let sets: Vec<&Prs> = vec![prs; x_set.num_faces()];
    pontryagin_tighten_faces(x_set, &sets)
}

/// Per-face tightening: face `i` is shrunk by the support of `prs[i]`.
pub fn pontryagin_tighten_faces(x_set: &Polytope, prs: &[&Prs]) -> Result<Polytope> {
    tighten_with(x_set, |i, normal| prs[i].support(normal), prs.len())
}

/// `U ⊖ M·R`: the support of the image set along `h` is the support of `R` along `Mᵀh`.
pub fn pontryagin_tighten_image(u_set: &Polytope, prs: &Prs, map: &Matrix) -> Result<Polytope> {
    if map.nrows() != u_set.dim() {
        return Err(Error::Dimension("image map rows must equal set dimension".into()));
    }
    tighten_with(u_set, |_, normal| prs.support(&(map.transpose() * normal)), u_set.num_faces())
}

fn tighten_with(set: &Polytope, support: impl Fn(usize, &Vector) -> Result<f64>, count: usize) -> Result<Polytope> {
    if count != set.num_faces() {
        return Err(Error::Dimension(format!("{} PRS for {} faces", count, set.num_faces())));
    }
    let mut offsets = set.offsets.clone();
    for i in 0..set.num_faces() {
        let normal = set.face(i);
        let s = support(i, &normal)?;
        offsets[i] -= s;
        if offsets[i] < 0.0 {
            return Err(Error::EmptyTightening {
                face: i,
                offset: offsets[i],
                original: set.offsets[i],
                support: s,
            });
        }
    }
    Polytope::new(set.normals.clone(), offsets)
}

/// Face-wise tightening by marginal interval PRS of the stationary error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalTightening {
    /// One slab per state face, along the face normal.
    pub state_prs: Vec<IntervalPrs>,
    /// One slab per input face, along `Kᵀh` in error space.
    pub input_prs: Vec<IntervalPrs>,
    pub state_set: Polytope,
    pub input_set: Polytope,
}

/// `X ⊖ R_x` and `U ⊖ K R_u`, each face tightened by the marginal of `sigma`
/// at the given level. For a slab constraint this is the exact two-sided PRS.
pub fn marginal_tightening(
    x_set: &Polytope,
    u_set: &Polytope,
    gain: &Matrix,
    sigma: &Symmetric,
    state_level: f64,
    input_level: f64,
) -> Result<MarginalTightening> {
    if gain.nrows() != u_set.dim() || gain.ncols() != x_set.dim() {
        return Err(Error::Dimension("gain does not map the state set onto the input set".into()));
    }
    let interval = |dir: Vector, level: f64| -> Result<IntervalPrs> {
        if dir.amax() == 0.0 {
            Ok(IntervalPrs { direction: dir, half_width: 0.0, level })
        } else {
            marginal_interval_prs(&dir, sigma, level)
        }
    };
    let state_prs = (0..x_set.num_faces()).map(|i| interval(x_set.face(i), state_level)).collect::<Result<Vec<_>>>()?;
    let input_prs = (0..u_set.num_faces())
        .map(|i| interval(gain.transpose() * u_set.face(i), input_level))
        .collect::<Result<Vec<_>>>()?;
    let state_set = tighten_with(x_set, |i, _| Ok(state_prs[i].half_width), x_set.num_faces())?;
    let input_set = tighten_with(u_set, |i, _| Ok(input_prs[i].half_width), u_set.num_faces())?;
    Ok(MarginalTightening { state_prs, input_prs, state_set, input_set })
}
