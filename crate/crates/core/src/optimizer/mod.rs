//! Nominal finite-horizon MPC: condensed QP construction, solution and
//! terminal ingredients.

pub mod lp;
pub mod qp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{lqr_gain, Matrix, Symmetric, Vector};
use crate::reachability::Polytope;
use crate::system::LinearSystem;

pub use qp::{kkt_residuals, solve_qp, verify_certificate, KktResiduals, QpForm, QpOptimum, QpOptions, QpOutcome};

/// `min Σ ‖zᵢ‖²_Q + ‖vᵢ‖²_R + ‖z_N‖²_{Q_f}` subject to `zᵢ ∈ 𝒵ᵢ`, `vᵢ ∈ 𝒱ᵢ`
/// for `i < N` and `z_N ∈ 𝒵_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    pub system: LinearSystem,
    pub horizon: usize,
    pub stage_state_cost: Symmetric,
    pub stage_input_cost: Symmetric,
    pub terminal_cost: Symmetric,
    state_sets: Vec<Polytope>,
    input_sets: Vec<Polytope>,
    pub terminal_set: Polytope,
}

impl MpcProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        system: LinearSystem,
        horizon: usize,
        q: Symmetric,
        r: Symmetric,
        q_f: Symmetric,
        state_set: Polytope,
        input_set: Polytope,
        terminal_set: Polytope,
    ) -> Result<Self> {
        let problem = Self {
            state_sets: vec![state_set; horizon],
            input_sets: vec![input_set; horizon],
            system,
            horizon,
            stage_state_cost: q,
            stage_input_cost: r,
            terminal_cost: q_f,
            terminal_set,
        };
        problem.validate()?;
        Ok(problem)
    }

    /// Replace the constant sets by one set per prediction step.
    pub fn with_stage_sets(mut self, state_sets: Vec<Polytope>, input_sets: Vec<Polytope>) -> Result<Self> {
        if state_sets.len() != self.horizon || input_sets.len() != self.horizon {
            return Err(Error::Dimension(format!(
                "expected {} stage sets, got {} state and {} input",
                self.horizon,
                state_sets.len(),
                input_sets.len()
            )));
        }
        self.state_sets = state_sets;
        self.input_sets = input_sets;
        self.validate()?;
        Ok(self)
    }

    pub fn state_set(&self, stage: usize) -> &Polytope {
        &self.state_sets[stage]
    }

    pub fn input_set(&self, stage: usize) -> &Polytope {
        &self.input_sets[stage]
    }

    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.system.input_dim()
    }

    fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.input_dim();
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        for (name, cost, dim) in [
            ("Q", &self.stage_state_cost, n),
            ("R", &self.stage_input_cost, m),
            ("Q_f", &self.terminal_cost, n),
        ] {
            if cost.dim() != dim {
                return Err(Error::Dimension(format!("{name} is {}x{0}, expected {dim}x{dim}", cost.dim())));
            }
            if !cost.is_positive_definite(1e-12) {
                return Err(Error::Config(format!("{name} must be positive definite")));
            }
        }
        if self.state_sets.iter().any(|s| s.dim() != n) || self.terminal_set.dim() != n {
            return Err(Error::Dimension("state sets must match the state dimension".into()));
        }
        if self.input_sets.iter().any(|s| s.dim() != m) {
            return Err(Error::Dimension("input sets must match the input dimension".into()));
        }
        if !self.terminal_set.contains_origin() {
            return Err(Error::Config("terminal set must contain the origin".into()));
        }
        for set in &self.state_sets {
            if !set.contains_origin() {
                return Err(Error::Config("state constraint sets must contain the origin".into()));
            }
        }
        for set in &self.input_sets {
            if !set.contains_origin() {
                return Err(Error::Config("input constraint sets must contain the origin".into()));
            }
        }
        if let Some(last) = self.state_sets.last() {
            if !self.terminal_set.is_subset_of(last, 1e-9)? {
                return Err(Error::Config("terminal set must lie inside the state constraint set".into()));
            }
        }
        Ok(())
    }

    pub fn build_qp(&self, z0: &Vector) -> Result<QpForm> {
        CondensedMpc::new(self)?.build(z0)
    }

    pub fn solve(&self, z0: &Vector, options: &QpOptions) -> Result<QpSolution> {
        CondensedMpc::new(self)?.solve(z0, options)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

/// Solution of the nominal problem in trajectory form.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub status: QpStatus,
    /// `z₀ … z_N`; empty when infeasible.
    pub nominal_states: Vec<Vector>,
    /// `v₀ … v_{N−1}`; empty when infeasible.
    pub nominal_inputs: Vec<Vector>,
    pub optimal_cost: f64,
    pub multipliers: Option<Vector>,
    pub certificate: Option<Vector>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

/// Condensed (input-only) form of an [`MpcProblem`].
///
/// The stacked states are `Z = Φ z₀ + Γ V`. Everything except the offsets and
/// the dependence on `z₀` is computed once.
#[derive(Debug, Clone)]
pub struct CondensedMpc {
    n: usize,
    m: usize,
    horizon: usize,
    phi: Matrix,
    gamma: Matrix,
    hessian: Matrix,
    linear_map: Matrix,
    constant_map: Matrix,
    rows_v: Matrix,
    rows_z0: Matrix,
    offsets: Vector,
    face_counts: Vec<usize>,
    problem: MpcProblem,
}

impl CondensedMpc {
    pub fn new(problem: &MpcProblem) -> Result<Self> {
        let n = problem.state_dim();
        let m = problem.input_dim();
        let big_n = problem.horizon;
        let a = &problem.system.a;
        let b = &problem.system.b;

        let mut phi = Matrix::zeros((big_n + 1) * n, n);
        let mut power = Matrix::identity(n, n);
        for i in 0..=big_n {
            phi.view_mut((i * n, 0), (n, n)).copy_from(&power);
            power = a * power;
        }
        let mut gamma = Matrix::zeros((big_n + 1) * n, big_n * m);
        for i in 1..=big_n {
            for j in 0..i {
                let blk = phi.view(((i - 1 - j) * n, 0), (n, n)) * b;
                gamma.view_mut((i * n, j * m), (n, m)).copy_from(&blk);
            }
        }
        let mut q_bar = Matrix::zeros((big_n + 1) * n, (big_n + 1) * n);
        for i in 0..big_n {
            q_bar.view_mut((i * n, i * n), (n, n)).copy_from(problem.stage_state_cost.as_matrix());
        }
        q_bar
            .view_mut((big_n * n, big_n * n), (n, n))
            .copy_from(problem.terminal_cost.as_matrix());
        let mut r_bar = Matrix::zeros(big_n * m, big_n * m);
        for i in 0..big_n {
            r_bar.view_mut((i * m, i * m), (m, m)).copy_from(problem.stage_input_cost.as_matrix());
        }
        let gq = gamma.transpose() * &q_bar;
        let mut hessian = (&gq * &gamma + &r_bar) * 2.0;
        hessian = (&hessian + hessian.transpose()) * 0.5;
        let linear_map = &gq * &phi * 2.0;
        let constant_map = phi.transpose() * &q_bar * &phi;

        let mut face_counts = Vec::with_capacity(2 * big_n + 1);
        let mut blocks_v: Vec<Matrix> = Vec::new();
        let mut blocks_z: Vec<Matrix> = Vec::new();
        let mut offs: Vec<f64> = Vec::new();
        for i in 0..big_n {
            let set = problem.state_set(i);
            blocks_v.push(&set.normals * gamma.view((i * n, 0), (n, big_n * m)));
            blocks_z.push(&set.normals * phi.view((i * n, 0), (n, n)));
            offs.extend(set.offsets.iter());
            face_counts.push(set.num_faces());
        }
        for i in 0..big_n {
            let set = problem.input_set(i);
            let mut sel = Matrix::zeros(set.num_faces(), big_n * m);
            sel.view_mut((0, i * m), (set.num_faces(), m)).copy_from(&set.normals);
            blocks_v.push(sel);
            blocks_z.push(Matrix::zeros(set.num_faces(), n));
            offs.extend(set.offsets.iter());
            face_counts.push(set.num_faces());
        }
        let tset = &problem.terminal_set;
        blocks_v.push(&tset.normals * gamma.view((big_n * n, 0), (n, big_n * m)));
        blocks_z.push(&tset.normals * phi.view((big_n * n, 0), (n, n)));
        offs.extend(tset.offsets.iter());
        face_counts.push(tset.num_faces());

        let rows: usize = face_counts.iter().sum();
        let mut rows_v = Matrix::zeros(rows, big_n * m);
        let mut rows_z0 = Matrix::zeros(rows, n);
        let mut at = 0;
        for (bv, bz) in blocks_v.iter().zip(&blocks_z) {
            rows_v.view_mut((at, 0), (bv.nrows(), bv.ncols())).copy_from(bv);
            rows_z0.view_mut((at, 0), (bz.nrows(), n)).copy_from(bz);
            at += bv.nrows();
        }

        Ok(Self {
            n,
            m,
            horizon: big_n,
            phi,
            gamma,
            hessian,
            linear_map,
            constant_map,
            rows_v,
            rows_z0,
            offsets: Vector::from_vec(offs),
            face_counts,
            problem: problem.clone(),
        })
    }

    pub fn problem(&self) -> &MpcProblem {
        &self.problem
    }

    /// Reuse the structure for a problem that differs only in its offsets.
    pub fn with_offsets_from(&self, problem: &MpcProblem) -> Result<Self> {
        let same_normals = problem.horizon == self.horizon
            && (0..self.horizon).all(|i| {
                problem.state_set(i).normals == self.problem.state_set(i).normals
                    && problem.input_set(i).normals == self.problem.input_set(i).normals
            })
            && problem.terminal_set.normals == self.problem.terminal_set.normals
            && problem.system == self.problem.system
            && problem.stage_state_cost == self.problem.stage_state_cost
            && problem.stage_input_cost == self.problem.stage_input_cost
            && problem.terminal_cost == self.problem.terminal_cost;
        if !same_normals {
            return CondensedMpc::new(problem);
        }
        let mut offs = Vec::with_capacity(self.offsets.len());
        for i in 0..self.horizon {
            offs.extend(problem.state_set(i).offsets.iter());
        }
        for i in 0..self.horizon {
            offs.extend(problem.input_set(i).offsets.iter());
        }
        offs.extend(problem.terminal_set.offsets.iter());
        let mut out = self.clone();
        out.offsets = Vector::from_vec(offs);
        out.problem = problem.clone();
        Ok(out)
    }

    pub fn build(&self, z0: &Vector) -> Result<QpForm> {
        if z0.len() != self.n {
            return Err(Error::Dimension(format!("initial state has {} entries, expected {}", z0.len(), self.n)));
        }
        Ok(QpForm {
            hessian: self.hessian.clone(),
            linear: &self.linear_map * z0,
            constant: z0.dot(&(&self.constant_map * z0)),
            constraints: self.rows_v.clone(),
            bounds: &self.offsets - &self.rows_z0 * z0,
        })
    }

    /// Stacked nominal states for an input sequence.
    pub fn rollout(&self, z0: &Vector, inputs: &Vector) -> Vec<Vector> {
        let stacked = &self.phi * z0 + &self.gamma * inputs;
        (0..=self.horizon).map(|i| stacked.rows(i * self.n, self.n).into_owned()).collect()
    }

    pub fn solve(&self, z0: &Vector, options: &QpOptions) -> Result<QpSolution> {
        let qp = self.build(z0)?;
        match solve_qp(&qp, options)? {
            QpOutcome::Optimal(opt) => {
                let nominal_states = self.rollout(z0, &opt.x);
                let nominal_inputs = (0..self.horizon).map(|i| opt.x.rows(i * self.m, self.m).into_owned()).collect();
                Ok(QpSolution {
                    status: QpStatus::Optimal,
                    nominal_states,
                    nominal_inputs,
                    optimal_cost: opt.objective,
                    multipliers: Some(opt.multipliers),
                    certificate: None,
                })
            }
            QpOutcome::Infeasible { certificate } => Ok(QpSolution {
                status: QpStatus::Infeasible,
                nominal_states: Vec::new(),
                nominal_inputs: Vec::new(),
                optimal_cost: f64::INFINITY,
                multipliers: None,
                certificate: Some(certificate),
            }),
        }
    }

    /// `∇J*(z₀)` from the envelope theorem, using the optimal inputs and multipliers.
    pub fn value_gradient(&self, z0: &Vector, solution: &QpSolution) -> Option<Vector> {
        let multipliers = solution.multipliers.as_ref()?;
        if !solution.is_optimal() {
            return None;
        }
        let stacked = Vector::from_iterator(
            self.horizon * self.m,
            solution.nominal_inputs.iter().flat_map(|v| v.iter().copied()),
        );
        Some(self.linear_map.transpose() * stacked + &self.constant_map * z0 * 2.0 + self.rows_z0.transpose() * multipliers)
    }

    /// Phase-1 feasibility: the least-norm input sequence subject to the constraints.
    pub fn is_feasible(&self, z0: &Vector, options: &QpOptions) -> Result<bool> {
        let mut qp = self.build(z0)?;
        let k = qp.num_vars();
        qp.hessian = Matrix::identity(k, k);
        qp.linear = Vector::zeros(k);
        qp.constant = 0.0;
        Ok(matches!(solve_qp(&qp, options)?, QpOutcome::Optimal(_)))
    }

    /// The set of feasible `(z₀, V)` pairs as one polytope.
    pub fn feasible_region(&self) -> Result<Polytope> {
        let rows = self.rows_v.nrows();
        let cols = self.n + self.rows_v.ncols();
        let mut normals = Matrix::zeros(rows, cols);
        normals.view_mut((0, 0), (rows, self.n)).copy_from(&self.rows_z0);
        normals.view_mut((0, self.n), (rows, self.rows_v.ncols())).copy_from(&self.rows_v);
        Polytope::new(normals, self.offsets.clone())
    }

    /// Number of QP rows contributed by each stage set, in stacking order.
    pub fn face_counts(&self) -> &[usize] {
        &self.face_counts
    }
}

pub fn is_feasible(problem: &MpcProblem, z0: &Vector, options: &QpOptions) -> Result<bool> {
    CondensedMpc::new(problem)?.is_feasible(z0, options)
}

/// Worst violation of the problem's constraints by a state and input trajectory.
pub fn constraint_violation(problem: &MpcProblem, states: &[Vector], inputs: &[Vector]) -> f64 {
    let mut worst = 0.0f64;
    let mut check = |set: &Polytope, x: &Vector| {
        let s = &set.normals * x - &set.offsets;
        worst = worst.max(s.max());
    };
    for i in 0..problem.horizon {
        check(problem.state_set(i), &states[i]);
        check(problem.input_set(i), &inputs[i]);
    }
    check(&problem.terminal_set, &states[problem.horizon]);
    worst
}

/// Objective of the nominal problem evaluated on a trajectory.
pub fn trajectory_cost(problem: &MpcProblem, states: &[Vector], inputs: &[Vector]) -> f64 {
    let stage: f64 = (0..problem.horizon)
        .map(|i| problem.stage_state_cost.quad_form(&states[i]) + problem.stage_input_cost.quad_form(&inputs[i]))
        .sum();
    stage + problem.terminal_cost.quad_form(&states[problem.horizon])
}

/// Terminal weight equal to the infinite-horizon LQR cost.
pub fn terminal_cost_from_lqr(system: &LinearSystem, q: &Symmetric, r: &Symmetric) -> Result<Symmetric> {
    Ok(lqr_gain(&system.a, &system.b, q, r)?.cost)
}

/// Maximal positively invariant subset of `state_set ∩ input_rows_for_k` under `a_k`.
pub fn maximal_invariant_terminal_set(a_k: &Matrix, state_set: &Polytope, input_rows_for_k: &Polytope) -> Result<Polytope> {
    const LIMIT: usize = 500;
    let base = state_set.intersect(input_rows_for_k)?;
    let mut omega = drop_trivial_rows(&base)?;
    let mut power = a_k.clone();
    for _ in 0..LIMIT {
        let candidate = base.preimage(&power)?;
        let mut new_rows = Vec::new();
        for i in 0..candidate.num_faces() {
            let normal = candidate.face(i);
            if normal.amax() <= 1e-14 {
                continue;
            }
            let redundant = match omega.support(&normal)? {
                Some(v) => v <= candidate.offsets[i] + 1e-8,
                None => false,
            };
            if !redundant {
                new_rows.push(i);
            }
        }
        if new_rows.is_empty() {
            return Ok(omega);
        }
        let rows = Matrix::from_fn(new_rows.len(), a_k.ncols(), |r, c| candidate.normals[(new_rows[r], c)]);
        let offs = Vector::from_iterator(new_rows.len(), new_rows.iter().map(|&i| candidate.offsets[i]));
        omega = omega.intersect(&Polytope::new(rows, offs)?)?;
        power = a_k * power;
    }
    Err(Error::IterationLimit { what: "maximal invariant set recursion", limit: LIMIT })
}

fn drop_trivial_rows(p: &Polytope) -> Result<Polytope> {
    let keep: Vec<usize> = (0..p.num_faces()).filter(|&i| p.normals.row(i).amax() > 1e-14).collect();
    let rows = Matrix::from_fn(keep.len(), p.dim(), |r, c| p.normals[(keep[r], c)]);
    let offs = Vector::from_iterator(keep.len(), keep.iter().map(|&i| p.offsets[i]));
    Polytope::new(rows, offs)
}

/// Whether the feasible initial states form a bounded set.
pub fn feasible_set_is_bounded(problem: &MpcProblem) -> Result<bool> {
    CondensedMpc::new(problem)?.feasible_region()?.is_bounded()
}
