//! Closed-loop control laws.
//!
//! Both controllers apply `u = v + K e` with `e = x − z`. They differ in how
//! the nominal state `z(k)` is chosen:
//!
//! * [`PrsController`] resets `z(k) = x(k)` whenever the nominal problem is
//!   feasible at the measurement (mode 1), otherwise keeps the previously
//!   predicted `z₁(k−1)` (mode 2).
//! * [`CostDecreaseController`] additionally requires the value function to
//!   decrease, and tightens every half-space separately with a prediction
//!   variance that restarts from zero in mode 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{normal_quantile, Matrix, Symmetric, Vector};
use crate::optimizer::{
    constraint_violation, trajectory_cost, CondensedMpc, MpcProblem, QpOptions, QpSolution, QpStatus,
};
use crate::reachability::Polytope;
use crate::uncertainty::propagate_variance_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    M1,
    M2,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::M1 => "M1",
            Mode::M2 => "M2",
        }
    }
}

/// What mode 2 applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackupMode {
    /// Solve the nominal problem again from `z₁(k−1)`.
    #[default]
    Reoptimize,
    /// Apply the shifted previous sequence without re-solving.
    Shifted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    /// `z₁(k−1)`, absent before the first step.
    pub previous_predicted: Option<Vector>,
    /// Shifted previous optimal inputs extended with the terminal law.
    pub previous_inputs: Vec<Vector>,
    pub step: usize,
    /// `var(e(k−1))` as tracked by the cost-decrease controller.
    pub error_variance: Option<Symmetric>,
}

impl ControllerState {
    pub fn initial() -> Self {
        Self { previous_predicted: None, previous_inputs: Vec::new(), step: 0, error_variance: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub mode: Mode,
    #[serde(with = "crate::numerics::as_vec")]
    pub nominal_state: Vector,
    #[serde(with = "crate::numerics::as_vec")]
    pub nominal_input: Vector,
    #[serde(with = "crate::numerics::as_vec")]
    pub applied_input: Vector,
    #[serde(with = "crate::numerics::as_vec")]
    pub error: Vector,
    pub optimal_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub input: Vector,
    pub state: ControllerState,
    pub record: StepRecord,
    /// Nominal solution the step committed to.
    pub solution: QpSolution,
}

/// `{v₁*, …, v*_{N−1}, K z*_N}`.
pub fn shifted_backup(previous: &QpSolution, k_gain: &Matrix) -> Vec<Vector> {
    let mut out: Vec<Vector> = previous.nominal_inputs.iter().skip(1).cloned().collect();
    if let Some(last) = previous.nominal_states.last() {
        out.push(k_gain * last);
    }
    out
}

fn finish(
    state: &ControllerState,
    x_k: &Vector,
    mode: Mode,
    z: Vector,
    solution: QpSolution,
    k_gain: &Matrix,
    error_variance: Option<Symmetric>,
) -> StepOutput {
    let nominal_input = solution.nominal_inputs[0].clone();
    let (error, input) = match mode {
        Mode::M1 => (Vector::zeros(x_k.len()), nominal_input.clone()),
        Mode::M2 => {
            let e = x_k - &z;
            let u = &nominal_input + k_gain * &e;
            (e, u)
        }
    };
    let next = ControllerState {
        previous_predicted: Some(solution.nominal_states[1].clone()),
        previous_inputs: shifted_backup(&solution, k_gain),
        step: state.step + 1,
        error_variance,
    };
    let record = StepRecord {
        step: state.step,
        mode,
        nominal_state: z,
        nominal_input,
        applied_input: input.clone(),
        error,
        optimal_cost: solution.optimal_cost,
    };
    StepOutput { input, state: next, record, solution }
}

fn shifted_solution(mpc: &CondensedMpc, z: &Vector, inputs: &[Vector], step: usize, tol: f64) -> Result<QpSolution> {
    let problem = mpc.problem();
    if inputs.len() != problem.horizon {
        return Err(Error::BackupInfeasible { step, detail: format!("shifted sequence has {} inputs", inputs.len()) });
    }
    let stacked = Vector::from_iterator(
        inputs.iter().map(|v| v.len()).sum(),
        inputs.iter().flat_map(|v| v.iter().copied()),
    );
    let states = mpc.rollout(z, &stacked);
    let violation = constraint_violation(problem, &states, inputs);
    if violation > tol {
        return Err(Error::BackupInfeasible { step, detail: format!("shifted sequence violates constraints by {violation:e}") });
    }
    Ok(QpSolution {
        status: QpStatus::Optimal,
        optimal_cost: trajectory_cost(problem, &states, inputs),
        nominal_states: states,
        nominal_inputs: inputs.to_vec(),
        multipliers: None,
        certificate: None,
    })
}

/// Feasibility-conditioned controller.
#[derive(Debug, Clone)]
pub struct PrsController {
    mpc: CondensedMpc,
    gain: Matrix,
    options: QpOptions,
    backup: BackupMode,
}

impl PrsController {
    pub fn new(problem: &MpcProblem, gain: Matrix, options: QpOptions, backup: BackupMode) -> Result<Self> {
        check_gain(problem, &gain)?;
        Ok(Self { mpc: CondensedMpc::new(problem)?, gain, options, backup })
    }

    pub fn problem(&self) -> &MpcProblem {
        self.mpc.problem()
    }

    pub fn gain(&self) -> &Matrix {
        &self.gain
    }

    pub fn condensed(&self) -> &CondensedMpc {
        &self.mpc
    }

    pub fn step(&self, state: &ControllerState, x_k: &Vector) -> Result<StepOutput> {
        let at_measurement = self.mpc.solve(x_k, &self.options)?;
        if at_measurement.is_optimal() {
            return Ok(finish(state, x_k, Mode::M1, x_k.clone(), at_measurement, &self.gain, None));
        }
        let Some(z) = state.previous_predicted.clone() else {
            return Err(Error::InitialInfeasible);
        };
        let solution = match self.backup {
            BackupMode::Reoptimize => {
                let s = self.mpc.solve(&z, &self.options)?;
                if !s.is_optimal() {
                    return Err(Error::BackupInfeasible {
                        step: state.step,
                        detail: format!("nominal problem infeasible at z = {:?}", z.as_slice()),
                    });
                }
                s
            }
            BackupMode::Shifted => shifted_solution(&self.mpc, &z, &state.previous_inputs, state.step, self.options.tolerance)?,
        };
        Ok(finish(state, x_k, Mode::M2, z, solution, &self.gain, None))
    }
}

fn check_gain(problem: &MpcProblem, gain: &Matrix) -> Result<()> {
    if gain.nrows() != problem.input_dim() || gain.ncols() != problem.state_dim() {
        return Err(Error::Dimension(format!(
            "gain is {}x{}, expected {}x{}",
            gain.nrows(),
            gain.ncols(),
            problem.input_dim(),
            problem.state_dim()
        )));
    }
    Ok(())
}

/// Per-half-space, horizon-varying tightening driven by the predicted error variance.
#[derive(Debug, Clone)]
pub struct StageTightening {
    pub state_set: Polytope,
    pub input_set: Polytope,
    pub a_k: Matrix,
    pub gain: Matrix,
    pub w_cov: Symmetric,
    /// Normal quantile applied to every state face.
    pub state_quantile: f64,
    /// Normal quantile applied to every input face.
    pub input_quantile: f64,
}

impl StageTightening {
    /// Each face `i` of a set with joint level `p` is tightened at `1 − (1 − p)/2`.
    pub fn with_levels(
        state_set: Polytope,
        input_set: Polytope,
        a_k: Matrix,
        gain: Matrix,
        w_cov: Symmetric,
        state_level: f64,
        input_level: f64,
    ) -> Result<Self> {
        let state_quantile = normal_quantile(1.0 - 0.5 * (1.0 - state_level))?;
        let input_quantile = normal_quantile(1.0 - 0.5 * (1.0 - input_level))?;
        Ok(Self { state_set, input_set, a_k, gain, w_cov, state_quantile, input_quantile })
    }

    /// Stage sets for `i = 0 … horizon−1` given `var(e)` at stage 0.
    pub fn stage_sets(&self, initial: &Symmetric, horizon: usize) -> Result<(Vec<Polytope>, Vec<Polytope>)> {
        let vars = propagate_variance_from(&self.a_k, &self.w_cov, initial, horizon - 1);
        let mut states = Vec::with_capacity(horizon);
        let mut inputs = Vec::with_capacity(horizon);
        for var in &vars {
            states.push(tighten_faces(&self.state_set, var, self.state_quantile, None)?);
            inputs.push(tighten_faces(&self.input_set, var, self.input_quantile, Some(&self.gain))?);
        }
        Ok((states, inputs))
    }
}

fn tighten_faces(set: &Polytope, var: &Symmetric, quantile: f64, map: Option<&Matrix>) -> Result<Polytope> {
    let mut offsets = set.offsets.clone();
    for i in 0..set.num_faces() {
        let normal = set.face(i);
        let dir = match map {
            Some(m) => m.transpose() * &normal,
            None => normal,
        };
        let support = quantile * var.directional_variance(&dir).max(0.0).sqrt();
        offsets[i] -= support;
        if offsets[i] < 0.0 {
            return Err(Error::EmptyTightening { face: i, offset: offsets[i], original: set.offsets[i], support });
        }
    }
    Polytope::new(set.normals.clone(), offsets)
}

/// Cost-decrease controller with variance-based per-stage tightening.
#[derive(Debug, Clone)]
pub struct CostDecreaseController {
    base: CondensedMpc,
    tightening: StageTightening,
    options: QpOptions,
}

/// Costs closer than this count as equal, and mode 1 wins the tie.
pub const COST_TIE: f64 = 1e-9;

impl CostDecreaseController {
    /// `template` supplies the costs, horizon and terminal set; its constraint sets are replaced per step.
    pub fn new(template: &MpcProblem, tightening: StageTightening, options: QpOptions) -> Result<Self> {
        check_gain(template, &tightening.gain)?;
        let n = template.state_dim();
        let (s, i) = tightening.stage_sets(&Symmetric::zeros(n), template.horizon)?;
        let base = CondensedMpc::new(&template.clone().with_stage_sets(s, i)?)?;
        Ok(Self { base, tightening, options })
    }

    pub fn gain(&self) -> &Matrix {
        &self.tightening.gain
    }

    pub fn tightening(&self) -> &StageTightening {
        &self.tightening
    }

    /// Condensed problem whose stage-0 tightening uses `var(e) = initial`.
    pub fn problem_for(&self, initial: &Symmetric) -> Result<CondensedMpc> {
        let (s, i) = self.tightening.stage_sets(initial, self.base.problem().horizon)?;
        let problem = self.base.problem().clone().with_stage_sets(s, i)?;
        self.base.with_offsets_from(&problem)
    }

    pub fn step(&self, state: &ControllerState, x_k: &Vector) -> Result<StepOutput> {
        let n = x_k.len();
        let fresh = self.problem_for(&Symmetric::zeros(n))?;
        let at_measurement = fresh.solve(x_k, &self.options)?;
        let Some(z) = state.previous_predicted.clone() else {
            if at_measurement.is_optimal() {
                return Ok(finish(state, x_k, Mode::M1, x_k.clone(), at_measurement, self.gain(), Some(Symmetric::zeros(n))));
            }
            return Err(Error::InitialInfeasible);
        };
        let previous_var = state.error_variance.clone().unwrap_or_else(|| Symmetric::zeros(n));
        let propagated = Symmetric::symmetrize(
            &self.tightening.a_k * previous_var.as_matrix() * self.tightening.a_k.transpose() + self.tightening.w_cov.as_matrix(),
        );
        let carried = self.problem_for(&propagated)?;
        let backup = carried.solve(&z, &self.options)?;
        if at_measurement.is_optimal() && (!backup.is_optimal() || at_measurement.optimal_cost <= backup.optimal_cost + COST_TIE) {
            return Ok(finish(state, x_k, Mode::M1, x_k.clone(), at_measurement, self.gain(), Some(Symmetric::zeros(n))));
        }
        if !backup.is_optimal() {
            return Err(Error::BackupInfeasible {
                step: state.step,
                detail: format!("variance-tightened problem infeasible at z = {:?}", z.as_slice()),
            });
        }
        Ok(finish(state, x_k, Mode::M2, z, backup, self.gain(), Some(propagated)))
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Controller {
    Prs(PrsController),
    CostDecrease(CostDecreaseController),
}

impl Controller {
    pub fn step(&self, state: &ControllerState, x_k: &Vector) -> Result<StepOutput> {
        match self {
            Controller::Prs(c) => c.step(state, x_k),
            Controller::CostDecrease(c) => c.step(state, x_k),
        }
    }

    pub fn gain(&self) -> &Matrix {
        match self {
            Controller::Prs(c) => c.gain(),
            Controller::CostDecrease(c) => c.gain(),
        }
    }
}

/// One step of the feasibility-conditioned controller (builds the condensed problem on every call).
pub fn smpc_prs_step(state: &ControllerState, x_k: &Vector, problem: &MpcProblem, k_gain: &Matrix) -> Result<StepOutput> {
    PrsController::new(problem, k_gain.clone(), QpOptions::default(), BackupMode::Reoptimize)?.step(state, x_k)
}

/// One step of the cost-decrease controller.
pub fn smpc_c_step(state: &ControllerState, x_k: &Vector, problem_c: &MpcProblem, tightening: &StageTightening) -> Result<StepOutput> {
    CostDecreaseController::new(problem_c, tightening.clone(), QpOptions::default())?.step(state, x_k)
}
