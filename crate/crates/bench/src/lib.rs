//! Shared fixtures for the benchmarks in `benches/`.

use smpc_core::controller::{BackupMode, Controller, CostDecreaseController, PrsController, StageTightening};
use smpc_core::numerics::{lqr_gain, solve_discrete_lyapunov};
use smpc_core::optimizer::{terminal_cost_from_lqr, MpcProblem, QpOptions};
use smpc_core::reachability::{marginal_tightening, Polytope};
use smpc_core::simulator::SimConfig;
use smpc_core::uncertainty::{DisturbanceSchedule, GaussianDisturbance};
use smpc_core::{LinearSystem, Matrix, Symmetric, Vector};

/// Double integrator regulated from `[6, 0]` under `|x2| <= 1.2`, `|u| <= 6`.
pub struct DoubleIntegrator {
    pub system: LinearSystem,
    pub gain: Matrix,
    pub a_k: Matrix,
    pub w: Symmetric,
    pub x_set: Polytope,
    pub u_set: Polytope,
    pub problem: MpcProblem,
}

impl DoubleIntegrator {
    pub fn new(horizon: usize) -> Self {
        let system = LinearSystem::new(
            Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            Matrix::from_row_slice(2, 1, &[0.5, 1.0]),
        )
        .unwrap();
        let q = Symmetric::from_diagonal(&[0.1, 1.0]);
        let r = Symmetric::from_diagonal(&[0.1]);
        let w = Symmetric::from_diagonal(&[0.01, 1.0]);
        let gain = lqr_gain(&system.a, &system.b, &q, &r).unwrap().gain;
        let a_k = system.closed_loop(&gain);
        let sigma = solve_discrete_lyapunov(&a_k, &w).unwrap();
        let x_set = Polytope::slab(&Vector::from_column_slice(&[0.0, 1.0]), 1.2);
        let u_set = Polytope::slab(&Vector::from_column_slice(&[1.0]), 6.0);
        let t = marginal_tightening(&x_set, &u_set, &gain, &sigma, 0.6, 0.9).unwrap();
        let qf = terminal_cost_from_lqr(&system, &q, &r).unwrap();
        let problem =
            MpcProblem::new(system.clone(), horizon, q, r, qf, t.state_set, t.input_set, Polytope::origin(2)).unwrap();
        Self { system, gain, a_k, w, x_set, u_set, problem }
    }

    pub fn prs_controller(&self) -> Controller {
        Controller::Prs(PrsController::new(&self.problem, self.gain.clone(), QpOptions::default(), BackupMode::Reoptimize).unwrap())
    }

    pub fn cost_decrease_controller(&self) -> Controller {
        let stage = StageTightening::with_levels(
            self.x_set.clone(),
            self.u_set.clone(),
            self.a_k.clone(),
            self.gain.clone(),
            self.w.clone(),
            0.6,
            0.9,
        )
        .unwrap();
        Controller::CostDecrease(CostDecreaseController::new(&self.problem, stage, QpOptions::default()).unwrap())
    }

    pub fn sim_config(&self, controller: Controller, trials: usize, steps: usize) -> SimConfig {
        SimConfig {
            system: self.system.clone(),
            schedule: DisturbanceSchedule::stationary(GaussianDisturbance::zero_mean(self.w.clone()).unwrap()),
            controller,
            trials,
            steps,
            x0: Vector::from_column_slice(&[6.0, 0.0]),
            seed: 1,
        }
    }
}
