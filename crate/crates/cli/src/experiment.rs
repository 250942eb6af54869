//! Assembles core objects from a validated config.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use smpc_core::controller::{Controller, CostDecreaseController, PrsController, StageTightening};
use smpc_core::numerics::{as_rows, lqr_gain, solve_discrete_lyapunov};
use smpc_core::optimizer::{maximal_invariant_terminal_set, MpcProblem, QpOptions};
use smpc_core::reachability::{marginal_tightening, n_step_prs, EllipsoidPrs, Horizon, IntervalPrs, Polytope, Prs};
use smpc_core::simulator::SimConfig;
use smpc_core::uncertainty::{DisturbanceSchedule, GaussianDisturbance};
use smpc_core::{Error, LinearSystem, Matrix, Symmetric, Vector};

use crate::config::{ExperimentConfig, PrsShape, TerminalSet, Variant};

pub fn matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_fn(rows.len(), rows.first().map_or(0, Vec::len), |i, j| rows[i][j])
}

pub fn symmetric(name: &str, rows: &[Vec<f64>]) -> Result<Symmetric> {
    Symmetric::new(matrix(rows)).with_context(|| format!("{name} must be symmetric"))
}

/// Computed tightening of the state and input sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tightening {
    pub shape: PrsShape,
    #[serde(with = "as_rows")]
    pub gain: Matrix,
    /// Stationary error covariance under `A + BK`.
    pub stationary_covariance: Symmetric,
    /// PRS backing each state face.
    pub state_prs: Vec<Prs>,
    /// PRS backing each input face, in error coordinates.
    pub input_prs: Vec<Prs>,
    pub state_half_widths: Vec<f64>,
    pub input_half_widths: Vec<f64>,
    /// `true` when the half-widths come from the config rather than the PRS.
    pub state_overridden: bool,
    pub input_overridden: bool,
    pub state_set: Polytope,
    pub input_set: Polytope,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub system: LinearSystem,
    pub q: Symmetric,
    pub r: Symmetric,
    pub w: Symmetric,
    pub a_k: Matrix,
    pub state_set: Polytope,
    pub input_set: Polytope,
    pub tightening: Tightening,
    pub problem: MpcProblem,
    pub schedule: DisturbanceSchedule,
    pub controller: Controller,
}

fn polytope(normals: &[Vec<f64>], offsets: &[f64]) -> Result<Polytope> {
    Ok(Polytope::new(matrix(normals), Vector::from_column_slice(offsets))?)
}

pub fn scale_prs(prs: Prs, s: f64) -> Prs {
    match prs {
        Prs::Interval(i) => Prs::Interval(IntervalPrs { half_width: i.half_width * s, ..i }),
        Prs::Ellipsoid(e) => Prs::Ellipsoid(EllipsoidPrs { radius: e.radius * s * s, ..e }),
    }
}

fn shrink(set: &Polytope, widths: &[f64]) -> Result<Polytope, Error> {
    let mut offsets = set.offsets.clone();
    for (i, w) in widths.iter().enumerate() {
        offsets[i] -= w;
        if offsets[i] < 0.0 {
            return Err(Error::EmptyTightening { face: i, offset: offsets[i], original: set.offsets[i], support: *w });
        }
    }
    Polytope::new(set.normals.clone(), offsets)
}

pub fn system_of(cfg: &ExperimentConfig) -> Result<LinearSystem> {
    Ok(LinearSystem::new(matrix(&cfg.system.a), matrix(&cfg.system.b))?)
}

/// LQR gain, stationary error covariance and the tightened sets.
pub fn tightening_of(cfg: &ExperimentConfig) -> Result<Tightening> {
    let system = system_of(cfg)?;
    let q = symmetric("costs.q", &cfg.costs.q)?;
    let r = symmetric("costs.r", &cfg.costs.r)?;
    let w = symmetric("disturbance.covariance", &cfg.disturbance.covariance)?;
    let gain = lqr_gain(&system.a, &system.b, &q, &r)?.gain;
    let a_k = system.closed_loop(&gain);
    let sigma = solve_discrete_lyapunov(&a_k, &w)?;
    let c = &cfg.constraints;
    let x_set = polytope(&c.state_normals, &c.state_offsets)?;
    let u_set = polytope(&c.input_normals, &c.input_offsets)?;

    let (state_prs, input_prs): (Vec<Prs>, Vec<Prs>) = match c.prs.ellipsoid_method() {
        None => {
            let m = marginal_tightening(&x_set, &u_set, &gain, &sigma, c.state_level, c.input_level)?;
            (m.state_prs.into_iter().map(Prs::Interval).collect(), m.input_prs.into_iter().map(Prs::Interval).collect())
        }
        Some(method) => {
            let rx = Prs::Ellipsoid(n_step_prs(&a_k, &w, Horizon::Infinite, c.state_level, method)?);
            let ru = Prs::Ellipsoid(n_step_prs(&a_k, &w, Horizon::Infinite, c.input_level, method)?);
            (vec![rx; x_set.num_faces()], vec![ru; u_set.num_faces()])
        }
    };
    let state_computed = (0..x_set.num_faces()).map(|i| state_prs[i].support(&x_set.face(i))).collect::<Result<Vec<_>, _>>()?;
    let input_computed = (0..u_set.num_faces())
        .map(|i| input_prs[i].support(&(gain.transpose() * u_set.face(i))))
        .collect::<Result<Vec<_>, _>>()?;
    let state_half_widths = c.state_half_widths.clone().unwrap_or(state_computed);
    let input_half_widths = c.input_half_widths.clone().unwrap_or(input_computed);
    let state_set = shrink(&x_set, &state_half_widths)?;
    let input_set = shrink(&u_set, &input_half_widths)?;
    Ok(Tightening {
        shape: c.prs,
        gain,
        stationary_covariance: sigma,
        state_prs,
        input_prs,
        state_half_widths,
        input_half_widths,
        state_overridden: c.state_half_widths.is_some(),
        input_overridden: c.input_half_widths.is_some(),
        state_set,
        input_set,
    })
}

pub fn schedule_of(cfg: &ExperimentConfig) -> Result<DisturbanceSchedule> {
    let base = GaussianDisturbance::zero_mean(symmetric("disturbance.covariance", &cfg.disturbance.covariance)?)?;
    let burst = match &cfg.disturbance.burst_covariance {
        Some(c) => Some(GaussianDisturbance::zero_mean(symmetric("disturbance.burst_covariance", c)?)?),
        None => None,
    };
    Ok(DisturbanceSchedule::new(base, burst, cfg.disturbance.burst_period.unwrap_or(1))?)
}

impl Experiment {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        let system = system_of(config)?;
        let q = symmetric("costs.q", &config.costs.q)?;
        let r = symmetric("costs.r", &config.costs.r)?;
        let w = symmetric("disturbance.covariance", &config.disturbance.covariance)?;
        let c = &config.constraints;
        let state_set = polytope(&c.state_normals, &c.state_offsets)?;
        let input_set = polytope(&c.input_normals, &c.input_offsets)?;
        let schedule = schedule_of(config)?;
        let ctl = &config.controller;
        let options = QpOptions { tolerance: ctl.tolerance };

        let (tightening, problem, controller) = match ctl.variant {
            Variant::SmpcPrs => {
                let t = tightening_of(config)?;
                let a_k = system.closed_loop(&t.gain);
                let terminal = terminal_set(config, &a_k, &t.gain, &t.state_set, &t.input_set)?;
                let qf = lqr_gain(&system.a, &system.b, &q, &r)?.cost;
                let problem = MpcProblem::new(
                    system.clone(),
                    ctl.horizon,
                    q.clone(),
                    r.clone(),
                    qf,
                    t.state_set.clone(),
                    t.input_set.clone(),
                    terminal,
                )?;
                let controller = Controller::Prs(PrsController::new(&problem, t.gain.clone(), options, ctl.backup)?);
                (t, problem, controller)
            }
            Variant::SmpcC => {
                // The reported tightening is informational here; the controller
                // tightens each face with its own horizon-varying variance.
                let t = tightening_of(config)?;
                let a_k = system.closed_loop(&t.gain);
                let stage = StageTightening::with_levels(
                    state_set.clone(),
                    input_set.clone(),
                    a_k.clone(),
                    t.gain.clone(),
                    w.clone(),
                    c.state_level,
                    c.input_level,
                )?;
                let (states, _) = stage.stage_sets(&Symmetric::zeros(system.state_dim()), ctl.horizon)?;
                let last = states.last().expect("horizon at least 1").clone();
                let terminal = terminal_set(config, &a_k, &t.gain, &last, &input_set)?;
                let qf = lqr_gain(&system.a, &system.b, &q, &r)?.cost;
                let template = MpcProblem::new(
                    system.clone(),
                    ctl.horizon,
                    q.clone(),
                    r.clone(),
                    qf,
                    state_set.clone(),
                    input_set.clone(),
                    terminal,
                )?;
                let controller = Controller::CostDecrease(CostDecreaseController::new(&template, stage, options)?);
                (t, template, controller)
            }
        };
        let a_k = system.closed_loop(&tightening.gain);
        Ok(Self {
            config: config.clone(),
            system,
            q,
            r,
            w,
            a_k,
            state_set,
            input_set,
            tightening,
            problem,
            schedule,
            controller,
        })
    }

    pub fn sim_config(&self) -> SimConfig {
        let sim = &self.config.simulation;
        SimConfig {
            system: self.system.clone(),
            schedule: self.schedule.clone(),
            controller: self.controller.clone(),
            trials: sim.trials,
            steps: sim.steps,
            x0: Vector::from_column_slice(&sim.x0),
            seed: sim.seed,
        }
    }
}

fn terminal_set(cfg: &ExperimentConfig, a_k: &Matrix, gain: &Matrix, state_set: &Polytope, input_set: &Polytope) -> Result<Polytope> {
    Ok(match cfg.costs.terminal_set {
        TerminalSet::Origin => Polytope::origin(a_k.nrows()),
        TerminalSet::Invariant => maximal_invariant_terminal_set(a_k, state_set, &input_set.preimage(gain)?)?,
    })
}
