//! Closed-loop Monte Carlo ensembles and the statistics computed from them.

pub mod validation;

use std::io::Write;
use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{Controller, ControllerState, Mode, StepRecord};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Symmetric, Vector};
use crate::optimizer::{CondensedMpc, QpOptions};
use crate::reachability::{Polytope, Prs};
use crate::system::LinearSystem;
use crate::uncertainty::{expected_p_norm, DisturbanceSchedule, Estimate, RngStream};

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub system: LinearSystem,
    pub schedule: DisturbanceSchedule,
    pub controller: Controller,
    pub trials: usize,
    pub steps: usize,
    pub x0: Vector,
    pub seed: u64,
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trial count must be at least 1".into()));
        }
        if self.x0.len() != self.system.state_dim() || self.schedule.base.dim() != self.system.state_dim() {
            return Err(Error::Dimension("initial state and disturbance must match the state dimension".into()));
        }
        Ok(())
    }
}

/// One closed-loop run. `states` has `steps + 1` entries, the rest `steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    #[serde(with = "vec_of_vectors")]
    pub states: Vec<Vector>,
    #[serde(with = "vec_of_vectors")]
    pub disturbances: Vec<Vector>,
    pub records: Vec<StepRecord>,
}

mod vec_of_vectors {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::numerics::Vector;

    pub fn serialize<S: Serializer>(v: &[Vector], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = v.iter().map(|x| x.as_slice()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Ok(rows.into_iter().map(Vector::from_vec).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub steps: usize,
    pub trials: Vec<TrialRecord>,
}

pub fn run_trial(config: &SimConfig, trial: usize) -> Result<TrialRecord> {
    config.validate()?;
    let sys = &config.system;
    let mut x = config.x0.clone();
    let mut state = ControllerState::initial();
    let mut states = Vec::with_capacity(config.steps + 1);
    let mut disturbances = Vec::with_capacity(config.steps);
    let mut records = Vec::with_capacity(config.steps);
    states.push(x.clone());
    for k in 0..config.steps {
        let out = config.controller.step(&state, &x)?;
        let w = config.schedule.draw(config.seed, trial, k);
        x = sys.step(&x, &out.input) + &w;
        states.push(x.clone());
        disturbances.push(w);
        records.push(out.record);
        state = out.state;
    }
    Ok(TrialRecord { trial, states, disturbances, records })
}

/// Runs every trial on the rayon pool; trial order and content do not depend on the pool size.
pub fn run_ensemble(config: &SimConfig) -> Result<EnsembleResult> {
    config.validate()?;
    let outcomes: Vec<Result<TrialRecord>> = (0..config.trials).into_par_iter().map(|t| run_trial(config, t)).collect();
    let mut trials = Vec::with_capacity(config.trials);
    for (t, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => trials.push(r),
            Err(Error::InitialInfeasible) => return Err(Error::InitialInfeasible),
            Err(e) => return Err(Error::Trial { trial: t, source: Box::new(e) }),
        }
    }
    Ok(EnsembleResult { steps: config.steps, trials })
}

/// Largest `|x(k+1) − A x(k) − B u(k) − w(k)|` over the ensemble.
pub fn dynamics_residual(system: &LinearSystem, result: &EnsembleResult) -> f64 {
    let mut worst = 0.0f64;
    for t in &result.trials {
        for (k, rec) in t.records.iter().enumerate() {
            let r = &t.states[k + 1] - (system.step(&t.states[k], &rec.applied_input) + &t.disturbances[k]);
            worst = worst.max(r.amax());
        }
    }
    worst
}

/// Binomial rate with a 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SatisfactionRate {
    pub successes: usize,
    pub total: usize,
    pub rate: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
    /// Fraction of trials with no violation at all in the window.
    pub per_trial_any: f64,
}

impl SatisfactionRate {
    pub fn std_error(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        (self.rate * (1.0 - self.rate) / self.total as f64).sqrt()
    }
}

pub fn wilson_interval(successes: usize, total: usize) -> (f64, f64) {
    if total == 0 {
        return (0.0, 1.0);
    }
    let n = total as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == total { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

fn rate_from(per_trial: &[(usize, usize)]) -> SatisfactionRate {
    let successes: usize = per_trial.iter().map(|p| p.0).sum();
    let total: usize = per_trial.iter().map(|p| p.1).sum();
    let clean = per_trial.iter().filter(|p| p.0 == p.1).count();
    let (wilson_low, wilson_high) = wilson_interval(successes, total);
    SatisfactionRate {
        successes,
        total,
        rate: if total == 0 { 1.0 } else { successes as f64 / total as f64 },
        wilson_low,
        wilson_high,
        per_trial_any: if per_trial.is_empty() { 1.0 } else { clean as f64 / per_trial.len() as f64 },
    }
}

/// Which realized signal a constraint applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    State,
    Input,
}

/// Pooled rate with a Wilson interval; dispatches on the constrained signal.
pub fn empirical_satisfaction(result: &EnsembleResult, signal: Signal, set: &Polytope, steps: Range<usize>) -> SatisfactionRate {
    match signal {
        Signal::State => state_satisfaction(result, set, steps),
        Signal::Input => input_satisfaction(result, set, steps),
    }
}

/// Pooled `(trial, step)` rate of `x(k) ∈ set` for `k` in `steps`.
pub fn state_satisfaction(result: &EnsembleResult, set: &Polytope, steps: Range<usize>) -> SatisfactionRate {
    let per_trial: Vec<(usize, usize)> = result
        .trials
        .iter()
        .map(|t| {
            let ks = steps.start.min(t.states.len())..steps.end.min(t.states.len());
            let total = ks.len();
            (ks.filter(|&k| set.contains(&t.states[k], 0.0)).count(), total)
        })
        .collect();
    rate_from(&per_trial)
}

/// Pooled rate of `u(k) ∈ set`.
pub fn input_satisfaction(result: &EnsembleResult, set: &Polytope, steps: Range<usize>) -> SatisfactionRate {
    let per_trial: Vec<(usize, usize)> = result
        .trials
        .iter()
        .map(|t| {
            let ks = steps.start.min(t.records.len())..steps.end.min(t.records.len());
            let total = ks.len();
            (ks.filter(|&k| set.contains(&t.records[k].applied_input, 0.0)).count(), total)
        })
        .collect();
    rate_from(&per_trial)
}

/// Lag at which post-burst satisfaction is scored by default.
///
/// `u(k)` is fixed before the burst `w(k)` is drawn, so `x(k+1)` has the same
/// distribution under every controller; `x(k+2)` is the first state shaped by
/// the controller's reaction to the burst.
pub const POST_BURST_LAG: usize = 2;

/// Rate of `x(k+lag) ∈ set` over every burst step `k` with `k + lag ≤ T`.
pub fn post_burst_satisfaction(result: &EnsembleResult, schedule: &DisturbanceSchedule, set: &Polytope, lag: usize) -> SatisfactionRate {
    let per_trial: Vec<(usize, usize)> = result
        .trials
        .iter()
        .map(|t| {
            let ks: Vec<usize> = (0..t.disturbances.len()).filter(|&k| schedule.is_burst(k) && k + lag < t.states.len()).collect();
            (ks.iter().filter(|&&k| set.contains(&t.states[k + lag], 0.0)).count(), ks.len())
        })
        .collect();
    rate_from(&per_trial)
}

/// Post-burst rates for lags `1 ..= max_lag`.
pub fn post_burst_profile(result: &EnsembleResult, schedule: &DisturbanceSchedule, set: &Polytope, max_lag: usize) -> Vec<SatisfactionRate> {
    (1..=max_lag).map(|lag| post_burst_satisfaction(result, schedule, set, lag)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub mode1_fraction: f64,
    pub per_step_mode1: Vec<f64>,
}

pub fn mode_frequencies(result: &EnsembleResult) -> ModeStats {
    let n = result.trials.len().max(1) as f64;
    let per_step_mode1: Vec<f64> = (0..result.steps)
        .map(|k| result.trials.iter().filter(|t| t.records[k].mode == Mode::M1).count() as f64 / n)
        .collect();
    let mode1_fraction = if per_step_mode1.is_empty() {
        1.0
    } else {
        per_step_mode1.iter().sum::<f64>() / per_step_mode1.len() as f64
    };
    ModeStats { mode1_fraction, per_step_mode1 }
}

/// Per-step empirical `Pr(e(k) ∈ prs)` across trials.
pub fn closed_loop_prs_check(result: &EnsembleResult, prs: &Prs) -> Vec<Estimate> {
    let test = prs.membership();
    (0..result.steps)
        .map(|k| {
            let hits = result.trials.iter().filter(|t| test.contains(&t.records[k].error)).count();
            Estimate::proportion(hits, result.trials.len())
        })
        .collect()
}

/// Lower estimate of the cost constant `C` in `J*(z+e) ≤ J*(z) + C‖e‖_P`.
///
/// Feasible `z` are drawn uniformly from the bounding box of the feasible
/// set. Each is paired with `z + e`, with `e` along the direction that
/// maximises the local rate `∇J*·e / ‖e‖_P`, plus one random direction.
/// Returns the largest observed `|ΔJ*| / ‖e‖_P`.
pub fn estimate_lipschitz_c(mpc: &CondensedMpc, certificate: &Symmetric, samples: usize, rng: &RngStream) -> Result<f64> {
    let problem = mpc.problem();
    let n = problem.state_dim();
    let options = QpOptions { tolerance: 1e-9 };
    let region = mpc.feasible_region()?;
    let mut lo = Vector::zeros(n);
    let mut hi = Vector::zeros(n);
    for i in 0..n {
        for (sign, slot) in [(1.0, &mut hi), (-1.0, &mut lo)] {
            let mut c = Vector::zeros(region.dim());
            c[i] = sign;
            let s = region.support(&c)?.ok_or_else(|| {
                Error::Domain("feasible set of the nominal problem is unbounded".into())
            })?;
            slot[i] = sign * s;
        }
    }
    let width = &hi - &lo;
    if width.amax() <= 1e-12 {
        return Ok(0.0);
    }
    let p_inv = certificate
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("certificate must be positive definite".into()))?
        .inverse();
    let p_norm = |e: &Vector| certificate.quad_form(e).max(0.0).sqrt();
    let scale = width.amax();

    let mut r = rng.derive(0x4c49_5053).rng();
    let mut best = 0.0f64;
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < samples && attempts < 50 * samples.max(1) {
        attempts += 1;
        let z = Vector::from_fn(n, |i, _| lo[i] + width[i] * r.random::<f64>());
        let sol = mpc.solve(&z, &options)?;
        if !sol.is_optimal() {
            continue;
        }
        accepted += 1;
        let grad = mpc.value_gradient(&z, &sol).expect("optimal solution carries multipliers");
        let steep = &p_inv * &grad;
        let random_dir = Vector::from_fn(n, |_, _| r.random::<f64>() - 0.5);
        for dir in [steep, random_dir] {
            let norm = p_norm(&dir);
            if norm <= 0.0 {
                continue;
            }
            let unit = dir / norm;
            let mut step = 0.01 * scale * r.random::<f64>().max(1e-3);
            for _ in 0..8 {
                for sgn in [1.0, -1.0] {
                    let e = &unit * (sgn * step);
                    let other = mpc.solve(&(&z + &e), &options)?;
                    if other.is_optimal() {
                        let ratio = (other.optimal_cost - sol.optimal_cost).abs() / p_norm(&e);
                        best = best.max(ratio);
                    }
                }
                step *= 0.5;
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecreaseCheck {
    pub step: usize,
    /// Mean of `ΔJ* + ‖z‖²_Q + ‖v‖²_R + εC‖e‖_P − C·𝔼‖w‖_P` over trials.
    pub mean_slack: f64,
    pub std_error: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBoundEstimate {
    pub lipschitz_c: f64,
    pub certificate: Symmetric,
    pub epsilon: f64,
    pub lhs_running_average: f64,
    pub lhs_std_error: f64,
    pub rhs_bound: f64,
    pub rhs_std_error: f64,
    pub expected_w_norm: Estimate,
    /// `𝔼(J*(z(0)) − J*(z(T−1)))/T`, the finite-horizon slack of the average bound.
    pub transient_allowance: f64,
    pub bound_holds: bool,
    pub decrease_checks: Vec<DecreaseCheck>,
    pub decrease_holds: bool,
}

/// Running-average cost bound and per-step expected decrease.
#[allow(clippy::too_many_arguments)]
pub fn cost_bound_report(
    result: &EnsembleResult,
    problem_costs: (&Symmetric, &Symmetric),
    schedule: &DisturbanceSchedule,
    lipschitz_c: f64,
    certificate: &Symmetric,
    epsilon: f64,
    samples: usize,
    rng: &RngStream,
) -> Result<CostBoundEstimate> {
    let (q, r) = problem_costs;
    let w_norm = expected_p_norm(&schedule.base, certificate, samples, rng)?;
    let p_norm = |e: &Vector| certificate.quad_form(e).max(0.0).sqrt();
    let rhs = lipschitz_c * w_norm.value;
    let steps = result.steps;
    let trials = result.trials.len();

    let per_trial_avg: Vec<f64> = result
        .trials
        .iter()
        .map(|t| {
            t.records
                .iter()
                .map(|rec| {
                    q.quad_form(&rec.nominal_state) + r.quad_form(&rec.applied_input) + epsilon * lipschitz_c * p_norm(&rec.error)
                })
                .sum::<f64>()
                / steps.max(1) as f64
        })
        .collect();
    let lhs = Estimate::from_samples(&per_trial_avg);
    let transient = result
        .trials
        .iter()
        .map(|t| match (t.records.first(), t.records.last()) {
            (Some(a), Some(b)) => (a.optimal_cost - b.optimal_cost) / steps as f64,
            _ => 0.0,
        })
        .sum::<f64>()
        / trials.max(1) as f64;
    let rhs_se = lipschitz_c * w_norm.std_error;
    let bound_holds = lhs.value <= rhs + 3.0 * (lhs.std_error.powi(2) + rhs_se.powi(2)).sqrt();

    let mut decrease_checks = Vec::with_capacity(steps.saturating_sub(1));
    for k in 0..steps.saturating_sub(1) {
        let slack: Vec<f64> = result
            .trials
            .iter()
            .map(|t| {
                let a = &t.records[k];
                let b = &t.records[k + 1];
                b.optimal_cost - a.optimal_cost
                    + q.quad_form(&a.nominal_state)
                    + r.quad_form(&a.nominal_input)
                    + epsilon * lipschitz_c * p_norm(&a.error)
                    - rhs
            })
            .collect();
        let est = Estimate::from_samples(&slack);
        let se = (est.std_error.powi(2) + rhs_se.powi(2)).sqrt();
        decrease_checks.push(DecreaseCheck { step: k, mean_slack: est.value, std_error: se, holds: est.value <= 3.0 * se });
    }
    let decrease_holds = decrease_checks.iter().all(|c| c.holds);
    Ok(CostBoundEstimate {
        lipschitz_c,
        certificate: certificate.clone(),
        epsilon,
        lhs_running_average: lhs.value,
        lhs_std_error: lhs.std_error,
        rhs_bound: rhs,
        rhs_std_error: rhs_se,
        expected_w_norm: w_norm,
        transient_allowance: transient,
        bound_holds,
        decrease_checks,
        decrease_holds,
    })
}

/// Writes the per-step CSV: `trial,step,mode,x…,u…,z…,e…,cost,violated_state,violated_input`.
pub fn write_csv<W: Write + ?Sized>(result: &EnsembleResult, state_set: &Polytope, input_set: &Polytope, out: &mut W) -> std::io::Result<()> {
    let (n, m) = match result.trials.first().and_then(|t| t.records.first()) {
        Some(r) => (r.nominal_state.len(), r.applied_input.len()),
        None => (state_set.dim(), input_set.dim()),
    };
    let mut header = vec!["trial".to_string(), "step".into(), "mode".into()];
    for prefix_dim in [("x", n), ("u", m), ("z", n), ("e", n)] {
        for i in 1..=prefix_dim.1 {
            header.push(format!("{}{i}", prefix_dim.0));
        }
    }
    header.extend(["cost".into(), "violated_state".into(), "violated_input".into()]);
    writeln!(out, "{}", header.join(","))?;
    let mut line = String::new();
    for t in &result.trials {
        for (k, rec) in t.records.iter().enumerate() {
            use std::fmt::Write as _;
            line.clear();
            let _ = write!(line, "{},{},{}", t.trial, k, rec.mode.as_str());
            for v in t.states[k].iter().chain(rec.applied_input.iter()).chain(rec.nominal_state.iter()).chain(rec.error.iter()) {
                let _ = write!(line, ",{}", fmt_float(*v));
            }
            let _ = write!(
                line,
                ",{},{},{}",
                fmt_float(rec.optimal_cost),
                u8::from(!state_set.contains(&t.states[k], 0.0)),
                u8::from(!input_set.contains(&rec.applied_input, 0.0))
            );
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

/// 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Mean and quantile band of one state coordinate per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub step: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Per-step mean and `[q, 1−q]` empirical quantiles of `x(k)[coord]`.
pub fn state_bands(result: &EnsembleResult, coord: usize, q: f64) -> Vec<Band> {
    let steps = result.trials.first().map_or(0, |t| t.states.len());
    (0..steps)
        .map(|k| {
            let mut xs: Vec<f64> = result.trials.iter().map(|t| t.states[k][coord]).collect();
            xs.sort_by(f64::total_cmp);
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            Band { step: k, mean, lower: quantile_sorted(&xs, q), upper: quantile_sorted(&xs, 1.0 - q) }
        })
        .collect()
}

fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    xs[lo] + (xs[hi] - xs[lo]) * (pos - lo as f64)
}

/// `A + B K` for the gain used by a controller.
pub fn closed_loop_matrix(system: &LinearSystem, controller: &Controller) -> Matrix {
    system.closed_loop(controller.gain())
}
