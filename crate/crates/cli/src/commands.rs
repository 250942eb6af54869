//! The four subcommands. Each returns a summary that is also written to disk.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use smpc_core::controller::Controller;
use smpc_core::numerics::lyapunov_certificate;
use smpc_core::optimizer::CondensedMpc;
use smpc_core::reachability::{marginal_interval_prs, n_step_prs, Horizon, Polytope, Prs};
use smpc_core::simulator::validation::{
    closed_loop_level_check, nestedness_check, predictive_check, shift_dominance_check, CheckOutcome,
};
use smpc_core::simulator::{
    cost_bound_report, estimate_lipschitz_c, fmt_float, input_satisfaction, mode_frequencies, post_burst_profile,
    run_ensemble, state_bands, state_satisfaction, write_csv, Band, CostBoundEstimate, EnsembleResult, SatisfactionRate,
    POST_BURST_LAG,
};
use smpc_core::uncertainty::{propagate_variance, RngStream};
use smpc_core::{Error, Symmetric, Vector};

use crate::config::{ExperimentConfig, Format, Variant};
use crate::experiment::{scale_prs, tightening_of, Experiment, Tightening};
use crate::output::{artifact, write_atomic, write_json};

/// Command-line values that take precedence over the config document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub steps: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.simulation.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.simulation.trials = t;
        }
        if let Some(s) = self.steps {
            cfg.simulation.steps = s;
        }
        cfg.validate()
    }
}

/// Two configs that cannot share a disturbance stream.
#[derive(Debug)]
pub struct ConfigMismatch(pub String);

impl fmt::Display for ConfigMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configs are not comparable: {}", self.0)
    }
}

impl std::error::Error for ConfigMismatch {}

/// Exit status for an error chain: 2 empty tightening, 3 initial
/// infeasibility, 4 config mismatch, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigMismatch>().is_some() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
    }
    1
}

fn core_code(e: &Error) -> i32 {
    match e {
        Error::EmptyTightening { .. } => 2,
        Error::InitialInfeasible => 3,
        Error::Trial { source, .. } => core_code(source),
        _ => 1,
    }
}

/// `--out` when given, else `outputs.directory`. Kept out of the config echo
/// so the artifacts do not depend on where they are written.
pub fn out_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.map_or_else(|| PathBuf::from(&cfg.outputs.directory), Path::to_path_buf)
}

// ---------------------------------------------------------------- prs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrsReport {
    pub config: ExperimentConfig,
    pub tightening: Tightening,
}

pub fn cmd_prs(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PrsReport> {
    let tightening = tightening_of(cfg)?;
    let report = PrsReport { config: cfg.clone(), tightening };
    if cfg.outputs.wants(Format::Json) {
        write_json(&artifact(&out_dir(cfg, out), "prs.json"), "prs", &report)?;
    }
    Ok(report)
}

impl fmt::Display for PrsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.tightening;
        writeln!(f, "gain K = {:?}", t.gain.as_slice())?;
        writeln!(f, "stationary covariance = {:?}", t.stationary_covariance.as_matrix().as_slice())?;
        for (i, w) in t.state_half_widths.iter().enumerate() {
            writeln!(f, "state face {i}: half-width {w:.6}, tightened offset {:.6}", t.state_set.offsets[i])?;
        }
        for (i, w) in t.input_half_widths.iter().enumerate() {
            writeln!(f, "input face {i}: half-width {w:.6}, tightened offset {:.6}", t.input_set.offsets[i])?;
        }
        for (i, p) in t.state_prs.iter().enumerate() {
            if let Prs::Ellipsoid(e) = p {
                writeln!(f, "state PRS {i}: ellipsoid radius {:.6} at level {}", e.radius, e.level)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostBurst {
    pub lag: usize,
    pub rate: SatisfactionRate,
    /// Rates at lags 1, 2, ….
    pub profile: Vec<SatisfactionRate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub variant: Variant,
    /// Inclusive step range of the rates below.
    pub window: [usize; 2],
    /// `x(k)` in the whole state set.
    pub state_joint: SatisfactionRate,
    /// `x(k)` on the inner side of each state face.
    pub state_faces: Vec<SatisfactionRate>,
    pub input_joint: SatisfactionRate,
    pub post_burst: Option<PostBurst>,
    pub mode1_fraction: f64,
    pub mode1_per_step: Vec<f64>,
    /// Worst per-step `Pr(e(k) ∈ R)` for each state-face PRS.
    pub closed_loop_prs: Vec<CheckOutcome>,
    /// Steps whose nominal pair left the tightened sets (feasibility-conditioned controller only).
    pub nominal_violations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub config: ExperimentConfig,
    pub state_half_widths: Vec<f64>,
    pub input_half_widths: Vec<f64>,
    pub rates: Rates,
    pub cost_bound: Option<CostBoundEstimate>,
}

fn face(set: &Polytope, i: usize) -> Polytope {
    Polytope::new(set.normals.rows(i, 1).into_owned(), Vector::from_element(1, set.offsets[i])).expect("finite face")
}

fn rates(exp: &Experiment, result: &EnsembleResult) -> Rates {
    let sim = &exp.config.simulation;
    let states = sim.window[0]..sim.window[1] + 1;
    let post_burst = exp.schedule.burst.as_ref().map(|_| {
        let profile = post_burst_profile(result, &exp.schedule, &exp.state_set, 5);
        PostBurst { lag: POST_BURST_LAG, rate: profile[POST_BURST_LAG - 1], profile }
    });
    let modes = mode_frequencies(result);
    let mut seen: Vec<Prs> = Vec::new();
    let mut closed_loop_prs = Vec::new();
    let scale = exp.config.simulation.validation_prs_scale;
    for p in exp.tightening.state_prs.iter().map(|p| scale_prs(p.clone(), scale)) {
        let p = &p;
        let mirrored = match p {
            Prs::Interval(i) => Some(Prs::Interval(smpc_core::reachability::IntervalPrs { direction: -&i.direction, ..i.clone() })),
            Prs::Ellipsoid(_) => None,
        };
        if !seen.contains(p) && !mirrored.is_some_and(|m| seen.contains(&m)) {
            seen.push(p.clone());
            closed_loop_prs.push(closed_loop_level_check(result, p));
        }
    }
    let nominal_violations = match exp.controller {
        Controller::Prs(_) => Some(
            result
                .trials
                .iter()
                .flat_map(|t| &t.records)
                .filter(|r| {
                    !exp.problem.state_set(0).contains(&r.nominal_state, 1e-6)
                        || !exp.problem.input_set(0).contains(&r.nominal_input, 1e-6)
                })
                .count(),
        ),
        Controller::CostDecrease(_) => None,
    };
    Rates {
        variant: exp.config.controller.variant,
        window: sim.window,
        state_joint: state_satisfaction(result, &exp.state_set, states.clone()),
        state_faces: (0..exp.state_set.num_faces())
            .map(|i| state_satisfaction(result, &face(&exp.state_set, i), states.clone()))
            .collect(),
        input_joint: input_satisfaction(result, &exp.input_set, states),
        post_burst,
        mode1_fraction: modes.mode1_fraction,
        mode1_per_step: modes.per_step_mode1,
        closed_loop_prs,
        nominal_violations,
    }
}

fn condensed(exp: &Experiment) -> Result<CondensedMpc> {
    Ok(match &exp.controller {
        Controller::Prs(c) => c.condensed().clone(),
        Controller::CostDecrease(c) => c.problem_for(&Symmetric::zeros(exp.system.state_dim()))?,
    })
}

fn cost_bound(exp: &Experiment, result: &EnsembleResult) -> Result<CostBoundEstimate> {
    let seed = exp.config.simulation.seed;
    let eps = exp.config.controller.epsilon;
    let cert = lyapunov_certificate(&exp.a_k, eps)?;
    let mpc = condensed(exp)?;
    let c = estimate_lipschitz_c(&mpc, &cert, exp.config.simulation.lipschitz_samples, &RngStream::new(seed, 0xC057_0001))?;
    Ok(cost_bound_report(
        result,
        (&exp.q, &exp.r),
        &exp.schedule,
        c,
        &cert,
        eps,
        exp.config.simulation.validation_samples,
        &RngStream::new(seed, 0xC057_0002),
    )?)
}

pub struct Simulation {
    pub experiment: Experiment,
    pub result: EnsembleResult,
    pub summary: SimulationSummary,
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    let experiment = Experiment::build(cfg)?;
    let result = run_ensemble(&experiment.sim_config())?;
    let rates = rates(&experiment, &result);
    let cost_bound = if cfg.simulation.cost_bound { Some(cost_bound(&experiment, &result)?) } else { None };
    let summary = SimulationSummary {
        config: cfg.clone(),
        state_half_widths: experiment.tightening.state_half_widths.clone(),
        input_half_widths: experiment.tightening.input_half_widths.clone(),
        rates,
        cost_bound,
    };
    Ok(Simulation { experiment, result, summary })
}

fn write_bands(path: &Path, columns: &[(&str, &[Band])]) -> Result<()> {
    write_atomic(path, |w| {
        let mut header = vec!["step".to_string()];
        for (name, _) in columns {
            for field in ["mean", "lower", "upper"] {
                header.push(if name.is_empty() { field.to_string() } else { format!("{name}_{field}") });
            }
        }
        writeln!(w, "{}", header.join(","))?;
        let rows = columns.first().map_or(0, |c| c.1.len());
        for k in 0..rows {
            let mut line = k.to_string();
            for (_, bands) in columns {
                let b = &bands[k];
                for v in [b.mean, b.lower, b.upper] {
                    line.push(',');
                    line.push_str(&fmt_float(v));
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    })
}

fn bands(cfg: &ExperimentConfig, result: &EnsembleResult) -> Vec<Band> {
    state_bands(result, cfg.outputs.band_state - 1, cfg.outputs.band_quantile)
}

pub fn cmd_simulate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SimulationSummary> {
    let sim = simulate(cfg)?;
    let dir = out_dir(cfg, out);
    if cfg.outputs.wants(Format::Csv) {
        write_atomic(&artifact(&dir, "trajectories.csv"), |w| {
            write_csv(&sim.result, &sim.experiment.state_set, &sim.experiment.input_set, w)
        })?;
        write_bands(&artifact(&dir, "bands.csv"), &[("", &bands(cfg, &sim.result))])?;
    }
    if cfg.outputs.wants(Format::Json) {
        write_json(&artifact(&dir, "summary.json"), "simulate", &sim.summary)?;
    }
    Ok(sim.summary)
}

fn rate_line(f: &mut fmt::Formatter<'_>, name: &str, r: &SatisfactionRate) -> fmt::Result {
    writeln!(
        f,
        "{name}: {:.4} [{:.4}, {:.4}] over {} samples (no-violation trials {:.4})",
        r.rate, r.wilson_low, r.wilson_high, r.total, r.per_trial_any
    )
}

impl fmt::Display for Rates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} steps {}..={}", self.variant.as_str(), self.window[0], self.window[1])?;
        rate_line(f, "state joint", &self.state_joint)?;
        for (i, r) in self.state_faces.iter().enumerate() {
            rate_line(f, &format!("state face {i}"), r)?;
        }
        rate_line(f, "input joint", &self.input_joint)?;
        if let Some(p) = &self.post_burst {
            rate_line(f, &format!("post-burst (lag {})", p.lag), &p.rate)?;
        }
        writeln!(f, "mode 1 fraction: {:.4}", self.mode1_fraction)
    }
}

impl fmt::Display for SimulationSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.rates)?;
        if let Some(c) = &self.cost_bound {
            writeln!(
                f,
                "cost bound: average {:.4} (se {:.4}) vs C*E|w|_P {:.4} with C = {:.4}; holds {}, decrease holds {}",
                c.lhs_running_average, c.lhs_std_error, c.rhs_bound, c.lipschitz_c, c.bound_holds, c.decrease_holds
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub config_a: ExperimentConfig,
    pub config_b: ExperimentConfig,
    pub a: Rates,
    pub b: Rates,
    /// `a − b` for the joint state rate.
    pub state_joint_difference: f64,
    pub post_burst_difference: Option<f64>,
}

/// Runs both configs on the same disturbance stream: `b` inherits `a`'s seed,
/// trial count and step count.
pub fn cmd_compare(a: &ExperimentConfig, b: &ExperimentConfig, out: Option<&Path>) -> Result<Comparison> {
    if a.system != b.system {
        return Err(ConfigMismatch("system sections differ".into()).into());
    }
    if a.disturbance != b.disturbance {
        return Err(ConfigMismatch("disturbance sections differ".into()).into());
    }
    let mut b = b.clone();
    b.simulation.seed = a.simulation.seed;
    b.simulation.trials = a.simulation.trials;
    b.simulation.steps = a.simulation.steps;
    let sa = simulate(a).context("config A")?;
    let sb = simulate(&b).context("config B")?;
    let dir = out_dir(a, out);
    if a.outputs.wants(Format::Csv) {
        for (name, s) in [("trajectories_a.csv", &sa), ("trajectories_b.csv", &sb)] {
            write_atomic(&artifact(&dir, name), |w| write_csv(&s.result, &s.experiment.state_set, &s.experiment.input_set, w))?;
        }
        write_bands(&artifact(&dir, "bands.csv"), &[("a", &bands(a, &sa.result)), ("b", &bands(a, &sb.result))])?;
    }
    let post_burst_difference = match (&sa.summary.rates.post_burst, &sb.summary.rates.post_burst) {
        (Some(x), Some(y)) => Some(x.rate.rate - y.rate.rate),
        _ => None,
    };
    let comparison = Comparison {
        config_a: a.clone(),
        config_b: b,
        state_joint_difference: sa.summary.rates.state_joint.rate - sb.summary.rates.state_joint.rate,
        post_burst_difference,
        a: sa.summary.rates,
        b: sb.summary.rates,
    };
    if a.outputs.wants(Format::Json) {
        write_json(&artifact(&dir, "compare.json"), "compare", &comparison)?;
    }
    Ok(comparison)
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A: {}B: {}", self.a, self.b)?;
        writeln!(f, "joint difference (A - B): {:+.4}", self.state_joint_difference)?;
        if let Some(d) = self.post_burst_difference {
            writeln!(f, "post-burst difference (A - B): {d:+.4}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- validate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub config: ExperimentConfig,
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
}

/// Steps covered by the nestedness check.
const NESTED_STEPS: usize = 10;

/// The PRS for step `NESTED_STEPS` in the configured shape, on the first state face.
fn nested_prs(exp: &Experiment) -> Result<Prs> {
    let c = &exp.config.constraints;
    Ok(match c.prs.ellipsoid_method() {
        Some(method) => Prs::Ellipsoid(n_step_prs(&exp.a_k, &exp.w, Horizon::Steps(NESTED_STEPS), c.state_level, method)?),
        None => {
            let var = propagate_variance(&exp.a_k, &exp.w, NESTED_STEPS).pop().expect("non-empty");
            let dir = if exp.state_set.num_faces() > 0 { exp.state_set.face(0) } else { Vector::from_element(exp.w.dim(), 1.0) };
            Prs::Interval(marginal_interval_prs(&dir, &var, c.state_level)?)
        }
    })
}

pub fn cmd_validate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ValidationReport> {
    let sim = simulate(cfg)?;
    let exp = &sim.experiment;
    let seed = cfg.simulation.seed;
    let samples = cfg.simulation.validation_samples;
    let base = exp.schedule.base.clone();
    let mut checks = vec![
        nestedness_check(&exp.a_k, &base, &nested_prs(exp)?, NESTED_STEPS, samples, &RngStream::new(seed, 0x7A11_0001)),
        shift_dominance_check(exp.system.state_dim(), 20, samples, &RngStream::new(seed, 0x7A11_0002))?,
    ];
    checks.extend(sim.summary.rates.closed_loop_prs.iter().cloned());
    if let Controller::Prs(c) = &exp.controller {
        checks.extend(predictive_check(
            &sim.result,
            c.condensed(),
            &exp.a_k,
            &base,
            &exp.state_set,
            cfg.constraints.state_level,
            5,
            2000,
            &RngStream::new(seed, 0x7A11_0003),
        )?);
    }
    let passed = checks.iter().all(|c| c.passed);
    let report = ValidationReport { config: cfg.clone(), checks, passed };
    if cfg.outputs.wants(Format::Json) {
        write_json(&artifact(&out_dir(cfg, out), "validation.json"), "validate", &report)?;
    }
    Ok(report)
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {}: observed {:.4}, threshold {:.4} (se {:.4})",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.observed,
                c.threshold,
                c.std_error
            )?;
        }
        Ok(())
    }
}
