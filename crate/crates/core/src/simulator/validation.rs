//! Statistical property checks for PRS and closed-loop behaviour.
//!
//! Every check compares an observed rate against a threshold of
//! `level − 3·SE`, where SE is the binomial standard error at the nominal
//! level for the sample size used.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EnsembleResult;
use crate::controller::Mode;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Symmetric, Vector};
use crate::optimizer::{CondensedMpc, QpOptions};
use crate::reachability::{Polytope, Prs};
use crate::uncertainty::{standard_normal, GaussianDisturbance, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub observed: f64,
    pub threshold: f64,
    pub std_error: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn at_level(name: impl Into<String>, hits: usize, total: usize, level: f64) -> Self {
        let observed = if total == 0 { 1.0 } else { hits as f64 / total as f64 };
        let std_error = binomial_se(level, total);
        let threshold = level - 3.0 * std_error;
        Self { name: name.into(), observed, threshold, std_error, passed: observed >= threshold }
    }
}

fn binomial_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

/// Per-step hit counts of `e(i) ∈ set` for `i = 0 … steps`, `e(0) = 0`.
fn error_hits(a_k: &Matrix, dist: &GaussianDisturbance, set: &Prs, steps: usize, trials: usize, rng: &RngStream) -> Vec<usize> {
    let test = set.membership();
    let base = rng.derive(0x4e45_5354);
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = base.with_stream(t as u64).rng();
            let mut e = Vector::zeros(dist.dim());
            let mut hits = vec![usize::from(test.contains(&e))];
            for _ in 0..steps {
                e = a_k * e + dist.sample(&mut r);
                hits.push(usize::from(test.contains(&e)));
            }
            hits
        })
        .reduce(|| vec![0; steps + 1], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect())
}

/// A set computed as a PRS for step `n` also contains `e(i)` for every `i < n`
/// with at least its level. Reports the worst step.
pub fn nestedness_check(
    a_k: &Matrix,
    dist: &GaussianDisturbance,
    set: &Prs,
    n: usize,
    trials: usize,
    rng: &RngStream,
) -> CheckOutcome {
    let hits = error_hits(a_k, dist, set, n, trials, rng);
    let worst = hits.iter().enumerate().skip(1).min_by_key(|(_, h)| **h).map_or(trials, |(_, h)| *h);
    CheckOutcome::at_level(format!("nestedness (steps 1..{n})"), worst, trials, set.level())
}

/// A centred Gaussian is at least as likely to fall in a symmetric convex set
/// as the same Gaussian plus an independent shift.
///
/// Runs `cases` random instances in `dim` dimensions (random ellipsoids and
/// symmetric polytopes, random shift distributions) and reports the worst
/// `Pr(w ∈ R) − Pr(w + x ∈ R)` against `−3` pooled SE.
pub fn shift_dominance_check(dim: usize, cases: usize, trials: usize, rng: &RngStream) -> Result<CheckOutcome> {
    if dim == 0 || cases == 0 || trials == 0 {
        return Err(Error::Domain("shift dominance check needs positive dimension, cases and trials".into()));
    }
    let base = rng.derive(0x5348_4946);
    let mut worst_margin = f64::INFINITY;
    let mut worst_se = 0.0;
    for case in 0..cases {
        let mut r = base.with_stream(case as u64).rng();
        let w = GaussianDisturbance::zero_mean(random_covariance(dim, &mut r))?;
        let shift_mean = standard_normal(dim, &mut r) * r.random_range(0.0..1.5);
        let shift = GaussianDisturbance::new(shift_mean, random_covariance(dim, &mut r))?;
        let set = random_symmetric_set(dim, &w, &mut r);

        let sample_base = base.derive(case as u64 + 1);
        let (plain, shifted) = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut s = sample_base.with_stream(t as u64).rng();
                let a = w.sample(&mut s);
                let b = w.sample(&mut s) + shift.sample(&mut s);
                (usize::from(set.contains(&a)), usize::from(set.contains(&b)))
            })
            .reduce(|| (0, 0), |x, y| (x.0 + y.0, x.1 + y.1));
        let p1 = plain as f64 / trials as f64;
        let p2 = shifted as f64 / trials as f64;
        let se = (binomial_se(p1, trials).powi(2) + binomial_se(p2, trials).powi(2)).sqrt();
        let margin = p1 - p2;
        if margin + 3.0 * se < worst_margin + 3.0 * worst_se || case == 0 {
            worst_margin = margin;
            worst_se = se;
        }
    }
    Ok(CheckOutcome {
        name: format!("shift dominance ({cases} cases)"),
        observed: worst_margin,
        threshold: -3.0 * worst_se,
        std_error: worst_se,
        passed: worst_margin >= -3.0 * worst_se,
    })
}

fn random_covariance<R: Rng + ?Sized>(dim: usize, r: &mut R) -> Symmetric {
    let m = Matrix::from_fn(dim, dim, |_, _| r.random_range(-1.0..1.0));
    Symmetric::symmetrize(&m * m.transpose() + Matrix::identity(dim, dim) * 0.05)
}

enum TestSet {
    Ellipsoid { shape: Matrix, radius: f64 },
    Polytope(Polytope),
}

impl TestSet {
    fn contains(&self, x: &Vector) -> bool {
        match self {
            TestSet::Ellipsoid { shape, radius } => (x.transpose() * shape * x)[(0, 0)] <= *radius,
            TestSet::Polytope(p) => p.contains(x, 0.0),
        }
    }
}

/// Scaled so that `w` lands inside with probability roughly one half.
fn random_symmetric_set<R: Rng + ?Sized>(dim: usize, w: &GaussianDisturbance, r: &mut R) -> TestSet {
    if r.random::<bool>() {
        let shape = random_covariance(dim, r).into_inner();
        let spread = (w.covariance().as_matrix() * &shape).trace();
        TestSet::Ellipsoid { shape, radius: spread * r.random_range(0.3..1.5) }
    } else {
        let faces = r.random_range(1..=dim + 2);
        let mut normals = Matrix::zeros(2 * faces, dim);
        let mut offsets = Vector::zeros(2 * faces);
        for i in 0..faces {
            let a = standard_normal(dim, r);
            let h = w.covariance().directional_variance(&a).sqrt() * r.random_range(0.5..2.0);
            normals.set_row(2 * i, &a.transpose());
            normals.set_row(2 * i + 1, &(-a).transpose());
            offsets[2 * i] = h;
            offsets[2 * i + 1] = h;
        }
        TestSet::Polytope(Polytope::new(normals, offsets).expect("finite random faces"))
    }
}

/// Worst per-step closed-loop `Pr(e(k) ∈ prs)` against `level − 3·SE`.
pub fn closed_loop_level_check(result: &EnsembleResult, prs: &Prs) -> CheckOutcome {
    let test = prs.membership();
    let trials = result.trials.len();
    let worst = (0..result.steps)
        .map(|k| result.trials.iter().filter(|t| test.contains(&t.records[k].error)).count())
        .min()
        .unwrap_or(trials);
    CheckOutcome::at_level("closed-loop PRS level", worst, trials, prs.level())
}

/// Predicted satisfaction from mode-1 steps: re-solves the nominal problem at
/// each recorded mode-1 state, forward-samples the error for `lookahead`
/// steps, and counts `zᵢ* + eᵢ ∈ state_set`. One outcome per `i`.
#[allow(clippy::too_many_arguments)]
pub fn predictive_check(
    result: &EnsembleResult,
    mpc: &CondensedMpc,
    a_k: &Matrix,
    dist: &GaussianDisturbance,
    state_set: &Polytope,
    level: f64,
    lookahead: usize,
    max_records: usize,
    rng: &RngStream,
) -> Result<Vec<CheckOutcome>> {
    let lookahead = lookahead.min(mpc.problem().horizon);
    let starts: Vec<(usize, usize)> = result
        .trials
        .iter()
        .flat_map(|t| t.records.iter().filter(|r| r.mode == Mode::M1).map(move |r| (t.trial, r.step)))
        .take(max_records)
        .collect();
    let base = rng.derive(0x5052_4544);
    let options = QpOptions::default();
    let counts: Vec<Result<Vec<usize>>> = starts
        .par_iter()
        .enumerate()
        .map(|(idx, &(trial, step))| {
            let rec = &result.trials[trial].records[step];
            let sol = mpc.solve(&rec.nominal_state, &options)?;
            if !sol.is_optimal() {
                return Err(Error::Domain(format!("mode-1 record (trial {trial}, step {step}) is not feasible on re-solve")));
            }
            let mut r = base.with_stream(idx as u64).rng();
            let mut e = Vector::zeros(dist.dim());
            let mut hits = Vec::with_capacity(lookahead);
            for i in 1..=lookahead {
                e = a_k * e + dist.sample(&mut r);
                hits.push(usize::from(state_set.contains(&(&sol.nominal_states[i] + &e), 0.0)));
            }
            Ok(hits)
        })
        .collect();
    let mut totals = vec![0usize; lookahead];
    for c in counts {
        for (t, h) in totals.iter_mut().zip(c?) {
            *t += h;
        }
    }
    Ok(totals
        .into_iter()
        .enumerate()
        .map(|(i, hits)| CheckOutcome::at_level(format!("predictive satisfaction, {} step(s) ahead", i + 1), hits, starts.len(), level))
        .collect())
}
