//! Property tests through the public API.

use proptest::prelude::*;
use smpc_core::controller::{BackupMode, Controller, Mode, PrsController};
use smpc_core::numerics::{chi2_cdf, chi2_quantile, lqr_gain, normal_cdf, normal_quantile, solve_discrete_lyapunov};
use smpc_core::optimizer::{kkt_residuals, solve_qp, terminal_cost_from_lqr, MpcProblem, QpForm, QpOptions, QpOutcome};
use smpc_core::reachability::{gaussian_prs, marginal_tightening, pontryagin_tighten, IntervalPrs, Polytope, Prs};
use smpc_core::simulator::{dynamics_residual, run_ensemble, SimConfig};
use smpc_core::uncertainty::{propagate_variance, DisturbanceSchedule, GaussianDisturbance, RngStream};
use smpc_core::{LinearSystem, Matrix, Symmetric, Vector};

fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

fn spd(n: usize) -> impl Strategy<Value = Symmetric> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |g| {
        let g = Matrix::from_vec(n, n, g);
        Symmetric::symmetrize(&g * g.transpose() + Matrix::identity(n, n) * 0.05)
    })
}

fn unit(n: usize) -> impl Strategy<Value = Vector> {
    prop::collection::vec(-1.0f64..1.0, n)
        .prop_filter("nonzero", |x| x.iter().map(|a| a * a).sum::<f64>() > 1e-3)
        .prop_map(|x| {
            let x = Vector::from_vec(x);
            x.normalize()
        })
}

struct Reference {
    system: LinearSystem,
    gain: Matrix,
    w: Symmetric,
    problem: MpcProblem,
}

fn reference() -> Reference {
    let system = LinearSystem::new(
        Matrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
        Matrix::from_row_slice(2, 1, &[0.5, 1.0]),
    )
    .unwrap();
    let q = Symmetric::from_diagonal(&[0.1, 1.0]);
    let r = Symmetric::from_diagonal(&[0.1]);
    let w = Symmetric::from_diagonal(&[0.01, 1.0]);
    let gain = lqr_gain(&system.a, &system.b, &q, &r).unwrap().gain;
    let sigma = solve_discrete_lyapunov(&system.closed_loop(&gain), &w).unwrap();
    let x_set = Polytope::slab(&v(&[0.0, 1.0]), 1.2);
    let u_set = Polytope::slab(&v(&[1.0]), 6.0);
    let t = marginal_tightening(&x_set, &u_set, &gain, &sigma, 0.6, 0.9).unwrap();
    let qf = terminal_cost_from_lqr(&system, &q, &r).unwrap();
    let problem = MpcProblem::new(system.clone(), 15, q, r, qf, t.state_set, t.input_set, Polytope::origin(2)).unwrap();
    Reference { system, gain, w, problem }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quantiles_invert_their_cdfs(p in 0.01f64..0.99, dof in 1usize..=6) {
        prop_assert!((normal_cdf(normal_quantile(p).unwrap()) - p).abs() <= 1e-8);
        prop_assert!((chi2_cdf(chi2_quantile(p, dof).unwrap(), dof) - p).abs() <= 1e-8);
        let z = normal_quantile((1.0 + p) / 2.0).unwrap();
        prop_assert!((chi2_quantile(p, 1).unwrap() - z * z).abs() <= 1e-8);
    }

    #[test]
    fn prs_membership_is_symmetric(
        (sigma, dir, e) in (1usize..=3).prop_flat_map(|n| (spd(n), unit(n), prop::collection::vec(-3.0f64..3.0, n))),
        level in 0.1f64..0.99,
    ) {
        let e = Vector::from_vec(e);
        let n = sigma.dim();
        let sets = [
            Prs::Ellipsoid(gaussian_prs(&sigma, level, n).unwrap()),
            Prs::Interval(IntervalPrs { direction: dir, half_width: level, level }),
        ];
        for prs in &sets {
            prop_assert_eq!(prs.contains(&e), prs.contains(&(-&e)));
        }
    }

    #[test]
    fn tightened_boundary_plus_prs_error_stays_in_the_set(
        sigma in spd(2),
        level in 0.3f64..0.9,
        face in 0usize..4,
        t in 0.0f64..1.0,
        xi in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        // Box |x_i| <= 3.
        let x_set = Polytope::new(
            Matrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
            v(&[3.0, 3.0, 3.0, 3.0]),
        ).unwrap();
        let prs = gaussian_prs(&sigma, level, 2).unwrap();
        let z_set = pontryagin_tighten(&x_set, &Prs::Ellipsoid(prs.clone()));
        prop_assume!(z_set.is_ok());
        let z_set = z_set.unwrap();
        // A point on face `face` of the tightened box.
        let h = &z_set.offsets;
        let along = -h[if face < 2 { 3 } else { 1 }] + t * (h[if face < 2 { 2 } else { 0 }] + h[if face < 2 { 3 } else { 1 }]);
        let on = if face % 2 == 0 { h[face] } else { -h[face] };
        let z = if face < 2 { v(&[on, along]) } else { v(&[along, on]) };
        prop_assert!(z_set.contains(&z, 1e-9));
        // Scale a random direction onto the ellipsoid boundary (the worst case).
        let d = Vector::from_vec(xi);
        let q = d.dot(&(sigma.as_matrix().clone().try_inverse().unwrap() * &d));
        prop_assume!(q > 1e-9);
        let e = &d * (prs.radius / q).sqrt();
        prop_assert!(x_set.contains(&(&z + &e), 1e-9));
    }

    #[test]
    fn optimal_qp_solutions_satisfy_kkt(
        (n, m) in (2usize..8, 1usize..10),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = RngStream::new(seed, 0).rng();
        let g = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let hessian = &g * g.transpose() + Matrix::identity(n, n) * 0.1;
        let linear = Vector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let constraints = Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let bounds = Vector::from_fn(m, |_, _| rng.random_range(0.0..1.0));
        let qp = QpForm { hessian, linear, constant: 0.0, constraints, bounds };
        match solve_qp(&qp, &QpOptions::default()).unwrap() {
            QpOutcome::Optimal(opt) => prop_assert!(kkt_residuals(&qp, &opt.x, &opt.multipliers).max() <= 1e-6),
            QpOutcome::Infeasible { .. } => prop_assert!(false, "origin is feasible"),
        }
    }

    #[test]
    fn variance_propagation_is_monotone(a_scale in 0.1f64..0.99, w in spd(3), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = RngStream::new(seed, 1).rng();
        let raw = Matrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let rho = raw.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max).max(1e-9);
        let a_k = raw * (a_scale / rho);
        let vars = propagate_variance(&a_k, &w, 12);
        for pair in vars.windows(2) {
            let diff = Symmetric::symmetrize(pair[1].as_matrix() - pair[0].as_matrix());
            let min_eig = diff.as_matrix().symmetric_eigenvalues().min();
            prop_assert!(min_eig >= -1e-10 * w.as_matrix().amax().max(1.0));
        }
    }

    #[test]
    fn burst_steps_use_the_burst_model(period in 1usize..12, seed in any::<u64>(), step in 0usize..60) {
        let base = GaussianDisturbance::zero_mean(Symmetric::from_diagonal(&[0.01, 1.0])).unwrap();
        let burst = GaussianDisturbance::zero_mean(Symmetric::from_diagonal(&[10.0, 1.0])).unwrap();
        let schedule = DisturbanceSchedule::new(base.clone(), Some(burst.clone()), period).unwrap();
        let xi = smpc_core::uncertainty::standard_normal(2, &mut RngStream::for_trial_step(seed, 3, step).rng());
        let expected = if step > 0 && step % period == 0 { burst.transform(&xi) } else { base.transform(&xi) };
        prop_assert_eq!(schedule.draw(seed, 3, step), expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn closed_loop_bookkeeping_holds_for_any_seed(seed in any::<u64>()) {
        let f = reference();
        let controller = PrsController::new(&f.problem, f.gain.clone(), QpOptions::default(), BackupMode::Reoptimize).unwrap();
        let cfg = SimConfig {
            system: f.system.clone(),
            schedule: DisturbanceSchedule::stationary(GaussianDisturbance::zero_mean(f.w.clone()).unwrap()),
            controller: Controller::Prs(controller),
            trials: 8,
            steps: 12,
            x0: v(&[3.0, 0.0]),
            seed,
        };
        // Recursive feasibility: no step of any trial errors out.
        let result = run_ensemble(&cfg).unwrap();
        prop_assert_eq!(dynamics_residual(&f.system, &result), 0.0);
        for t in &result.trials {
            for r in &t.records {
                if r.mode == Mode::M1 {
                    prop_assert!(r.error.iter().all(|e| *e == 0.0));
                    prop_assert_eq!(&r.applied_input, &r.nominal_input);
                }
                prop_assert_eq!(&r.applied_input, &(&r.nominal_input + &f.gain * &r.error));
                prop_assert!(f.problem.state_set(0).contains(&r.nominal_state, 1e-6));
                prop_assert!(f.problem.input_set(0).contains(&r.nominal_input, 1e-6));
            }
        }
        prop_assert_eq!(run_ensemble(&cfg).unwrap(), result);
    }
}
