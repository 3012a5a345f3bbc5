use dmpc::bench::{
    least_squares_multipliers, oracle_primal, qcqp_reference, qcqp_toy, random_convex_instance, run_convex_instance,
    run_qcqp_instance, ConvexSuite, InnerSolve, QcqpSuite,
};
use dmpc::dsqp::kkt::{complementarity_margin, dynamic_stop, kkt_residual, licq, min_lagrangian_eigenvalue};
use dmpc::dsqp::{DsqpConfig, DsqpSolver, EtaSchedule, HessianKind, Stopping};
use dmpc::linalg::{flip_regularize, min_eigenvalue};
use dmpc::messaging::InProcHub;
use dmpc::Execution;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn single_outer_step_matches_plain_admm() {
    let suite = ConvexSuite {
        l_max: 60,
        ..ConvexSuite::default()
    };
    for seed in 0..10 {
        let rec = run_convex_instance(&random_convex_instance(seed), &suite).unwrap();
        assert!(rec.equivalence_delta <= 1e-10, "seed {seed}: {}", rec.equivalence_delta);
    }
}

/// At a KKT point the coupled QP has the zero step as its solution, and the
/// inner ADMM started from the matching duals never leaves it.
#[test]
fn zero_step_keeps_iterate() {
    for seed in 0..5 {
        let inst = random_convex_instance(seed);
        let nlp = inst.nlp().unwrap();
        let z_star = oracle_primal(&inst, &nlp).unwrap();
        let p = least_squares_multipliers(&nlp, &z_star, 1e-9);
        let cfg = DsqpConfig {
            q_max: 1,
            l_max: 10,
            hessian: HessianKind::GaussNewton,
            ..DsqpConfig::default()
        };
        let mut s = DsqpSolver::new(&nlp, InProcHub::new().endpoints(nlp.len()), cfg, Execution::Sequential).unwrap();
        s.set_iterates(p.to_iterates(&nlp));
        let out = s.solve(&nlp, 0).unwrap();
        for (z, zs) in out.z.iter().zip(&z_star) {
            assert!((z - zs).amax() <= 1e-8, "seed {seed}: {}", (z - zs).amax());
        }
    }
}

#[test]
fn flip_examples() {
    let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -3.0, 1e-6, 0.0]));
    let r = flip_regularize(&m, 1e-4).unwrap();
    let want = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 1e-4, 1e-4]));
    assert!((r - want).amax() < 1e-14);
    let pd = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    assert!((flip_regularize(&pd, 1e-4).unwrap() - &pd).amax() < 1e-14);
    assert!(flip_regularize(&DMatrix::from_element(1, 1, f64::NAN), 1e-4).is_none());
}

proptest! {
    #[test]
    fn flipped_hessian_is_positive_definite(vals in prop::collection::vec(-5.0f64..5.0, 16)) {
        let a = DMatrix::from_row_slice(4, 4, &vals);
        let sym = (&a + a.transpose()) * 0.5;
        let r = flip_regularize(&sym, 1e-4).unwrap();
        prop_assert!(min_eigenvalue(&r) >= 1e-4 - 1e-10);
        prop_assert!((&r - r.transpose()).amax() == 0.0);
    }

    #[test]
    fn constraint_jacobian_matches_finite_differences(
        seed in 0u64..1000,
        scale in 0.01f64..0.5,
    ) {
        let inst = qcqp_toy();
        let nlp = inst.nlp().unwrap();
        let sub = &nlp.subsystems[1];
        let n = sub.dim();
        let z = DVector::from_fn(n, |k, _| ((k as u64 * 7919 + seed) as f64 * 0.618).sin() * scale);
        let ev = sub.eval_constraints(&z);
        let h = 1e-6;
        for k in 0..n {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += h;
            zm[k] -= h;
            let fd = (sub.eval_constraints(&zp).h_val - sub.eval_constraints(&zm).h_val) / (2.0 * h);
            let col = ev.h_jac.column(k);
            for r in 0..fd.len() {
                let tol = 1e-5 * col[r].abs().max(1.0);
                prop_assert!((fd[r] - col[r]).abs() <= tol, "row {r} col {k}: {} vs {}", fd[r], col[r]);
            }
        }
    }
}

#[test]
fn dynamic_stop_examples() {
    let inst = qcqp_toy();
    let nlp = inst.nlp().unwrap();
    let reference = qcqp_reference(&inst, &nlp).unwrap();
    let mut p = reference.clone();
    for z in &mut p.z {
        z.iter_mut().enumerate().for_each(|(k, v)| *v += 1e-3 * (k as f64).cos());
    }
    let (f, jac) = kkt_residual(&nlp, &p);
    assert!(f.amax() > 0.0);
    let zero = DVector::zeros(jac.ncols());
    assert!(!dynamic_stop(&f, &jac, &zero, 0.5));
    // Minimum-norm Newton step: the linearization vanishes.
    let d = jac.clone().svd(true, true).solve(&(-&f), 1e-12).unwrap();
    assert!(dynamic_stop(&f, &jac, &d, 1e-6));
}

#[test]
fn reference_point_is_regular_kkt_point() {
    let inst = qcqp_toy();
    let nlp = inst.nlp().unwrap();
    let p = qcqp_reference(&inst, &nlp).unwrap();
    let (f, _) = kkt_residual(&nlp, &p);
    assert!(f.amax() <= 1e-6, "{}", f.amax());
    assert!(licq(&nlp, &p.z, 1e-8));
    assert!(complementarity_margin(&nlp, &p.z, &p.mu) > 0.0);
    assert!(min_lagrangian_eigenvalue(&nlp, &p.mu) > 0.0);
    // The distance constraint is active with a positive multiplier.
    assert!(p.mu.iter().flat_map(|m| m.iter()).any(|&m| m > 1e-3));
}

#[test]
fn exact_inner_solves_converge_superlinearly() {
    let inst = qcqp_toy();
    let nlp = inst.nlp().unwrap();
    let reference = qcqp_reference(&inst, &nlp).unwrap();
    let suite = QcqpSuite {
        inner: InnerSolve::Exact,
        ..QcqpSuite::default()
    };
    let passing = (0..10)
        .filter(|&seed| run_qcqp_instance(&nlp, &reference, seed, &suite).unwrap().vanishing_ratios())
        .count();
    assert!(passing >= 9, "{passing}/10");
}

#[test]
fn dynamic_inner_solves_converge_locally() {
    let inst = qcqp_toy();
    let nlp = inst.nlp().unwrap();
    let reference = qcqp_reference(&inst, &nlp).unwrap();
    let suite = QcqpSuite {
        outer: 8,
        inner: InnerSolve::Admm {
            rho: 1.0,
            l_max: 2000,
            stopping: Stopping::Dynamic(EtaSchedule::Superlinear),
        },
        ..QcqpSuite::default()
    };
    for seed in 0..6 {
        let rec = run_qcqp_instance(&nlp, &reference, seed, &suite).unwrap();
        // Loose early steps may overshoot; once the forcing term tightens the
        // contraction factors shrink step over step.
        assert!(rec.errors[6] <= 1e-8, "seed {seed}: {:?}", rec.errors);
        assert!(rec.ratios[3..6].windows(2).all(|w| w[1] < w[0]), "seed {seed}: {:?}", rec.ratios);
        assert!(rec.inner_iterations[..6].windows(2).all(|w| w[1] >= w[0]), "seed {seed}: {:?}", rec.inner_iterations);
    }
}
