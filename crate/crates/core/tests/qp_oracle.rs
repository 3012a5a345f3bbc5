use dmpc::qp::{self, DenseQp, QpSolver, QpStatus};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_qp(rng: &mut ChaCha8Rng, n: usize, m_eq: usize, m_in: usize) -> DenseQp {
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.5;
    let g = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let a_eq = DMatrix::from_fn(m_eq, n, |_, _| rng.random_range(-1.0..1.0));
    let a_in = DMatrix::from_fn(m_in, n, |_, _| rng.random_range(-1.0..1.0));
    let z0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let b_eq = &a_eq * &z0;
    let b_in = &a_in * &z0 + DVector::from_fn(m_in, |_, _| rng.random_range(0.0..0.5));
    DenseQp {
        h,
        g,
        a_eq,
        b_eq,
        a_in,
        b_in,
    }
}

/// Enumerate every candidate active set, solve the equality-constrained KKT
/// system for each, and keep the primal and dual feasible candidate.
fn brute_force(qp: &DenseQp) -> Option<(DVector<f64>, Vec<usize>)> {
    let n = qp.n();
    let m_eq = qp.a_eq.nrows();
    let m_in = qp.a_in.nrows();
    let mut best: Option<(DVector<f64>, Vec<usize>, f64)> = None;
    for mask in 0u32..(1 << m_in) {
        let act: Vec<usize> = (0..m_in).filter(|k| mask & (1 << k) != 0).collect();
        let m = m_eq + act.len();
        let mut kkt = DMatrix::zeros(n + m, n + m);
        let mut rhs = DVector::zeros(n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
        rhs.rows_mut(0, n).copy_from(&(-&qp.g));
        for r in 0..m {
            let (row, b) = if r < m_eq {
                (qp.a_eq.row(r).into_owned(), qp.b_eq[r])
            } else {
                (qp.a_in.row(act[r - m_eq]).into_owned(), qp.b_in[act[r - m_eq]])
            };
            kkt.view_mut((n + r, 0), (1, n)).copy_from(&row);
            kkt.view_mut((0, n + r), (n, 1)).copy_from(&row.transpose());
            rhs[n + r] = b;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let z = sol.rows(0, n).into_owned();
        let feasible = (&qp.a_in * &z - &qp.b_in).iter().all(|&v| v <= 1e-9);
        let dual_ok = (0..act.len()).all(|k| sol[n + m_eq + k] >= -1e-9);
        if feasible && dual_ok {
            let obj = qp.objective(&z);
            if best.as_ref().is_none_or(|b| obj < b.2) {
                best = Some((z, act, obj));
            }
        }
    }
    best.map(|(z, a, _)| (z, a))
}

#[test]
fn matches_active_set_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut with_active = 0;
    for _ in 0..200 {
        let qp = random_qp(&mut rng, 10, 3, 5);
        let sol = qp::solve(&qp, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let (z_ref, _) = brute_force(&qp).expect("instance is feasible by construction");
        assert!((&sol.z - &z_ref).amax() < 1e-8, "diff {}", (&sol.z - &z_ref).amax());
        let (stat, infeas, comp) = qp::kkt_residuals(&qp, &sol);
        assert!(stat < 1e-8 && infeas < 1e-8 && comp < 1e-8);
        assert!(sol.mu_in.iter().all(|&m| m >= -1e-10));
        with_active += usize::from(!sol.active_set.is_empty());
    }
    assert!(with_active > 50, "instances should exercise inequalities");
}

#[test]
fn equality_shift_matches_cold_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let qp = random_qp(&mut rng, 8, 3, 0);
    let solver = QpSolver::new(&qp.h, &qp.a_eq, &qp.a_in).unwrap();
    let first = solver.solve(&qp.g, &qp.b_eq, &qp.b_in, None).unwrap();
    let shifted = &qp.b_eq + DVector::from_element(3, 0.3);
    let hot = qp::hotstart_update(&solver, &qp.g, &shifted, &qp.b_in, &first).unwrap();
    let mut moved = qp.clone();
    moved.b_eq = shifted;
    let cold = qp::solve(&moved, None).unwrap();
    assert!((&hot.z - &cold.z).amax() <= 1e-10);
}

#[test]
fn infeasible_inequalities_flagged() {
    let mut qp = DenseQp::unconstrained(DMatrix::identity(2, 2), DVector::zeros(2));
    qp.a_in = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]);
    qp.b_in = DVector::from_row_slice(&[0.0, 0.0, -1.0]);
    assert_eq!(qp::solve(&qp, None).unwrap().status, QpStatus::Infeasible);
}

#[test]
fn deterministic_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let qp = random_qp(&mut rng, 10, 3, 5);
    let a = qp::solve(&qp, None).unwrap();
    let b = qp::solve(&qp, None).unwrap();
    assert_eq!(a.z, b.z);
    assert_eq!(a.mu_in, b.mu_in);
    assert_eq!(a.active_set, b.active_set);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hot_and_cold_agree(seed in any::<u64>(), scale in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qp = random_qp(&mut rng, 10, 3, 5);
        let solver = QpSolver::new(&qp.h, &qp.a_eq, &qp.a_in).unwrap();
        let first = solver.solve(&qp.g, &qp.b_eq, &qp.b_in, None).unwrap();
        let g2 = &qp.g + DVector::from_fn(10, |i, _| scale * ((i as f64) - 4.5));
        let hot = solver.solve(&g2, &qp.b_eq, &qp.b_in, Some(&first)).unwrap();
        let cold = solver.solve(&g2, &qp.b_eq, &qp.b_in, None).unwrap();
        prop_assert_eq!(hot.status, QpStatus::Optimal);
        prop_assert!((&hot.z - &cold.z).amax() <= 1e-8);
        prop_assert!(hot.mu_in.iter().all(|&m| m >= -1e-10));
    }
}
