mod common;

use common::*;
use parorb::manifold::OrbitalSet;
use parorb::optimizer::{
    initialize_orbitals, solve, solve_from, solve_observed, Algorithm, BbVariant, ConvergenceMode, CurvatureTrace,
    IterationRecord, OptimizerError, OptimizerParams, Period,
};
use parorb::oracle::lowest_eigenvalue_sum;
use proptest::prelude::*;

#[test]
fn rows_are_ordered_and_start_at_zero() {
    let report = solve(&linear_problem(200), 3, &mod_params(3)).unwrap();
    for (i, r) in report.records.iter().enumerate() {
        assert_eq!((r.level, r.iter), (0, i));
    }
    let first = &report.records[0];
    assert_eq!((first.tau, first.backtracks, first.did_orth), (0.0, 0, false));
    assert!(first.energy.is_some());
    assert_eq!(report.iterations, report.records.len() - 1);
}

#[test]
fn row_timings_partition_the_clock() {
    let report = solve(&two_well_problem(200), 3, &mod_params(2)).unwrap();
    let wall: f64 = report.records.iter().map(|r| r.wall_ms).sum();
    let par: f64 = report.records.iter().map(|r| r.par_ms).sum();
    assert!((wall - report.wall_ms).abs() <= 0.01 * report.wall_ms);
    assert!((par - report.par_ms).abs() <= 0.01 * report.wall_ms);
    assert!(report.records.iter().all(|r| r.par_ms <= r.wall_ms + 1e-9));
    let f = report.parallel_fraction();
    assert!((0.0..=1.0).contains(&f));
}

#[test]
fn rotation_falls_on_the_orthonormalization_after_each_multiple() {
    let report = solve(&two_well_problem(400), 4, &mod_params(1)).unwrap();
    let rotated: Vec<usize> = report.records.iter().filter(|r| r.did_diag).map(|r| r.iter).collect();
    assert!(!rotated.is_empty());
    for (k, &iter) in rotated.iter().enumerate() {
        let due = 50 * (k + 1);
        assert!(iter == due || iter == due + 1, "rotation {k} at row {iter}");
    }
    assert!(report.records.iter().filter(|r| r.did_diag).all(|r| r.did_orth));
}

#[test]
fn unchecked_steps_never_exceed_the_last_accepted_step() {
    let report = solve(&two_well_problem(400), 4, &mod_params(2)).unwrap();
    let mut accepted = None;
    for r in &report.records[1..] {
        if r.did_orth {
            accepted = Some(r.tau);
        } else if let Some(t) = accepted {
            assert!(r.tau <= t, "row {}: {} > {t}", r.iter, r.tau);
        }
    }
    assert!(report.records.iter().any(|r| !r.did_orth && r.iter > 0));
}

#[test]
fn energy_only_on_orthonormal_rows() {
    let mut seen = Vec::new();
    let problem = two_well_problem(200);
    let u0 = initialize_orbitals(problem.grid(), problem.atoms(), 3, 4).unwrap();
    let params = OptimizerParams { n_org: 3, ..mod_params(4) };
    solve_observed(u0, &problem, &params, &mut |r: &IterationRecord, w: &OrbitalSet| {
        seen.push((r.iter, r.energy.is_some(), w.orthonormality_error()));
    })
    .unwrap();
    for (iter, has_energy, err) in seen {
        assert_eq!(has_energy, iter == 0 || (iter - 1) % 3 == 0, "row {iter}");
        if has_energy {
            assert!(err <= 1e-10);
        }
    }
}

#[test]
fn truncated_run_reports_not_converged() {
    let params = OptimizerParams { max_inner: 1, ..mod_params(1) };
    let report = solve(&linear_problem(200), 3, &params).unwrap();
    assert!(!report.converged);
    assert_eq!(report.records.len(), 2);
    assert!(report.orbitals.orthonormality_error() <= 1e-10);
}

#[test]
fn forced_long_steps_stagnate_with_partial_log() {
    let params = OptimizerParams { max_backtracks: 0, tau_clamp: [50.0, 1e3], ..params(Algorithm::OptmQr, 1) };
    let failure = solve(&two_well_problem(200), 3, &params).unwrap_err();
    assert!(matches!(failure.error, OptimizerError::Stagnation { .. }), "{}", failure.error);
    assert!(!failure.records.is_empty());
}

#[test]
fn too_many_orbitals_is_an_error() {
    let failure = solve(&linear_problem(5), 6, &mod_params(1)).unwrap_err();
    assert!(matches!(failure.error, OptimizerError::TooManyOrbitals { orbitals: 6, points: 5 }));
}

#[test]
fn invalid_params_are_rejected_before_solving() {
    let params = OptimizerParams { delta: 2.0, ..mod_params(1) };
    let failure = solve(&linear_problem(50), 2, &params).unwrap_err();
    assert!(matches!(failure.error, OptimizerError::Params(ref e) if e.key == "delta"));
}

#[test]
fn same_seed_same_log_other_seed_differs() {
    let problem = two_well_problem(200);
    let a = solve(&problem, 3, &mod_params(5)).unwrap();
    let b = solve(&problem, 3, &mod_params(5)).unwrap();
    let c = solve(&problem, 3, &mod_params(6)).unwrap();
    assert!(a.records.len() == b.records.len() && a.records.iter().zip(&b.records).all(|(x, y)| x.same_numerics(y)));
    assert!(!a.records[0].same_numerics(&c.records[0]));
    assert!((a.energy.total - c.energy.total).abs() < 1e-6);
}

#[test]
fn thread_count_does_not_change_the_log() {
    let problem = box_3d_problem(12, 4.0);
    let params = OptimizerParams { max_inner: 40, ..mod_params(1) };
    let logs: Vec<Vec<IterationRecord>> =
        [1, 3].iter().map(|&t| with_threads(t, || solve(&problem, 4, &params).unwrap().records)).collect();
    assert_eq!(logs[0].len(), logs[1].len());
    assert!(logs[0].iter().zip(&logs[1]).all(|(x, y)| x.same_numerics(y)));
}

#[test]
fn every_variant_reaches_the_linear_oracle() {
    let problem = linear_problem(300);
    let u0 = initialize_orbitals(problem.grid(), problem.atoms(), 3, 8).unwrap();
    let oracle = lowest_eigenvalue_sum(&u0, &problem, 3).unwrap();
    for bb in [BbVariant::Bb1, BbVariant::Bb2, BbVariant::Alternate] {
        for trace in [CurvatureTrace::Entrywise, CurvatureTrace::AbsOfTrace] {
            for (algorithm, n_org) in [(Algorithm::OptPar, 1), (Algorithm::OptParMod, 2), (Algorithm::OptParMod, 3)] {
                let params = OptimizerParams {
                    bb_variant: bb,
                    curvature_trace: trace,
                    n_org,
                    n_diag: Period::every(50),
                    ..params(algorithm, 8)
                };
                let r = solve_from(u0.clone(), &problem, &params).unwrap();
                assert!(r.converged, "{algorithm} n_org={n_org} {bb:?} {trace:?}");
                assert!((r.energy.total - oracle).abs() <= 1e-8, "{algorithm} n_org={n_org} {bb:?} {trace:?}");
            }
        }
    }
}

#[test]
fn rotation_can_be_switched_off() {
    let params = OptimizerParams { n_diag: Period::NEVER, ..params(Algorithm::OptPar, 1) };
    let report = solve(&linear_problem(200), 3, &params).unwrap();
    assert!(report.converged);
    assert!(report.records.iter().all(|r| !r.did_diag));
}

#[test]
fn other_convergence_modes_stop_near_the_oracle() {
    let problem = linear_problem(300);
    for mode in [ConvergenceMode::MeanAbs, ConvergenceMode::EnergyChange] {
        let params = OptimizerParams { convergence_mode: mode, ..mod_params(3) };
        let r = solve(&problem, 3, &params).unwrap();
        let oracle = lowest_eigenvalue_sum(&r.orbitals, &problem, 3).unwrap();
        assert!(r.converged, "{mode}");
        assert!((r.energy.total - oracle).abs() <= 1e-6, "{mode}: {}", r.energy.total - oracle);
    }
}

#[test]
fn nonmonotone_ledger_holds_on_every_accepted_step() {
    for algorithm in ALGORITHMS {
        let report = solve(&two_well_problem(200), 3, &two_well_params(algorithm, 2)).unwrap();
        for r in report.records.iter().filter(|r| r.c_after.is_some()) {
            let e = r.energy.unwrap();
            assert!(e <= r.acceptance_bound.unwrap());
            assert!(e <= r.c_after.unwrap());
            assert!(r.acceptance_bound.unwrap() <= r.c_before.unwrap());
            assert!((r.weight_sum.unwrap() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn refinement_levels_are_reported() {
    let params = OptimizerParams { outer_levels: 3, ..mod_params(1) };
    let report = solve(&linear_problem(49), 2, &params).unwrap();
    let points: Vec<usize> = report.levels.iter().map(|l| l.points_per_axis[0]).collect();
    assert_eq!(points, vec![49, 99, 199]);
    assert_eq!(report.iterations, report.levels.iter().map(|l| l.iterations).sum::<usize>());
    let levels: Vec<usize> = report.records.iter().map(|r| r.level).collect();
    assert!(levels.windows(2).all(|w| w[0] <= w[1]));
    let oracle = lowest_eigenvalue_sum(&report.orbitals, &report.problem, 2).unwrap();
    assert!((report.energy.total - oracle).abs() <= 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn any_seed_converges_to_the_same_linear_energy(seed in 0u64..1000, n_org in 1usize..4) {
        let problem = linear_problem(150);
        let params = OptimizerParams { n_org, n_diag: Period::every(50), ..params(Algorithm::OptParMod, seed) };
        let r = solve(&problem, 3, &params).unwrap();
        let oracle = lowest_eigenvalue_sum(&r.orbitals, &problem, 3).unwrap();
        prop_assert!(r.converged);
        prop_assert!((r.energy.total - oracle).abs() <= 1e-8);
        prop_assert!(r.orbitals.orthonormality_error() <= 1e-10);
    }
}
